//! RMSE / MAE / MAPE over fine maps, with the constraint residual.

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::grid::{frame_residual, FlowGrid};
use crate::{Error, Result};

pub const DEFAULT_MAPE_MASK: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    /// Over ground-truth cells above `mape_mask_threshold`; 0 when none are.
    pub mape: f64,
    /// Largest `|x − Σ ŷ|` over coarse cells and frames.
    pub constraint_residual: f64,
    pub n_frames: usize,
    pub mape_mask_threshold: f64,
}

/// Running sums for the three error metrics.
#[derive(Clone, Copy, Debug, Default)]
pub struct ErrorSums {
    sq: f64,
    abs: f64,
    cells: usize,
    rel: f64,
    rel_cells: usize,
}

impl ErrorSums {
    pub fn add(&mut self, pred: &[f64], truth: &[f64], mask: f64) {
        for (&p, &y) in pred.iter().zip(truth) {
            let e = p - y;
            self.sq += e * e;
            self.abs += e.abs();
            self.cells += 1;
            if y > mask {
                self.rel += e.abs() / y;
                self.rel_cells += 1;
            }
        }
    }

    /// `(rmse, mae, mape)`
    pub fn finish(&self) -> (f64, f64, f64) {
        let n = self.cells.max(1) as f64;
        let mape = if self.rel_cells == 0 { 0.0 } else { self.rel / self.rel_cells as f64 };
        ((self.sq / n).sqrt(), self.abs / n, mape)
    }
}

/// Metrics of `pred` against `truth` for a single buffer pair.
pub fn error_metrics(pred: &[f64], truth: &[f64], mask: f64) -> Result<(f64, f64, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Dimension(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    let mut s = ErrorSums::default();
    s.add(pred, truth, mask);
    Ok(s.finish())
}

/// Scores `predict(t)` on each listed frame of the paired grids.
pub fn score_frames<P>(coarse: &FlowGrid, fine: &FlowGrid, frames: &[usize], mask: f64, mut predict: P) -> Result<MetricsReport>
where
    P: FnMut(usize) -> Result<Vec<f64>>,
{
    if frames.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let s = fine.height() / coarse.height();
    let mut sums = ErrorSums::default();
    let mut residual: f64 = 0.0;
    for &t in frames {
        let pred = predict(t)?;
        let truth = fine.frame(t);
        if pred.len() != truth.len() {
            return Err(Error::Dimension(format!("frame {t}: {} predictions for {} cells", pred.len(), truth.len())));
        }
        sums.add(&pred, truth, mask);
        residual = residual.max(frame_residual(coarse.frame(t), &pred, coarse.height(), coarse.width(), s));
    }
    let (rmse, mae, mape) = sums.finish();
    Ok(MetricsReport {
        rmse,
        mae,
        mape,
        constraint_residual: residual,
        n_frames: frames.len(),
        mape_mask_threshold: mask,
    })
}

pub const CSV_HEADER: [&str; 3] = ["row", "metric", "value"];
pub const METRIC_NAMES: [&str; 6] = ["rmse", "mae", "mape", "constraint_residual", "n_frames", "mape_mask_threshold"];

/// Long-form `row,metric,value` table, six metrics per named report.
pub fn write_metrics_csv<W: Write>(rows: &[(String, MetricsReport)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for (name, r) in rows {
        let values = [
            r.rmse.to_string(),
            r.mae.to_string(),
            r.mape.to_string(),
            r.constraint_residual.to_string(),
            r.n_frames.to_string(),
            r.mape_mask_threshold.to_string(),
        ];
        for (metric, v) in METRIC_NAMES.iter().zip(values) {
            w.write_record([name.as_str(), metric, &v])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(reader: R) -> Result<Vec<(String, MetricsReport)>> {
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::format("csv header", "not a metrics table"));
    }
    let mut out: Vec<(String, [Option<f64>; 6])> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let (name, metric, value) = match (rec.get(0), rec.get(1), rec.get(2)) {
            (Some(n), Some(m), Some(v)) => (n, m, v),
            _ => return Err(Error::format("metrics", "row needs three columns")),
        };
        let k = METRIC_NAMES
            .iter()
            .position(|&m| m == metric)
            .ok_or_else(|| Error::format("metrics", format!("unknown metric {metric:?}")))?;
        let v: f64 = value.parse().map_err(|_| Error::format("metrics", format!("bad value {value:?} for {metric}")))?;
        if out.last().map_or(true, |(n, _)| n != name) {
            out.push((name.to_string(), [None; 6]));
        }
        let slot = &mut out.last_mut().expect("pushed").1[k];
        if slot.replace(v).is_some() {
            return Err(Error::format("metrics", format!("{metric} repeated for {name}")));
        }
    }
    out.into_iter()
        .map(|(name, m)| {
            let get = |k: usize| m[k].ok_or_else(|| Error::format("metrics", format!("{name} lacks {}", METRIC_NAMES[k])));
            let report = MetricsReport {
                rmse: get(0)?,
                mae: get(1)?,
                mape: get(2)?,
                constraint_residual: get(3)?,
                n_frames: get(4)? as usize,
                mape_mask_threshold: get(5)?,
            };
            Ok((name, report))
        })
        .collect()
}

/// Fixed-width table with RMSE, MAE, MAPE and residual columns.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>10}  {:>10}  {:>10}  {:>10}", "", "RMSE", "MAE", "MAPE", "residual");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>10.4}  {:>10.4}  {:>10.4}  {:>10.2e}",
            name, r.rmse, r.mae, r.mape, r.constraint_residual
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let (rmse, mae, mape) = error_metrics(&[2.0, 4.0], &[1.0, 2.0], 0.5).unwrap();
        assert_eq!(mae, 1.5);
        assert!((rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mape, 1.0);
    }

    #[test]
    fn perfect_and_masked() {
        assert_eq!(error_metrics(&[3.0, 0.0], &[3.0, 0.0], 1.0).unwrap(), (0.0, 0.0, 0.0));
        let (_, _, mape) = error_metrics(&[1.0, 0.5], &[0.0, 0.0], 1.0).unwrap();
        assert!(mape.is_finite());
    }

    #[test]
    fn csv_round_trip() {
        let r = MetricsReport {
            rmse: 1.0 / 3.0,
            mae: 0.1,
            mape: 2.5e-7,
            constraint_residual: 0.0,
            n_frames: 12,
            mape_mask_threshold: 1.0,
        };
        let rows = vec![("MEAN".to_string(), r), ("model".to_string(), r)];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), rows);
    }
}
