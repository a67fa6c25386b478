//! Heuristic baselines: uniform mean partition and per-slot historical average.

use std::ops::Range;

use crate::grid::{mean_partition, FlowGrid};
use crate::metrics::{score_frames, MetricsReport};
use crate::{Error, Result};

/// Mean partition of every coarse frame in `eval`.
pub fn baseline_mean(coarse: &FlowGrid, fine: &FlowGrid, eval: Range<usize>, mask: f64) -> Result<MetricsReport> {
    let s = fine.height() / coarse.height();
    let frames: Vec<usize> = eval.collect();
    score_frames(coarse, fine, &frames, mask, |t| Ok(mean_partition(coarse.frame(t), coarse.height(), coarse.width(), s)))
}

/// Per-slot mean fine map over a training range.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalAverage {
    pub slots: Vec<Option<Vec<f64>>>,
    pub global: Vec<f64>,
}

impl HistoricalAverage {
    pub fn fit(fine: &FlowGrid, train: Range<usize>) -> Result<Self> {
        if train.is_empty() || train.end > fine.frames() {
            return Err(Error::Usage(format!("historical average needs a non-empty training range, got {train:?}")));
        }
        let cells = fine.height() * fine.width();
        let spd = fine.meta().slots_per_day;
        let mut sums = vec![vec![0.0; cells]; spd];
        let mut counts = vec![0usize; spd];
        let mut global = vec![0.0; cells];
        for t in train.clone() {
            let s = fine.slot(t);
            counts[s] += 1;
            for (k, &v) in fine.frame(t).iter().enumerate() {
                sums[s][k] += v;
                global[k] += v;
            }
        }
        let n = train.len() as f64;
        global.iter_mut().for_each(|v| *v /= n);
        let slots = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect();
        Ok(Self { slots, global })
    }

    pub fn predict(&self, slot: usize) -> &[f64] {
        self.slots.get(slot).and_then(|s| s.as_deref()).unwrap_or(&self.global)
    }
}

pub fn baseline_ha(
    coarse: &FlowGrid,
    fine: &FlowGrid,
    train: Range<usize>,
    eval: Range<usize>,
    mask: f64,
) -> Result<MetricsReport> {
    let ha = HistoricalAverage::fit(fine, train)?;
    let frames: Vec<usize> = eval.collect();
    score_frames(coarse, fine, &frames, mask, |t| Ok(ha.predict(fine.slot(t)).to_vec()))
}
