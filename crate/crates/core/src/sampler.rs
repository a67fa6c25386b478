//! Dynamic positive/negative selection for both contrastive scales.
//!
//! Neighborhood samples compare regions of the same frame by the channel
//! Euclidean distance of their representations. City samples compare whole
//! frames by the root-mean-square distance over all regions, so every
//! region of a frame shares the same candidate frames.

use std::cmp::Ordering;

use crate::features::FeatureMap;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdMode {
    /// Use the configured `delta` / `theta` directly.
    Absolute,
    /// Per anchor, the `p`-quantile of its candidate distances.
    Percentile(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub delta: f64,
    pub theta: f64,
    pub k: usize,
    pub mode: ThresholdMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { delta: 1.0, theta: 1.0, k: 8, mode: ThresholdMode::Percentile(0.2) }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("sampler k must be at least 1".into()));
        }
        match self.mode {
            ThresholdMode::Percentile(p) if !(p > 0.0 && p < 1.0) => {
                Err(Error::Config(format!("percentile {p} must lie in (0, 1)")))
            }
            ThresholdMode::Absolute if !(self.delta >= 0.0 && self.theta >= 0.0) => {
                Err(Error::Config("absolute thresholds delta and theta must be non-negative".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `(t, i, j)` of an anchor cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct AnchorId {
    pub t: usize,
    pub i: usize,
    pub j: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    /// Region index `i·W + j` (neighborhood) or frame index (city).
    pub id: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub anchor: AnchorId,
    pub threshold: f64,
    /// Ascending by distance, at most `k`.
    pub positives: Vec<Candidate>,
    /// Ascending by distance, all above `threshold`, at most `k`.
    pub negatives: Vec<Candidate>,
    /// Set when either list holds fewer than `k` entries.
    pub short_set: bool,
}

impl SampleSet {
    pub fn usable(&self) -> bool {
        !self.positives.is_empty() && !self.negatives.is_empty()
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance between two regions of the same frame.
pub fn neighborhood_distance(h: &FeatureMap, a: (usize, usize), b: (usize, usize)) -> Result<f64> {
    h.check_region(a)?;
    h.check_region(b)?;
    let plane = h.regions();
    let (pa, pb) = (a.0 * h.width + a.1, b.0 * h.width + b.1);
    Ok((0..h.channels)
        .map(|c| {
            let d = h.data[c * plane + pa] - h.data[c * plane + pb];
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// RMS over regions of the per-region distance between frames `t` and `t2`.
/// The region argument is validated only; the value is shared by all regions.
pub fn city_distance(seq: &[FeatureMap], region: (usize, usize), t: usize, t2: usize) -> Result<f64> {
    if t == t2 {
        return Err(Error::Index(format!("city distance needs distinct frames, got {t} twice")));
    }
    let (a, b) = match (seq.get(t), seq.get(t2)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Index(format!("frame {} missing from sequence of {}", t.max(t2), seq.len()))),
    };
    a.check_region(region)?;
    frame_distance(a, b)
}

/// RMS region distance between two frames of representations.
pub fn frame_distance(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if a.data.len() != b.data.len() {
        return Err(Error::Dimension("city distance between differently shaped maps".into()));
    }
    let sq: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.regions() as f64).sqrt())
}

fn cmp_value(a: f64, b: f64) -> Ordering {
    a.total_cmp(&b)
}

/// Indices of the `k` smallest (or largest) values; ties go to the smaller index.
pub fn topk_select(values: &[f64], k: usize, ascending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = cmp_value(values[a], values[b]);
        let o = if ascending { o } else { o.reverse() };
        o.then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Threshold for one anchor's candidates.
pub fn resolve_threshold(distances: &[f64], mode: ThresholdMode, absolute: f64) -> f64 {
    match mode {
        ThresholdMode::Absolute => absolute,
        ThresholdMode::Percentile(p) => {
            if distances.is_empty() {
                return absolute;
            }
            let mut sorted = distances.to_vec();
            sorted.sort_by(|a, b| cmp_value(*a, *b));
            let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            sorted[rank - 1]
        }
    }
}

/// Splits `candidates` at `threshold` and keeps the `k` nearest on each side.
pub fn classify(anchor: AnchorId, anchor_id: usize, candidates: &[Candidate], threshold: f64, k: usize) -> SampleSet {
    let (mut pos, mut neg): (Vec<Candidate>, Vec<Candidate>) = candidates
        .iter()
        .filter(|c| c.id != anchor_id)
        .partition(|c| c.distance <= threshold);
    let keep = |list: &mut Vec<Candidate>| {
        let d: Vec<f64> = list.iter().map(|c| c.distance).collect();
        let picked: Vec<Candidate> = topk_select(&d, k, true).into_iter().map(|i| list[i]).collect();
        *list = picked;
    };
    keep(&mut pos);
    keep(&mut neg);
    let short_set = pos.len() < k || neg.len() < k;
    SampleSet { anchor, threshold, positives: pos, negatives: neg, short_set }
}

/// Samples for every region of one frame, from the current representations.
pub fn neighborhood_samples(h: &FeatureMap, t: usize, cfg: &SamplerConfig) -> Vec<SampleSet> {
    let rows = h.region_rows();
    let c = h.channels;
    let n = h.regions();
    (0..n)
        .map(|a| {
            let u = &rows[a * c..(a + 1) * c];
            let cands: Vec<Candidate> = (0..n)
                .filter(|&b| b != a)
                .map(|b| Candidate { id: b, distance: euclidean(u, &rows[b * c..(b + 1) * c]) })
                .collect();
            let d: Vec<f64> = cands.iter().map(|c| c.distance).collect();
            let thr = resolve_threshold(&d, cfg.mode, cfg.delta);
            let anchor = AnchorId { t, i: a / h.width, j: a % h.width };
            classify(anchor, a, &cands, thr, cfg.k)
        })
        .collect()
}

/// Frame-level samples for anchor frame `t`, given its distance to every
/// candidate frame (`(frame index, distance)`, anchor excluded). The
/// selection is shared by all regions of the frame.
pub fn city_frame_samples(t: usize, distances: &[Candidate], cfg: &SamplerConfig) -> SampleSet {
    let d: Vec<f64> = distances.iter().map(|c| c.distance).collect();
    let thr = resolve_threshold(&d, cfg.mode, cfg.theta);
    classify(AnchorId { t, i: 0, j: 0 }, t, distances, thr, cfg.k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Scale;

    fn anchor() -> AnchorId {
        AnchorId { t: 0, i: 0, j: 0 }
    }

    fn cands(d: &[f64]) -> Vec<Candidate> {
        d.iter().enumerate().map(|(k, &distance)| Candidate { id: k + 1, distance }).collect()
    }

    #[test]
    fn distance_examples() {
        let h = FeatureMap::new(2, 1, 2, Scale::Neighborhood, vec![1., 4., 2., 6.]).unwrap();
        assert_eq!(neighborhood_distance(&h, (0, 0), (0, 1)).unwrap(), 5.0);
        assert_eq!(neighborhood_distance(&h, (0, 1), (0, 1)).unwrap(), 0.0);
        assert!(matches!(neighborhood_distance(&h, (1, 0), (0, 1)), Err(Error::Index(_))));

        let a = FeatureMap::new(1, 1, 1, Scale::City, vec![3.]).unwrap();
        let b = FeatureMap::new(1, 1, 1, Scale::City, vec![7.]).unwrap();
        let seq = vec![a.clone(), b];
        assert_eq!(city_distance(&seq, (0, 0), 0, 1).unwrap(), 4.0);
        assert_eq!(city_distance(&[a.clone(), a], (0, 0), 0, 1).unwrap(), 0.0);
        assert!(matches!(city_distance(&seq, (0, 0), 0, 5), Err(Error::Index(_))));
        assert!(city_distance(&seq, (0, 0), 1, 1).is_err());
    }

    #[test]
    fn classify_examples() {
        let s = classify(anchor(), 0, &cands(&[0.3, 0.7]), 0.5, 8);
        assert_eq!((s.positives.len(), s.negatives.len()), (1, 1));

        let s = classify(anchor(), 0, &cands(&[0.0, 0.0, 0.0]), 0.5, 2);
        assert_eq!(s.positives.len(), 2);
        assert!(s.negatives.is_empty() && s.short_set);

        let s = classify(anchor(), 0, &cands(&[0.1, 0.5, 0.3, 0.9]), 0.4, 2);
        let p: Vec<f64> = s.positives.iter().map(|c| c.distance).collect();
        let n: Vec<f64> = s.negatives.iter().map(|c| c.distance).collect();
        assert_eq!(p, vec![0.1, 0.3]);
        assert_eq!(n, vec![0.5, 0.9]);
        assert!(!s.short_set);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_select(&[3., 1., 2.], 1, true), vec![1]);
        assert_eq!(topk_select(&[2., 2., 2.], 2, true), vec![0, 1]);
        assert_eq!(topk_select(&[2., 5., 5.], 2, false), vec![1, 2]);
        assert!(topk_select(&[], 3, true).is_empty());
    }

    #[test]
    fn percentile_threshold() {
        let d: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        assert_eq!(resolve_threshold(&d, ThresholdMode::Percentile(0.2), 0.0), 2.0);
        assert_eq!(resolve_threshold(&d, ThresholdMode::Percentile(0.05), 0.0), 1.0);
        assert_eq!(resolve_threshold(&d, ThresholdMode::Absolute, 3.5), 3.5);
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        assert!(SamplerConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { mode: ThresholdMode::Percentile(1.0), ..Default::default() }.validate().is_err());
    }
}
