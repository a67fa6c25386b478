use std::ops::Range;

use crate::{Error, Result};

/// Chronological train / validation / test ranges over frame indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl DatasetSplit {
    /// Splits `frames` in time order; every part must be non-empty.
    pub fn chronological(frames: usize, train_frac: f64, val_frac: f64) -> Result<Self> {
        if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
            return Err(Error::Config(format!(
                "split fractions train={train_frac} val={val_frac} must be positive and sum below 1"
            )));
        }
        let n_train = (frames as f64 * train_frac).round() as usize;
        let n_val = (frames as f64 * val_frac).round() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= frames {
            return Err(Error::Usage(format!("{frames} frames are too few for a train/val/test split")));
        }
        Ok(Self { train: 0..n_train, val: n_train..n_train + n_val, test: n_train + n_val..frames })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_in_order() {
        let s = DatasetSplit::chronological(1440, 0.7, 0.1).unwrap();
        assert_eq!(s.train, 0..1008);
        assert_eq!(s.val, 1008..1152);
        assert_eq!(s.test, 1152..1440);
        assert!(DatasetSplit::chronological(3, 0.7, 0.1).is_err());
        assert!(DatasetSplit::chronological(100, 0.9, 0.2).is_err());
    }
}
