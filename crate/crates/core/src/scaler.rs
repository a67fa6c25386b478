use crate::{Error, Result};

/// Affine min-max map of `[min, max]` onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalerParams {
    pub min: f64,
    pub max: f64,
}

impl ScalerParams {
    /// Fits on `values`. A constant input widens `max` to `min + 1`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Usage("cannot fit a scaler on no values".into()));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { min, max: if max > min { max } else { min + 1.0 } })
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.min) / self.range()
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * self.range() + self.min
    }
}
