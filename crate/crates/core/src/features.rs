use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Neighborhood,
    City,
}

/// One frame of per-region representations, `C×H×W` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub scale: Scale,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, scale: Scale, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, scale, data })
    }

    pub fn regions(&self) -> usize {
        self.height * self.width
    }

    pub fn check_region(&self, (i, j): (usize, usize)) -> Result<()> {
        if i >= self.height || j >= self.width {
            return Err(Error::Index(format!("region ({i},{j}) outside {}x{} grid", self.height, self.width)));
        }
        Ok(())
    }

    /// Channel column at region `(i, j)`.
    pub fn vector(&self, (i, j): (usize, usize)) -> Vec<f64> {
        let plane = self.regions();
        let p = i * self.width + j;
        (0..self.channels).map(|c| self.data[c * plane + p]).collect()
    }

    /// Region-major copy: row `r = i·W + j` holds the channel column.
    pub fn region_rows(&self) -> Vec<f64> {
        let plane = self.regions();
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for p in 0..plane {
                out[p * self.channels + c] = self.data[c * plane + p];
            }
        }
        out
    }
}
