//! Flow grids and the coarse/fine aggregation constraint.

use std::ops::Range;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Coarse,
    Fine,
}

impl Granularity {
    pub fn tag(self) -> u8 {
        match self {
            Granularity::Coarse => 0,
            Granularity::Fine => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Granularity::Coarse),
            1 => Some(Granularity::Fine),
            _ => None,
        }
    }
}

/// Storage precision of grid values on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(Precision::F32),
            8 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        self.tag() as usize
    }
}

/// Shape and labelling of a [`FlowGrid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridMeta {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub granularity: Granularity,
    /// Linear resolution ratio between the paired fine and coarse grids.
    pub upscale: usize,
    pub slots_per_day: usize,
    pub precision: Precision,
}

impl GridMeta {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// `T` frames of `H×W` non-negative flow values, row-major frame by frame.
///
/// Frame `t` carries the timestamp `(t / slots_per_day, t % slots_per_day)`.
/// In `F32` precision every value is representable as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowGrid {
    meta: GridMeta,
    values: Vec<f64>,
}

impl FlowGrid {
    pub fn new(meta: GridMeta, mut values: Vec<f64>) -> Result<Self> {
        if meta.height == 0 || meta.width == 0 {
            return Err(Error::Dimension(format!("grid must be non-empty, got {}x{}", meta.height, meta.width)));
        }
        if meta.upscale == 0 || meta.slots_per_day == 0 {
            return Err(Error::Usage("upscale factor and slots_per_day must be positive".into()));
        }
        let expected = meta.frames * meta.cells();
        if values.len() != expected {
            return Err(Error::Dimension(format!(
                "{} frames of {}x{} need {expected} values, got {}",
                meta.frames,
                meta.height,
                meta.width,
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::format("values", format!("value {} at index {k} is negative or non-finite", values[k])));
        }
        if meta.precision == Precision::F32 {
            values.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        Ok(Self { meta, values })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn frames(&self) -> usize {
        self.meta.frames
    }

    pub fn height(&self) -> usize {
        self.meta.height
    }

    pub fn width(&self) -> usize {
        self.meta.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.meta.cells();
        &self.values[t * n..(t + 1) * n]
    }

    /// Values of frames in `range`, concatenated.
    pub fn frames_in(&self, range: Range<usize>) -> &[f64] {
        let n = self.meta.cells();
        &self.values[range.start * n..range.end * n]
    }

    /// `(day_index, slot_index)` of frame `t`.
    pub fn timestamp(&self, t: usize) -> (usize, usize) {
        (t / self.meta.slots_per_day, t % self.meta.slots_per_day)
    }

    pub fn slot(&self, t: usize) -> usize {
        t % self.meta.slots_per_day
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.meta.precision = precision;
        if precision == Precision::F32 {
            self.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        self
    }

    /// Block-sums every frame by `s`, yielding a coarse grid.
    pub fn coarsen(&self, s: usize) -> Result<FlowGrid> {
        if s == 0 || self.height() % s != 0 || self.width() % s != 0 {
            return Err(Error::Dimension(format!(
                "{}x{} grid is not divisible by upscale factor {s}",
                self.height(),
                self.width()
            )));
        }
        let mut out = Vec::with_capacity(self.values.len() / (s * s));
        for t in 0..self.frames() {
            out.extend(block_sum(self.frame(t), self.height(), self.width(), s));
        }
        let meta = GridMeta {
            height: self.height() / s,
            width: self.width() / s,
            granularity: Granularity::Coarse,
            upscale: s,
            ..self.meta
        };
        FlowGrid::new(meta, out)
    }
}

/// Sum of each `s×s` block of one `h×w` frame. Every block is summed in
/// row-major order, so results are reproducible bit for bit.
pub fn block_sum(frame: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
    let (ch, cw) = (h / s, w / s);
    let mut out = vec![0.0; ch * cw];
    for i in 0..ch {
        for j in 0..cw {
            let mut acc = 0.0;
            for di in 0..s {
                for dj in 0..s {
                    acc += frame[(i * s + di) * w + j * s + dj];
                }
            }
            out[i * cw + j] = acc;
        }
    }
    out
}

/// Max over frames and cells of `|x_ij − Σ y_i'j'|` for the aggregation
/// relation between a coarse and a fine frame.
pub fn frame_residual(coarse: &[f64], fine: &[f64], ch: usize, cw: usize, s: usize) -> f64 {
    block_sum(fine, ch * s, cw * s, s)
        .iter()
        .zip(coarse)
        .map(|(&y, &x)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Max residual of the aggregation constraint between paired grids.
pub fn validate_constraint(coarse: &FlowGrid, fine: &FlowGrid, s: usize) -> Result<f64> {
    if coarse.frames() != fine.frames()
        || coarse.height() * s != fine.height()
        || coarse.width() * s != fine.width()
    {
        return Err(Error::Dimension(format!(
            "coarse {}x{}x{} and fine {}x{}x{} are not paired by factor {s}",
            coarse.frames(),
            coarse.height(),
            coarse.width(),
            fine.frames(),
            fine.height(),
            fine.width()
        )));
    }
    Ok((0..coarse.frames())
        .map(|t| frame_residual(coarse.frame(t), fine.frame(t), coarse.height(), coarse.width(), s))
        .fold(0.0, f64::max))
}

/// Spreads every coarse value uniformly over its `s×s` subregions.
pub fn mean_partition(coarse: &[f64], ch: usize, cw: usize, s: usize) -> Vec<f64> {
    let w = cw * s;
    let share = 1.0 / (s * s) as f64;
    let mut out = vec![0.0; ch * cw * s * s];
    for (k, v) in out.iter_mut().enumerate() {
        let (y, x) = (k / w, k % w);
        *v = coarse[(y / s) * cw + x / s] * share;
    }
    out
}
