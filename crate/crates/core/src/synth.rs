//! Deterministic synthetic flow data: Gaussian blobs orbiting on a daily
//! cycle over the fine grid, plus clipped noise, rounded to counts.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grid::{FlowGrid, Granularity, GridMeta, Precision};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Coarse grid height.
    pub height: usize,
    /// Coarse grid width.
    pub width: usize,
    pub upscale: usize,
    pub frames: usize,
    pub slots_per_day: usize,
    pub blobs: usize,
    /// Orbits per day; 0 keeps every blob static.
    pub blob_speed: u32,
    /// Standard deviation of additive per-cell noise, before clipping.
    pub noise: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            upscale: 2,
            frames: 1440,
            slots_per_day: 48,
            blobs: 6,
            blob_speed: 1,
            noise: 1.0,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.height, self.width, self.upscale, self.frames, self.slots_per_day, self.blobs];
        if positive.contains(&0) {
            return Err(Error::Config("synthetic data sizes and blob count must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise amplitude {} must be finite and non-negative", self.noise)));
        }
        Ok(())
    }
}

struct Blob {
    center: (f64, f64),
    radius: f64,
    orbit_phase: f64,
    sigma: f64,
    peak: f64,
    pulse_phase: f64,
}

/// Generates a fine grid and its block-summed coarse pair.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(FlowGrid, FlowGrid)> {
    cfg.validate()?;
    let (fh, fw) = (cfg.height * cfg.upscale, cfg.width * cfg.upscale);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let span = fh.min(fw) as f64;
    let blobs: Vec<Blob> = (0..cfg.blobs)
        .map(|_| Blob {
            center: (rng.gen_range(0.2..0.8) * fh as f64, rng.gen_range(0.2..0.8) * fw as f64),
            radius: rng.gen_range(0.1..0.3) * span,
            orbit_phase: rng.gen_range(0.0..TAU),
            sigma: rng.gen_range(0.4..1.1) * cfg.upscale as f64,
            peak: rng.gen_range(15.0..60.0),
            pulse_phase: rng.gen_range(0.0..TAU),
        })
        .collect();

    // Noise-free field per slot; every day repeats it exactly.
    let slot_fields: Vec<Vec<f64>> = (0..cfg.slots_per_day)
        .map(|s| {
            let theta = TAU * s as f64 / cfg.slots_per_day as f64;
            let mut field = vec![0.0; fh * fw];
            for b in &blobs {
                let angle = cfg.blob_speed as f64 * theta + b.orbit_phase;
                let (cy, cx) = (b.center.0 + b.radius * angle.cos(), b.center.1 + b.radius * angle.sin());
                let amp = b.peak * (0.6 + 0.4 * (theta + b.pulse_phase).sin());
                for y in 0..fh {
                    for x in 0..fw {
                        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        field[y * fw + x] += amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                    }
                }
            }
            field
        })
        .collect();

    let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut values = Vec::with_capacity(cfg.frames * fh * fw);
    for t in 0..cfg.frames {
        for &base in &slot_fields[t % cfg.slots_per_day] {
            let noisy = if cfg.noise > 0.0 { base + normal.sample(&mut rng) } else { base };
            values.push(noisy.max(0.0).round());
        }
    }
    let meta = GridMeta {
        frames: cfg.frames,
        height: fh,
        width: fw,
        granularity: Granularity::Fine,
        upscale: cfg.upscale,
        slots_per_day: cfg.slots_per_day,
        precision: cfg.precision,
    };
    let fine = FlowGrid::new(meta, values)?;
    let coarse = fine.coarsen(cfg.upscale)?;
    Ok((fine, coarse))
}
