//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Result, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled across all inputs; every coordinate is checked
    /// when the inputs hold fewer.
    pub max_coords: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-6, max_coords: 128, tolerance: 1e-5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Compares `d loss / d inputs` from the tape against central differences.
///
/// `build` receives a fresh graph and one trainable leaf per input and must
/// return a scalar loss. The error measure is
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn check<B>(name: &str, inputs: &[Tensor<f64>], opts: GradCheckOptions, build: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picks: Vec<usize> = if total <= opts.max_coords {
        (0..total).collect()
    } else {
        sample(&mut rng, total, opts.max_coords).into_vec()
    };
    picks.sort_unstable();

    let mut work = inputs.to_vec();
    let mut max_rel_err = 0.0f64;
    for flat in &picks {
        let (mut which, mut idx) = (0, *flat);
        while idx >= inputs[which].len() {
            idx -= inputs[which].len();
            which += 1;
        }
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = orig + opts.step;
        let up = eval(&work)?;
        work[which].data_mut()[idx] = orig - opts.step;
        let down = eval(&work)?;
        work[which].data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        let a = analytic[which].data()[idx];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        max_rel_err = if err.is_nan() || max_rel_err.is_nan() { f64::NAN } else { max_rel_err.max(err) };
    }
    Ok(GradCheckReport { name: name.to_string(), coords: picks.len(), max_rel_err, tolerance: opts.tolerance })
}
