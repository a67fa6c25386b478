//! Finite-difference checks of every differentiable operation and layer,
//! plus the degeneracy checks.

use flowsr_tensor::gradcheck::{check, GradCheckOptions};
use flowsr_tensor::{ContrastiveAnchor, Graph, SimilarityMode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fusion::{fuse, m2_normalize};
use crate::model::{Model, ModelConfig, Scalers, ENCODER_B, ENCODER_C};
use crate::params::Bound;
use crate::scaler::ScalerParams;
use crate::train::{feature_diff_loss, total_loss, DiffLossForm, TrainConfig};
use crate::Result;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const DEGENERACY_TOLERANCE: f64 = 1e-6;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    /// Max relative gradient error, or max absolute deviation for
    /// degeneracy checks.
    pub max_err: f64,
    pub tolerance: f64,
    pub coords: usize,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_err.is_finite() && self.max_err < self.tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(rand_tensor(&mut rng, &g.shape(y).to_vec(), -1.0, 1.0));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions { step: 1e-6, max_coords: 128, tolerance: GRAD_TOLERANCE, seed }
}

fn run<B>(out: &mut Vec<CheckLine>, name: &str, inputs: &[Tensor<f64>], seed: u64, build: B) -> Result<()>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = check(name, inputs, opts(seed), |g, v| build(g, v).map_err(to_tensor_err))?;
    out.push(CheckLine { name: r.name, max_err: r.max_rel_err, tolerance: r.tolerance, coords: r.coords });
    Ok(())
}

fn to_tensor_err(e: crate::Error) -> flowsr_tensor::TensorError {
    flowsr_tensor::TensorError::Usage(e.to_string())
}

fn small_config() -> ModelConfig {
    ModelConfig { channels: 4, kernel: 3, dilation: 1, neighborhood_layers: 2, heads: 2, city_blocks: 1, upscale: 2, ln_eps: 1e-5 }
}

/// Small model with every parameter random, so deformable sampling points
/// fall between grid nodes.
fn random_model(seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::new(small_config(), seed).expect("valid config");
    m.randomize(seed ^ 0x5eed, 0.5);
    let s = ScalerParams { min: 0.0, max: 10.0 };
    m.with_scalers(Scalers { coarse: s, fine: s })
}

/// Parameters under `prefixes` (all when empty) followed by `extra`.
fn store_inputs(m: &Model<f64>, prefixes: &[&str], extra: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let ids = if prefixes.is_empty() { m.all_ids() } else { m.ids(prefixes) };
    ids.iter().map(|&id| m.store.get(id).clone()).chain(extra.iter().cloned()).collect()
}

/// Binds the checked parameters to the checker's leaves and every other
/// parameter as a constant; returns the bound store and the extra leaves.
fn split_vars(g: &mut Graph<f64>, m: &Model<f64>, prefixes: &[&str], v: &[Var]) -> (Bound, Vec<Var>) {
    let ids = if prefixes.is_empty() { m.all_ids() } else { m.ids(prefixes) };
    let mut next = 0;
    let vars = m
        .store
        .ids()
        .map(|id| {
            if ids.contains(&id) {
                next += 1;
                v[next - 1]
            } else {
                g.constant(m.store.get(id).clone())
            }
        })
        .collect();
    (Bound::from_vars(vars), v[next..].to_vec())
}

/// Every differentiable operation and composition, checked in 64-bit.
/// With `inject_fault`, adds a check of an op whose backward is wrong on
/// purpose.
pub fn gradient_suite(seed: u64, inject_fault: bool) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let ins = [rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), rand_tensor(&mut rng, &[4, 5], -1.0, 1.0)];
    run(&mut out, "matmul", &ins, seed, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, 1)
    })?;

    let ins = [rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0), rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5)];
    run(&mut out, "conv2d", &ins, seed, |g, v| {
        let y = g.conv2d(v[0], v[1], 2, 2)?;
        probe(g, y, 2)
    })?;

    let x = rand_tensor(&mut rng, &[2, 4, 5], -1.0, 1.0);
    for coords in [[1.3, 2.7], [-0.4, 0.6], [3.25, 4.5]] {
        let ins = [x.clone(), Tensor::new(vec![2], coords.to_vec())?];
        run(&mut out, &format!("bilinear_sample at {coords:?}"), &ins, seed, |g, v| {
            let y = g.bilinear_sample(v[0], v[1])?;
            let sq = g.mul(y, y)?;
            probe(g, sq, 3)
        })?;
    }

    let ins = [
        rand_tensor(&mut rng, &[2, 4, 5], -1.0, 1.0),
        rand_tensor(&mut rng, &[18, 4, 5], -0.9, 0.9),
        rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5),
    ];
    run(&mut out, "deform_conv (input, offsets, weights)", &ins, seed, |g, v| {
        let y = g.deform_conv2d(v[0], v[1], v[2], 1, 1)?;
        probe(g, y, 4)
    })?;

    let ins = [rand_tensor(&mut rng, &[3, 4, 2], -2.0, 2.0)];
    for axis in 0..3 {
        run(&mut out, &format!("softmax axis {axis}"), &ins, seed, move |g, v| {
            let y = g.softmax(v[0], axis)?;
            probe(g, y, 5)
        })?;
    }

    let ins = [
        rand_tensor(&mut rng, &[5, 6], -2.0, 2.0),
        rand_tensor(&mut rng, &[6], 0.5, 1.5),
        rand_tensor(&mut rng, &[6], -0.5, 0.5),
    ];
    run(&mut out, "layer_norm", &ins, seed, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(g, y, 6)
    })?;

    let m = random_model(seed);
    let (h, w) = (3, 4);
    let x = rand_tensor(&mut rng, &[1, h, w], 0.0, 1.0);
    let tokens = rand_tensor(&mut rng, &[h * w, 4], -1.0, 1.0);

    let block = m.encoder_c.blocks[0].clone();
    run(&mut out, "mha attention", &store_inputs(&m, &[ENCODER_C], &[tokens.clone()]), seed, |g, v| {
        let (b, extra) = split_vars(g, &m, &[ENCODER_C], v);
        let (z, _) = block.attention(g, &b, extra[0])?;
        probe(g, z, 7)
    })?;
    run(&mut out, "attention block (mha + residual + layer_norm)", &store_inputs(&m, &[ENCODER_C], &[tokens]), seed, |g, v| {
        let (b, extra) = split_vars(g, &m, &[ENCODER_C], v);
        let y = block.forward(g, &b, extra[0])?;
        probe(g, y, 8)
    })?;

    run(&mut out, "neighborhood encoder", &store_inputs(&m, &[ENCODER_B], &[x.clone()]), seed, |g, v| {
        let (b, extra) = split_vars(g, &m, &[ENCODER_B], v);
        let y = m.encoder_b.forward(g, &b, extra[0])?;
        probe(g, y, 9)
    })?;
    run(&mut out, "city encoder", &store_inputs(&m, &[ENCODER_C], &[x.clone()]), seed, |g, v| {
        let (b, extra) = split_vars(g, &m, &[ENCODER_C], v);
        let y = m.encoder_c.forward(g, &b, extra[0])?;
        probe(g, y, 10)
    })?;

    let hb = rand_tensor(&mut rng, &[4, h, w], 0.0, 1.0);
    let hc = rand_tensor(&mut rng, &[4, h, w], -1.0, 1.0);
    run(&mut out, "neighborhood decoder", &store_inputs(&m, &["decoders.b"], &[hb.clone()]), seed, |g, v| {
        let (b, extra) = split_vars(g, &m, &["decoders.b"], v);
        let y = m.decoders.decode_neighborhood(g, &b, extra[0])?;
        probe(g, y, 11)
    })?;
    run(&mut out, "city decoder", &store_inputs(&m, &["decoders.c"], &[hc.clone()]), seed, |g, v| {
        let (b, extra) = split_vars(g, &m, &["decoders.c"], v);
        let y = m.decoders.decode_city(g, &b, extra[0])?;
        probe(g, y, 12)
    })?;
    run(&mut out, "interactive decoder", &store_inputs(&m, &["decoders.bc"], &[hb.clone(), hc.clone()]), seed, |g, v| {
        let (b, extra) = split_vars(g, &m, &["decoders.bc"], v);
        let y = m.decoders.decode_interactive(g, &b, extra[0], extra[1])?;
        probe(g, y, 13)
    })?;

    let os = [
        rand_tensor(&mut rng, &[4, h, w], -1.0, 1.0),
        rand_tensor(&mut rng, &[4, h, w], -1.0, 1.0),
        rand_tensor(&mut rng, &[4, h, w], -1.0, 1.0),
        rand_tensor(&mut rng, &[3], -1.0, 1.0),
    ];
    run(&mut out, "fusion", &os, seed, |g, v| {
        let wts = g.softmax(v[3], 0)?;
        let y = fuse(g, wts, v[0], v[1], v[2])?;
        probe(g, y, 14)
    })?;

    let ins = [rand_tensor(&mut rng, &[4, h, w], -2.0, 2.0), rand_tensor(&mut rng, &[h, w], 0.0, 10.0)];
    run(&mut out, "m2_normalize", &ins, seed, |g, v| {
        let y = m2_normalize(g, v[0], v[1], 2)?;
        probe(g, y, 15)
    })?;

    let feats = rand_tensor(&mut rng, &[7, 4], -1.0, 1.0);
    let anchors = vec![
        ContrastiveAnchor { anchor: 0, positives: vec![1, 2, 3], negatives: vec![4, 5, 6] },
        ContrastiveAnchor { anchor: 3, positives: vec![0], negatives: vec![5, 6] },
    ];
    let a2 = anchors.clone();
    run(&mut out, "contrastive loss (exp_inner)", &[feats.clone()], seed, move |g, v| {
        Ok(g.contrastive(v[0], &a2, SimilarityMode::ExpInner, 0.5)?.0)
    })?;
    let mut positive = feats;
    positive.data_mut().iter_mut().for_each(|x| *x = x.abs() + 0.1);
    run(&mut out, "contrastive loss (raw_inner)", &[positive], seed, move |g, v| {
        Ok(g.contrastive(v[0], &anchors, SimilarityMode::RawInner, 1.0)?.0)
    })?;

    // Small features keep tanh off its plateau.
    let fb = rand_tensor(&mut rng, &[4, h, w], 0.0, 0.4);
    let fc = rand_tensor(&mut rng, &[4, h, w], 0.0, 0.4);
    for form in [DiffLossForm::AsWritten, DiffLossForm::PenalizeSimilarity] {
        run(&mut out, &format!("feature_diff_loss ({form:?})"), &[fb.clone(), fc.clone()], seed, move |g, v| {
            feature_diff_loss(g, v[0], v[1], 0.7, form)
        })?;
    }

    let pred = rand_tensor(&mut rng, &[1, 2 * h, 2 * w], 0.0, 5.0);
    let truth = rand_tensor(&mut rng, &[1, 2 * h, 2 * w], 0.0, 5.0);
    let cfg = TrainConfig { lambda: 0.3, alpha: 0.7, ..TrainConfig::default() };
    let scaler = ScalerParams { min: 0.0, max: 5.0 };
    run(&mut out, "total_loss", &[pred, fb, fc], seed, |g, v| {
        let t = g.constant(truth.clone());
        total_loss(g, v[0], t, v[1], v[2], &scaler, &cfg)
    })?;

    let coarse: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..10.0)).collect();
    let target = rand_tensor(&mut rng, &[1, 2 * h, 2 * w], 0.0, 3.0);
    run(&mut out, "full model total_loss", &store_inputs(&m, &[], &[]), seed, |g, v| {
        let (b, _) = split_vars(g, &m, &[], v);
        let f = m.forward(g, &b, &coarse, h, w)?;
        let t = g.constant(target.clone());
        total_loss(g, f.fine, t, f.hb, f.hc, &scaler, &cfg)
    })?;

    if inject_fault {
        let ins = [rand_tensor(&mut rng, &[4], 0.5, 2.0)];
        run(&mut out, "injected faulty backward", &ins, seed, |g, v| {
            let y = g.faulty_square(v[0]);
            Ok(g.sum(y))
        })?;
    }
    Ok(out)
}

/// Zero-offset deformable convolution against conv2d on `trials` random
/// inputs, and zero-query attention against mean pooling.
pub fn degeneracy_checks(seed: u64, trials: usize) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let dil = rng.gen_range(1..3);
        let pad = dil * (k - 1) / 2;
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&mut rng, &[cin, h, w], -1.0, 1.0));
        let wt = g.constant(rand_tensor(&mut rng, &[cout, cin, k, k], -1.0, 1.0));
        let off = g.constant(Tensor::zeros(&[2 * k * k, h, w]));
        let a = g.deform_conv2d(x, off, wt, pad, dil)?;
        let b = g.conv2d(x, wt, pad, dil)?;
        for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
            worst = worst.max((p - q).abs());
        }
    }
    let mut out = vec![CheckLine {
        name: format!("zero-offset deform_conv == conv2d ({trials} inputs)"),
        max_err: worst,
        tolerance: DEGENERACY_TOLERANCE,
        coords: trials,
    }];

    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let d = 4;
        let mut m = Model::<f64>::new(ModelConfig { channels: d, heads: 2, ..small_config() }, seed + trial as u64)?;
        let block = m.encoder_c.blocks[0].clone();
        let eye = Tensor::new(vec![d, d], (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect())?;
        *m.store.get_mut(block.wq) = Tensor::zeros(&[d, d]);
        *m.store.get_mut(block.wk) = Tensor::zeros(&[d, d]);
        *m.store.get_mut(block.wv) = eye.clone();
        *m.store.get_mut(block.wo) = eye;
        let n = rng.gen_range(1..20);
        let xs = rand_tensor(&mut rng, &[n, d], -3.0, 3.0);
        let mut g = Graph::new();
        let b = m.store.bind(&mut g, &[]);
        let x = g.constant(xs.clone());
        let (z, _) = block.attention(&mut g, &b, x)?;
        for c in 0..d {
            let mean = (0..n).map(|r| xs.data()[r * d + c]).sum::<f64>() / n as f64;
            for r in 0..n {
                worst = worst.max((g.value(z).data()[r * d + c] - mean).abs());
            }
        }
    }
    out.push(CheckLine {
        name: format!("zero-query attention == mean pooling ({trials} inputs)"),
        max_err: worst,
        tolerance: DEGENERACY_TOLERANCE,
        coords: trials,
    });
    Ok(out)
}
