//! Contrastive pretraining of the two encoders.

use std::io::Write;
use std::ops::Range;

use flowsr_tensor::{Adam, AdamConfig, ContrastiveAnchor, Graph, Real, SimilarityMode, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::features::Scale;
use crate::grid::FlowGrid;
use crate::layers::to_tokens;
use crate::model::{to_feature_map, Model, ENCODER_B, ENCODER_C};
use crate::sampler::{city_frame_samples, frame_distance, neighborhood_samples, Candidate, SamplerConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Frames per epoch (neighborhood) or anchor frames per epoch (city).
    pub batch: usize,
    pub lr: f64,
    pub temperature: f64,
    pub similarity_mode: SimilarityMode,
    pub sampler: SamplerConfig,
    /// Upper bound on `(t, i, j)` anchors per city epoch.
    pub city_anchors: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 8,
            lr: 1e-3,
            temperature: 0.5,
            similarity_mode: SimilarityMode::ExpInner,
            sampler: SamplerConfig::default(),
            city_anchors: 256,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.city_anchors == 0 {
            return Err(Error::Config("pretrain epochs, batch and city_anchors must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("pretrain lr must be positive".into()));
        }
        self.sampler.validate()
    }
}

fn dot(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}

/// `<u, v>` or `exp(<u, v> / τ)`.
pub fn similarity(u: &[f64], v: &[f64], mode: SimilarityMode, tau: f64) -> Result<f64> {
    let d = dot(u, v)?;
    Ok(match mode {
        SimilarityMode::RawInner => d,
        SimilarityMode::ExpInner => (d / tau).exp(),
    })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-ln(Σ_pos sim / (Σ_pos sim + Σ_neg sim))` for one anchor.
pub fn contrastive_loss(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    mode: SimilarityMode,
    tau: f64,
) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Usage("contrastive loss needs at least one positive and one negative".into()));
    }
    let inner = |vs: &[&[f64]]| vs.iter().map(|v| dot(anchor, v)).collect::<Result<Vec<f64>>>();
    let (p, n) = (inner(positives)?, inner(negatives)?);
    match mode {
        SimilarityMode::ExpInner => {
            let ps: Vec<f64> = p.iter().map(|d| d / tau).collect();
            let all: Vec<f64> = ps.iter().copied().chain(n.iter().map(|d| d / tau)).collect();
            Ok(log_sum_exp(&all) - log_sum_exp(&ps))
        }
        SimilarityMode::RawInner => {
            let sp: f64 = p.iter().sum();
            let total = sp + n.iter().sum::<f64>();
            if sp <= 0.0 || total <= 0.0 {
                return Err(Error::Numeric(format!("log argument {sp}/{total} is outside its domain")));
            }
            Ok(-(sp / total).ln())
        }
    }
}

/// Per-epoch record of one pretraining stage.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    /// Anchors skipped per epoch (no positive, no negative, or outside the
    /// raw-inner domain).
    pub skipped: Vec<usize>,
}

fn ensure_train(coarse: &FlowGrid, train: &Range<usize>) -> Result<()> {
    if train.is_empty() || train.end > coarse.frames() {
        return Err(Error::Usage(format!("training range {train:?} is not within {} frames", coarse.frames())));
    }
    Ok(())
}

fn step_encoder<F: Real>(
    model: &mut Model<F>,
    opt: &mut Adam<F>,
    prefix: &str,
    g: &mut Graph<F>,
    b: &crate::params::Bound,
    loss: Var,
) -> Result<()> {
    g.backward(loss)?;
    let ids = model.ids(&[prefix]);
    let grads: Vec<_> = ids.iter().map(|&id| g.grad_tensor(b.var(id))).collect();
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::Training(format!("non-finite gradient while pretraining {prefix}")));
    }
    model.store.adam_step(opt, &ids, &grads)
}

fn contrastive_or_fail<F: Real>(
    g: &mut Graph<F>,
    feats: Var,
    anchors: &[ContrastiveAnchor],
    cfg: &PretrainConfig,
    epoch: usize,
) -> Result<(Var, usize)> {
    g.contrastive(feats, anchors, cfg.similarity_mode, F::of(cfg.temperature)).map_err(|e| {
        Error::Training(format!("epoch {}: every anchor was skipped ({e})", epoch + 1))
    })
}

/// Stage I: trains the neighborhood encoder of `model` in place. Each epoch
/// draws `batch` training frames, recomputes samples from the current
/// encoder, and takes one Adam step on the mean loss over usable anchors.
pub fn pretrain_neighborhood<F: Real>(
    model: &mut Model<F>,
    coarse: &FlowGrid,
    train: Range<usize>,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    cfg.validate()?;
    ensure_train(coarse, &train)?;
    let (h, w) = (coarse.height(), coarse.width());
    let hw = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut report = PretrainReport { losses: Vec::new(), skipped: Vec::new() };
    let ids = model.ids(&[ENCODER_B]);
    for epoch in 0..cfg.epochs {
        let n = cfg.batch.min(train.len());
        let mut frames: Vec<usize> = sample(&mut rng, train.len(), n).into_iter().map(|k| train.start + k).collect();
        frames.sort_unstable();
        let mut g = Graph::new();
        let b = model.store.bind(&mut g, &ids);
        let mut tokens = Vec::with_capacity(n);
        let mut anchors = Vec::new();
        for (slot, &t) in frames.iter().enumerate() {
            let (x, _) = model.inputs(&mut g, coarse.frame(t), h, w)?;
            let hb = model.encoder_b.forward(&mut g, &b, x)?;
            let fm = to_feature_map(&g, hb, Scale::Neighborhood)?;
            for s in neighborhood_samples(&fm, t, &cfg.sampler) {
                let row = |r: usize| slot * hw + r;
                anchors.push(ContrastiveAnchor {
                    anchor: row(s.anchor.i * w + s.anchor.j),
                    positives: s.positives.iter().map(|c| row(c.id)).collect(),
                    negatives: s.negatives.iter().map(|c| row(c.id)).collect(),
                });
            }
            tokens.push(to_tokens(&mut g, hb)?);
        }
        let feats = g.concat(&tokens, 0)?;
        let (loss, skipped) = contrastive_or_fail(&mut g, feats, &anchors, cfg, epoch)?;
        report.losses.push(g.value(loss).data()[0].as_f64());
        report.skipped.push(skipped);
        step_encoder(model, &mut opt, ENCODER_B, &mut g, &b, loss)?;
    }
    Ok(report)
}

/// Stage II: trains the city encoder of `model` in place. Each epoch
/// encodes every training frame, picks `batch` anchor frames and at most
/// `city_anchors` regions among them, selects positive and negative frames
/// by whole-frame distance, and takes one Adam step.
pub fn pretrain_city<F: Real>(
    model: &mut Model<F>,
    coarse: &FlowGrid,
    train: Range<usize>,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    cfg.validate()?;
    ensure_train(coarse, &train)?;
    if train.len() < 2 {
        return Err(Error::Usage("city pretraining needs at least two training frames".into()));
    }
    let (h, w) = (coarse.height(), coarse.width());
    let hw = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut report = PretrainReport { losses: Vec::new(), skipped: Vec::new() };
    let ids = model.ids(&[ENCODER_C]);
    for epoch in 0..cfg.epochs {
        let maps = train.clone().map(|t| model.city_encode(coarse.frame(t), h, w)).collect::<Result<Vec<_>>>()?;
        let n = cfg.batch.min(train.len());
        let mut anchor_frames: Vec<usize> = sample(&mut rng, train.len(), n).into_iter().collect();
        anchor_frames.sort_unstable();
        let per_frame = (cfg.city_anchors / n).clamp(1, hw);

        // Frame-level samples, in train-relative indices.
        let mut plans = Vec::with_capacity(n);
        for &a in &anchor_frames {
            let cands = (0..train.len())
                .filter(|&c| c != a)
                .map(|c| Ok(Candidate { id: c, distance: frame_distance(&maps[a], &maps[c])? }))
                .collect::<Result<Vec<_>>>()?;
            let set = city_frame_samples(a, &cands, &cfg.sampler);
            let mut regions: Vec<usize> = sample(&mut rng, hw, per_frame).into_vec();
            regions.sort_unstable();
            plans.push((a, set, regions));
        }

        let mut needed: Vec<usize> = plans
            .iter()
            .flat_map(|(a, s, _)| std::iter::once(*a).chain(s.positives.iter().chain(&s.negatives).map(|c| c.id)))
            .collect();
        needed.sort_unstable();
        needed.dedup();
        let slot_of = |f: usize| needed.binary_search(&f).expect("frame encoded");

        let mut g = Graph::new();
        let b = model.store.bind(&mut g, &ids);
        let mut tokens = Vec::with_capacity(needed.len());
        for &f in &needed {
            let (x, _) = model.inputs(&mut g, coarse.frame(train.start + f), h, w)?;
            let hc = model.encoder_c.forward(&mut g, &b, x)?;
            tokens.push(to_tokens(&mut g, hc)?);
        }
        let mut anchors = Vec::new();
        for (a, set, regions) in &plans {
            for &r in regions {
                let row = |f: usize| slot_of(f) * hw + r;
                anchors.push(ContrastiveAnchor {
                    anchor: row(*a),
                    positives: set.positives.iter().map(|c| row(c.id)).collect(),
                    negatives: set.negatives.iter().map(|c| row(c.id)).collect(),
                });
            }
        }
        let feats = g.concat(&tokens, 0)?;
        let (loss, skipped) = contrastive_or_fail(&mut g, feats, &anchors, cfg, epoch)?;
        report.losses.push(g.value(loss).data()[0].as_f64());
        report.skipped.push(skipped);
        step_encoder(model, &mut opt, ENCODER_C, &mut g, &b, loss)?;
    }
    Ok(report)
}

/// `epoch,loss` rows, epochs counted from 1.
pub fn write_loss_csv<W: Write>(losses: &[f64], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "loss"])?;
    for (e, l) in losses.iter().enumerate() {
        w.write_record([(e + 1).to_string(), format!("{l:e}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0], SimilarityMode::RawInner, 1.0).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0], SimilarityMode::ExpInner, 1.0).unwrap(), 1.0);
        assert_eq!(similarity(&[3.0, 4.0], &[3.0, 4.0], SimilarityMode::RawInner, 1.0).unwrap(), 25.0);
        assert!(matches!(similarity(&[1.0], &[1.0, 2.0], SimilarityMode::RawInner, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn symmetric_sums_give_ln2() {
        let a = [1.0, 2.0];
        let p: [&[f64]; 1] = [&[0.5, 0.25]];
        let n: [&[f64]; 1] = [&[0.25, 0.375]];
        for mode in [SimilarityMode::RawInner, SimilarityMode::ExpInner] {
            let l = contrastive_loss(&a, &p, &n, mode, 0.5).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12, "{mode:?}: {l}");
        }
    }

    #[test]
    fn vanishing_negatives_and_domain() {
        let a = [1.0];
        let l = contrastive_loss(&a, &[&[1.0]], &[&[-1e4]], SimilarityMode::ExpInner, 1.0).unwrap();
        assert!(l >= 0.0 && l < 1e-12);
        let e = contrastive_loss(&a, &[&[-1.0]], &[&[0.5]], SimilarityMode::RawInner, 1.0).unwrap_err();
        assert!(matches!(e, Error::Numeric(_)));
        assert!(contrastive_loss(&a, &[], &[&[0.5]], SimilarityMode::RawInner, 1.0).is_err());
    }
}
