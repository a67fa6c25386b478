//! Supervised training, evaluation and the end-to-end / two-stage comparison.

use std::fmt::Write as _;
use std::io::Write;
use std::ops::Range;

use flowsr_tensor::{Adam, AdamConfig, Graph, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Stage};
use crate::contrastive::{pretrain_city, pretrain_neighborhood, PretrainConfig, PretrainReport};
use crate::features::FeatureMap;
use crate::grid::FlowGrid;
use crate::metrics::{score_frames, MetricsReport, DEFAULT_MAPE_MASK};
use crate::model::{Model, ModelConfig, Scalers, ENCODER_B, ENCODER_C};
use crate::params::ParamId;
use crate::scaler::ScalerParams;
use crate::split::DatasetSplit;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    TwoStage,
    EndToEnd,
}

/// Sign convention of the feature-differentiating loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffLossForm {
    /// `−ReLU(tanh(inner))`
    AsWritten,
    /// `+ReLU(tanh(inner))`
    PenalizeSimilarity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Mini-batches per epoch; `None` covers the whole training split.
    pub batches_per_epoch: Option<usize>,
    pub seed: u64,
    pub mode: TrainMode,
    pub freeze_encoders: bool,
    pub diff_loss_form: DiffLossForm,
    pub mape_mask: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            alpha: 1.0,
            lr: 1e-3,
            epochs: 50,
            batch: 16,
            batches_per_epoch: Some(8),
            seed: 0,
            mode: TrainMode::TwoStage,
            freeze_encoders: false,
            diff_loss_form: DiffLossForm::AsWritten,
            mape_mask: DEFAULT_MAPE_MASK,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("train lr must be positive");
        }
        if self.epochs == 0 || self.batch == 0 || self.batches_per_epoch == Some(0) {
            return bad("train epochs, batch and batches_per_epoch must be at least 1");
        }
        if !(self.mape_mask >= 0.0) {
            return bad("mape mask threshold must be non-negative");
        }
        Ok(())
    }
}

/// Paired grids and their chronological split.
#[derive(Clone, Copy, Debug)]
pub struct Dataset<'a> {
    pub coarse: &'a FlowGrid,
    pub fine: &'a FlowGrid,
    pub split: &'a DatasetSplit,
}

impl<'a> Dataset<'a> {
    pub fn new(coarse: &'a FlowGrid, fine: &'a FlowGrid, split: &'a DatasetSplit) -> Result<Self> {
        crate::grid::validate_constraint(coarse, fine, coarse.meta().upscale)?;
        if split.test.end != coarse.frames() {
            return Err(Error::Usage(format!("split covers {} frames, data has {}", split.test.end, coarse.frames())));
        }
        Ok(Self { coarse, fine, split })
    }

    pub fn upscale(&self) -> usize {
        self.fine.height() / self.coarse.height()
    }

    /// Scalers fitted on the training frames only.
    pub fn fit_scalers(&self) -> Result<Scalers> {
        let tr = self.split.train.clone();
        Ok(Scalers {
            coarse: ScalerParams::fit(self.coarse.frames_in(tr.clone()))?,
            fine: ScalerParams::fit(self.fine.frames_in(tr))?,
        })
    }
}

// ---------------------------------------------------------------- losses

/// `(α / 2HW) · Σ_ij (<h^b_ij, h^c_ij> + <h^c_ij, h^c_ij>)`
pub fn diff_inner<F: Real>(g: &mut Graph<F>, hb: Var, hc: Var, alpha: f64) -> Result<Var> {
    if g.shape(hb) != g.shape(hc) || g.shape(hb).len() != 3 {
        return Err(Error::Dimension(format!("h^b {:?} and h^c {:?} differ", g.shape(hb), g.shape(hc))));
    }
    let regions = g.shape(hb)[1] * g.shape(hb)[2];
    let cross = g.mul(hb, hc)?;
    let selfc = g.mul(hc, hc)?;
    let s = g.add(cross, selfc)?;
    let total = g.sum(s);
    Ok(g.scale(total, F::of(alpha / (2.0 * regions as f64))))
}

/// Feature-differentiating loss on graph values.
pub fn feature_diff_loss<F: Real>(g: &mut Graph<F>, hb: Var, hc: Var, alpha: f64, form: DiffLossForm) -> Result<Var> {
    let inner = diff_inner(g, hb, hc, alpha)?;
    let t = g.tanh(inner);
    let r = g.relu(t);
    Ok(match form {
        DiffLossForm::AsWritten => g.scale(r, -F::one()),
        DiffLossForm::PenalizeSimilarity => r,
    })
}

/// `MSE(scaled ŷ, scaled y) + λ·L_d`, with the prediction in raw units.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<F: Real>(
    g: &mut Graph<F>,
    y_pred: Var,
    y_true: Var,
    hb: Var,
    hc: Var,
    fine_scaler: &ScalerParams,
    cfg: &TrainConfig,
) -> Result<Var> {
    let d = g.sub(y_pred, y_true)?;
    let d = g.scale(d, F::of(1.0 / fine_scaler.range()));
    let sq = g.mul(d, d)?;
    let mse = g.mean(sq);
    if cfg.lambda == 0.0 {
        return Ok(mse);
    }
    let ld = feature_diff_loss(g, hb, hc, cfg.alpha, cfg.diff_loss_form)?;
    let ld = g.scale(ld, F::of(cfg.lambda));
    Ok(g.add(mse, ld)?)
}

/// Value-level [`feature_diff_loss`].
pub fn feature_diff_loss_values(hb: &FeatureMap, hc: &FeatureMap, alpha: f64, form: DiffLossForm) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let b = g.constant(Tensor::new(vec![hb.channels, hb.height, hb.width], hb.data.clone())?);
    let c = g.constant(Tensor::new(vec![hc.channels, hc.height, hc.width], hc.data.clone())?);
    let l = feature_diff_loss(&mut g, b, c, alpha, form)?;
    Ok(g.value(l).data()[0])
}

// ---------------------------------------------------------------- training

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_rmse: f64,
    pub val_residual: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    /// Parameters of the epoch with the lowest validation RMSE.
    pub model: Model<F>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn trainable<F: Real>(model: &Model<F>, cfg: &TrainConfig) -> Vec<ParamId> {
    let frozen = if cfg.freeze_encoders { model.ids(&[ENCODER_B, ENCODER_C]) } else { Vec::new() };
    model.all_ids().into_iter().filter(|id| !frozen.contains(id)).collect()
}

fn frame_loss<F: Real>(
    model: &Model<F>,
    data: &Dataset,
    t: usize,
    ids: &[ParamId],
    cfg: &TrainConfig,
    grads: Option<&mut [Tensor<F>]>,
) -> Result<(f64, Vec<f64>)> {
    let (h, w) = (data.coarse.height(), data.coarse.width());
    let scalers = model.scalers()?;
    let mut g = Graph::new();
    let b = model.store.bind(&mut g, if grads.is_some() { ids } else { &[] });
    let f = model.forward(&mut g, &b, data.coarse.frame(t), h, w)?;
    let shape = g.shape(f.fine).to_vec();
    let truth = g.constant(Tensor::new(shape, data.fine.frame(t).iter().map(|&v| F::of(v)).collect())?);
    let loss = total_loss(&mut g, f.fine, truth, f.hb, f.hc, &scalers.fine, cfg)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Training(format!("loss became non-finite on frame {t}")));
    }
    if let Some(acc) = grads {
        g.backward(loss)?;
        for (a, &id) in acc.iter_mut().zip(ids) {
            if let Some(gr) = g.grad(b.var(id)) {
                a.data_mut().iter_mut().zip(gr).for_each(|(x, &y)| *x += y);
            }
        }
    }
    let pred = g.value(f.fine).data().iter().map(|v| v.as_f64()).collect();
    Ok((value, pred))
}

/// Mean loss and metrics on the frames in `range`.
pub fn validate<F: Real>(model: &Model<F>, data: &Dataset, range: Range<usize>, cfg: &TrainConfig) -> Result<(f64, MetricsReport)> {
    let frames: Vec<usize> = range.collect();
    let mut total = 0.0;
    let report = score_frames(data.coarse, data.fine, &frames, cfg.mape_mask, |t| {
        let (l, pred) = frame_loss(model, data, t, &[], cfg, None)?;
        total += l;
        Ok(pred)
    })?;
    Ok((total / frames.len() as f64, report))
}

/// Metrics of `model` on `range`, predicting with [`Model::infer_fine`].
pub fn evaluate<F: Real>(model: &Model<F>, data: &Dataset, range: Range<usize>, mask: f64) -> Result<MetricsReport> {
    let (h, w) = (data.coarse.height(), data.coarse.width());
    let frames: Vec<usize> = range.collect();
    score_frames(data.coarse, data.fine, &frames, mask, |t| model.infer_fine(data.coarse.frame(t), h, w))
}

/// Minimises the total loss with Adam over shuffled mini-batches of
/// training frames, validating after every epoch.
pub fn train_model<F: Real>(mut model: Model<F>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    model.scalers()?;
    let train = data.split.train.clone();
    if train.is_empty() || data.split.val.is_empty() {
        return Err(Error::Usage("training needs non-empty train and validation ranges".into()));
    }
    let ids = trainable(&model, cfg);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = train.clone().collect();
    let batches = cfg.batches_per_epoch.unwrap_or_else(|| train.len().div_ceil(cfg.batch));
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model<F>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for _ in 0..batches {
            let mut grads: Vec<Tensor<F>> = ids.iter().map(|&id| Tensor::zeros(model.store.get(id).shape())).collect();
            let mut n = 0usize;
            while n < cfg.batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let t = order[cursor];
                cursor += 1;
                let (l, _) = frame_loss(&model, data, t, &ids, cfg, Some(&mut grads))?;
                loss_sum += l;
                n += 1;
            }
            seen += n;
            let inv = F::of(1.0 / n as f64);
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient in epoch {epoch}")));
            }
            model.store.adam_step(&mut opt, &ids, &grads)?;
        }
        let (val_loss, val) = validate(&model, data, data.split.val.clone(), cfg)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_rmse: val.rmse,
            val_residual: val.constraint_residual,
        });
        if best.as_ref().map_or(true, |(r, _, _)| val.rmse < *r) {
            best = Some((val.rmse, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, best_epoch, history })
}

/// Fresh model for `data` with fitted scalers.
pub fn initial_model<F: Real>(data: &Dataset, model_cfg: &ModelConfig, seed: u64) -> Result<Model<F>> {
    if model_cfg.upscale != data.upscale() {
        return Err(Error::Config(format!(
            "model upscale {} does not match the data's factor {}",
            model_cfg.upscale,
            data.upscale()
        )));
    }
    Ok(Model::new(*model_cfg, seed)?.with_scalers(data.fit_scalers()?))
}

/// Stage III: starts from the pretrained encoders and trains the model.
pub fn finetune<F: Real>(
    data: &Dataset,
    ckpt_b: &Checkpoint,
    ckpt_c: &Checkpoint,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    for (ck, want, seg) in [(ckpt_b, Stage::I, ENCODER_B), (ckpt_c, Stage::II, ENCODER_C)] {
        if ck.stage != want {
            return Err(Error::checkpoint(seg, format!("expected a stage {want:?} checkpoint, got stage {:?}", ck.stage)));
        }
    }
    let mut model = initial_model::<F>(data, model_cfg, cfg.seed)?;
    let scalers = model.scalers;
    model.load_checkpoint(ckpt_b, &[ENCODER_B])?;
    model.load_checkpoint(ckpt_c, &[ENCODER_C])?;
    model.scalers = scalers;
    train_model(model, data, cfg)
}

/// Same training from randomly initialised encoders, without pretraining.
pub fn end_to_end_train<F: Real>(data: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome<F>> {
    train_model(initial_model::<F>(data, model_cfg, cfg.seed)?, data, cfg)
}

/// Stage I on a fresh model seeded like Stage III; returns the report and
/// the encoder checkpoint.
pub fn run_stage_one<F: Real>(
    data: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
) -> Result<(PretrainReport, Checkpoint)> {
    let mut m = initial_model::<F>(data, model_cfg, cfg.seed)?;
    let r = pretrain_neighborhood(&mut m, data.coarse, data.split.train.clone(), cfg)?;
    Ok((r, m.to_checkpoint(Stage::I, &[ENCODER_B])?))
}

pub fn run_stage_two<F: Real>(
    data: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
) -> Result<(PretrainReport, Checkpoint)> {
    let mut m = initial_model::<F>(data, model_cfg, cfg.seed)?;
    let r = pretrain_city(&mut m, data.coarse, data.split.train.clone(), cfg)?;
    Ok((r, m.to_checkpoint(Stage::II, &[ENCODER_C])?))
}

/// One arm of the comparison.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub end_to_end: ArmResult,
    pub two_stage: ArmResult,
    pub stage_one: PretrainReport,
    pub stage_two: PretrainReport,
}

impl AblationReport {
    pub fn rows(&self) -> [(&'static str, &MetricsReport); 2] {
        [("End-to-End", &self.end_to_end.test), ("Two-stage", &self.two_stage.test)]
    }

    /// Two rows by RMSE, MAE and MAPE.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12}{:>10}{:>10}{:>10}\n", "", "RMSE", "MAE", "MAPE");
        for (name, r) in self.rows() {
            let _ = writeln!(s, "{:<12}{:>10.4}{:>10.4}{:>10.4}", name, r.rmse, r.mae, r.mape);
        }
        s
    }
}

/// Runs both arms with the same seed, data and batch order.
pub fn ablation<F: Real>(
    data: &Dataset,
    model_cfg: &ModelConfig,
    pre: &PretrainConfig,
    cfg: &TrainConfig,
) -> Result<AblationReport> {
    let test = data.split.test.clone();
    let e2e = end_to_end_train::<F>(data, model_cfg, &TrainConfig { mode: TrainMode::EndToEnd, ..*cfg })?;
    let (stage_one, ck_b) = run_stage_one::<F>(data, model_cfg, pre)?;
    let (stage_two, ck_c) = run_stage_two::<F>(data, model_cfg, pre)?;
    let two = finetune::<F>(data, &ck_b, &ck_c, model_cfg, &TrainConfig { mode: TrainMode::TwoStage, ..*cfg })?;
    let arm = |o: TrainOutcome<F>| -> Result<ArmResult> {
        Ok(ArmResult { test: evaluate(&o.model, data, test.clone(), cfg.mape_mask)?, history: o.history, best_epoch: o.best_epoch })
    };
    Ok(AblationReport { end_to_end: arm(e2e)?, two_stage: arm(two)?, stage_one, stage_two })
}

/// `epoch,train_loss,val_loss,val_rmse,val_residual` rows.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "train_loss", "val_loss", "val_rmse", "val_residual"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.val_rmse.to_string(),
            r.val_residual.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Element count of the trainable parameters, for logging.
pub fn trainable_count<F: Real>(model: &Model<F>, cfg: &TrainConfig) -> usize {
    trainable(model, cfg).iter().map(|&id| model.store.get(id).len()).sum()
}
