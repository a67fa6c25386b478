use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use flowsr_core::baselines::{baseline_ha, baseline_mean};
use flowsr_core::checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, Stage, COARSE_SCALER_SEGMENT, FINE_SCALER_SEGMENT, MODEL_CONFIG_SEGMENT,
};
use flowsr_core::config::RunConfig;
use flowsr_core::contrastive::write_loss_csv;
use flowsr_core::gradsuite::{degeneracy_checks, gradient_suite};
use flowsr_core::grid::{validate_constraint, FlowGrid, Granularity, GridMeta, Precision};
use flowsr_core::gridfile::{load_grid, save_grid};
use flowsr_core::metrics::{format_table, write_metrics_csv};
use flowsr_core::model::Model;
use flowsr_core::split::DatasetSplit;
use flowsr_core::synth::synth_generate;
use flowsr_core::train::{
    end_to_end_train, evaluate, finetune, run_stage_one, run_stage_two, write_history_csv, Dataset, TrainMode,
    TrainOutcome,
};
use flowsr_core::{Error, Result};
use flowsr_tensor::Real;

use crate::{Cli, Command, PrecisionArg, StageArg};

pub const COARSE_FILE: &str = "coarse.uflw";
pub const FINE_FILE: &str = "fine.uflw";
const INFER_TOLERANCE: f64 = 1e-4;

pub enum Outcome {
    Success,
    CheckFailed,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    println!("# effective config");
    print!("{}", cfg.to_toml());
    println!("# precision = {}", if matches!(cli.precision, PrecisionArg::F32) { 32 } else { 64 });
    std::fs::create_dir_all(&cli.out)?;
    let ctx = Ctx { cfg, out: cli.out };
    match (cli.command, cli.precision) {
        (Command::GenData, p) => ctx.gen_data(precision(p)),
        (Command::Gradcheck { inject_fault }, _) => ctx.gradcheck(inject_fault),
        (Command::Pretrain { stage, data }, PrecisionArg::F32) => ctx.pretrain::<f32>(stage, data.data),
        (Command::Pretrain { stage, data }, PrecisionArg::F64) => ctx.pretrain::<f64>(stage, data.data),
        (Command::Train { from_pretrained, end_to_end, data }, PrecisionArg::F32) => {
            ctx.train::<f32>(from_pretrained, end_to_end, data.data)
        }
        (Command::Train { from_pretrained, end_to_end, data }, PrecisionArg::F64) => {
            ctx.train::<f64>(from_pretrained, end_to_end, data.data)
        }
        (Command::Eval { model, data }, _) => {
            let ck = load_checkpoint(&model)?;
            match checkpoint_precision(&ck)? {
                Precision::F32 => ctx.eval(load_model::<f32>(&ck)?, data.data),
                Precision::F64 => ctx.eval(load_model::<f64>(&ck)?, data.data),
            }
        }
        (Command::Infer { model, input, output }, _) => {
            let ck = load_checkpoint(&model)?;
            let output = output.unwrap_or_else(|| ctx.out.join("inferred.uflw"));
            match checkpoint_precision(&ck)? {
                Precision::F32 => ctx.infer(load_model::<f32>(&ck)?, &input, &output),
                Precision::F64 => ctx.infer(load_model::<f64>(&ck)?, &input, &output),
            }
        }
    }
}

fn precision(p: PrecisionArg) -> Precision {
    match p {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    }
}

fn checkpoint_precision(ck: &Checkpoint) -> Result<Precision> {
    ck.segments
        .iter()
        .find(|s| ![MODEL_CONFIG_SEGMENT, COARSE_SCALER_SEGMENT, FINE_SCALER_SEGMENT].contains(&s.name.as_str()))
        .map(|s| s.precision)
        .ok_or_else(|| Error::checkpoint("header", "checkpoint holds no parameters"))
}

/// Full model rebuilt from a stage III checkpoint.
fn load_model<F: Real>(ck: &Checkpoint) -> Result<Model<F>> {
    if ck.stage != Stage::III {
        return Err(Error::checkpoint("header", format!("expected a trained model (stage III), got stage {:?}", ck.stage)));
    }
    let cfg = ck
        .model_config()?
        .ok_or_else(|| Error::checkpoint(MODEL_CONFIG_SEGMENT, "missing from checkpoint"))?;
    let mut m = Model::new(cfg, 0)?;
    m.load_checkpoint(ck, &[])?;
    if m.scalers.is_none() {
        return Err(Error::checkpoint(COARSE_SCALER_SEGMENT, "missing from checkpoint"));
    }
    Ok(m)
}

fn expect_granularity(g: &FlowGrid, want: Granularity, path: &Path) -> Result<()> {
    if g.meta().granularity != want {
        return Err(Error::Format {
            field: "granularity",
            msg: format!("{} holds a {:?} grid, expected {:?}", path.display(), g.meta().granularity, want),
        });
    }
    Ok(())
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

struct Loaded {
    coarse: FlowGrid,
    fine: FlowGrid,
    split: DatasetSplit,
}

impl Loaded {
    fn dataset(&self) -> Result<Dataset<'_>> {
        Dataset::new(&self.coarse, &self.fine, &self.split)
    }
}

impl Ctx {
    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load_data(&self, dir: Option<PathBuf>) -> Result<Loaded> {
        let dir = dir.unwrap_or_else(|| self.out.clone());
        let (cp, fp) = (dir.join(COARSE_FILE), dir.join(FINE_FILE));
        let coarse = load_grid(&cp)?;
        let fine = load_grid(&fp)?;
        expect_granularity(&coarse, Granularity::Coarse, &cp)?;
        expect_granularity(&fine, Granularity::Fine, &fp)?;
        let s = coarse.meta().upscale;
        if s != self.cfg.model.upscale {
            return Err(Error::Config(format!("data upscale {s} differs from model.upscale {}", self.cfg.model.upscale)));
        }
        if fine.frames() != coarse.frames() || fine.height() != coarse.height() * s || fine.width() != coarse.width() * s {
            return Err(Error::Format {
                field: "dims",
                msg: format!(
                    "fine grid {}x{}x{} does not pair with coarse grid {}x{}x{} at factor {s}",
                    fine.frames(),
                    fine.height(),
                    fine.width(),
                    coarse.frames(),
                    coarse.height(),
                    coarse.width()
                ),
            });
        }
        let residual = validate_constraint(&coarse, &fine, s)?;
        println!("data: {} frames, {}x{} -> {}x{}, residual {residual:e}", coarse.frames(), coarse.height(), coarse.width(), fine.height(), fine.width());
        let split = self.cfg.split_for(coarse.frames())?;
        Ok(Loaded { coarse, fine, split })
    }

    fn gen_data(&self, precision: Precision) -> Result<Outcome> {
        let (fine, coarse) = synth_generate(&self.cfg.synth(precision))?;
        let (cp, fp) = (self.out_file(COARSE_FILE), self.out_file(FINE_FILE));
        save_grid(&coarse, &cp)?;
        save_grid(&fine, &fp)?;
        let residual = validate_constraint(&coarse, &fine, coarse.meta().upscale)?;
        println!("wrote {} and {}", cp.display(), fp.display());
        println!("constraint residual: {residual}");
        Ok(if residual == 0.0 { Outcome::Success } else { Outcome::CheckFailed })
    }

    fn pretrain<F: Real>(&self, stage: StageArg, dir: Option<PathBuf>) -> Result<Outcome> {
        let loaded = self.load_data(dir)?;
        let data = loaded.dataset()?;
        let pre = self.cfg.pretrain();
        let (report, ck, tag) = match stage {
            StageArg::B => {
                let (r, c) = run_stage_one::<F>(&data, &self.cfg.model, &pre)?;
                (r, c, "b")
            }
            StageArg::C => {
                let (r, c) = run_stage_two::<F>(&data, &self.cfg.model, &pre)?;
                (r, c, "c")
            }
        };
        for (e, (l, s)) in report.losses.iter().zip(&report.skipped).enumerate() {
            println!("epoch {:>3}  loss {l:.6}  skipped {s}", e + 1);
        }
        let ckpt = self.out_file(&format!("encoder_{tag}.ckpt"));
        let csv = self.out_file(&format!("pretrain_{tag}_loss.csv"));
        save_checkpoint(&ck, &ckpt)?;
        write_loss_csv(&report.losses, BufWriter::new(File::create(&csv)?))?;
        println!("wrote {} (stage {:?}) and {}", ckpt.display(), ck.stage, csv.display());
        Ok(Outcome::Success)
    }

    fn train<F: Real>(&self, pretrained: Option<Vec<PathBuf>>, end_to_end: bool, dir: Option<PathBuf>) -> Result<Outcome> {
        let mut tcfg = self.cfg.train();
        let mode = match (&pretrained, end_to_end) {
            (Some(_), _) => TrainMode::TwoStage,
            (None, true) => TrainMode::EndToEnd,
            (None, false) => tcfg.mode,
        };
        tcfg.mode = mode;
        if mode == TrainMode::TwoStage && pretrained.is_none() {
            return Err(Error::Usage(
                "two-stage training needs --from-pretrained CKPT_B CKPT_C; pass --end-to-end to train from scratch".into(),
            ));
        }
        let loaded = self.load_data(dir)?;
        let data = loaded.dataset()?;
        let outcome: TrainOutcome<F> = match &pretrained {
            Some(paths) => {
                let ck_b = load_checkpoint(&paths[0])?;
                let ck_c = load_checkpoint(&paths[1])?;
                finetune(&data, &ck_b, &ck_c, &self.cfg.model, &tcfg)?
            }
            None => end_to_end_train(&data, &self.cfg.model, &tcfg)?,
        };
        for r in &outcome.history {
            println!(
                "epoch {:>3}  train {:.6}  val {:.6}  val_rmse {:.4}  residual {:.1e}",
                r.epoch, r.train_loss, r.val_loss, r.val_rmse, r.val_residual
            );
        }
        let ckpt = self.out_file("model.ckpt");
        let csv = self.out_file("train_history.csv");
        save_checkpoint(&outcome.model.to_checkpoint(Stage::III, &[])?, &ckpt)?;
        write_history_csv(&outcome.history, BufWriter::new(File::create(&csv)?))?;
        let val = evaluate(&outcome.model, &data, loaded.split.val.clone(), tcfg.mape_mask)?;
        println!("wrote {} and {}", ckpt.display(), csv.display());
        println!(
            "best epoch {}: val RMSE {:.4}  MAE {:.4}  MAPE {:.4}",
            outcome.best_epoch, val.rmse, val.mae, val.mape
        );
        Ok(Outcome::Success)
    }

    fn eval<F: Real>(&self, model: Model<F>, dir: Option<PathBuf>) -> Result<Outcome> {
        let loaded = self.load_data(dir)?;
        let data = loaded.dataset()?;
        if model.cfg.upscale != data.upscale() {
            return Err(Error::Usage(format!("model upscale {} does not match the data's {}", model.cfg.upscale, data.upscale())));
        }
        let (train, test) = (loaded.split.train.clone(), loaded.split.test.clone());
        let mask = self.cfg.eval.mape_mask;
        let rows = vec![
            ("MEAN".to_string(), baseline_mean(&loaded.coarse, &loaded.fine, test.clone(), mask)?),
            ("HA".to_string(), baseline_ha(&loaded.coarse, &loaded.fine, train, test.clone(), mask)?),
            ("model".to_string(), evaluate(&model, &data, test, mask)?),
        ];
        let csv = self.out_file("metrics.csv");
        write_metrics_csv(&rows, BufWriter::new(File::create(&csv)?))?;
        print!("{}", format_table(&rows));
        println!("wrote {}", csv.display());
        Ok(Outcome::Success)
    }

    fn infer<F: Real>(&self, model: Model<F>, input: &Path, output: &Path) -> Result<Outcome> {
        let coarse = load_grid(input)?;
        expect_granularity(&coarse, Granularity::Coarse, input)?;
        let s = model.cfg.upscale;
        let (h, w) = (coarse.height(), coarse.width());
        let mut values = Vec::with_capacity(coarse.frames() * h * w * s * s);
        for t in 0..coarse.frames() {
            values.extend(model.infer_fine(coarse.frame(t), h, w)?);
        }
        let meta = GridMeta { height: h * s, width: w * s, granularity: Granularity::Fine, upscale: s, ..*coarse.meta() };
        save_grid(&FlowGrid::new(meta, values)?, output)?;
        let written = load_grid(output)?;
        let residual = validate_constraint(&coarse, &written, s)?;
        println!("wrote {} ({} frames, {}x{})", output.display(), written.frames(), written.height(), written.width());
        println!("constraint residual: {residual:e}");
        if residual >= INFER_TOLERANCE {
            eprintln!("constraint residual {residual:e} exceeds {INFER_TOLERANCE:e}");
            return Ok(Outcome::CheckFailed);
        }
        Ok(Outcome::Success)
    }

    fn gradcheck(&self, inject_fault: bool) -> Result<Outcome> {
        let mut lines = gradient_suite(self.cfg.seed, inject_fault)?;
        lines.extend(degeneracy_checks(self.cfg.seed, 100)?);
        let mut failed = 0;
        for l in &lines {
            let verdict = if l.passed() { "PASS" } else { "FAIL" };
            failed += usize::from(!l.passed());
            println!("{verdict}  {:<44} max_rel_err {:.3e}  tol {:.0e}  coords {}", l.name, l.max_err, l.tolerance, l.coords);
        }
        println!("{} checks, {failed} failed", lines.len());
        Ok(if failed == 0 { Outcome::Success } else { Outcome::CheckFailed })
    }
}
