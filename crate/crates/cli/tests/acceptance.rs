//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p flowsr-cli --test acceptance`.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use flowsr_core::baselines::{baseline_ha, baseline_mean};
use flowsr_core::config::RunConfig;
use flowsr_core::contrastive::contrastive_loss;
use flowsr_core::features::{FeatureMap, Scale};
use flowsr_core::grid::{frame_residual, FlowGrid, Granularity, GridMeta, Precision};
use flowsr_core::gradsuite::{degeneracy_checks, gradient_suite};
use flowsr_core::metrics::error_metrics;
use flowsr_core::model::{Model, ModelConfig, Scalers};
use flowsr_core::sampler::{
    city_distance, city_frame_samples, neighborhood_distance, neighborhood_samples, topk_select, Candidate,
    SamplerConfig, ThresholdMode,
};
use flowsr_core::scaler::ScalerParams;
use flowsr_core::synth::{synth_generate, SynthConfig};
use flowsr_core::train::{
    ablation, evaluate, feature_diff_loss_values, finetune, run_stage_one, run_stage_two, Dataset, DiffLossForm,
};
use flowsr_tensor::{Real, SimilarityMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ------------------------------------------------------------ criterion 1

fn constraint_worst<F: Real>(frames: &[(usize, usize, Vec<f64>)]) -> f64 {
    let s = ScalerParams { min: 0.0, max: 256.0 };
    let mut worst = 0.0f64;
    for init in 0..20u64 {
        let up = 2 + (init as usize % 3);
        let cfg = ModelConfig { upscale: up, ..Default::default() };
        let mut m = Model::<F>::new(cfg, init).unwrap().with_scalers(Scalers { coarse: s, fine: s });
        m.randomize(1000 + init, 1.0);
        for (h, w, x) in frames {
            let y = m.infer_fine(x, *h, *w).unwrap();
            worst = worst.max(frame_residual(x, &y, *h, *w, up));
        }
    }
    worst
}

fn c1_constraint() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let frames: Vec<(usize, usize, Vec<f64>)> = (0..1000)
        .map(|_| {
            let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
            (h, w, (0..h * w).map(|_| rng.gen_range(0..=256) as f64).collect())
        })
        .collect();
    let start = Instant::now();
    let e32 = constraint_worst::<f32>(&frames);
    let e64 = constraint_worst::<f64>(&frames);
    let el = start.elapsed();
    verdict(
        e32 < 1e-4 && e64 < 1e-10 && el < Duration::from_secs(60),
        format!("20 inits x 1000 frames: f32 max {e32:.3e} (<1e-4), f64 max {e64:.3e} (<1e-10), {} (<60s)", secs(el)),
    )
}

// ------------------------------------------------------------ criterion 2

fn c2_gradients() -> Verdict {
    let start = Instant::now();
    let lines = gradient_suite(7, false).unwrap();
    let el = start.elapsed();
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed() || l.tolerance > 1e-4).map(|l| l.name.as_str()).collect();
    let required = [
        "matmul",
        "conv2d",
        "bilinear_sample",
        "deform_conv (input, offsets",
        "softmax",
        "layer_norm",
        "mha",
        "attention block",
        "encoder",
        "decoder",
        "contrastive loss (exp_inner)",
        "contrastive loss (raw_inner)",
        "feature_diff_loss",
        "total_loss",
    ];
    let missing: Vec<&str> = required.iter().copied().filter(|r| !lines.iter().any(|l| l.name.contains(r))).collect();
    let worst = lines.iter().map(|l| l.max_err).fold(0.0, f64::max);
    verdict(
        failed.is_empty() && missing.is_empty() && el < Duration::from_secs(120),
        format!(
            "{} checks, max rel err {worst:.2e} (<1e-4), failed {failed:?}, missing {missing:?}, {} (<120s)",
            lines.len(),
            secs(el)
        ),
    )
}

// ------------------------------------------------------------ criterion 3

fn c3_degeneracy() -> Verdict {
    let lines = degeneracy_checks(7, 100).unwrap();
    let ok = lines.len() == 2 && lines.iter().all(|l| l.max_err.is_finite() && l.max_err < 1e-6);
    let d: Vec<String> = lines.iter().map(|l| format!("{} {:.2e}", l.name, l.max_err)).collect();
    verdict(ok, format!("{} (<1e-6)", d.join("; ")))
}

// ------------------------------------------------------------ criterion 4

fn rand_grid(rng: &mut ChaCha8Rng, frames: usize, h: usize, w: usize, spd: usize, g: Granularity, up: usize) -> FlowGrid {
    let meta = GridMeta { frames, height: h, width: w, granularity: g, upscale: up, slots_per_day: spd, precision: Precision::F64 };
    FlowGrid::new(meta, (0..frames * h * w).map(|_| rng.gen_range(0.0..20.0)).collect()).unwrap()
}

fn fine_grid(rng: &mut ChaCha8Rng, frames: usize, ch: usize, cw: usize, s: usize, spd: usize) -> (FlowGrid, FlowGrid) {
    let fine = rand_grid(rng, frames, ch * s, cw * s, spd, Granularity::Fine, s);
    let mut coarse = vec![0.0; frames * ch * cw];
    for t in 0..frames {
        for y in 0..ch * s {
            for x in 0..cw * s {
                coarse[t * ch * cw + (y / s) * cw + x / s] += fine.frame(t)[y * cw * s + x];
            }
        }
    }
    let meta = GridMeta { height: ch, width: cw, granularity: Granularity::Coarse, ..*fine.meta() };
    (FlowGrid::new(meta, coarse).unwrap(), fine)
}

fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: Scale) -> FeatureMap {
    FeatureMap::new(c, h, w, scale, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn percentile_oracle(d: &[f64], p: f64) -> f64 {
    let mut v = d.to_vec();
    for i in 0..v.len() {
        for j in 0..v.len() - 1 - i {
            if v[j] > v[j + 1] {
                v.swap(j, j + 1);
            }
        }
    }
    let rank = ((p * v.len() as f64).ceil() as usize).max(1).min(v.len());
    v[rank - 1]
}

/// Repeated extraction of the best remaining index, lowest index on ties.
fn topk_oracle(values: &[f64], k: usize, ascending: bool) -> Vec<usize> {
    let mut taken = vec![false; values.len()];
    let mut out = Vec::new();
    while out.len() < k.min(values.len()) {
        let mut best: Option<usize> = None;
        for i in 0..values.len() {
            if taken[i] {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => if ascending { values[i] < values[b] } else { values[i] > values[b] },
            };
            if better {
                best = Some(i);
            }
        }
        taken[best.unwrap()] = true;
        out.push(best.unwrap());
    }
    out
}

/// `(positive ids, negative ids)` by explicit thresholding and Top-K.
fn classify_oracle(ids: &[usize], d: &[f64], thr: f64, k: usize) -> (Vec<usize>, Vec<usize>) {
    let pick = |want_pos: bool| {
        let (ii, dd): (Vec<usize>, Vec<f64>) =
            ids.iter().zip(d).filter(|(_, &x)| (x <= thr) == want_pos).map(|(&i, &x)| (i, x)).unzip();
        topk_oracle(&dd, k, true).into_iter().map(|j| ii[j]).collect::<Vec<usize>>()
    };
    (pick(true), pick(false))
}

fn metrics_oracle(pred: &[f64], truth: &[f64], mask: f64) -> (f64, f64, f64) {
    let (mut sq, mut ab, mut rel, mut nrel) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..pred.len() {
        let e = pred[i] - truth[i];
        sq += e * e;
        ab += if e < 0.0 { -e } else { e };
        if truth[i] > mask {
            rel += (if e < 0.0 { -e } else { e }) / truth[i];
            nrel += 1;
        }
    }
    let n = pred.len() as f64;
    ((sq / n).sqrt(), ab / n, if nrel == 0 { 0.0 } else { rel / nrel as f64 })
}

fn close(a: f64, b: f64) -> f64 {
    (a - b).abs()
}

fn c4_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut errs: Vec<(&str, f64, usize)> = Vec::new();
    let n = 100;

    let mut worst = 0.0f64;
    for _ in 0..n {
        let s = rng.gen_range(1..=4);
        let (ch, cw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let frames = rng.gen_range(1..=3);
        let (coarse, fine) = fine_grid(&mut rng, frames, ch, cw, s, 4);
        let got = fine.coarsen(s).unwrap();
        worst = worst.max(got.values().iter().zip(coarse.values()).map(|(a, b)| close(*a, *b)).fold(0.0, f64::max));
    }
    errs.push(("coarsen", worst, n));

    let mut worst = 0.0f64;
    for _ in 0..n {
        let (c, h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=5), rng.gen_range(1..=5));
        let m = rand_map(&mut rng, c, h, w, Scale::Neighborhood);
        let a = (rng.gen_range(0..h), rng.gen_range(0..w));
        let b = (rng.gen_range(0..h), rng.gen_range(0..w));
        let mut acc = 0.0;
        for k in 0..c {
            let d = m.data[k * h * w + a.0 * w + a.1] - m.data[k * h * w + b.0 * w + b.1];
            acc += d * d;
        }
        worst = worst.max(close(neighborhood_distance(&m, a, b).unwrap(), acc.sqrt()));
    }
    errs.push(("neighborhood distance", worst, n));

    let mut worst = 0.0f64;
    for _ in 0..n {
        let (c, h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=5), rng.gen_range(1..=5));
        let seq: Vec<FeatureMap> = (0..3).map(|_| rand_map(&mut rng, c, h, w, Scale::City)).collect();
        let r = (rng.gen_range(0..h), rng.gen_range(0..w));
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    let d = seq[0].data[k * h * w + i * w + j] - seq[2].data[k * h * w + i * w + j];
                    acc += d * d;
                }
            }
        }
        worst = worst.max(close(city_distance(&seq, r, 0, 2).unwrap(), (acc / (h * w) as f64).sqrt()));
    }
    errs.push(("city distance", worst, n));

    let mut mismatches = 0usize;
    for _ in 0..n {
        let (c, h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(2..=5));
        let m = rand_map(&mut rng, c, h, w, Scale::Neighborhood);
        let p = rng.gen_range(0.05..0.95);
        let cfg = SamplerConfig { k: rng.gen_range(1..=6), mode: ThresholdMode::Percentile(p), ..Default::default() };
        let sets = neighborhood_samples(&m, 0, &cfg);
        for a in 0..h * w {
            let ids: Vec<usize> = (0..h * w).filter(|&b| b != a).collect();
            let d: Vec<f64> = ids.iter().map(|&b| neighborhood_distance(&m, (a / w, a % w), (b / w, b % w)).unwrap()).collect();
            let thr = percentile_oracle(&d, p);
            let (pos, neg) = classify_oracle(&ids, &d, thr, cfg.k);
            let got = &sets[a];
            let gp: Vec<usize> = got.positives.iter().map(|c| c.id).collect();
            let gn: Vec<usize> = got.negatives.iter().map(|c| c.id).collect();
            if gp != pos || gn != neg || close(got.threshold, thr) > 1e-12 {
                mismatches += 1;
            }
        }
    }
    errs.push(("neighborhood classification", mismatches as f64, n));

    let mut mismatches = 0usize;
    for _ in 0..n {
        let m = rng.gen_range(2..=30);
        let t = rng.gen_range(0..m);
        let ids: Vec<usize> = (0..m).filter(|&u| u != t).collect();
        let d: Vec<f64> = ids.iter().map(|_| (rng.gen_range(0..40) as f64) / 8.0).collect();
        let absolute = rng.gen_bool(0.5);
        let theta = rng.gen_range(0.0..5.0);
        let mode = if absolute { ThresholdMode::Absolute } else { ThresholdMode::Percentile(0.2) };
        let cfg = SamplerConfig { theta, k: rng.gen_range(1..=8), mode, ..Default::default() };
        let cands: Vec<Candidate> = ids.iter().zip(&d).map(|(&id, &distance)| Candidate { id, distance }).collect();
        let got = city_frame_samples(t, &cands, &cfg);
        let thr = if absolute { theta } else { percentile_oracle(&d, 0.2) };
        let (pos, neg) = classify_oracle(&ids, &d, thr, cfg.k);
        let gp: Vec<usize> = got.positives.iter().map(|c| c.id).collect();
        let gn: Vec<usize> = got.negatives.iter().map(|c| c.id).collect();
        let short = pos.len() < cfg.k || neg.len() < cfg.k;
        if gp != pos || gn != neg || got.short_set != short {
            mismatches += 1;
        }
    }
    errs.push(("city classification", mismatches as f64, n));

    let mut mismatches = 0usize;
    for _ in 0..n {
        let len = rng.gen_range(0..40);
        let v: Vec<f64> = (0..len).map(|_| rng.gen_range(0..10) as f64).collect();
        let k = rng.gen_range(0..=45);
        let asc = rng.gen_bool(0.5);
        if topk_select(&v, k, asc) != topk_oracle(&v, k, asc) {
            mismatches += 1;
        }
    }
    errs.push(("top-k", mismatches as f64, n));

    let mut worst = 0.0f64;
    for _ in 0..n {
        let c = rng.gen_range(1..=6);
        let tau = rng.gen_range(0.2..2.0);
        let raw = rng.gen_bool(0.5);
        let lo = if raw { 0.0 } else { -1.0 };
        let mut vec = || (0..c).map(|_| rng.gen_range(lo..1.0)).collect::<Vec<f64>>();
        let anchor = vec();
        let pos: Vec<Vec<f64>> = (0..1 + c % 3).map(|_| vec()).collect();
        let neg: Vec<Vec<f64>> = (0..1 + c % 4).map(|_| vec()).collect();
        let inner = |v: &Vec<f64>| {
            let mut s = 0.0;
            for k in 0..c {
                s += anchor[k] * v[k];
            }
            s
        };
        let sim = |v: &Vec<f64>| if raw { inner(v) } else { (inner(v) / tau).exp() };
        let (mut sp, mut sn) = (0.0, 0.0);
        for p in &pos {
            sp += sim(p);
        }
        for q in &neg {
            sn += sim(q);
        }
        let oracle = -(sp / (sp + sn)).ln();
        let pr: Vec<&[f64]> = pos.iter().map(|v| v.as_slice()).collect();
        let nr: Vec<&[f64]> = neg.iter().map(|v| v.as_slice()).collect();
        let mode = if raw { SimilarityMode::RawInner } else { SimilarityMode::ExpInner };
        worst = worst.max(close(contrastive_loss(&anchor, &pr, &nr, mode, tau).unwrap(), oracle));
    }
    errs.push(("contrastive loss", worst, n));

    let mut worst = 0.0f64;
    for _ in 0..n {
        let (c, h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let hb = rand_map(&mut rng, c, h, w, Scale::Neighborhood);
        let hc = rand_map(&mut rng, c, h, w, Scale::City);
        let alpha = rng.gen_range(0.1..4.0);
        let mut acc = 0.0;
        for i in 0..c * h * w {
            acc += hb.data[i] * hc.data[i] + hc.data[i] * hc.data[i];
        }
        let t = (alpha * acc / (2.0 * (h * w) as f64)).tanh();
        let oracle = -(if t > 0.0 { t } else { 0.0 });
        worst = worst.max(close(feature_diff_loss_values(&hb, &hc, alpha, DiffLossForm::AsWritten).unwrap(), oracle));
    }
    errs.push(("L_d", worst, n));

    let mut worst = 0.0f64;
    for _ in 0..n {
        let len = rng.gen_range(1..50);
        let truth: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..5.0)).collect();
        let pred: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..5.0)).collect();
        let mask = rng.gen_range(0.0..6.0);
        let (r, m, p) = error_metrics(&pred, &truth, mask).unwrap();
        let (ro, mo, po) = metrics_oracle(&pred, &truth, mask);
        worst = worst.max(close(r, ro)).max(close(m, mo)).max(close(p, po));
    }
    errs.push(("metrics", worst, n));

    let (mut wm, mut wh) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let s = rng.gen_range(1..=3);
        let (ch, cw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let spd = rng.gen_range(1..=4);
        let frames = rng.gen_range(2..=12);
        let (coarse, fine) = fine_grid(&mut rng, frames, ch, cw, s, spd);
        let cut = rng.gen_range(1..frames);
        let (fh, fw) = (ch * s, cw * s);
        let mask = 1.0;

        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for t in cut..frames {
            for y in 0..fh {
                for x in 0..fw {
                    pred.push(coarse.frame(t)[(y / s) * cw + x / s] / (s * s) as f64);
                    truth.push(fine.frame(t)[y * fw + x]);
                }
            }
        }
        let (r, m, p) = metrics_oracle(&pred, &truth, mask);
        let got = baseline_mean(&coarse, &fine, cut..frames, mask).unwrap();
        wm = wm.max(close(got.rmse, r)).max(close(got.mae, m)).max(close(got.mape, p));

        let mut pred = Vec::new();
        for t in cut..frames {
            let slot = t % spd;
            let same: Vec<usize> = (0..cut).filter(|u| u % spd == slot).collect();
            let pool: Vec<usize> = if same.is_empty() { (0..cut).collect() } else { same };
            for k in 0..fh * fw {
                let mut acc = 0.0;
                for &u in &pool {
                    acc += fine.frame(u)[k];
                }
                pred.push(acc / pool.len() as f64);
            }
        }
        let (r, m, p) = metrics_oracle(&pred, &truth, mask);
        let got = baseline_ha(&coarse, &fine, 0..cut, cut..frames, mask).unwrap();
        wh = wh.max(close(got.rmse, r)).max(close(got.mae, m)).max(close(got.mape, p));
    }
    errs.push(("MEAN", wm, n));
    errs.push(("HA", wh, n));

    let ok = errs.iter().all(|(_, e, _)| *e <= 1e-6);
    let d: Vec<String> = errs.iter().map(|(name, e, n)| format!("{name} {e:.1e}/{n}")).collect();
    verdict(ok, format!("max |diff| (mismatch counts for discrete ones) per oracle, tol 1e-6: {}", d.join(", ")))
}

// ------------------------------------------------------ criteria 5 to 7

fn c5_to_c7() -> [Verdict; 3] {
    let cfg = RunConfig::default();
    let (fine, coarse) = synth_generate(&cfg.synth(Precision::F32)).unwrap();
    let split = cfg.split_for(coarse.frames()).unwrap();
    let data = Dataset::new(&coarse, &fine, &split).unwrap();
    let (pre, tcfg) = (cfg.pretrain(), cfg.train());

    let start = Instant::now();
    let (r1, ck_b) = run_stage_one::<f32>(&data, &cfg.model, &pre).unwrap();
    let (r2, ck_c) = run_stage_two::<f32>(&data, &cfg.model, &pre).unwrap();
    let out = finetune::<f32>(&data, &ck_b, &ck_c, &cfg.model, &tcfg).unwrap();
    let el = start.elapsed();
    let test = evaluate(&out.model, &data, split.test.clone(), tcfg.mape_mask).unwrap();
    let mean = baseline_mean(&coarse, &fine, split.test.clone(), tcfg.mape_mask).unwrap();
    let c5 = verdict(
        tcfg.epochs <= 50 && test.rmse <= 0.8 * mean.rmse && el < Duration::from_secs(600),
        format!(
            "test RMSE {:.4} vs MEAN {:.4} (ratio {:.3}, need <=0.8), {} fine-tune epochs, {} (<600s)",
            test.rmse,
            mean.rmse,
            test.rmse / mean.rmse,
            tcfg.epochs,
            secs(el)
        ),
    );

    let rep = ablation::<f32>(&data, &cfg.model, &pre, &tcfg).unwrap();
    print!("{}", rep.table());
    let (e1, t1) = (rep.end_to_end.history[0].val_loss, rep.two_stage.history[0].val_loss);
    let c6 = verdict(
        t1 < e1 && rep.rows().len() == 2,
        format!("epoch-1 val loss: two-stage {t1:.5} vs end-to-end {e1:.5}; final test RMSE reported above"),
    );

    let ok = |l: &[f64]| l.len() >= 10 && l[9] < l[0];
    let c7 = verdict(
        ok(&r1.losses) && ok(&r2.losses),
        format!(
            "stage I {:.4} -> {:.4}, stage II {:.4} -> {:.4} (epoch 1 -> 10)",
            r1.losses[0],
            r1.losses.get(9).copied().unwrap_or(f64::NAN),
            r2.losses[0],
            r2.losses.get(9).copied().unwrap_or(f64::NAN)
        ),
    );
    [c5, c6, c7]
}

// ------------------------------------------------------------ criterion 8

fn c8_ha_exact() -> Verdict {
    let synth = SynthConfig { noise: 0.0, precision: Precision::F64, ..Default::default() };
    let (fine, coarse) = synth_generate(&synth).unwrap();
    let cfg = RunConfig::default();
    let split = cfg.split_for(fine.frames()).unwrap();
    let r = baseline_ha(&coarse, &fine, split.train.clone(), split.test.clone(), cfg.eval.mape_mask).unwrap();
    verdict(
        r.rmse < 1e-6 && r.mae < 1e-6 && r.mape < 1e-6,
        format!("noiseless {}x{} x {} frames: RMSE {:.1e} MAE {:.1e} MAPE {:.1e} (<1e-6)", fine.height(), fine.width(), fine.frames(), r.rmse, r.mae, r.mape),
    )
}

// ------------------------------------------------------------ CLI helpers

const SMALL: &str = r#"
seed = 5

[data]
height = 4
width = 4
frames = 96
slots_per_day = 24
blobs = 3

[model]
channels = 8
heads = 2
city_blocks = 1

[pretrain]
epochs = 2
batch = 4
city_anchors = 24

[train]
epochs = 2
batch = 4
batches_per_epoch = 2
"#;

fn flowsr(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_flowsr")).arg("--config").arg(&cfg).arg("--out").arg(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs every command once in `dir`; returns the first failing step.
fn pipeline(dir: &Path, precision: &str) -> Result<(), String> {
    let d = |n: &str| dir.join(n);
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data".into()],
        vec!["pretrain".into(), "--stage".into(), "b".into()],
        vec!["pretrain".into(), "--stage".into(), "c".into()],
        vec![
            "train".into(),
            "--from-pretrained".into(),
            s(&d("encoder_b.ckpt")).into(),
            s(&d("encoder_c.ckpt")).into(),
        ],
        vec!["eval".into(), "--model".into(), s(&d("model.ckpt")).into()],
        vec!["infer".into(), "--model".into(), s(&d("model.ckpt")).into(), "--input".into(), s(&d("coarse.uflw")).into()],
    ];
    for step in steps {
        let mut args: Vec<&str> = vec!["--precision", precision];
        args.extend(step.iter().map(String::as_str));
        let o = flowsr(dir, SMALL, &args);
        if !o.status.success() {
            return Err(format!("{step:?} exited {}: {}", code(&o), stderr(&o).trim()));
        }
    }
    std::fs::rename(d("model.ckpt"), d("two_stage.ckpt")).unwrap();
    std::fs::rename(d("train_history.csv"), d("two_stage_history.csv")).unwrap();
    let o = flowsr(dir, SMALL, &["--precision", precision, "train", "--end-to-end"]);
    if !o.status.success() {
        return Err(format!("end-to-end train exited {}: {}", code(&o), stderr(&o).trim()));
    }
    Ok(())
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

// ------------------------------------------------------------ criterion 9

fn c9_determinism(root: &Path) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for precision in ["32", "64"] {
        let (a, b) = (root.join(format!("a{precision}")), root.join(format!("b{precision}")));
        for d in [&a, &b] {
            std::fs::create_dir_all(d).unwrap();
            if let Err(e) = pipeline(d, precision) {
                return verdict(false, format!("pipeline failed at {precision}-bit: {e}"));
            }
        }
        let (la, lb) = (listing(&a), listing(&b));
        let names: Vec<&str> = la.iter().map(|(n, _)| n.as_str()).collect();
        let differ: Vec<&str> =
            la.iter().zip(&lb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
        let same = la.len() == lb.len() && differ.is_empty();
        ok &= same && la.iter().any(|(n, _)| n.ends_with(".ckpt")) && la.iter().any(|(n, _)| n == "metrics.csv");
        notes.push(format!("{precision}-bit: {} files identical={same} {differ:?}", names.len()));
    }
    verdict(ok, format!("two runs per precision, byte comparison of grids, checkpoints, CSVs, inferred grid: {}", notes.join("; ")))
}

// ------------------------------------------------------------ criterion 10

fn c10_formats(root: &Path) -> Verdict {
    let base = root.join("a32");
    let model = base.join("two_stage.ckpt");
    let coarse = std::fs::read(base.join("coarse.uflw")).unwrap();
    let fine = std::fs::read(base.join("fine.uflw")).unwrap();
    let ckpt = std::fs::read(&model).unwrap();

    let bad = root.join("bad");
    std::fs::create_dir_all(&bad).unwrap();
    let write = |name: &str, bytes: &[u8]| -> PathBuf {
        let p = bad.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    };
    let data_dir = |name: &str, c: &[u8], f: &[u8]| -> PathBuf {
        let d = bad.join(name);
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(d.join("coarse.uflw"), c).unwrap();
        std::fs::write(d.join("fine.uflw"), f).unwrap();
        d
    };

    let mut magic = coarse.clone();
    magic[..4].copy_from_slice(b"XXXX");
    let truncated = &coarse[..coarse.len() - 5];
    let short_header = &coarse[..12];
    let small = SMALL.replace("height = 4", "height = 2");
    let other = root.join("other");
    std::fs::create_dir_all(&other).unwrap();
    let o = flowsr(&other, &small, &["gen-data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let other_fine = std::fs::read(other.join("fine.uflw")).unwrap();

    let mut ck_magic = ckpt.clone();
    ck_magic[..4].copy_from_slice(b"JUNK");
    let kernel5 = root.join("kernel5");
    std::fs::create_dir_all(&kernel5).unwrap();
    let k5 = SMALL.replace("[model]", "[model]\nkernel = 5");
    for args in [&["gen-data"][..], &["pretrain", "--stage", "b"][..]] {
        let o = flowsr(&kernel5, &k5, args);
        assert!(o.status.success(), "{}", stderr(&o));
    }

    let m = s(&model).to_string();
    let eval_on = |d: &Path| vec!["eval".to_string(), "--model".into(), m.clone(), "--data".into(), s(d).into()];
    let infer_on = |p: &Path| vec!["infer".to_string(), "--model".into(), m.clone(), "--input".into(), s(p).into()];
    let eval_model = |p: &Path| vec!["eval".to_string(), "--model".into(), s(p).into(), "--data".into(), s(&base).into()];

    let cases: Vec<(&str, Vec<String>, i32, String)> = vec![
        ("grid bad magic", eval_on(&data_dir("magic", &magic, &fine)), 2, "bad magic".into()),
        ("grid truncated payload", eval_on(&data_dir("trunc", truncated, &fine)), 2, "truncated".into()),
        ("grid truncated header", infer_on(&write("short.uflw", short_header)), 2, "truncated".into()),
        ("grid dims mismatch", eval_on(&data_dir("dims", &coarse, &other_fine)), 2, "dims".into()),
        ("checkpoint bad magic", eval_model(&write("magic.ckpt", &ck_magic)), 2, "bad magic".into()),
        ("checkpoint truncated", eval_model(&write("trunc.ckpt", &ckpt[..ckpt.len() / 2])), 2, "truncated".into()),
        (
            "checkpoint shape mismatch",
            vec![
                "train".into(),
                "--from-pretrained".into(),
                s(&kernel5.join("encoder_b.ckpt")).into(),
                s(&base.join("encoder_c.ckpt")).into(),
                "--data".into(),
                s(&base).into(),
            ],
            2,
            "encoder_b.".into(),
        ),
        ("missing grid file", infer_on(&bad.join("nope.uflw")), 1, String::new()),
        ("missing checkpoint", eval_model(&bad.join("nope.ckpt")), 1, String::new()),
    ];

    let mut failures = Vec::new();
    let mut seen = Vec::new();
    for (name, args, want, needle) in cases {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = flowsr(&bad, SMALL, &refs);
        let (c, err) = (code(&o), stderr(&o));
        let crashed = c == 101 || c < 0 || err.contains("panicked");
        seen.push(format!("{name}={c}"));
        if crashed || c != want || !err.contains(&needle) {
            failures.push(format!("{name}: exit {c}, stderr {:?}", err.trim()));
        }
    }
    verdict(failures.is_empty(), format!("{}; failures {failures:?}", seen.join(" ")))
}

fn main() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut run = |name: &'static str, v: Verdict| {
        println!("{}  {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };
    run("1 structural constraint", c1_constraint());
    run("2 gradient suite", c2_gradients());
    run("3 degeneracy", c3_degeneracy());
    run("4 oracle equivalence", c4_oracles());
    let [c5, c6, c7] = c5_to_c7();
    run("5 desk-scale learning", c5);
    run("6 ablation parity", c6);
    run("7 contrastive sanity", c7);
    run("8 HA exactness", c8_ha_exact());
    run("9 determinism", c9_determinism(tmp.path()));
    run("10 format robustness", c10_formats(tmp.path()));
    let failed = results.iter().filter(|(_, v)| !v.pass).count();
    println!("{} criteria, {failed} failed, {}", results.len(), secs(start.elapsed()));
    if failed > 0 {
        std::process::exit(1);
    }
}
