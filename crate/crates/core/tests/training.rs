use flowsr_core::baselines::{baseline_ha, baseline_mean, HistoricalAverage};
use flowsr_core::checkpoint::Stage;
use flowsr_core::features::{FeatureMap, Scale};
use flowsr_core::grid::FlowGrid;
use flowsr_core::metrics::{error_metrics, score_frames};
use flowsr_core::model::{ModelConfig, ENCODER_B, ENCODER_C};
use flowsr_core::split::DatasetSplit;
use flowsr_core::synth::{synth_generate, SynthConfig};
use flowsr_core::train::*;
use flowsr_core::Error;
use flowsr_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ld_oracle(hb: &FeatureMap, hc: &FeatureMap, alpha: f64) -> f64 {
    let (c, h, w) = (hb.channels, hb.height, hb.width);
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let at = (k * h + i) * w + j;
                s += hb.data[at] * hc.data[at] + hc.data[at] * hc.data[at];
            }
        }
    }
    -(alpha / (2.0 * (h * w) as f64) * s).tanh().max(0.0)
}

fn random_fm(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: Scale, lo: f64) -> FeatureMap {
    FeatureMap::new(c, h, w, scale, (0..c * h * w).map(|_| rng.gen_range(lo..1.0)).collect()).unwrap()
}

#[test]
fn diff_loss_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..4));
        let hb = random_fm(&mut rng, c, h, w, Scale::Neighborhood, 0.0);
        let hc = random_fm(&mut rng, c, h, w, Scale::City, -1.0);
        let alpha = rng.gen_range(0.1..3.0);
        let want = ld_oracle(&hb, &hc, alpha);
        let got = feature_diff_loss_values(&hb, &hc, alpha, DiffLossForm::AsWritten).unwrap();
        assert!((got - want).abs() < 1e-12);
        let flipped = feature_diff_loss_values(&hb, &hc, alpha, DiffLossForm::PenalizeSimilarity).unwrap();
        assert_eq!(flipped, -got);
        assert!((-1.0..=0.0).contains(&got));
    }
}

fn loss_value(pred: &[f64], truth: &[f64], hb: &FeatureMap, hc: &FeatureMap, lambda: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let shape = vec![1, 2, pred.len() / 2];
    let p = g.constant(Tensor::new(shape.clone(), pred.to_vec()).unwrap());
    let t = g.constant(Tensor::new(shape, truth.to_vec()).unwrap());
    let b = g.constant(Tensor::new(vec![hb.channels, hb.height, hb.width], hb.data.clone()).unwrap());
    let c = g.constant(Tensor::new(vec![hc.channels, hc.height, hc.width], hc.data.clone()).unwrap());
    let sc = flowsr_core::scaler::ScalerParams { min: 0.0, max: 10.0 };
    let cfg = TrainConfig { lambda, ..Default::default() };
    let l = total_loss(&mut g, p, t, b, c, &sc, &cfg).unwrap();
    g.value(l).data()[0]
}

#[test]
fn total_loss_is_scaled_mse_plus_weighted_diff() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let pred: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..10.0)).collect();
        let truth: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..10.0)).collect();
        let hb = random_fm(&mut rng, 3, 2, 2, Scale::Neighborhood, 0.0);
        let hc = random_fm(&mut rng, 3, 2, 2, Scale::City, -1.0);
        let mse = pred.iter().zip(&truth).map(|(p, t)| ((p - t) / 10.0).powi(2)).sum::<f64>() / 8.0;
        assert!((loss_value(&pred, &truth, &hb, &hc, 0.0) - mse).abs() < 1e-12);
        assert_eq!(loss_value(&truth, &truth, &hb, &hc, 0.0), 0.0);
        let ld = ld_oracle(&hb, &hc, 1.0);
        let (l1, l2) = (loss_value(&pred, &truth, &hb, &hc, 0.3), loss_value(&pred, &truth, &hb, &hc, 0.6));
        assert!((l1 - (mse + 0.3 * ld)).abs() < 1e-12);
        assert!(((l2 - l1) - (l1 - mse)).abs() < 1e-12);
    }
}

fn loop_metrics(pred: &[f64], truth: &[f64], mask: f64) -> (f64, f64, f64) {
    let (mut sq, mut ab, mut rel, mut nrel) = (0.0, 0.0, 0.0, 0);
    for k in 0..pred.len() {
        let e = pred[k] - truth[k];
        sq += e * e;
        ab += e.abs();
        if truth[k] > mask {
            rel += e.abs() / truth[k];
            nrel += 1;
        }
    }
    let n = pred.len() as f64;
    ((sq / n).sqrt(), ab / n, if nrel == 0 { 0.0 } else { rel / nrel as f64 })
}

#[test]
fn metrics_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.gen_range(1..40);
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..20.0)).collect();
        let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(0..20) as f64).collect();
        let (r, m, p) = error_metrics(&pred, &truth, 1.0).unwrap();
        let (ro, mo, po) = loop_metrics(&pred, &truth, 1.0);
        assert!((r - ro).abs() < 1e-9 && (m - mo).abs() < 1e-9 && (p - po).abs() < 1e-9);
    }
    assert_eq!(error_metrics(&[0.5], &[0.0], 1.0).unwrap().2, 0.0);
    assert!(error_metrics(&[], &[], 1.0).is_err());
}

fn small(noise: f64, frames: usize) -> (FlowGrid, FlowGrid, DatasetSplit) {
    let cfg = SynthConfig { height: 3, width: 3, frames, slots_per_day: 8, blobs: 2, noise, ..Default::default() };
    let (fine, coarse) = synth_generate(&cfg).unwrap();
    let split = DatasetSplit::chronological(frames, 0.5, 0.2).unwrap();
    (coarse, fine, split)
}

#[test]
fn baselines_match_loop_oracles() {
    let (coarse, fine, split) = small(1.0, 64);
    let s = 2;
    let (ch, cw) = (3, 3);
    let mut mean_pred = Vec::new();
    let mut truth = Vec::new();
    for t in split.test.clone() {
        let c = coarse.frame(t);
        for y in 0..ch * s {
            for x in 0..cw * s {
                mean_pred.push(c[(y / s) * cw + x / s] / (s * s) as f64);
            }
        }
        truth.extend_from_slice(fine.frame(t));
    }
    let want = loop_metrics(&mean_pred, &truth, 1.0);
    let got = baseline_mean(&coarse, &fine, split.test.clone(), 1.0).unwrap();
    assert!((got.rmse - want.0).abs() < 1e-9 && (got.mae - want.1).abs() < 1e-9 && (got.mape - want.2).abs() < 1e-9);
    assert!(got.constraint_residual < 1e-12);

    let mut ha_pred = Vec::new();
    for t in split.test.clone() {
        let slot = t % 8;
        let mut acc = vec![0.0; 36];
        let mut n = 0.0;
        for u in split.train.clone() {
            if u % 8 == slot {
                for k in 0..36 {
                    acc[k] += fine.frame(u)[k];
                }
                n += 1.0;
            }
        }
        ha_pred.extend(acc.iter().map(|v| v / n));
    }
    let want = loop_metrics(&ha_pred, &truth, 1.0);
    let got = baseline_ha(&coarse, &fine, split.train.clone(), split.test.clone(), 1.0).unwrap();
    assert!((got.rmse - want.0).abs() < 1e-9 && (got.mae - want.1).abs() < 1e-9 && (got.mape - want.2).abs() < 1e-9);
}

#[test]
fn historical_average_is_exact_on_periodic_data() {
    let (coarse, fine, split) = small(0.0, 64);
    let r = baseline_ha(&coarse, &fine, split.train.clone(), split.test.clone(), 1.0).unwrap();
    assert!(r.rmse < 1e-6 && r.mae < 1e-6 && r.mape < 1e-6, "{r:?}");
    let ha = HistoricalAverage::fit(&fine, 0..3).unwrap();
    assert!(ha.slots[5].is_none());
    assert_eq!(ha.predict(5), ha.global.as_slice());
    assert!(HistoricalAverage::fit(&fine, 0..0).is_err());
}

#[test]
fn tiny_finetune_bookkeeping() {
    let (coarse, fine, split) = small(1.0, 48);
    let data = Dataset::new(&coarse, &fine, &split).unwrap();
    let mcfg = ModelConfig { channels: 4, heads: 2, city_blocks: 1, neighborhood_layers: 1, ..Default::default() };
    let cfg = TrainConfig { epochs: 3, batch: 4, batches_per_epoch: Some(2), ..Default::default() };
    let out = end_to_end_train::<f64>(&data, &mcfg, &cfg).unwrap();
    assert_eq!(out.history.len(), 3);
    assert!(out.history.iter().enumerate().all(|(k, r)| r.epoch == k + 1));
    let best = out.history.iter().min_by(|a, b| a.val_rmse.partial_cmp(&b.val_rmse).unwrap()).unwrap();
    assert_eq!(out.best_epoch, best.epoch);
    assert!(out.history.iter().all(|r| r.val_residual < 1e-9));
    let test = evaluate(&out.model, &data, split.test.clone(), 1.0).unwrap();
    assert!(test.constraint_residual < 1e-9);
    assert_eq!(test.n_frames, split.test.len());

    let again = end_to_end_train::<f64>(&data, &mcfg, &cfg).unwrap();
    assert_eq!(out.history, again.history);

    let mut csv = Vec::new();
    write_history_csv(&out.history, &mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);

    let frozen = TrainConfig { freeze_encoders: true, ..cfg };
    assert!(trainable_count(&out.model, &frozen) < trainable_count(&out.model, &cfg));
}

#[test]
fn finetune_checks_checkpoint_stages() {
    let (coarse, fine, split) = small(1.0, 48);
    let data = Dataset::new(&coarse, &fine, &split).unwrap();
    let mcfg = ModelConfig { channels: 4, heads: 2, city_blocks: 1, ..Default::default() };
    let m = initial_model::<f64>(&data, &mcfg, 0).unwrap();
    let b = m.to_checkpoint(Stage::I, &[ENCODER_B]).unwrap();
    let c = m.to_checkpoint(Stage::II, &[ENCODER_C]).unwrap();
    let cfg = TrainConfig { epochs: 1, batch: 2, batches_per_epoch: Some(1), ..Default::default() };
    assert!(finetune::<f64>(&data, &b, &c, &mcfg, &cfg).is_ok());
    assert!(matches!(finetune::<f64>(&data, &c, &b, &mcfg, &cfg), Err(Error::Checkpoint { .. })));
    let wrong = ModelConfig { upscale: 3, ..mcfg };
    assert!(initial_model::<f64>(&data, &wrong, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scoring_ignores_frame_order(seed in any::<u64>()) {
        let (coarse, fine, _) = small(1.0, 24);
        let mut frames: Vec<usize> = (0..24).collect();
        let a = score_frames(&coarse, &fine, &frames, 1.0, |t| Ok(fine.frame((t + 1) % 24).to_vec())).unwrap();
        frames.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = score_frames(&coarse, &fine, &frames, 1.0, |t| Ok(fine.frame((t + 1) % 24).to_vec())).unwrap();
        prop_assert!((a.rmse - b.rmse).abs() < 1e-12);
        prop_assert!((a.mae - b.mae).abs() < 1e-12);
        prop_assert!((a.mape - b.mape).abs() < 1e-12);
        prop_assert_eq!(a.constraint_residual, b.constraint_residual);
    }

    #[test]
    fn diff_loss_stays_in_range(seed in any::<u64>(), alpha in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hb = random_fm(&mut rng, 4, 2, 3, Scale::Neighborhood, 0.0);
        let hc = random_fm(&mut rng, 4, 2, 3, Scale::City, -1.0);
        let a = feature_diff_loss_values(&hb, &hc, alpha, DiffLossForm::AsWritten).unwrap();
        let p = feature_diff_loss_values(&hb, &hc, alpha, DiffLossForm::PenalizeSimilarity).unwrap();
        prop_assert!((-1.0..=0.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&p));
    }
}
