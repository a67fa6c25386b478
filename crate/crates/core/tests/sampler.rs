use flowsr_core::features::{FeatureMap, Scale};
use flowsr_core::model::{Model, ModelConfig, Scalers};
use flowsr_core::sampler::*;
use flowsr_core::scaler::ScalerParams;
use flowsr_core::synth::{synth_generate, SynthConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: Scale) -> FeatureMap {
    FeatureMap::new(c, h, w, scale, (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn loop_norm(h: &FeatureMap, a: (usize, usize), b: (usize, usize)) -> f64 {
    let mut s = 0.0;
    for c in 0..h.channels {
        let x = h.data[(c * h.height + a.0) * h.width + a.1];
        let y = h.data[(c * h.height + b.0) * h.width + b.1];
        s += (x - y) * (x - y);
    }
    s.sqrt()
}

fn loop_city(a: &FeatureMap, b: &FeatureMap) -> f64 {
    let mut total = 0.0;
    for i in 0..a.height {
        for j in 0..a.width {
            let mut s = 0.0;
            for c in 0..a.channels {
                let k = (c * a.height + i) * a.width + j;
                s += (a.data[k] - b.data[k]).powi(2);
            }
            total += s;
        }
    }
    (total / (a.height * a.width) as f64).sqrt()
}

#[test]
fn distances_match_loop_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (c, h, w) = (rng.gen_range(1..6), rng.gen_range(1..5), rng.gen_range(1..5));
        let m = random_map(&mut rng, c, h, w, Scale::Neighborhood);
        let a = (rng.gen_range(0..h), rng.gen_range(0..w));
        let b = (rng.gen_range(0..h), rng.gen_range(0..w));
        let d = neighborhood_distance(&m, a, b).unwrap();
        assert!((d - loop_norm(&m, a, b)).abs() < 1e-6);
        assert_eq!(d, neighborhood_distance(&m, b, a).unwrap());

        let seq = vec![random_map(&mut rng, c, h, w, Scale::City), random_map(&mut rng, c, h, w, Scale::City)];
        let dc = city_distance(&seq, a, 0, 1).unwrap();
        assert!((dc - loop_city(&seq[0], &seq[1])).abs() < 1e-6);
        // shared by every anchor position, literally
        for i in 0..h {
            for j in 0..w {
                assert_eq!(city_distance(&seq, (i, j), 0, 1).unwrap().to_bits(), dc.to_bits());
            }
        }
    }
}

fn sort_oracle(values: &[f64], k: usize, ascending: bool) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
    // stable sort keeps index order among ties
    pairs.sort_by(|a, b| if ascending { a.0.partial_cmp(&b.0).unwrap() } else { b.0.partial_cmp(&a.0).unwrap() });
    pairs.into_iter().take(k).map(|p| p.1).collect()
}

#[test]
fn topk_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let vals: Vec<f64> = (0..100).map(|_| (rng.gen_range(0..40) as f64) * 0.25).collect();
        let k = rng.gen_range(1..120);
        for asc in [true, false] {
            assert_eq!(topk_select(&vals, k, asc), sort_oracle(&vals, k, asc));
        }
    }
    assert!(topk_select(&[], 3, true).is_empty());
}

fn classify_oracle(cands: &[Candidate], thr: f64, k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<&Candidate> = cands.iter().filter(|c| c.distance <= thr).collect();
    let mut neg: Vec<&Candidate> = cands.iter().filter(|c| c.distance > thr).collect();
    pos.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap());
    neg.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap());
    (pos.iter().take(k).map(|c| c.id).collect(), neg.iter().take(k).map(|c| c.id).collect())
}

#[test]
fn classify_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.gen_range(1..30);
        let cands: Vec<Candidate> =
            (0..n).map(|id| Candidate { id: id + 1, distance: rng.gen_range(0..20) as f64 * 0.1 }).collect();
        let thr = rng.gen_range(0.0..2.0);
        let k = rng.gen_range(1..10);
        let s = classify(AnchorId { t: 0, i: 0, j: 0 }, 0, &cands, thr, k);
        let (p, q) = classify_oracle(&cands, thr, k);
        assert_eq!(s.positives.iter().map(|c| c.id).collect::<Vec<_>>(), p);
        assert_eq!(s.negatives.iter().map(|c| c.id).collect::<Vec<_>>(), q);
    }
}

#[test]
fn periodic_noiseless_frames_a_day_apart_are_mutual_positives() {
    let cfg = SynthConfig { height: 4, width: 4, frames: 12, slots_per_day: 4, blobs: 3, blob_speed: 1, noise: 0.0, ..Default::default() };
    let (_, coarse) = synth_generate(&cfg).unwrap();
    let mut model = Model::<f64>::new(ModelConfig::default(), 5).unwrap();
    let s = ScalerParams::fit(coarse.values()).unwrap();
    model.scalers = Some(Scalers { coarse: s, fine: s });
    let maps: Vec<FeatureMap> = (0..12).map(|t| model.city_encode(coarse.frame(t), 4, 4).unwrap()).collect();
    let sampler = SamplerConfig::default();
    // exhaustive distance table
    let table: Vec<Vec<f64>> =
        (0..12).map(|a| (0..12).map(|b| if a == b { 0.0 } else { frame_distance(&maps[a], &maps[b]).unwrap() }).collect()).collect();
    for t in 0..12 {
        let cands: Vec<Candidate> = (0..12).filter(|&c| c != t).map(|c| Candidate { id: c, distance: table[t][c] }).collect();
        let set = city_frame_samples(t, &cands, &sampler);
        let pos: Vec<usize> = set.positives.iter().map(|c| c.id).collect();
        for other in (0..12).filter(|&o| o != t && o % 4 == t % 4) {
            assert_eq!(table[t][other], 0.0);
            assert!(pos.contains(&other), "frame {other} not a positive of {t}: {pos:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neighborhood_sample_sets_are_well_formed(c in 1usize..4, h in 1usize..5, w in 2usize..5, k in 1usize..6, p in 0.05f64..0.95, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_map(&mut rng, c, h, w, Scale::Neighborhood);
        let cfg = SamplerConfig { k, mode: ThresholdMode::Percentile(p), ..Default::default() };
        let n = h * w;
        for s in neighborhood_samples(&m, 0, &cfg) {
            let a = s.anchor.i * w + s.anchor.j;
            let pos: Vec<usize> = s.positives.iter().map(|c| c.id).collect();
            let neg: Vec<usize> = s.negatives.iter().map(|c| c.id).collect();
            prop_assert!(!pos.contains(&a) && !neg.contains(&a));
            prop_assert!(pos.iter().all(|x| !neg.contains(x)));
            prop_assert!(s.positives.iter().all(|c| c.distance <= s.threshold));
            prop_assert!(s.negatives.iter().all(|c| c.distance > s.threshold));
            prop_assert!(s.positives.windows(2).all(|w| w[0].distance <= w[1].distance));
            prop_assert!(s.negatives.windows(2).all(|w| w[0].distance <= w[1].distance));
            prop_assert!(pos.len() <= k && neg.len() <= k);
            prop_assert_eq!(s.short_set, pos.len() < k || neg.len() < k);

            // untruncated split: percentile fraction within one count
            let d: Vec<f64> = (0..n).filter(|&b| b != a).map(|b| neighborhood_distance(&m, (a / w, a % w), (b / w, b % w)).unwrap()).collect();
            let full = classify(s.anchor, usize::MAX, &d.iter().enumerate().map(|(id, &distance)| Candidate { id, distance }).collect::<Vec<_>>(), s.threshold, usize::MAX);
            prop_assert_eq!(full.positives.len() + full.negatives.len(), n - 1);
            let target = (p * (n - 1) as f64).ceil();
            let has_ties = d.iter().filter(|&&x| x == s.threshold).count() > 1;
            if !has_ties {
                prop_assert!((full.positives.len() as f64 - target).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn distances_are_metric(c in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_map(&mut rng, c, 3, 3, Scale::Neighborhood);
        for a in 0..9 {
            for b in 0..9 {
                let d = neighborhood_distance(&m, (a / 3, a % 3), (b / 3, b % 3)).unwrap();
                prop_assert!(d >= 0.0);
                prop_assert_eq!(d, neighborhood_distance(&m, (b / 3, b % 3), (a / 3, a % 3)).unwrap());
                if a == b { prop_assert_eq!(d, 0.0); }
            }
        }
    }
}
