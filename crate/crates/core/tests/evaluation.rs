use minnet::data::{compute_channel_stats, serialize_records, synthetic_dataset};
use minnet::eval::*;
use minnet::model::{build, ModelSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec(seed: u64) -> ModelSpec {
    ModelSpec { base_width: 4, alpha: 4.0, seed, ..ModelSpec::pyramid(1, true) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn pocp_matches_a_recount(pairs in prop::collection::vec((0usize..10, 0usize..10), 1..60)) {
        let (a, b): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut changed = 0;
        for i in 0..a.len() {
            if a[i] != b[i] {
                changed += 1;
            }
        }
        let expected = changed as f64 / a.len() as f64;
        prop_assert_eq!(pocp_slices(&a, &b).unwrap(), expected);
        prop_assert_eq!(pocp_slices(&b, &a).unwrap(), expected);
        prop_assert_eq!(pocp_slices(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn sq_sets_keep_size_labels_and_identity_at_100() {
    let recs = synthetic_dataset(30, 10, 2).unwrap();
    assert_eq!(build_sq(&recs, 100).unwrap(), recs);
    for q in [90, 50, 10] {
        let s = build_sq(&recs, q).unwrap();
        assert_eq!(s.len(), recs.len());
        assert!(s.iter().zip(&recs).all(|(a, b)| a.label() == b.label()));
        assert_ne!(s, recs);
    }
    assert!(matches!(build_sq(&recs, 0), Err(EvalError::Quality(0))));
}

#[test]
fn cache_hit_is_byte_identical_and_damage_is_repaired() {
    let dir = tempfile::tempdir().unwrap();
    let cache = SqCache::new(dir.path());
    let recs = synthetic_dataset(20, 10, 3).unwrap();
    let (fresh, hit) = cache.get_or_build(&recs, 70).unwrap();
    assert!(!hit);
    assert_eq!(fresh, build_sq(&recs, 70).unwrap());
    let path = cache.path_for(&minnet::data::dataset_hash(&recs), 70);
    assert!(path.join("00019.jpg").is_file());
    let (again, hit) = cache.get_or_build(&recs, 70).unwrap();
    assert!(hit);
    assert_eq!(serialize_records(&again), serialize_records(&fresh));
    std::fs::write(path.join("00004.jpg"), b"\xff\xd8junk").unwrap();
    let (repaired, hit) = cache.get_or_build(&recs, 70).unwrap();
    assert!(!hit);
    assert_eq!(repaired, fresh);
    assert!(cache.get_or_build(&recs, 70).unwrap().1);
}

#[test]
fn constant_predictor_never_changes_its_mind() {
    let mut model = build::<f32>(&tiny_spec(1)).unwrap();
    for p in model.params.iter_mut().filter(|p| p.name.starts_with("head.fc")) {
        p.tensor.data_mut().fill(0.0);
    }
    let recs = synthetic_dataset(40, 10, 4).unwrap();
    let stats = compute_channel_stats(&recs).unwrap();
    let rows = error_vs_q(&model, &recs, &stats, &[100, 90, 50, 10], None).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.pocp, 0.0, "q={}", r.q);
        assert_eq!(r.test_error, rows[0].test_error);
    }
}

#[test]
fn clean_quality_has_zero_pocp_for_any_model() {
    let model = build::<f32>(&tiny_spec(5)).unwrap();
    let recs = synthetic_dataset(40, 10, 6).unwrap();
    let stats = compute_channel_stats(&recs).unwrap();
    let rows = error_vs_q(&model, &recs, &stats, &[100, 30], None).unwrap();
    assert_eq!(rows[0].pocp, 0.0);
    let preds = predict_records(&model, &recs, &stats).unwrap();
    let set = PredictionSet::new("tiny", 100, preds, 10).unwrap();
    assert_eq!(pocp(&set, &set).unwrap(), 0.0);
    let mut csv = Vec::new();
    write_predictions_csv(&mut csv, &set, &recs).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 41);
    assert!(text.starts_with("index,label,prediction\n0,0,"));
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn sixty_degree_pair_drop_matches_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for _ in 0..50 {
        // g at 60° from v inside a random plane, via Gram-Schmidt
        let v = random_unit(&mut rng, 9);
        let w = random_unit(&mut rng, 9);
        let c = dot(&v, &w);
        let mut u: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a - c * b).collect();
        let n = dot(&u, &u).sqrt();
        u.iter_mut().for_each(|x| *x /= n);
        let angle = std::f64::consts::FRAC_PI_3;
        let g: Vec<f64> = v.iter().zip(&u).map(|(a, b)| angle.cos() * a + angle.sin() * b).collect();
        // scale the filters; the probe must not care
        let v3: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        let r = hyperselectivity_probe(&v3, &g, &ProbeStats::default(), &[0.05]).unwrap();
        assert!((r.gamma - angle).abs() < 1e-9);

        let xs: Vec<f64> = v.iter().zip(&g).map(|(a, b)| (a + b) / (2.0 * (angle / 2.0).cos())).collect();
        let o: Vec<f64> = v.iter().zip(&g).map(|(a, b)| (a - b) / (2.0 * (angle / 2.0).sin())).collect();
        let at = |e: f64| -> Vec<f64> { xs.iter().zip(&o).map(|(a, b)| a + e * b).collect() };
        let resp = |x: &[f64]| dot(&v, x).max(0.0).min(dot(&g, x).max(0.0));
        let drop_plus = resp(&xs) - resp(&at(0.05));
        let drop_minus = resp(&xs) - resp(&at(-0.05));
        let p = r.curve[0];
        assert!((r.optimum - resp(&xs)).abs() < 1e-12);
        assert!((r.optimum - p.plus - drop_plus).abs() < 1e-12);
        assert!((r.optimum - p.minus - drop_minus).abs() < 1e-12);
        assert!((drop_plus - 0.05 * (angle / 2.0).sin()).abs() < 1e-12);
    }
}

#[test]
fn thousand_random_pairs_are_hyperselective() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut probed = 0;
    while probed < 1000 {
        let v: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = hyperselectivity_probe(&v, &g, &ProbeStats::default(), &[0.1]).unwrap();
        if r.degenerate {
            continue;
        }
        probed += 1;
        assert!(r.orthogonality < 1e-9);
        let p = r.curve[0];
        assert!(p.plus < r.optimum && p.minus < r.optimum);
        assert!((p.ln_plus - r.ln_optimum).abs() < 1e-6 && (p.ln_minus - r.ln_optimum).abs() < 1e-6);
    }
}

#[test]
fn fresh_model_probe() {
    let model = build::<f32>(&ModelSpec { seed: 3, ..ModelSpec::pyramid(2, true) }).unwrap();
    let s = probe_model(&model, "all", &[0.01, 0.1]).unwrap();
    assert!(!s.reports.is_empty());
    assert!(s.degenerate_fraction() <= 0.01);
    assert_eq!(s.hyperselective_fraction(), 1.0);
    let one = probe_model(&model, "stack1", &[0.1]).unwrap();
    assert!(one.reports.len() < s.reports.len());
    assert!(one.reports.iter().all(|r| r.layer.starts_with("stack1")));
    assert!(matches!(probe_model(&model, "nope", &[0.1]), Err(EvalError::Selector(_))));
}

#[test]
fn tied_filters_are_all_degenerate() {
    let mut model = build::<f32>(&tiny_spec(9)).unwrap();
    let pairs: Vec<_> = model.min_blocks().map(|(_, b)| (b.dws_v.weight, b.dws_g.weight)).collect();
    for (v, g) in pairs {
        let t = model.params.tensor(v).clone();
        *model.params.tensor_mut(g) = t;
    }
    let s = probe_model(&model, "all", &[0.1]).unwrap();
    assert_eq!(s.degenerate_fraction(), 1.0);
    assert_eq!(s.hyperselective_fraction(), 0.0);
}

#[test]
fn densenet_min_blocks_are_probed() {
    let model = build::<f32>(&ModelSpec::densenet_depth(22, 12, true).unwrap()).unwrap();
    let s = probe_model(&model, "", &[0.1]).unwrap();
    assert!(s.non_degenerate() > 0);
    let mut csv = Vec::new();
    s.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), s.reports.len() + 1);
}
