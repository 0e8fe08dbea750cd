//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p minnet-cli --test acceptance [-- name...]` runs every
//! criterion, or only those whose name contains one of the given words.
//! Real Cifar-10 batches are used when `CIFAR10_DIR` points at them and the
//! seeded synthetic set otherwise; each line says which.
//!
//! Failures are reported, not fatal, so the line stays visible inside a full
//! `cargo test` run. Set `MINNET_ACCEPTANCE_STRICT=1` to exit non-zero instead.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use minnet::checkpoint::Checkpoint;
use minnet::data::{self, ImageRecord};
use minnet::eval::{self, hyperselectivity_probe, pocp_slices, ProbeStats, SqCache};
use minnet::gradcheck::{op_suite, SUITE_OPS};
use minnet::jpeg::{self, RgbImage};
use minnet::model::{self, ModelSpec};
use minnet::train::{self, TrainConfig, TrainData};
use minnet_cli::{SYNTHETIC_TEST_SEED, SYNTHETIC_TRAIN_SEED};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "../../core/tests/support/min_identities.rs"]
mod min_identities;

type Outcome = Result<String, String>;

fn cifar_dir() -> Option<PathBuf> {
    std::env::var_os("CIFAR10_DIR").map(PathBuf::from)
}

/// First `train_n` / `test_n` Cifar-10 images, or the synthetic stand-in.
fn dataset(train_n: usize, test_n: usize) -> (Vec<ImageRecord>, Vec<ImageRecord>, &'static str) {
    if let Some(dir) = cifar_dir() {
        let (mut tr, mut te) = data::load_cifar10(&dir).expect("CIFAR10_DIR is set but unreadable");
        tr.truncate(train_n);
        te.truncate(test_n);
        return (tr, te, "cifar10");
    }
    let synth = |n, seed| if n == 0 { Vec::new() } else { data::synthetic_dataset(n, 10, seed).unwrap() };
    let (tr, te) = (synth(train_n, SYNTHETIC_TRAIN_SEED), synth(test_n, SYNTHETIC_TEST_SEED));
    (tr, te, "synthetic")
}

fn param_counts() -> Outcome {
    // (depth, baseline, Min-Net) from the DenseNet-BC comparison table, k = 12
    let table = [(100, 769_162, 751_786), (58, 314_470, 298_564), (22, 71_686, 57_040)];
    let mut got = Vec::new();
    for (depth, dense, min) in table {
        for (want, sub) in [(dense, false), (min, true)] {
            let spec = ModelSpec::densenet_depth(depth, 12, sub).map_err(|e| e.to_string())?;
            let n = model::build::<f32>(&spec).map_err(|e| e.to_string())?.count_params();
            if n != want {
                return Err(format!("L={depth} min={sub}: {n} != {want}"));
            }
            got.push(n.to_string());
        }
    }
    Ok(format!("6/6 exact ({})", got.join(", ")))
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let reports = op_suite(20, 2024).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed().as_secs_f64();
    let worst = reports.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error)).unwrap();
    if let Some(r) = reports.iter().find(|r| !(r.max_error < 1e-4) || r.instances < 20) {
        return Err(format!("{}: max rel err {:.2e} over {} instances", r.op, r.max_error, r.instances));
    }
    if elapsed >= 60.0 {
        return Err(format!("took {elapsed:.1}s"));
    }
    Ok(format!(
        "{} ops x 20 instances in f64, worst {} at {:.2e} (< 1e-4), {elapsed:.1}s",
        SUITE_OPS.len(),
        worst.op,
        worst.max_error
    ))
}

fn min_block_identities() -> Outcome {
    for seed in 0..5 {
        min_identities::tie_degeneracy(seed).map_err(|e| format!("tie: {e}"))?;
        min_identities::zeroed_body(seed).map_err(|e| format!("zeroed body: {e}"))?;
    }
    let mut worst = 0.0f64;
    for seed in 0..5 {
        worst =
            worst.max(min_identities::formulation_equivalence(seed, 1e-6).map_err(|e| format!("formulation: {e}"))?);
    }
    Ok(format!(
        "tie bit-exact with half/half gradient split, zeroed body == shortcut, formulations agree to {worst:.1e} (<= 1e-6)"
    ))
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

fn hyperselectivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut done, mut drawn) = (0, 0);
    let mut smallest_drop = f64::INFINITY;
    let mut worst_ln = 0.0f64;
    while done < 1000 {
        drawn += 1;
        let (v, g) = (random_unit(&mut rng, 9), random_unit(&mut rng, 9));
        let r = hyperselectivity_probe(&v, &g, &ProbeStats::default(), &[0.1]).map_err(|e| e.to_string())?;
        if r.degenerate {
            continue;
        }
        let p = r.curve[0];
        if !(p.plus < r.optimum && p.minus < r.optimum) {
            return Err(format!("pair {done}: gamma {:.4}, {} -> {} / {}", r.gamma, r.optimum, p.plus, p.minus));
        }
        smallest_drop = smallest_drop.min(r.optimum - p.plus.max(p.minus));
        worst_ln = worst_ln.max((p.ln_plus - r.ln_optimum).abs()).max((p.ln_minus - r.ln_optimum).abs());
        if worst_ln > 1e-6 {
            return Err(format!("LN response moved by {worst_ln:e}"));
        }
        done += 1;
    }
    Ok(format!(
        "1000/1000 non-degenerate pairs ({drawn} drawn) drop at eps=0.1, smallest drop {smallest_drop:.2e}, LN change <= {worst_ln:.1e}"
    ))
}

fn pocp_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..10_000 {
        let n = rng.gen_range(1..200);
        let classes = rng.gen_range(2..=10);
        let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let b: Vec<usize> = a.iter().map(|&x| if rng.gen_bool(0.3) { rng.gen_range(0..classes) } else { x }).collect();
        let changed = (0..n).filter(|&i| a[i] != b[i]).count();
        let want = changed as f64 / n as f64;
        let got = pocp_slices(&a, &b).map_err(|e| e.to_string())?;
        if got != want || pocp_slices(&a, &a).map_err(|e| e.to_string())? != 0.0 {
            return Err(format!("case {case}: {got} vs recount {want}"));
        }
    }
    let (_, test, source) = dataset(0, 200);
    let stats = data::compute_channel_stats(&test).unwrap();
    for seed in 0..3 {
        let spec = ModelSpec { base_width: 4, alpha: 4.0, seed, ..ModelSpec::pyramid(1, true) };
        let m = model::build::<f32>(&spec).unwrap();
        let rows = eval::error_vs_q(&m, &test, &stats, &[100], None).map_err(|e| e.to_string())?;
        if rows[0].pocp != 0.0 {
            return Err(format!("seed {seed}: POCP(100) = {}", rows[0].pocp));
        }
    }
    if eval::build_sq(&test, 100).map_err(|e| e.to_string())? != test {
        return Err("S_100 differs from the clean set".into());
    }
    Ok(format!("10^4 random cases match a recount, POCP(Q=100) = 0 for 3 models ({source})"))
}

fn codec_sample() -> (Vec<ImageRecord>, &'static str) {
    if let Some(dir) = cifar_dir() {
        let (_, te) = data::load_cifar10(&dir).expect("CIFAR10_DIR is set but unreadable");
        let step = te.len() / 100;
        return (te.into_iter().step_by(step.max(1)).take(100).collect(), "cifar10 test images");
    }
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/natural32.bin");
    let recs = data::parse_records(&fs::read(fixture).unwrap()).unwrap();
    (recs, "natural 32x32 crops")
}

// JPEG Annex K example tables, natural order
#[rustfmt::skip]
const ANNEX_K_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
];

fn annex_k_chroma() -> [u16; 64] {
    let mut t = [99u16; 64];
    let corner = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]];
    for (r, row) in corner.iter().enumerate() {
        t[r * 8..r * 8 + 4].copy_from_slice(row);
    }
    t
}

fn codec_properties() -> Outcome {
    let base = jpeg::quality_to_tables(50).map_err(|e| e.to_string())?;
    if base.luma != ANNEX_K_LUMA || base.chroma != annex_k_chroma() {
        return Err("Q=50 does not reproduce the base tables".into());
    }
    let top = jpeg::quality_to_tables(100).map_err(|e| e.to_string())?;
    if top.luma.iter().chain(&top.chroma).any(|&v| v != 1) {
        return Err("Q=100 tables are not all ones".into());
    }
    let (sample, source) = codec_sample();
    let mut monotone = 0;
    for r in &sample {
        let img = RgbImage::from_record(r);
        let a = jpeg::encode(&img, 10).map_err(|e| e.to_string())?;
        let b = jpeg::encode(&img, 90).map_err(|e| e.to_string())?;
        if a != jpeg::encode(&img, 10).unwrap() || b != jpeg::encode(&img, 90).unwrap() {
            return Err("encoder is not deterministic".into());
        }
        let m10 = jpeg::mse(&img, &jpeg::decode(&a).map_err(|e| e.to_string())?);
        let m90 = jpeg::mse(&img, &jpeg::decode(&b).map_err(|e| e.to_string())?);
        if m10 >= m90 {
            monotone += 1;
        }
    }
    let frac = monotone as f64 / sample.len() as f64;
    let detail = format!(
        "Q50 fixed point, Q100 clamp, deterministic, MSE(10) >= MSE(90) on {monotone}/{} {source}",
        sample.len()
    );
    if frac >= 0.95 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn overfit_run(train: &[ImageRecord], seed: u64) -> (Vec<u8>, f64, usize) {
    let stats = data::compute_channel_stats(train).unwrap();
    let spec = ModelSpec { base_width: 8, alpha: 8.0, seed, ..ModelSpec::pyramid(1, true) };
    let mut m = model::build::<f32>(&spec).unwrap();
    let cfg = TrainConfig {
        epochs: 25,
        batch_size: 32,
        lr_drops: vec![],
        augmentation: false,
        seed,
        ..TrainConfig::resnet()
    };
    let report = train::train(&mut m, TrainData { train, test: &[], stats: &stats }, &cfg, |_| {}).unwrap();
    let err = eval::error_rate(&m, train, &stats).unwrap();
    (Checkpoint::from_model(&m, cfg.epochs as u64).to_bytes(), err, report.steps)
}

fn overfit() -> Outcome {
    let t = Instant::now();
    let (train, _, source) = dataset(256, 0);
    let (a, err, steps) = overfit_run(&train, 0);
    let (b, err_b, _) = overfit_run(&train, 0);
    let elapsed = t.elapsed().as_secs_f64();
    if a != b || err != err_b {
        return Err("two runs with seed 0 differ".into());
    }
    let detail = format!(
        "N=1 Min-ResNet (width 8, alpha 8) on 256 {source} images: train error {:.2}% after {steps} steps, repeat run byte-identical, {elapsed:.0}s for both",
        100.0 * err
    );
    if err < 0.05 && steps == 200 && elapsed < 600.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn robustness_trend() -> Outcome {
    let t = Instant::now();
    let (train, test, source) = dataset(5000, 1000);
    let stats = data::compute_channel_stats(&train).unwrap();
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = SqCache::new(cache_dir.path());
    let qualities = [90, 70, 50, 30, 10];
    let mut sums = [0.0f64; 5];
    let mut errors = Vec::new();
    for seed in 0..3u64 {
        let spec = ModelSpec { base_width: 4, alpha: 4.0, seed, ..ModelSpec::pyramid(1, true) };
        let mut m = model::build::<f32>(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr_drops: vec![(10, 10.0), (15, 10.0)],
            seed,
            ..TrainConfig::resnet()
        };
        train::train(&mut m, TrainData { train: &train, test: &[], stats: &stats }, &cfg, |_| {})
            .map_err(|e| e.to_string())?;
        let rows = eval::error_vs_q(&m, &test, &stats, &qualities, Some(&cache)).map_err(|e| e.to_string())?;
        for (s, r) in sums.iter_mut().zip(&rows) {
            *s += r.pocp;
        }
        errors.push(eval::error_rate(&m, &test, &stats).unwrap());
    }
    let means: Vec<f64> = sums.iter().map(|s| s / 3.0).collect();
    let shown: Vec<String> = qualities.iter().zip(&means).map(|(q, p)| format!("Q{q} {:.2}%", 100.0 * p)).collect();
    let err: Vec<String> = errors.iter().map(|e| format!("{:.1}%", 100.0 * e)).collect();
    let detail = format!(
        "seed-mean POCP {} | clean test error {} | 3 seeds x 20 epochs on 5000 {source} images, {:.0}s",
        shown.join(", "),
        err.join("/"),
        t.elapsed().as_secs_f64()
    );
    if means.windows(2).all(|w| w[0] <= w[1]) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "config.txt")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let d = dir.path().to_str().unwrap();
        let common = [
            "--synthetic",
            "--set",
            "synthetic_train=200",
            "--set",
            "synthetic_test=100",
            "--n",
            "1",
            "--min",
            "--base-width",
            "4",
            "--alpha",
            "4",
            "--batch-size",
            "32",
            "--seed",
            "3",
            "--out-dir",
            d,
        ];
        for cmd in [&["train", "--epochs", "2"][..], &["eval"], &["robustness", "--qualities", "100,70,30"], &["probe"]]
        {
            let argv: Vec<&str> = ["minnet"].iter().chain(cmd).chain(&common).copied().collect();
            minnet_cli::run(argv, &mut std::io::sink()).map_err(|e| format!("{cmd:?}: {e:#}"))?;
        }
    }
    let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
    let echo = |d: &Path| {
        fs::read_to_string(d.join("config.txt"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("out_dir"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    if echo(dirs[0].path()) != echo(dirs[1].path()) {
        return Err("config echo differs".into());
    }
    if a.len() < 8 {
        return Err(format!("only {} artifacts written", a.len()));
    }
    if let Some(((name, _), _)) = a.iter().zip(&b).find(|(x, y)| x != y) {
        return Err(format!("{name} differs between identical runs"));
    }
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    Ok(format!("train/eval/robustness/probe repeated: {} byte-identical ({})", names.len(), names.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("param_counts", param_counts),
        ("gradient_suite", gradient_suite),
        ("min_block_identities", min_block_identities),
        ("hyperselectivity", hyperselectivity),
        ("pocp", pocp_correctness),
        ("codec", codec_properties),
        ("overfit", overfit),
        ("robustness_trend", robustness_trend),
        ("determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut ran, mut failed) = (0, 0);
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {ran} criteria, {failed} failed");
    if failed > 0 && std::env::var_os("MINNET_ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
