//! Robustness protocol and the hyperselectivity probe.
//!
//! `S_Q` is the test set pushed through [`jpeg_round`] at quality `Q`. The
//! percentage of changed predictions (POCP) compares a model's predictions on
//! `S_Q` with those on the clean set.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{self, ChannelStats, ImageRecord};
use crate::error::TensorError;
use crate::jpeg::{self, jpeg_round_record, JpegError, CODEC_VERSION};
use crate::model::Model;
use crate::scalar::Scalar;

/// Images per inference batch.
pub const EVAL_BATCH: usize = 100;

/// Default robustness sweep, clean set first.
pub const QUALITIES: [u8; 10] = [100, 90, 80, 70, 60, 50, 40, 30, 20, 10];

/// Angle below which a filter pair counts as parallel (radians).
pub const DEGENERACY_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image {index}: {source}")]
    Codec { index: usize, source: JpegError },
    #[error("quality {0} outside 1..=100")]
    Quality(u8),
    #[error("prediction sets differ in length: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("prediction {value} at index {index} is not below {classes}")]
    Class { index: usize, value: usize, classes: usize },
    #[error("selector {0:?} matches no Min-block")]
    Selector(String),
    #[error("zero filter vector")]
    ZeroFilter,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("cannot access {path}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_owned(), source }
}

/// Per-image class predictions of one model on one `S_Q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    pub model_id: String,
    pub q: u8,
    pub predictions: Vec<usize>,
}

impl PredictionSet {
    pub fn new(model_id: impl Into<String>, q: u8, predictions: Vec<usize>, classes: usize) -> Result<Self, EvalError> {
        if let Some((index, &value)) = predictions.iter().enumerate().find(|(_, &p)| p >= classes) {
            return Err(EvalError::Class { index, value, classes });
        }
        Ok(Self { model_id: model_id.into(), q, predictions })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

/// Inference-mode predictions in record order.
pub fn predict_records<T: Scalar>(
    model: &Model<T>,
    records: &[ImageRecord],
    stats: &ChannelStats,
) -> Result<Vec<usize>, TensorError> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let x = data::to_tensor(chunk, stats).map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
        out.extend(model.predict(x)?);
    }
    Ok(out)
}

/// Fraction of misclassified records.
pub fn error_rate<T: Scalar>(
    model: &Model<T>,
    records: &[ImageRecord],
    stats: &ChannelStats,
) -> Result<f64, TensorError> {
    if records.is_empty() {
        return Err(TensorError::InvalidArgument("error rate of an empty set".into()));
    }
    let preds = predict_records(model, records, stats)?;
    Ok(misclassified(&preds, records))
}

fn misclassified(preds: &[usize], records: &[ImageRecord]) -> f64 {
    let wrong = preds.iter().zip(records).filter(|(&p, r)| p != r.label()).count();
    wrong as f64 / records.len() as f64
}

/// Share of images whose prediction differs between the two sets.
pub fn pocp(orig: &PredictionSet, perturbed: &PredictionSet) -> Result<f64, EvalError> {
    pocp_slices(&orig.predictions, &perturbed.predictions)
}

pub fn pocp_slices(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::Length { left: a.len(), right: b.len() });
    }
    let changed = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(changed as f64 / a.len() as f64)
}

/// `S_Q`: every record through the codec at quality `q`, labels kept.
pub fn build_sq(records: &[ImageRecord], q: u8) -> Result<Vec<ImageRecord>, EvalError> {
    if !(1..=100).contains(&q) {
        return Err(EvalError::Quality(q));
    }
    records
        .iter()
        .enumerate()
        .map(|(index, r)| jpeg_round_record(r, q).map_err(|source| EvalError::Codec { index, source }))
        .collect()
}

/// On-disk `S_Q` cache: one directory of JFIF files plus `index.csv` per
/// (dataset hash, quality, codec version).
#[derive(Debug, Clone)]
pub struct SqCache {
    dir: PathBuf,
}

impl SqCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, dataset_hash: &str, q: u8) -> PathBuf {
        let short = &dataset_hash[..dataset_hash.len().min(16)];
        self.dir.join(format!("sq_{short}_q{q:03}_codec{CODEC_VERSION}"))
    }

    fn load(path: &Path, records: &[ImageRecord]) -> Option<Vec<ImageRecord>> {
        let index = fs::read_to_string(path.join("index.csv")).ok()?;
        let mut lines = index.lines();
        if lines.next()? != "index,label,file" {
            return None;
        }
        let mut out = Vec::with_capacity(records.len());
        for (i, line) in lines.enumerate() {
            let mut f = line.split(',');
            let (idx, label, file) = (f.next()?, f.next()?, f.next()?);
            if idx.parse::<usize>().ok()? != i
                || i >= records.len()
                || label.parse::<usize>().ok()? != records[i].label()
            {
                return None;
            }
            let bytes = fs::read(path.join(file)).ok()?;
            out.push(jpeg::decode(&bytes).ok()?.to_record(records[i].label()).ok()?);
        }
        (out.len() == records.len()).then_some(out)
    }

    fn store(path: &Path, records: &[ImageRecord], q: u8) -> Result<(), EvalError> {
        let tmp = path.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
        let mut index = String::from("index,label,file\n");
        for (i, r) in records.iter().enumerate() {
            let bytes = jpeg::encode(&jpeg::RgbImage::from_record(r), q)
                .map_err(|source| EvalError::Codec { index: i, source })?;
            let name = format!("{i:05}.jpg");
            let file = tmp.join(&name);
            fs::write(&file, bytes).map_err(io_err(&file))?;
            index.push_str(&format!("{i},{},{name}\n", r.label()));
        }
        let file = tmp.join("index.csv");
        fs::write(&file, index).map_err(io_err(&file))?;
        if path.exists() {
            fs::remove_dir_all(path).map_err(io_err(path))?;
        }
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    /// Cached set if present and intact, otherwise built and stored. The flag
    /// reports a cache hit.
    pub fn get_or_build(&self, records: &[ImageRecord], q: u8) -> Result<(Vec<ImageRecord>, bool), EvalError> {
        if q == 100 {
            return Ok((build_sq(records, q)?, false));
        }
        let path = self.path_for(&data::dataset_hash(records), q);
        if path.exists() {
            if let Some(set) = Self::load(&path, records) {
                log::info!("S_Q cache hit: {}", path.display());
                return Ok((set, true));
            }
            log::warn!("discarding damaged S_Q cache {}", path.display());
        }
        let set = build_sq(records, q)?;
        Self::store(&path, records, q)?;
        Ok((set, false))
    }
}

/// One line of the robustness table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessRow {
    pub q: u8,
    pub test_error: f64,
    pub pocp: f64,
}

/// Test error and POCP per quality.
///
/// POCP also counts images that flip from one wrong class to another, so it
/// need not bound the change in error from below.
pub fn error_vs_q<T: Scalar>(
    model: &Model<T>,
    records: &[ImageRecord],
    stats: &ChannelStats,
    qualities: &[u8],
    cache: Option<&SqCache>,
) -> Result<Vec<RobustnessRow>, EvalError> {
    Ok(sweep(model, records, stats, qualities, cache)?.into_iter().map(|(row, _)| row).collect())
}

/// [`error_vs_q`] that also hands back the predictions behind each row.
pub fn sweep<T: Scalar>(
    model: &Model<T>,
    records: &[ImageRecord],
    stats: &ChannelStats,
    qualities: &[u8],
    cache: Option<&SqCache>,
) -> Result<Vec<(RobustnessRow, PredictionSet)>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::InvalidArgument("robustness sweep on an empty set".into()));
    }
    let classes = model.spec.num_classes;
    let id = format!("{}", model.spec.family);
    let clean = predict_records(model, records, stats)?;
    let mut rows = Vec::with_capacity(qualities.len());
    for &q in qualities {
        let preds = if q == 100 {
            clean.clone()
        } else {
            let set = match cache {
                Some(c) => c.get_or_build(records, q)?.0,
                None => build_sq(records, q)?,
            };
            predict_records(model, &set, stats)?
        };
        let row = RobustnessRow { q, test_error: misclassified(&preds, records), pocp: pocp_slices(&clean, &preds)? };
        rows.push((row, PredictionSet::new(id.clone(), q, preds, classes)?));
    }
    Ok(rows)
}

pub fn write_predictions_csv(mut w: impl Write, set: &PredictionSet, records: &[ImageRecord]) -> io::Result<()> {
    writeln!(w, "index,label,prediction")?;
    for (i, (p, r)) in set.predictions.iter().zip(records).enumerate() {
        writeln!(w, "{i},{},{p}", r.label())?;
    }
    Ok(())
}

pub fn write_robustness_csv(mut w: impl Write, rows: &[RobustnessRow]) -> io::Result<()> {
    writeln!(w, "q,test_error,pocp")?;
    for r in rows {
        writeln!(w, "{},{:.6},{:.6}", r.q, r.test_error, r.pocp)?;
    }
    Ok(())
}

/// Instance-norm statistics applied to the two branch responses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeStats {
    pub mu_v: f64,
    pub sigma_v: f64,
    pub mu_g: f64,
    pub sigma_g: f64,
}

impl Default for ProbeStats {
    fn default() -> Self {
        Self { mu_v: 0.0, sigma_v: 1.0, mu_g: 0.0, sigma_g: 1.0 }
    }
}

/// Responses at `x* ± eps·o`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePoint {
    pub eps: f64,
    pub plus: f64,
    pub minus: f64,
    pub ln_plus: f64,
    pub ln_minus: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub layer: String,
    pub channel: usize,
    /// Angle between `v` and `g` in radians.
    pub gamma: f64,
    pub degenerate: bool,
    /// Min-neuron response at the bisector stimulus.
    pub optimum: f64,
    pub ln_optimum: f64,
    /// `|x*·o|` after normalization.
    pub orthogonality: f64,
    pub curve: Vec<ProbePoint>,
}

impl ProbeReport {
    /// Response at `x*` strictly above every perturbed response.
    pub fn hyperselective(&self) -> bool {
        !self.degenerate && self.curve.iter().all(|p| p.plus < self.optimum && p.minus < self.optimum)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(a: &[f64]) -> Result<Vec<f64>, EvalError> {
    let n = dot(a, a).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(EvalError::ZeroFilter);
    }
    Ok(a.iter().map(|x| x / n).collect())
}

/// Min-neuron `min(ReLU((v·x − μ_v)/σ_v), ReLU((g·x − μ_g)/σ_g))`.
pub fn min_neuron(v: &[f64], g: &[f64], x: &[f64], s: &ProbeStats) -> f64 {
    let a = ((dot(v, x) - s.mu_v) / s.sigma_v).max(0.0);
    let b = ((dot(g, x) - s.mu_g) / s.sigma_g).max(0.0);
    a.min(b)
}

/// Probe one filter pair at its bisector stimulus.
///
/// Both filters are scaled to unit length first: in the network the instance
/// norm divides each branch by its own response spread, which puts the two
/// branches on a common scale.
pub fn hyperselectivity_probe(v: &[f64], g: &[f64], stats: &ProbeStats, eps: &[f64]) -> Result<ProbeReport, EvalError> {
    if v.len() != g.len() || v.is_empty() {
        return Err(EvalError::InvalidArgument(format!("filter lengths {} and {}", v.len(), g.len())));
    }
    if let Some(e) = eps.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return Err(EvalError::InvalidArgument(format!("perturbation size {e} must be positive")));
    }
    if !(stats.sigma_v > 0.0 && stats.sigma_g > 0.0) {
        return Err(EvalError::InvalidArgument("probe sigma must be positive".into()));
    }
    let (v, g) = (unit(v)?, unit(g)?);
    let cos = dot(&v, &g).clamp(-1.0, 1.0);
    // atan2 keeps precision near 0 and π where acos does not
    let diff: Vec<f64> = v.iter().zip(&g).map(|(a, b)| a - b).collect();
    let sum: Vec<f64> = v.iter().zip(&g).map(|(a, b)| a + b).collect();
    let gamma = 2.0 * dot(&diff, &diff).sqrt().atan2(dot(&sum, &sum).sqrt());
    debug_assert!((gamma.cos() - cos).abs() < 1e-9);
    // antiparallel pairs have no bisector, parallel ones no in-plane normal
    let degenerate = gamma < DEGENERACY_TOL || std::f64::consts::PI - gamma < DEGENERACY_TOL;
    if degenerate {
        let x = if gamma < 1.0 { unit(&sum)? } else { v.clone() };
        return Ok(ProbeReport {
            layer: String::new(),
            channel: 0,
            gamma,
            degenerate,
            optimum: min_neuron(&v, &g, &x, stats),
            ln_optimum: dot(&x, &x).max(0.0),
            orthogonality: 0.0,
            curve: Vec::new(),
        });
    }
    let x = unit(&sum)?;
    let o = unit(&diff)?;
    let orthogonality = dot(&x, &o).abs();
    let ln = |p: &[f64]| dot(&x, p).max(0.0);
    let at = |e: f64| -> Vec<f64> { x.iter().zip(&o).map(|(a, b)| a + e * b).collect() };
    let curve = eps
        .iter()
        .map(|&e| {
            let (p, m) = (at(e), at(-e));
            ProbePoint {
                eps: e,
                plus: min_neuron(&v, &g, &p, stats),
                minus: min_neuron(&v, &g, &m, stats),
                ln_plus: ln(&p),
                ln_minus: ln(&m),
            }
        })
        .collect();
    Ok(ProbeReport {
        layer: String::new(),
        channel: 0,
        gamma,
        degenerate,
        optimum: min_neuron(&v, &g, &x, stats),
        ln_optimum: ln(&x),
        orthogonality,
        curve,
    })
}

/// Probe results over the selected Min-blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSummary {
    pub reports: Vec<ProbeReport>,
}

impl ProbeSummary {
    pub fn non_degenerate(&self) -> usize {
        self.reports.iter().filter(|r| !r.degenerate).count()
    }

    pub fn degenerate_fraction(&self) -> f64 {
        1.0 - self.non_degenerate() as f64 / self.reports.len().max(1) as f64
    }

    /// Fraction of non-degenerate channels whose optimum beats every perturbation.
    pub fn hyperselective_fraction(&self) -> f64 {
        let n = self.non_degenerate();
        if n == 0 {
            return 0.0;
        }
        self.reports.iter().filter(|r| r.hyperselective()).count() as f64 / n as f64
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "layer,channel,gamma,degenerate,eps,optimum,plus,minus,ln_optimum,ln_plus,ln_minus")?;
        for r in &self.reports {
            if r.curve.is_empty() {
                writeln!(
                    w,
                    "{},{},{:.9},{},,{:.9},,,{:.9},,",
                    r.layer, r.channel, r.gamma, r.degenerate, r.optimum, r.ln_optimum
                )?;
            }
            for p in &r.curve {
                writeln!(
                    w,
                    "{},{},{:.9},{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
                    r.layer,
                    r.channel,
                    r.gamma,
                    r.degenerate,
                    p.eps,
                    r.optimum,
                    p.plus,
                    p.minus,
                    r.ln_optimum,
                    p.ln_plus,
                    p.ln_minus
                )?;
            }
        }
        Ok(())
    }
}

/// Probe every channel of the Min-blocks whose name contains `selector`
/// (`"all"` or `""` selects every block).
pub fn probe_model<T: Scalar>(model: &Model<T>, selector: &str, eps: &[f64]) -> Result<ProbeSummary, EvalError> {
    let mut reports = Vec::new();
    let mut matched = false;
    for (name, block) in model.min_blocks() {
        if !(selector.is_empty() || selector == "all" || name.contains(selector)) {
            continue;
        }
        matched = true;
        let v = model.params.tensor(block.dws_v.weight);
        let g = model.params.tensor(block.dws_g.weight);
        let k2 = block.cfg.k_size * block.cfg.k_size;
        for (m, (vm, gm)) in v.data().chunks(k2).zip(g.data().chunks(k2)).enumerate() {
            let vm: Vec<f64> = vm.iter().map(|x| x.as_f64()).collect();
            let gm: Vec<f64> = gm.iter().map(|x| x.as_f64()).collect();
            let mut r = hyperselectivity_probe(&vm, &gm, &ProbeStats::default(), eps)?;
            r.layer = name.to_string();
            r.channel = m;
            reports.push(r);
        }
    }
    if !matched {
        return Err(EvalError::Selector(selector.to_string()));
    }
    Ok(ProbeSummary { reports })
}

/// Writes a few `S_Q` images as viewable JFIF files.
pub fn write_jpeg_samples(dir: &Path, records: &[ImageRecord], q: u8, count: usize) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (index, r) in records.iter().take(count).enumerate() {
        let img = jpeg::RgbImage::from_record(r);
        let bytes = jpeg::encode(&img, q.min(99)).map_err(|source| EvalError::Codec { index, source })?;
        let path = dir.join(format!("q{q:03}_{index:05}.jpg"));
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}
