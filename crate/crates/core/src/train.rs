//! SGD with momentum, the step learning-rate schedule, Cifar augmentation
//! and the epoch loop.

use std::io::{self, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autodiff::Tape;
use crate::data::{self, ChannelStats, DataError, ImageRecord, CHANNELS, IMAGE_BYTES, PLANE, SIDE};
use crate::error::TensorError;
use crate::eval;
use crate::model::Model;
use crate::nn::{BufferStore, ParamStore};
use crate::rng::{self, Rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Zero padding on each side before the random crop.
pub const PAD: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// `(epoch, divisor)`: from `epoch` on the rate is divided by `divisor`.
    pub lr_drops: Vec<(usize, f64)>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub seed: u64,
    pub augmentation: bool,
    /// Fill the `seconds` log column with wall-clock time. Off by default so
    /// logs are byte-reproducible.
    pub record_time: bool,
}

impl TrainConfig {
    /// ResNet recipe: 200 epochs, batch 128, drops at 100 and 150.
    pub fn resnet() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr0: 0.1,
            lr_drops: vec![(100, 10.0), (150, 10.0)],
            weight_decay: 1e-4,
            momentum: 0.9,
            nesterov: false,
            seed: 0,
            augmentation: true,
            record_time: false,
        }
    }

    /// DenseNet recipe: 300 epochs, batch 64, drops at 150 and 225, Nesterov.
    pub fn densenet() -> Self {
        Self { epochs: 300, batch_size: 64, lr_drops: vec![(150, 10.0), (225, 10.0)], nesterov: true, ..Self::resnet() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.lr_drops.windows(2).any(|w| w[0].0 > w[1].0) {
            return bad("lr_drops must be sorted by epoch".into());
        }
        if self.lr_drops.iter().any(|&(_, d)| !(d > 0.0 && d.is_finite())) {
            return bad("lr drop divisors must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_drops.iter().filter(|&&(e, _)| epoch >= e).fold(cfg.lr0, |lr, &(_, d)| lr / d)
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    /// The model is rolled back to its state at the start of `epoch`.
    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: usize,
        #[source]
        source: TensorError,
    },
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Scalar = f32> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self { velocity: params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect() }
    }
}

/// One SGD step. Gradients are checked for finiteness before anything is
/// touched, so a failed step leaves parameters and state unchanged.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(TrainError::Config(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.shape() != p.tensor.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                lhs: p.tensor.shape().to_vec(),
                rhs: g.shape().to_vec(),
            }
            .into());
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient { name: p.name.clone() });
        }
    }
    let lr = T::from_f64_lossy(lr);
    let mu = T::from_f64_lossy(cfg.momentum);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let wd = if p.decay_eligible { T::from_f64_lossy(cfg.weight_decay) } else { T::zero() };
        for ((w, &gr), vel) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g = gr + wd * *w;
            *vel = mu * *vel + g;
            *w = *w - lr * if cfg.nesterov { g + mu * *vel } else { *vel };
        }
    }
    Ok(())
}

/// Flip and crop offsets for one augmented sample. Offsets index the
/// zero-padded 40×40 image; `(PAD, PAD)` is the centered crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub flip: bool,
    pub dy: usize,
    pub dx: usize,
}

impl Crop {
    pub const CENTER: Crop = Crop { flip: false, dy: PAD, dx: PAD };

    pub fn sample(rng: &mut Rng) -> Self {
        Crop { flip: rng.gen_bool(0.5), dy: rng.gen_range(0..=2 * PAD), dx: rng.gen_range(0..=2 * PAD) }
    }
}

/// Writes the flipped, padded, cropped and normalized image into `out`.
pub fn augment_with<T: Scalar>(record: &ImageRecord, stats: &ChannelStats, crop: Crop, out: &mut [T]) {
    assert!(crop.dy <= 2 * PAD && crop.dx <= 2 * PAD, "crop offset outside padding");
    for c in 0..CHANNELS {
        for y in 0..SIDE {
            let sy = (y + crop.dy).checked_sub(PAD).filter(|&v| v < SIDE);
            for x in 0..SIDE {
                let sx = (x + crop.dx).checked_sub(PAD).filter(|&v| v < SIDE);
                let v = match (sy, sx) {
                    (Some(sy), Some(sx)) => {
                        let sx = if crop.flip { SIDE - 1 - sx } else { sx };
                        record.at(c, sy, sx)
                    }
                    _ => 0,
                };
                out[c * PLANE + y * SIDE + x] = T::from_f64_lossy(stats.normalize(c, v as f64));
            }
        }
    }
}

pub fn augment<T: Scalar>(record: &ImageRecord, stats: &ChannelStats, rng: &mut Rng, out: &mut [T]) {
    augment_with(record, stats, Crop::sample(rng), out);
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// `None` when no test set was given.
    pub test_error: Option<f64>,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,test_error,seconds";

pub fn write_log_csv(log: &[EpochLog], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for e in log {
        let err = e.test_error.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(w, "{},{},{:.6},{},{:.3}", e.epoch, e.lr, e.train_loss, err, e.seconds)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [ImageRecord],
    /// Evaluated after each epoch; may be empty.
    pub test: &'a [ImageRecord],
    pub stats: &'a ChannelStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestEpoch<T: Scalar> {
    pub epoch: usize,
    pub test_error: f64,
    pub params: ParamStore<T>,
    pub buffers: BufferStore<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport<T: Scalar> {
    pub log: Vec<EpochLog>,
    /// Lowest test error over all epochs (first one on ties).
    pub best: Option<BestEpoch<T>>,
    pub steps: usize,
}

impl<T: Scalar> TrainReport<T> {
    pub fn final_test_error(&self) -> Option<f64> {
        self.log.last().and_then(|e| e.test_error)
    }
}

/// Mean loss and gradients of one batch; batch-norm buffers are updated.
pub fn train_batch<T: Scalar>(
    model: &mut Model<T>,
    images: Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Vec<Tensor<T>>), TensorError> {
    let mut tape = Tape::new();
    let (params, out) = model.forward(&mut tape, images, true)?;
    let loss = tape.softmax_cross_entropy(out.logits, labels)?;
    let loss_value = tape.value(loss).data()[0].as_f64();
    let mut grads = tape.backward(loss)?;
    let grads = params
        .iter()
        .zip(model.params.iter())
        .map(|(&v, p)| match grads.take(v) {
            Some(g) => g,
            None => Tensor::zeros(p.tensor.shape()),
        })
        .collect();
    model.buffers.apply(&out.updates);
    Ok((loss_value, grads))
}

/// Runs `cfg.epochs` epochs of SGD. Returns the per-epoch log and the
/// best-epoch snapshot; the model keeps its final weights.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport<T>, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() && cfg.epochs > 0 {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut shuffle = rng::stream(cfg.seed, Stream::Shuffle);
    let mut aug = rng::stream(cfg.seed, Stream::Augment);
    let mut state = OptimState::new(&model.params);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut report = TrainReport { log: Vec::with_capacity(cfg.epochs), best: None, steps: 0 };

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg);
        let snapshot = (model.params.clone(), model.buffers.clone());
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut buf = vec![T::zero(); chunk.len() * IMAGE_BYTES];
            for (slot, &i) in buf.chunks_mut(IMAGE_BYTES).zip(chunk) {
                let r = &data.train[i];
                if cfg.augmentation {
                    augment(r, data.stats, &mut aug, slot);
                } else {
                    data::normalize_into(r, data.stats, slot);
                }
            }
            let images = Tensor::new(&[chunk.len(), CHANNELS, SIDE, SIDE], buf)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train[i].label()).collect();
            let outcome = train_batch(model, images, &labels).and_then(|(loss, grads)| {
                if loss.is_finite() {
                    Ok((loss, grads))
                } else {
                    Err(TensorError::NonFinite { op: "loss" })
                }
            });
            let (loss, grads) = match outcome {
                Ok(v) => v,
                Err(source) => {
                    (model.params, model.buffers) = snapshot;
                    return Err(TrainError::Diverged { epoch, step, source });
                }
            };
            sgd_step(&mut model.params, &grads, &mut state, lr, cfg)?;
            loss_sum += loss * chunk.len() as f64;
            report.steps += 1;
        }
        let test_error =
            if data.test.is_empty() { None } else { Some(eval::error_rate(model, data.test, data.stats)?) };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / data.train.len() as f64,
            test_error,
            seconds: if cfg.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        if let Some(err) = test_error {
            if report.best.as_ref().is_none_or(|b| err < b.test_error) {
                report.best = Some(BestEpoch {
                    epoch,
                    test_error: err,
                    params: model.params.clone(),
                    buffers: model.buffers.clone(),
                });
            }
        }
        on_epoch(&entry);
        report.log.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64], eligible: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("w", Tensor::from_f64(&[values.len()], values).unwrap(), eligible).unwrap();
        s
    }

    fn plain() -> TrainConfig {
        TrainConfig { momentum: 0.0, weight_decay: 0.0, ..TrainConfig::resnet() }
    }

    #[test]
    fn plain_sgd() {
        let mut p = store(&[1.0, -2.0], true);
        let mut st = OptimState::new(&p);
        let g = Tensor::from_f64(&[2], &[0.5, 1.0]).unwrap();
        sgd_step(&mut p, &[g], &mut st, 0.1, &plain()).unwrap();
        assert_eq!(p.iter().next().unwrap().tensor.data(), &[0.95, -2.1]);
    }

    #[test]
    fn decay_only_step_scales_eligible_weights() {
        let cfg = TrainConfig { momentum: 0.9, weight_decay: 1e-4, ..TrainConfig::resnet() };
        for (eligible, factor) in [(true, 1.0 - 1e-5), (false, 1.0)] {
            let mut p = store(&[2.0, -3.0], eligible);
            let mut st = OptimState::new(&p);
            let g = Tensor::zeros(&[2]);
            sgd_step(&mut p, &[g], &mut st, 0.1, &cfg).unwrap();
            let w = p.iter().next().unwrap().tensor.data();
            assert!((w[0] - 2.0 * factor).abs() < 1e-15);
            assert!((w[1] + 3.0 * factor).abs() < 1e-15);
        }
    }

    #[test]
    fn two_momentum_steps_unroll() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::resnet() };
        let mut p = store(&[0.0], true);
        let mut st = OptimState::new(&p);
        let g = Tensor::from_f64(&[1], &[2.0]).unwrap();
        for _ in 0..2 {
            sgd_step(&mut p, std::slice::from_ref(&g), &mut st, 0.1, &cfg).unwrap();
        }
        let w = p.iter().next().unwrap().tensor.data()[0];
        assert!((w + 0.1 * 2.0 * 2.9).abs() < 1e-12, "{w}");
    }

    #[test]
    fn nesterov_step_looks_ahead() {
        let cfg = TrainConfig { weight_decay: 0.0, nesterov: true, ..TrainConfig::resnet() };
        let mut p = store(&[0.0], true);
        let mut st = OptimState::new(&p);
        let g = Tensor::from_f64(&[1], &[1.0]).unwrap();
        sgd_step(&mut p, &[g], &mut st, 0.1, &cfg).unwrap();
        // v = 1, update lr·(g + μv) = 0.1·1.9
        assert!((p.iter().next().unwrap().tensor.data()[0] + 0.19).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut p = store(&[1.0], true);
        let before = p.clone();
        let mut st = OptimState::new(&p);
        let g = Tensor::from_f64(&[1], &[f64::NAN]).unwrap();
        let err = sgd_step(&mut p, &[g], &mut st, 0.1, &plain()).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { ref name } if name == "w"));
        assert_eq!(p, before);
    }

    #[test]
    fn presets_follow_schedule() {
        let r = TrainConfig::resnet();
        assert_eq!(lr_at(0, &r), 0.1);
        assert_eq!(lr_at(99, &r), 0.1);
        assert!((lr_at(100, &r) - 0.01).abs() < 1e-15);
        assert!((lr_at(150, &r) - 0.001).abs() < 1e-15);
        let d = TrainConfig::densenet();
        assert!((lr_at(225, &d) - 0.001).abs() < 1e-15);
        assert!((lr_at(224, &d) - 0.01).abs() < 1e-15);
        assert_eq!((d.batch_size, d.nesterov, r.batch_size, r.nesterov), (64, true, 128, false));
        let flat = TrainConfig { lr_drops: vec![], ..r.clone() };
        assert_eq!(lr_at(1000, &flat), 0.1);
        for cfg in [r, d] {
            assert!((1..400).all(|e| lr_at(e, &cfg) <= lr_at(e - 1, &cfg)));
        }
    }

    #[test]
    fn unsorted_drops_rejected() {
        let cfg = TrainConfig { lr_drops: vec![(10, 10.0), (5, 10.0)], ..TrainConfig::resnet() };
        assert!(cfg.validate().is_err());
    }

    fn stats() -> ChannelStats {
        ChannelStats::new([0.4, 0.5, 0.6], [0.2, 0.25, 0.3]).unwrap()
    }

    #[test]
    fn center_crop_without_flip_is_plain_normalization() {
        let r = data::synthetic_dataset(1, 1, 9).unwrap().remove(0);
        let mut a = vec![0.0f64; IMAGE_BYTES];
        let mut b = vec![0.0f64; IMAGE_BYTES];
        augment_with(&r, &stats(), Crop::CENTER, &mut a);
        data::normalize_into(&r, &stats(), &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn corner_crop_reads_zero_padding() {
        let r = data::synthetic_dataset(1, 1, 9).unwrap().remove(0);
        let s = stats();
        let mut out = vec![0.0f64; IMAGE_BYTES];
        augment_with(&r, &s, Crop { flip: false, dy: 0, dx: 0 }, &mut out);
        for c in 0..CHANNELS {
            let pad = (0.0 - s.mean[c]) / s.std[c];
            for y in 0..PAD {
                for x in 0..PAD {
                    assert_eq!(out[c * PLANE + y * SIDE + x], pad);
                }
            }
            assert_eq!(out[c * PLANE + PAD * SIDE + PAD], s.normalize(c, r.at(c, 0, 0) as f64));
        }
    }

    #[test]
    fn flip_mirrors_columns() {
        let r = data::synthetic_dataset(1, 1, 9).unwrap().remove(0);
        let s = stats();
        let mut out = vec![0.0f64; IMAGE_BYTES];
        augment_with(&r, &s, Crop { flip: true, ..Crop::CENTER }, &mut out);
        assert_eq!(out[SIDE - 1], s.normalize(0, r.at(0, 0, 0) as f64));
    }

    #[test]
    fn flip_frequency_is_half() {
        let mut rng = rng::stream(5, Stream::Augment);
        let flips = (0..10_000).filter(|_| Crop::sample(&mut rng).flip).count();
        assert!((4800..=5200).contains(&flips), "{flips}");
    }

    #[test]
    fn log_csv_layout() {
        let log = vec![EpochLog { epoch: 0, lr: 0.1, train_loss: 2.5, test_error: Some(0.25), seconds: 0.0 }];
        let mut out = Vec::new();
        write_log_csv(&log, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,lr,train_loss,test_error,seconds\n0,0.1,2.500000,0.250000,0.000\n"
        );
    }
}
