//! Central finite-difference checks for tape operations.
//!
//! A check builds a scalar loss from a set of input tensors twice over: once on
//! a tape to get analytic gradients, and once per perturbed coordinate to get
//! `(f(x+h) - f(x-h)) / 2h`. The reported error for each input is
//! `max|analytic - numeric| / max(max|analytic|, max|numeric|)`, so a tensor
//! whose gradient is identically zero compares absolutely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormMode, Tape, Var};
use crate::{Tensor, TensorError};

/// Default step for double-precision checks.
pub const STEP: f64 = 1e-6;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Relative error per input, in input order.
    pub errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

fn relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Compares tape gradients of `loss` with central differences of step `h`.
///
/// `loss` receives one parameter [`Var`] per entry of `inputs` and must return
/// a one-element node.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, loss: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = loss(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = match grads.get(*v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
        errors.push(relative(&analytic, &numeric));
    }
    Ok(GradCheck { errors })
}

/// Operations covered by [`op_suite`].
pub const SUITE_OPS: [&str; 14] = [
    "conv2d",
    "depthwise_conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "instance_norm",
    "relu",
    "min",
    "avg_pool2d",
    "global_avg_pool",
    "linear",
    "softmax_cross_entropy",
    "add",
    "concat_pad_channels",
    "channel_bias",
];

/// Worst error seen for one operation across its random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

// magnitudes in [0.1, 1) keep relu and min clear of their kinks
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn project(t: &mut Tape<f64>, y: Var, w: Tensor<f64>) -> Result<Var, TensorError> {
    t.weighted_sum(y, w)
}

fn one(op: &'static str, rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let n = rng.gen_range(1..=3);
    let c = rng.gen_range(1..=4);
    let h = rng.gen_range(3..=6);
    let w = rng.gen_range(3..=6);
    let x = uniform(rng, &[n, c, h, w]);
    let r = match op {
        "conv2d" | "depthwise_conv2d" => {
            let k = [1, 3][rng.gen_range(0..2)];
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=k / 2);
            let depthwise = op == "depthwise_conv2d";
            let o = if depthwise { c } else { rng.gen_range(1..=4) };
            let kw = uniform(rng, &[o, if depthwise { 1 } else { c }, k, k]);
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let proj = uniform(rng, &[n, o, oh, ow]);
            check(&[x, kw], STEP, |t, v| {
                let y = if depthwise {
                    t.depthwise_conv2d(v[0], v[1], stride, pad)?
                } else {
                    t.conv2d(v[0], v[1], stride, pad)?
                };
                project(t, y, proj.clone())
            })?
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let gamma = uniform(rng, &[c]);
            let beta = uniform(rng, &[c]);
            let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
            let proj = uniform(rng, &[n, c, h, w]);
            let train = op == "batch_norm_train";
            check(&[x, gamma, beta], STEP, |t, v| {
                let mode = if train { BatchNormMode::Train } else { BatchNormMode::Eval { mean: &mean, var: &var } };
                let (y, _) = t.batch_norm(v[0], v[1], v[2], mode)?;
                project(t, y, proj.clone())
            })?
        }
        "instance_norm" => {
            let proj = uniform(rng, &[n, c, h, w]);
            check(&[x], STEP, |t, v| {
                let y = t.instance_norm(v[0])?;
                project(t, y, proj.clone())
            })?
        }
        "relu" => {
            let x = off_kink(rng, &[n, c, h, w]);
            let proj = uniform(rng, &[n, c, h, w]);
            check(&[x], STEP, |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, proj.clone())
            })?
        }
        "min" => {
            let gap = off_kink(rng, &[n, c, h, w]);
            let b = x.data().iter().zip(gap.data()).map(|(a, d)| a + d).collect();
            let b = Tensor::new(&[n, c, h, w], b)?;
            let proj = uniform(rng, &[n, c, h, w]);
            check(&[x, b], STEP, |t, v| {
                let y = t.min(v[0], v[1])?;
                project(t, y, proj.clone())
            })?
        }
        "avg_pool2d" => {
            let (k, stride) = [(2, 2), (3, 1), (2, 1), (3, 2)][rng.gen_range(0..4)];
            let proj = uniform(rng, &[n, c, (h - k) / stride + 1, (w - k) / stride + 1]);
            check(&[x], STEP, |t, v| {
                let y = t.avg_pool2d(v[0], k, stride)?;
                project(t, y, proj.clone())
            })?
        }
        "global_avg_pool" => {
            let proj = uniform(rng, &[n, c]);
            check(&[x], STEP, |t, v| {
                let y = t.global_avg_pool(v[0])?;
                project(t, y, proj.clone())
            })?
        }
        "linear" => {
            let f = rng.gen_range(1..=8);
            let o = rng.gen_range(1..=5);
            let xs = uniform(rng, &[n, f]);
            let kw = uniform(rng, &[o, f]);
            let b = uniform(rng, &[o]);
            let proj = uniform(rng, &[n, o]);
            check(&[xs, kw, b], STEP, |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                project(t, y, proj.clone())
            })?
        }
        "softmax_cross_entropy" => {
            let classes = rng.gen_range(2..=10);
            let logits = Tensor::from_fn(&[n, classes], |_| rng.gen_range(-3.0..3.0));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            check(&[logits], STEP, |t, v| t.softmax_cross_entropy(v[0], &labels))?
        }
        "add" => {
            let b = uniform(rng, &[n, c, h, w]);
            let proj = uniform(rng, &[n, c, h, w]);
            check(&[x, b], STEP, |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, proj.clone())
            })?
        }
        "concat_pad_channels" => {
            let c2 = rng.gen_range(1..=3);
            let extra = rng.gen_range(0..=2);
            let b = uniform(rng, &[n, c2, h, w]);
            let proj = uniform(rng, &[n, c + c2 + extra, h, w]);
            check(&[x, b], STEP, |t, v| {
                let y = t.concat_channels(&[v[0], v[1]])?;
                let y = t.pad_channels(y, extra)?;
                project(t, y, proj.clone())
            })?
        }
        "channel_bias" => {
            let b = uniform(rng, &[c]);
            let proj = uniform(rng, &[n, c, h, w]);
            check(&[x, b], STEP, |t, v| {
                let y = t.channel_bias(v[0], v[1])?;
                project(t, y, proj.clone())
            })?
        }
        other => return Err(TensorError::InvalidArgument(format!("no gradient check for {other}"))),
    };
    Ok(r.max_error())
}

/// Runs `instances` random checks of every operation in [`SUITE_OPS`].
pub fn op_suite(instances: usize, seed: u64) -> Result<Vec<OpReport>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut max_error = 0.0f64;
            for _ in 0..instances {
                max_error = max_error.max(one(op, &mut rng)?);
            }
            Ok(OpReport { op, instances, max_error })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_a_linear_loss() {
        let x = Tensor::from_f64(&[1, 1, 2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap();
        let w = Tensor::from_f64(&[1, 1, 2, 2], &[0.3, 0.1, -0.7, 2.0]).unwrap();
        let r = check(&[x], STEP, |t, v| t.weighted_sum(v[0], w.clone())).unwrap();
        assert!(r.max_error() < 1e-8, "{r:?}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // relu at a kink: the tape reports 0, the symmetric difference 0.5
        let x = Tensor::from_f64(&[1, 1, 1, 1], &[0.0]).unwrap();
        let w = Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap();
        let r = check(&[x], 1e-3, |t, v| {
            let y = t.relu(v[0])?;
            t.weighted_sum(y, w.clone())
        })
        .unwrap();
        assert!(r.max_error() > 0.1);
    }
}
