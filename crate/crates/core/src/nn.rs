//! Learnable parameter storage, batch-norm bookkeeping and initializers.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchNormMode, BatchStats, Tape, Var};
use crate::error::TensorError;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

/// One named learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Scalar = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Weight decay applies only to convolution and linear weights.
    pub decay_eligible: bool,
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of a model's learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<LayerParams<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        decay_eligible: bool,
    ) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(LayerParams { name, tensor, decay_eligible });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &LayerParams<T> {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LayerParams<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LayerParams<T>> {
        self.entries.iter_mut()
    }

    /// Total number of learnable scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Registers every tensor on `tape` as a learnable leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.entries.iter().map(|p| tape.param(p.tensor.clone())).collect()
    }

    /// Copies the store into another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| LayerParams {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    decay_eligible: p.decay_eligible,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Running averages kept by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: Tensor::zeros(&[channels]), var: Tensor::ones(&[channels]), momentum: BN_MOMENTUM }
    }

    /// Folds one batch into the running averages. The variance update uses
    /// the unbiased batch estimate.
    pub fn update(&mut self, batch: &BatchStats<T>) {
        let m = T::from_f64_lossy(self.momentum);
        let keep = T::one() - m;
        let correction = if batch.count > 1 {
            T::from_usize(batch.count).unwrap() / T::from_usize(batch.count - 1).unwrap()
        } else {
            T::one()
        };
        for (r, &b) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(&batch.var) {
            *r = (keep * *r + m * b * correction).max(T::zero());
        }
    }
}

/// Full batch-norm state: learnable scale/shift plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: RunningStats<T>,
}

/// γ = 1, β = 0, running mean 0, running variance 1, momentum 0.1.
pub fn init_norm<T: Scalar>(channels: usize) -> Result<NormState<T>, TensorError> {
    if channels == 0 {
        return Err(TensorError::InvalidArgument("init_norm: zero channels".into()));
    }
    Ok(NormState {
        gamma: Tensor::ones(&[channels]),
        beta: Tensor::zeros(&[channels]),
        running: RunningStats::new(channels),
    })
}

/// He-normal initialization: N(0, 2 / fan_in).
///
/// `shape` is `[out, in, k, k]` for convolutions (`in = 1` for depthwise)
/// or `[out, in]` for linear layers.
pub fn init_conv<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Result<Tensor<T>, TensorError> {
    if shape.len() < 2 || shape.contains(&0) {
        return Err(TensorError::InvalidArgument(format!("init_conv: invalid weight shape {shape:?}")));
    }
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Ok(Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng))))
}

/// Named running statistics for every batch-norm layer of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BufferStore<T: Scalar = f32> {
    entries: Vec<(String, RunningStats<T>)>,
}

impl<T: Scalar> BufferStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, stats: RunningStats<T>) -> usize {
        self.entries.push((name.into(), stats));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> &RunningStats<T> {
        &self.entries[index].1
    }

    pub fn get_mut(&mut self, index: usize) -> &mut RunningStats<T> {
        &mut self.entries[index].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.entries.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats<T>)> {
        self.entries.iter_mut().map(|(n, s)| (n.as_str(), s))
    }

    /// Applies the statistics gathered during one training forward pass.
    pub fn apply(&mut self, updates: &[(usize, BatchStats<T>)]) {
        for (index, stats) in updates {
            self.entries[*index].1.update(stats);
        }
    }

    pub fn cast<U: Scalar>(&self) -> BufferStore<U> {
        BufferStore {
            entries: self
                .entries
                .iter()
                .map(|(n, s)| {
                    (n.clone(), RunningStats { mean: s.mean.cast(), var: s.var.cast(), momentum: s.momentum })
                })
                .collect(),
        }
    }
}

/// Bias-free convolution weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
}

/// Batch-norm layer: learnable affine plus a running-statistics buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub buffer: usize,
}

/// Fully connected layer with bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Allocates named, initialized layers into a model's stores.
pub struct LayerBuilder<'a, T: Scalar> {
    pub params: &'a mut ParamStore<T>,
    pub buffers: &'a mut BufferStore<T>,
    pub rng: &'a mut Rng,
}

impl<'a, T: Scalar> LayerBuilder<'a, T> {
    pub fn new(params: &'a mut ParamStore<T>, buffers: &'a mut BufferStore<T>, rng: &'a mut Rng) -> Self {
        Self { params, buffers, rng }
    }

    /// `[out, in, k, k]` weight (use `in = 1` for depthwise kernels).
    pub fn conv(&mut self, name: &str, shape: [usize; 4]) -> Result<Conv, TensorError> {
        let w = init_conv(&shape, self.rng)?;
        Ok(Conv { weight: self.params.push(format!("{name}.weight"), w, true)? })
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm, TensorError> {
        let state = init_norm::<T>(channels)?;
        Ok(BatchNorm {
            gamma: self.params.push(format!("{name}.weight"), state.gamma, false)?,
            beta: self.params.push(format!("{name}.bias"), state.beta, false)?,
            buffer: self.buffers.push(name, state.running),
        })
    }

    /// Zero-initialized per-channel bias.
    pub fn bias(&mut self, name: &str, channels: usize) -> Result<ParamId, TensorError> {
        self.params.push(format!("{name}.bias"), Tensor::zeros(&[channels]), false)
    }

    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<Linear, TensorError> {
        let w = init_conv(&[outputs, inputs], self.rng)?;
        Ok(Linear {
            weight: self.params.push(format!("{name}.weight"), w, true)?,
            bias: self.params.push(format!("{name}.bias"), Tensor::zeros(&[outputs]), false)?,
        })
    }
}

/// State threaded through one forward pass of a model or block.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    /// Parameter leaves, in [`ParamStore`] order.
    pub params: &'a [Var],
    pub buffers: &'a BufferStore<T>,
    pub training: bool,
    /// Keep intermediate Min-block activations for probing.
    pub keep_aux: bool,
    /// Batch statistics to fold into `buffers` after a training pass.
    pub updates: Vec<(usize, BatchStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a [Var], buffers: &'a BufferStore<T>, training: bool) -> Self {
        Self { tape, params, buffers, training, keep_aux: false, updates: Vec::new() }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn conv(&mut self, x: Var, layer: Conv, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let w = self.param(layer.weight);
        self.tape.conv2d(x, w, stride, pad)
    }

    pub fn depthwise(&mut self, x: Var, layer: Conv, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let w = self.param(layer.weight);
        self.tape.depthwise_conv2d(x, w, stride, pad)
    }

    pub fn batch_norm(&mut self, x: Var, layer: BatchNorm) -> Result<Var, TensorError> {
        let (gamma, beta) = (self.param(layer.gamma), self.param(layer.beta));
        let mode = if self.training {
            BatchNormMode::Train
        } else {
            let stats = self.buffers.get(layer.buffer);
            BatchNormMode::Eval { mean: stats.mean.data(), var: stats.var.data() }
        };
        let (y, stats) = self.tape.batch_norm(x, gamma, beta, mode)?;
        if let Some(stats) = stats {
            self.updates.push((layer.buffer, stats));
        }
        Ok(y)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.tape.relu(x)
    }

    pub fn linear(&mut self, x: Var, layer: Linear) -> Result<Var, TensorError> {
        let (w, b) = (self.param(layer.weight), self.param(layer.bias));
        self.tape.linear(x, w, b)
    }
}
