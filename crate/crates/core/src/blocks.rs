//! Network blocks.
//!
//! A Min-block expands the input with a 1×1 convolution (BN, ReLU), filters
//! every expanded map with two depthwise kernels `v` and `g` (each followed
//! by instance norm and ReLU), keeps the elementwise minimum of the two
//! responses, projects back to `d_out` maps with a 1×1 convolution (BN, ReLU)
//! and adds the input through [`Residual`].

use crate::autodiff::Var;
use crate::error::TensorError;
use crate::nn::{BatchNorm, Conv, Forward, LayerBuilder, ParamId};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinBlockConfig {
    pub d_in: usize,
    pub d_out: usize,
    /// Expansion factor; the middle stage has `q * d_out` maps.
    pub q: usize,
    /// Stride of both depthwise convolutions, 1 or 2.
    pub stride: usize,
    /// Depthwise kernel size (odd).
    pub k_size: usize,
    pub use_residual: bool,
}

impl MinBlockConfig {
    pub fn new(d_in: usize, d_out: usize, q: usize, stride: usize) -> Self {
        Self { d_in, d_out, q, stride, k_size: 3, use_residual: true }
    }

    pub fn expanded(&self) -> usize {
        self.q * self.d_out
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.d_in == 0 || self.expanded() == 0 {
            return Err(TensorError::InvalidArgument(format!("min block needs positive channel counts, got {self:?}")));
        }
        validate_stride(self.stride)?;
        if self.k_size.is_multiple_of(2) {
            return Err(TensorError::InvalidArgument(format!(
                "depthwise kernel size must be odd, got {}",
                self.k_size
            )));
        }
        Ok(())
    }
}

fn validate_stride(stride: usize) -> Result<(), TensorError> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(TensorError::InvalidArgument(format!("block stride must be 1 or 2, got {stride}")))
    }
}

fn check_channels(f: &Forward<'_, impl Scalar>, x: Var, want: usize, op: &str) -> Result<(), TensorError> {
    let (_, c, _, _) = f.tape.value(x).dims4()?;
    if c != want {
        return Err(TensorError::InvalidArgument(format!("{op}: expected {want} input channels, got {c}")));
    }
    Ok(())
}

/// Intermediate Min-block activations, kept when probing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinBlockAux {
    pub t1: Var,
    pub branch_v: Var,
    pub branch_g: Var,
    pub t2: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockOutput {
    pub tensor: Var,
    pub aux: Option<MinBlockAux>,
}

/// Shortcut path: average-pool when strided, then zero-pad or reduce channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Residual {
    pub stride: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// 1×1 recombination used when `d_in > d_out` (no BN, no ReLU).
    pub reduce: Option<(Conv, ParamId)>,
}

impl Residual {
    pub fn new<T: Scalar>(
        b: &mut LayerBuilder<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        stride: usize,
    ) -> Result<Self, TensorError> {
        validate_stride(stride)?;
        let reduce = if d_in > d_out {
            let conv = b.conv(name, [d_out, d_in, 1, 1])?;
            let bias = b.bias(name, d_out)?;
            Some((conv, bias))
        } else {
            None
        };
        Ok(Self { stride, d_in, d_out, reduce })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var, TensorError> {
        let pooled = if self.stride == 2 { f.tape.avg_pool2d(x, 2, 2)? } else { x };
        match (self.d_in.cmp(&self.d_out), self.reduce) {
            (std::cmp::Ordering::Less, _) => f.tape.pad_channels(pooled, self.d_out - self.d_in),
            (std::cmp::Ordering::Greater, Some((conv, bias))) => {
                let y = f.conv(pooled, conv, 1, 0)?;
                let b = f.param(bias);
                f.tape.channel_bias(y, b)
            }
            _ => Ok(pooled),
        }
    }
}

/// Standalone shortcut adapter for a block input `x`.
pub fn adapt_residual<T: Scalar>(f: &mut Forward<'_, T>, x: Var, residual: &Residual) -> Result<Var, TensorError> {
    residual.forward(f, x)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinBlock {
    pub cfg: MinBlockConfig,
    pub expand: Conv,
    pub expand_bn: BatchNorm,
    pub dws_v: Conv,
    pub dws_g: Conv,
    pub project: Conv,
    pub project_bn: BatchNorm,
    pub residual: Option<Residual>,
}

impl MinBlock {
    pub fn new<T: Scalar>(b: &mut LayerBuilder<'_, T>, name: &str, cfg: MinBlockConfig) -> Result<Self, TensorError> {
        cfg.validate()?;
        let e = cfg.expanded();
        let k = cfg.k_size;
        Ok(Self {
            cfg,
            expand: b.conv(&format!("{name}.expand"), [e, cfg.d_in, 1, 1])?,
            expand_bn: b.batch_norm(&format!("{name}.expand_bn"), e)?,
            dws_v: b.conv(&format!("{name}.dws_v"), [e, 1, k, k])?,
            dws_g: b.conv(&format!("{name}.dws_g"), [e, 1, k, k])?,
            project: b.conv(&format!("{name}.project"), [cfg.d_out, e, 1, 1])?,
            project_bn: b.batch_norm(&format!("{name}.project_bn"), cfg.d_out)?,
            residual: if cfg.use_residual {
                Some(Residual::new(b, &format!("{name}.shortcut"), cfg.d_in, cfg.d_out, cfg.stride)?)
            } else {
                None
            },
        })
    }

    /// One depthwise branch: DWS convolution, instance norm, ReLU.
    fn branch<T: Scalar>(&self, f: &mut Forward<'_, T>, t1: Var, kernel: Conv) -> Result<Var, TensorError> {
        let y = f.depthwise(t1, kernel, self.cfg.stride, self.cfg.k_size / 2)?;
        let y = f.tape.instance_norm(y)?;
        f.relu(y)
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, t0: Var) -> Result<BlockOutput, TensorError> {
        check_channels(f, t0, self.cfg.d_in, "min block")?;
        let t1 = f.conv(t0, self.expand, 1, 0)?;
        let t1 = f.batch_norm(t1, self.expand_bn)?;
        let t1 = f.relu(t1)?;

        let branch_v = self.branch(f, t1, self.dws_v)?;
        let branch_g = self.branch(f, t1, self.dws_g)?;
        let t2 = f.tape.min(branch_v, branch_g)?;

        let t3 = f.conv(t2, self.project, 1, 0)?;
        let t3 = f.batch_norm(t3, self.project_bn)?;
        let t3 = f.relu(t3)?;

        let tensor = match &self.residual {
            Some(r) => {
                let shortcut = r.forward(f, t0)?;
                f.tape.add(shortcut, t3)?
            }
            None => t3,
        };
        let aux = f.keep_aux.then_some(MinBlockAux { t1, branch_v, branch_g, t2 });
        Ok(BlockOutput { tensor, aux })
    }
}

/// PyramidNet basic block: BN, 3×3 conv, BN, ReLU, 3×3 conv, BN, plus shortcut.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidBlock {
    pub d_in: usize,
    pub d_out: usize,
    pub stride: usize,
    pub bn0: BatchNorm,
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub residual: Residual,
}

impl PyramidBlock {
    pub fn new<T: Scalar>(
        b: &mut LayerBuilder<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        stride: usize,
    ) -> Result<Self, TensorError> {
        validate_stride(stride)?;
        Ok(Self {
            d_in,
            d_out,
            stride,
            bn0: b.batch_norm(&format!("{name}.bn0"), d_in)?,
            conv1: b.conv(&format!("{name}.conv1"), [d_out, d_in, 3, 3])?,
            bn1: b.batch_norm(&format!("{name}.bn1"), d_out)?,
            conv2: b.conv(&format!("{name}.conv2"), [d_out, d_out, 3, 3])?,
            bn2: b.batch_norm(&format!("{name}.bn2"), d_out)?,
            residual: Residual::new(b, &format!("{name}.shortcut"), d_in, d_out, stride)?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, t0: Var) -> Result<Var, TensorError> {
        check_channels(f, t0, self.d_in, "pyramid block")?;
        let y = f.batch_norm(t0, self.bn0)?;
        let y = f.conv(y, self.conv1, self.stride, 1)?;
        let y = f.batch_norm(y, self.bn1)?;
        let y = f.relu(y)?;
        let y = f.conv(y, self.conv2, 1, 1)?;
        let y = f.batch_norm(y, self.bn2)?;
        let shortcut = self.residual.forward(f, t0)?;
        f.tape.add(shortcut, y)
    }
}

/// DenseNet-BC bottleneck: BN, ReLU, 1×1 conv to `4k`, BN, ReLU, 3×3 conv to `k`.
/// Returns only the `k` new maps; the caller concatenates them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bottleneck {
    pub d_in: usize,
    pub growth: usize,
    pub bn1: BatchNorm,
    pub conv1: Conv,
    pub bn2: BatchNorm,
    pub conv2: Conv,
}

impl Bottleneck {
    pub fn new<T: Scalar>(
        b: &mut LayerBuilder<'_, T>,
        name: &str,
        d_in: usize,
        growth: usize,
    ) -> Result<Self, TensorError> {
        let inner = 4 * growth;
        Ok(Self {
            d_in,
            growth,
            bn1: b.batch_norm(&format!("{name}.bn1"), d_in)?,
            conv1: b.conv(&format!("{name}.conv1"), [inner, d_in, 1, 1])?,
            bn2: b.batch_norm(&format!("{name}.bn2"), inner)?,
            conv2: b.conv(&format!("{name}.conv2"), [growth, inner, 3, 3])?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var, TensorError> {
        check_channels(f, x, self.d_in, "bottleneck")?;
        let y = f.batch_norm(x, self.bn1)?;
        let y = f.relu(y)?;
        let y = f.conv(y, self.conv1, 1, 0)?;
        let y = f.batch_norm(y, self.bn2)?;
        let y = f.relu(y)?;
        f.conv(y, self.conv2, 1, 1)
    }
}

/// DenseNet-BC transition: BN, ReLU, 1×1 conv (compression), 2×2 average pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub d_in: usize,
    pub d_out: usize,
    pub bn: BatchNorm,
    pub conv: Conv,
}

impl Transition {
    pub fn new<T: Scalar>(
        b: &mut LayerBuilder<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            d_in,
            d_out,
            bn: b.batch_norm(&format!("{name}.bn"), d_in)?,
            conv: b.conv(&format!("{name}.conv"), [d_out, d_in, 1, 1])?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var, TensorError> {
        check_channels(f, x, self.d_in, "transition")?;
        let y = f.batch_norm(x, self.bn)?;
        let y = f.relu(y)?;
        let y = f.conv(y, self.conv, 1, 0)?;
        f.tape.avg_pool2d(y, 2, 2)
    }
}
