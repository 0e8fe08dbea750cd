//! Whole-network assembly for the two Cifar families and the Min-block
//! substitution rule (the first block of every stack becomes a Min-block).

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::blocks::{Bottleneck, MinBlock, MinBlockAux, MinBlockConfig, PyramidBlock, Transition};
use crate::error::TensorError;
use crate::nn::{BatchNorm, BufferStore, Conv, Forward, LayerBuilder, Linear, ParamStore};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial side of the three stacks for 32×32 inputs.
pub const STACK_SIZES: [usize; 3] = [32, 16, 8];
pub const NUM_STACKS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    PyramidResNet,
    DenseNetBc,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::PyramidResNet => "pyramid_resnet",
            Family::DenseNetBc => "densenet_bc",
        })
    }
}

impl FromStr for Family {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pyramid_resnet" | "resnet" | "pyramid" => Ok(Family::PyramidResNet),
            "densenet_bc" | "densenet" => Ok(Family::DenseNetBc),
            other => Err(TensorError::InvalidArgument(format!("unknown model family {other:?}"))),
        }
    }
}

/// How fractional PyramidNet widths are turned into channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WidthRounding {
    Round,
    Floor,
}

impl fmt::Display for WidthRounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WidthRounding::Round => "round",
            WidthRounding::Floor => "floor",
        })
    }
}

impl FromStr for WidthRounding {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "round" => Ok(WidthRounding::Round),
            "floor" => Ok(WidthRounding::Floor),
            other => Err(TensorError::InvalidArgument(format!("unknown width rounding {other:?}"))),
        }
    }
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    /// Blocks per stack.
    pub n: usize,
    /// DenseNet growth rate.
    pub k: usize,
    /// PyramidNet total additive widening.
    pub alpha: f64,
    /// Min-block expansion factor.
    pub q: usize,
    pub num_classes: usize,
    pub min_substitution: bool,
    pub seed: u64,
    /// PyramidNet stem width.
    pub base_width: usize,
    pub rounding: WidthRounding,
}

impl ModelSpec {
    pub fn pyramid(n: usize, min_substitution: bool) -> Self {
        Self {
            family: Family::PyramidResNet,
            n,
            k: 12,
            alpha: 48.0,
            q: 2,
            num_classes: 10,
            min_substitution,
            seed: 0,
            base_width: 16,
            rounding: WidthRounding::Round,
        }
    }

    pub fn densenet(n: usize, k: usize, min_substitution: bool) -> Self {
        Self { family: Family::DenseNetBc, k, ..Self::pyramid(n, min_substitution) }
    }

    /// DenseNet-BC from its depth `L = 6N + 4`.
    pub fn densenet_depth(depth: usize, k: usize, min_substitution: bool) -> Result<Self, TensorError> {
        if depth < 10 || !(depth - 4).is_multiple_of(6) {
            return Err(TensorError::InvalidArgument(format!("DenseNet-BC depth {depth} is not of the form 6N + 4")));
        }
        Ok(Self::densenet((depth - 4) / 6, k, min_substitution))
    }

    /// Layer depth in the usual naming convention.
    pub fn depth(&self) -> usize {
        match self.family {
            Family::DenseNetBc => 6 * self.n + 4,
            Family::PyramidResNet => 6 * self.n + 2,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |msg: String| Err(TensorError::InvalidArgument(msg));
        if self.n == 0 {
            return bad("blocks per stack must be >= 1".into());
        }
        if self.q == 0 {
            return bad("expansion factor q must be >= 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        match self.family {
            Family::DenseNetBc if self.k == 0 => bad("growth rate k must be >= 1".into()),
            Family::PyramidResNet if self.base_width == 0 => bad("base_width must be >= 1".into()),
            Family::PyramidResNet if !(self.alpha >= 0.0 && self.alpha.is_finite()) => {
                bad(format!("alpha must be finite and >= 0, got {}", self.alpha))
            }
            _ => Ok(()),
        }
    }

    /// PyramidNet output width of block `j` (1-based across all stacks).
    pub fn pyramid_width(&self, j: usize) -> usize {
        let extra = self.alpha * j as f64 / (NUM_STACKS * self.n) as f64;
        let extra = match self.rounding {
            WidthRounding::Round => extra.round(),
            WidthRounding::Floor => extra.floor(),
        };
        self.base_width + extra as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Min,
    PyramidBasic,
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedBlock {
    pub kind: BlockKind,
    pub d_in: usize,
    pub d_out: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackPlan {
    pub blocks: Vec<PlannedBlock>,
    /// Input spatial side of the stack.
    pub size: usize,
    /// DenseNet transition `(d_in, d_out)` after this stack.
    pub transition: Option<(usize, usize)>,
}

/// Layer-by-layer channel plan of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    pub stem_out: usize,
    pub stacks: Vec<StackPlan>,
    /// Channels entering the classifier head.
    pub head_in: usize,
}

impl BlockPlan {
    pub fn kinds(&self) -> Vec<Vec<BlockKind>> {
        self.stacks.iter().map(|s| s.blocks.iter().map(|b| b.kind).collect()).collect()
    }

    pub fn count(&self, kind: BlockKind) -> usize {
        self.stacks.iter().flat_map(|s| &s.blocks).filter(|b| b.kind == kind).count()
    }
}

/// Baseline plan of `spec`, ignoring `min_substitution`.
pub fn baseline_plan(spec: &ModelSpec) -> Result<BlockPlan, TensorError> {
    spec.validate()?;
    match spec.family {
        Family::PyramidResNet => {
            let mut stacks = Vec::with_capacity(NUM_STACKS);
            let mut width = spec.base_width;
            let mut j = 0;
            for (s, &size) in STACK_SIZES.iter().enumerate() {
                let mut blocks = Vec::with_capacity(spec.n);
                for b in 0..spec.n {
                    j += 1;
                    let d_out = spec.pyramid_width(j);
                    blocks.push(PlannedBlock {
                        kind: BlockKind::PyramidBasic,
                        d_in: width,
                        d_out,
                        stride: if s > 0 && b == 0 { 2 } else { 1 },
                    });
                    width = d_out;
                }
                stacks.push(StackPlan { blocks, size, transition: None });
            }
            Ok(BlockPlan { stem_out: spec.base_width, stacks, head_in: width })
        }
        Family::DenseNetBc => {
            let mut stacks = Vec::with_capacity(NUM_STACKS);
            let mut width = 2 * spec.k;
            for (s, &size) in STACK_SIZES.iter().enumerate() {
                let mut blocks = Vec::with_capacity(spec.n);
                for _ in 0..spec.n {
                    blocks.push(PlannedBlock { kind: BlockKind::Bottleneck, d_in: width, d_out: spec.k, stride: 1 });
                    width += spec.k;
                }
                let transition = (s + 1 < NUM_STACKS).then(|| {
                    let out = width / 2;
                    let t = (width, out);
                    width = out;
                    t
                });
                stacks.push(StackPlan { blocks, size, transition });
            }
            Ok(BlockPlan { stem_out: 2 * spec.k, stacks, head_in: width })
        }
    }
}

/// Effective plan: the first block of every stack becomes a Min-block when
/// `spec.min_substitution` is set, keeping its position's channels and stride.
pub fn apply_min_substitution(spec: &ModelSpec) -> Result<BlockPlan, TensorError> {
    let mut plan = baseline_plan(spec)?;
    if spec.min_substitution {
        for stack in &mut plan.stacks {
            if let Some(first) = stack.blocks.first_mut() {
                first.kind = BlockKind::Min;
            }
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Block {
    Min(MinBlock),
    Pyramid(PyramidBlock),
    Dense(Bottleneck),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Stack {
    names: Vec<String>,
    blocks: Vec<Block>,
    transition: Option<Transition>,
}

/// Outputs of one model forward pass.
pub struct ModelOutput<T> {
    pub logits: Var,
    /// Batch statistics gathered in training mode.
    pub updates: Vec<(usize, BatchStats<T>)>,
    /// Per Min-block intermediates, when requested.
    pub aux: Vec<(String, MinBlockAux)>,
    /// Output of each stack (before any transition).
    pub stack_outputs: Vec<Var>,
}

/// A built network with its parameters and batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub spec: ModelSpec,
    pub plan: BlockPlan,
    pub params: ParamStore<T>,
    pub buffers: BufferStore<T>,
    stem: Conv,
    stem_bn: Option<BatchNorm>,
    stacks: Vec<Stack>,
    head_bn: BatchNorm,
    classifier: Linear,
}

/// Builds the network described by `spec`, initializing from `spec.seed`.
pub fn build<T: Scalar>(spec: &ModelSpec) -> Result<Model<T>, TensorError> {
    let plan = apply_min_substitution(spec)?;
    let mut params = ParamStore::new();
    let mut buffers = BufferStore::new();
    let mut rng = rng::stream(spec.seed, Stream::Init);
    let mut b = LayerBuilder::new(&mut params, &mut buffers, &mut rng);

    let stem = b.conv("stem.conv", [plan.stem_out, 3, 3, 3])?;
    let stem_bn = match spec.family {
        Family::PyramidResNet => Some(b.batch_norm("stem.bn", plan.stem_out)?),
        Family::DenseNetBc => None,
    };
    let mut stacks = Vec::with_capacity(plan.stacks.len());
    for (s, sp) in plan.stacks.iter().enumerate() {
        let mut names = Vec::with_capacity(sp.blocks.len());
        let mut blocks = Vec::with_capacity(sp.blocks.len());
        for (i, pb) in sp.blocks.iter().enumerate() {
            let name = format!("stack{s}.block{i}");
            let block = match pb.kind {
                BlockKind::Min => {
                    let cfg = MinBlockConfig::new(pb.d_in, pb.d_out, spec.q, pb.stride);
                    Block::Min(MinBlock::new(&mut b, &name, cfg)?)
                }
                BlockKind::PyramidBasic => {
                    Block::Pyramid(PyramidBlock::new(&mut b, &name, pb.d_in, pb.d_out, pb.stride)?)
                }
                BlockKind::Bottleneck => Block::Dense(Bottleneck::new(&mut b, &name, pb.d_in, pb.d_out)?),
            };
            names.push(name);
            blocks.push(block);
        }
        let transition = match sp.transition {
            Some((d_in, d_out)) => Some(Transition::new(&mut b, &format!("transition{s}"), d_in, d_out)?),
            None => None,
        };
        stacks.push(Stack { names, blocks, transition });
    }
    let head_bn = b.batch_norm("head.bn", plan.head_in)?;
    let classifier = b.linear("head.fc", plan.head_in, spec.num_classes)?;
    Ok(Model { spec: spec.clone(), plan, params, buffers, stem, stem_bn, stacks, head_bn, classifier })
}

impl<T: Scalar> Model<T> {
    /// Total learnable scalars (instance norm contributes none).
    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// Records a forward pass of `input` (`[n, 3, h, w]`) using already-bound
    /// parameter leaves.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        input: Var,
        training: bool,
        keep_aux: bool,
    ) -> Result<ModelOutput<T>, TensorError> {
        let (_, c, _, _) = tape.value(input).dims4()?;
        if c != 3 {
            return Err(TensorError::InvalidArgument(format!("model input must have 3 channels, got {c}")));
        }
        let mut f = Forward::new(tape, params, &self.buffers, training);
        f.keep_aux = keep_aux;
        let mut aux = Vec::new();
        let mut stack_outputs = Vec::with_capacity(self.stacks.len());

        let mut x = f.conv(input, self.stem, 1, 1)?;
        if let Some(bn) = self.stem_bn {
            x = f.batch_norm(x, bn)?;
        }
        for stack in &self.stacks {
            for (name, block) in stack.names.iter().zip(&stack.blocks) {
                x = match (self.spec.family, block) {
                    (Family::PyramidResNet, Block::Min(m)) => {
                        let out = m.forward(&mut f, x)?;
                        aux.extend(out.aux.map(|a| (name.clone(), a)));
                        out.tensor
                    }
                    (Family::DenseNetBc, Block::Min(m)) => {
                        let out = m.forward(&mut f, x)?;
                        aux.extend(out.aux.map(|a| (name.clone(), a)));
                        f.tape.concat_channels(&[x, out.tensor])?
                    }
                    (_, Block::Pyramid(p)) => p.forward(&mut f, x)?,
                    (_, Block::Dense(d)) => {
                        let new = d.forward(&mut f, x)?;
                        f.tape.concat_channels(&[x, new])?
                    }
                };
            }
            stack_outputs.push(x);
            if let Some(t) = &stack.transition {
                x = t.forward(&mut f, x)?;
            }
        }
        let x = f.batch_norm(x, self.head_bn)?;
        let x = f.relu(x)?;
        let x = f.tape.global_avg_pool(x)?;
        let logits = f.linear(x, self.classifier)?;
        Ok(ModelOutput { logits, updates: std::mem::take(&mut f.updates), aux, stack_outputs })
    }

    /// Binds parameters and records a forward pass.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: Tensor<T>,
        training: bool,
    ) -> Result<(Vec<Var>, ModelOutput<T>), TensorError> {
        let params = self.params.bind(tape);
        let x = tape.input(input);
        let out = self.forward_with(tape, &params, x, training, false)?;
        Ok((params, out))
    }

    /// Inference-mode logits for a batch.
    pub fn logits(&self, input: Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let (_, out) = self.forward(&mut tape, input, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Inference-mode argmax predictions for a batch (lowest index wins ties).
    pub fn predict(&self, input: Tensor<T>) -> Result<Vec<usize>, TensorError> {
        let logits = self.logits(input)?;
        let classes = self.spec.num_classes;
        Ok(logits.data().chunks(classes).map(argmax).collect())
    }

    /// Min-blocks in network order, with their parameter-name prefixes.
    pub fn min_blocks(&self) -> impl Iterator<Item = (&str, &MinBlock)> {
        self.stacks.iter().flat_map(|s| {
            s.names.iter().zip(&s.blocks).filter_map(|(n, b)| match b {
                Block::Min(m) => Some((n.as_str(), m)),
                _ => None,
            })
        })
    }

    /// Same network in another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            plan: self.plan.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            stem: self.stem,
            stem_bn: self.stem_bn,
            stacks: self.stacks.clone(),
            head_bn: self.head_bn,
            classifier: self.classifier,
        }
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densenet_depth_naming() {
        assert_eq!(ModelSpec::densenet(16, 12, false).depth(), 100);
        assert_eq!(ModelSpec::densenet(9, 12, false).depth(), 58);
        assert_eq!(ModelSpec::densenet(3, 12, false).depth(), 22);
        assert_eq!(ModelSpec::densenet_depth(100, 12, true).unwrap().n, 16);
        assert!(ModelSpec::densenet_depth(101, 12, true).is_err());
    }

    #[test]
    fn resnet_plan_substitutes_first_block_per_stack() {
        let plan = apply_min_substitution(&ModelSpec::pyramid(5, true)).unwrap();
        use BlockKind::*;
        let row = vec![Min, PyramidBasic, PyramidBasic, PyramidBasic, PyramidBasic];
        assert_eq!(plan.kinds(), vec![row.clone(), row.clone(), row]);
        let strides: Vec<usize> = plan.stacks.iter().map(|s| s.blocks[0].stride).collect();
        assert_eq!(strides, vec![1, 2, 2]);
        let sizes: Vec<usize> = plan.stacks.iter().map(|s| s.size).collect();
        assert_eq!(sizes, vec![32, 16, 8]);
    }

    #[test]
    fn substitution_off_keeps_baseline() {
        for spec in [ModelSpec::pyramid(3, false), ModelSpec::densenet(3, 12, false)] {
            assert_eq!(apply_min_substitution(&spec).unwrap(), baseline_plan(&spec).unwrap());
        }
    }

    #[test]
    fn densenet_min_plan() {
        let plan = apply_min_substitution(&ModelSpec::densenet(3, 12, true)).unwrap();
        assert_eq!(plan.count(BlockKind::Min), 3);
        for stack in &plan.stacks {
            assert_eq!(stack.blocks[0].kind, BlockKind::Min);
            assert_eq!(stack.blocks[0].stride, 1);
            assert_eq!(stack.blocks[0].d_out, 12);
        }
    }

    #[test]
    fn pyramid_widths_reach_alpha() {
        let spec = ModelSpec::pyramid(3, false);
        assert_eq!(spec.pyramid_width(9), 16 + 48);
        assert_eq!(spec.pyramid_width(1), 16 + 5); // 48/9 = 5.33
        let floor = ModelSpec { rounding: WidthRounding::Floor, ..spec.clone() };
        assert_eq!(floor.pyramid_width(2), 16 + 10); // 10.67
        assert_eq!(spec.pyramid_width(2), 16 + 11);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(baseline_plan(&ModelSpec::pyramid(0, false)).is_err());
        assert!(baseline_plan(&ModelSpec::densenet(3, 0, false)).is_err());
        let mut s = ModelSpec::pyramid(1, true);
        s.q = 0;
        assert!(baseline_plan(&s).is_err());
    }

    #[test]
    fn family_parsing() {
        assert_eq!("densenet".parse::<Family>().unwrap(), Family::DenseNetBc);
        assert_eq!("pyramid_resnet".parse::<Family>().unwrap(), Family::PyramidResNet);
        assert!("vgg".parse::<Family>().is_err());
    }
}
