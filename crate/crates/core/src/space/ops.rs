//! The two candidate-operation catalogs and their parameterized instances.
//!
//! Every convolutional candidate is a stack of Conv→Norm→ReLU blocks; "x2"
//! variants apply the block twice, with only the first block strided.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, NormStats, ParamGroup, ParamId, ParamStore, Shape4, Tape, Tensor4, Var};

/// Intra-cell candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellOp {
    Zero,
    Skip,
    MaxPool3,
    Conv3,
    Conv3x2,
    SepConv3,
    SepConv3x2,
    DilSepConv3D2,
    DilSepConv3D4,
    DilSepConv3D2x2,
}

pub const CELL_OPS: [CellOp; 10] = [
    CellOp::Zero,
    CellOp::Skip,
    CellOp::MaxPool3,
    CellOp::Conv3,
    CellOp::Conv3x2,
    CellOp::SepConv3,
    CellOp::SepConv3x2,
    CellOp::DilSepConv3D2,
    CellOp::DilSepConv3D4,
    CellOp::DilSepConv3D2x2,
];

/// Aggregation-cell candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggOp {
    Conv1x2,
    Conv3x2,
    DilSepConv3D2x2,
    DilSepConv3D4x2,
    DilSepConv3D8x2,
}

pub const AGG_OPS: [AggOp; 5] = [
    AggOp::Conv1x2,
    AggOp::Conv3x2,
    AggOp::DilSepConv3D2x2,
    AggOp::DilSepConv3D4x2,
    AggOp::DilSepConv3D8x2,
];

/// Either catalog's operation; the two namespaces never overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Cell(CellOp),
    Agg(AggOp),
}

impl CellOp {
    pub fn name(self) -> &'static str {
        match self {
            CellOp::Zero => "zero",
            CellOp::Skip => "skip",
            CellOp::MaxPool3 => "max_pool_3x3",
            CellOp::Conv3 => "conv_3x3",
            CellOp::Conv3x2 => "conv_3x3_x2",
            CellOp::SepConv3 => "sep_conv_3x3",
            CellOp::SepConv3x2 => "sep_conv_3x3_x2",
            CellOp::DilSepConv3D2 => "dil_sep_conv_3x3_d2",
            CellOp::DilSepConv3D4 => "dil_sep_conv_3x3_d4",
            CellOp::DilSepConv3D2x2 => "dil_sep_conv_3x3_d2_x2",
        }
    }

    fn recipe(self) -> Recipe {
        use CellOp::*;
        match self {
            Zero => Recipe::Zero,
            Skip => Recipe::Skip,
            MaxPool3 => Recipe::MaxPool,
            Conv3 => Recipe::blocks(3, 1, false, 1),
            Conv3x2 => Recipe::blocks(3, 1, false, 2),
            SepConv3 => Recipe::blocks(3, 1, true, 1),
            SepConv3x2 => Recipe::blocks(3, 1, true, 2),
            DilSepConv3D2 => Recipe::blocks(3, 2, true, 1),
            DilSepConv3D4 => Recipe::blocks(3, 4, true, 1),
            DilSepConv3D2x2 => Recipe::blocks(3, 2, true, 2),
        }
    }
}

impl AggOp {
    pub fn name(self) -> &'static str {
        match self {
            AggOp::Conv1x2 => "agg_conv_1x1_x2",
            AggOp::Conv3x2 => "agg_conv_3x3_x2",
            AggOp::DilSepConv3D2x2 => "agg_dil_sep_conv_3x3_d2_x2",
            AggOp::DilSepConv3D4x2 => "agg_dil_sep_conv_3x3_d4_x2",
            AggOp::DilSepConv3D8x2 => "agg_dil_sep_conv_3x3_d8_x2",
        }
    }

    fn recipe(self) -> Recipe {
        match self {
            AggOp::Conv1x2 => Recipe::blocks(1, 1, false, 2),
            AggOp::Conv3x2 => Recipe::blocks(3, 1, false, 2),
            AggOp::DilSepConv3D2x2 => Recipe::blocks(3, 2, true, 2),
            AggOp::DilSepConv3D4x2 => Recipe::blocks(3, 4, true, 2),
            AggOp::DilSepConv3D8x2 => Recipe::blocks(3, 8, true, 2),
        }
    }
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Cell(op) => op.name(),
            OpKind::Agg(op) => op.name(),
        }
    }

    fn recipe(self) -> Recipe {
        match self {
            OpKind::Cell(op) => op.recipe(),
            OpKind::Agg(op) => op.recipe(),
        }
    }

    pub fn all() -> impl Iterator<Item = OpKind> {
        CELL_OPS
            .into_iter()
            .map(OpKind::Cell)
            .chain(AGG_OPS.into_iter().map(OpKind::Agg))
    }
}

impl fmt::Display for CellOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for AggOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::all().find(|k| k.name() == s).ok_or_else(|| Error::Malformed {
            kind: "operation",
            msg: format!("unknown operation `{s}`"),
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Recipe {
    Zero,
    Skip,
    MaxPool,
    Blocks {
        kernel: usize,
        dilation: usize,
        separable: bool,
        repeat: usize,
    },
}

impl Recipe {
    const fn blocks(kernel: usize, dilation: usize, separable: bool, repeat: usize) -> Self {
        Recipe::Blocks {
            kernel,
            dilation,
            separable,
            repeat,
        }
    }
}

/// Whether normalization uses batch statistics (and records them) or the
/// frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: the tape, the bound parameter leaves, and the
/// normalization statistics observed along the way.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub vars: &'a [Var],
    pub mode: Mode,
    pub stats: Vec<(NormLayer, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, vars: &'a [Var], mode: Mode) -> Self {
        Self {
            tape,
            store,
            vars,
            mode,
            stats: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Folds observed batch statistics into the running buffers.
pub fn update_running_stats(store: &mut ParamStore, stats: &[(NormLayer, BatchStats)], momentum: f64) {
    for (layer, s) in stats {
        for (r, v) in store.get_mut(layer.running_mean).data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
        for (r, v) in store.get_mut(layer.running_var).data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

/// Registers parameters with deterministic initialization.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamBuilder<'_> {
    /// He-normal convolution weight `[cout x cin/groups x k x k]`.
    pub fn conv_weight(&mut self, name: &str, cout: usize, cin_g: usize, k: usize) -> Result<ParamId> {
        let shape = Shape4::new(cout, cin_g, k, k);
        let std = (2.0 / (cin_g * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..shape.numel()).map(|_| dist.sample(&mut *self.rng)).collect();
        self.store
            .register(name, ParamGroup::Weight, Tensor4::from_vec(shape, data)?)
    }

    pub fn norm(&mut self, prefix: &str, c: usize) -> Result<NormLayer> {
        let v = Shape4::vector(c);
        Ok(NormLayer {
            gamma: self
                .store
                .register(format!("{prefix}.gamma"), ParamGroup::Weight, Tensor4::full(v, 1.0))?,
            beta: self
                .store
                .register(format!("{prefix}.beta"), ParamGroup::Weight, Tensor4::zeros(v))?,
            running_mean: self.store.register(
                format!("{prefix}.running_mean"),
                ParamGroup::Buffer,
                Tensor4::zeros(v),
            )?,
            running_var: self.store.register(
                format!("{prefix}.running_var"),
                ParamGroup::Buffer,
                Tensor4::full(v, 1.0),
            )?,
        })
    }

    pub fn bias(&mut self, name: &str, c: usize) -> Result<ParamId> {
        self.store
            .register(name, ParamGroup::Weight, Tensor4::zeros(Shape4::vector(c)))
    }

    pub fn logits(&mut self, name: &str, group: ParamGroup, rows: usize, len: usize) -> Result<ParamId> {
        self.store
            .register(name, group, Tensor4::zeros(Shape4::new(rows, len, 1, 1)))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl NormLayer {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.norm(x, g, b, NormStats::Batch)?;
                ctx.stats.push((*self, stats.expect("batch stats")));
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                let stats = NormStats::Fixed {
                    mean: store.get(self.running_mean).data(),
                    var: store.get(self.running_var).data(),
                };
                Ok(ctx.tape.norm(x, g, b, stats)?.0)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum ConvLayer {
    Full {
        weight: ParamId,
        stride: usize,
        dilation: usize,
    },
    Separable {
        depthwise: ParamId,
        pointwise: ParamId,
        stride: usize,
        dilation: usize,
    },
}

impl ConvLayer {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match *self {
            ConvLayer::Full {
                weight,
                stride,
                dilation,
            } => {
                let w = ctx.var(weight);
                ctx.tape.conv2d(x, w, stride, dilation, 1)
            }
            ConvLayer::Separable {
                depthwise,
                pointwise,
                stride,
                dilation,
            } => {
                let c = ctx.tape.shape(x).c;
                let dw = ctx.var(depthwise);
                let y = ctx.tape.conv2d(x, dw, stride, dilation, c)?;
                let pw = ctx.var(pointwise);
                ctx.tape.conv2d(y, pw, 1, 1, 1)
            }
        }
    }
}

/// Conv→Norm→ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: ConvLayer,
    pub norm: NormLayer,
}

/// A candidate operation with its own parameters.
#[derive(Clone, Debug)]
pub enum OpInstance {
    Zero { stride: usize },
    Skip { stride: usize },
    MaxPool { stride: usize },
    Blocks(Vec<ConvBlock>),
}

impl OpInstance {
    /// Instantiates `kind` mapping `cin` to `cout` channels; the first block
    /// carries `stride`.
    pub fn build(
        pb: &mut ParamBuilder<'_>,
        prefix: &str,
        kind: OpKind,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        let recipe = kind.recipe();
        if !matches!(recipe, Recipe::Blocks { .. }) && cin != cout {
            return Err(Error::invalid(
                "OpInstance::build",
                format!("{kind} cannot change channels ({cin} -> {cout})"),
            ));
        }
        Ok(match recipe {
            Recipe::Zero => OpInstance::Zero { stride },
            Recipe::Skip => OpInstance::Skip { stride },
            Recipe::MaxPool => OpInstance::MaxPool { stride },
            Recipe::Blocks {
                kernel,
                dilation,
                separable,
                repeat,
            } => {
                let mut blocks = Vec::with_capacity(repeat);
                for b in 0..repeat {
                    let p = format!("{prefix}.{}.b{b}", kind.name());
                    let (c_in, s) = if b == 0 { (cin, stride) } else { (cout, 1) };
                    let conv = if separable {
                        ConvLayer::Separable {
                            depthwise: pb.conv_weight(&format!("{p}.dw"), c_in, 1, kernel)?,
                            pointwise: pb.conv_weight(&format!("{p}.pw"), cout, c_in, 1)?,
                            stride: s,
                            dilation,
                        }
                    } else {
                        ConvLayer::Full {
                            weight: pb.conv_weight(&format!("{p}.w"), cout, c_in, kernel)?,
                            stride: s,
                            dilation,
                        }
                    };
                    blocks.push(ConvBlock {
                        conv,
                        norm: pb.norm(&format!("{p}.norm"), cout)?,
                    });
                }
                OpInstance::Blocks(blocks)
            }
        })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, OpInstance::Zero { .. })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            OpInstance::Zero { stride } => {
                let s = ctx.tape.shape(x);
                let shape = Shape4::new(s.n, s.c, s.h.div_ceil(*stride), s.w.div_ceil(*stride));
                ctx.tape.constant(shape, vec![0.0; shape.numel()])
            }
            OpInstance::Skip { stride } => ctx.tape.subsample(x, *stride),
            OpInstance::MaxPool { stride } => ctx.tape.max_pool3(x, *stride),
            OpInstance::Blocks(blocks) => {
                let mut y = x;
                for b in blocks {
                    y = b.conv.forward(ctx, y)?;
                    y = b.norm.forward(ctx, y)?;
                    y = ctx.tape.relu(y)?;
                }
                Ok(y)
            }
        }
    }
}

/// Fixed 1x1 Conv→Norm used to reconcile channel counts and resolutions.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub weight: ParamId,
    pub stride: usize,
    pub norm: NormLayer,
}

impl Adapter {
    pub fn build(pb: &mut ParamBuilder<'_>, prefix: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.conv_weight(&format!("{prefix}.w"), cout, cin, 1)?,
            stride,
            norm: pb.norm(&format!("{prefix}.norm"), cout)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let y = ctx.tape.conv2d(x, w, self.stride, 1, 1)?;
        self.norm.forward(ctx, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalogs_have_expected_sizes_and_disjoint_names() {
        assert_eq!(CELL_OPS.len(), 10);
        assert_eq!(AGG_OPS.len(), 5);
        let names: std::collections::HashSet<_> = OpKind::all().map(|k| k.name()).collect();
        assert_eq!(names.len(), 15);
        for k in OpKind::all() {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
    }
}
