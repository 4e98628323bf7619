//! Reverse-mode gradient tape.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Shape4, Tensor4};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics mode.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with frozen running statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics observed by a batch-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when only one value per channel).
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Subsample {
        x: Var,
        stride: usize,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    AddConst {
        x: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Mix {
        xs: Vec<Var>,
        weights: Var,
        slots: Vec<usize>,
    },
    SoftmaxRows {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Arc<[u32]>,
        ignore: Option<u32>,
        count: usize,
    },
    Sum {
        x: Var,
    },
    Dot {
        a: Var,
        b: Var,
    },
    DotConst {
        x: Var,
        consts: Vec<f64>,
    },
    Ln {
        x: Var,
    },
    SuffixSum {
        x: Var,
    },
    Stack {
        xs: Vec<Var>,
    },
    Select {
        x: Var,
        index: usize,
    },
}

struct Node {
    shape: Shape4,
    data: Vec<f64>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

/// Ordered record of forward operations.
///
/// Nodes are appended in execution order, so every input precedes the node
/// that consumes it and a reverse sweep is a valid topological traversal.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Writes each bound parameter's gradient into the store.
    /// Parameters unreachable from the loss get a zero gradient.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        for &(var, id) in &self.params {
            let t = store.get_mut(id);
            let g = match self.get(var) {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.shape().numel()],
            };
            t.set_grad(g)?;
        }
        Ok(())
    }

    /// Gradient for a bound parameter, if it was reached.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(_, p)| *p == id)
            .and_then(|&(v, _)| self.get(v))
    }
}

fn same_shape(op: &'static str, a: Shape4, b: Shape4) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch { op, lhs: a, rhs: b });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor4 {
        let n = &self.nodes[v.0];
        Tensor4::from_vec(n.shape, n.data.clone()).expect("node shape")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, op_name: &'static str, shape: Shape4, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(shape.numel(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            param: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor as a leaf; its `requires_grad` flag is honored.
    pub fn leaf(&mut self, t: &Tensor4) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            shape: t.shape(),
            data: t.data().to_vec(),
            requires_grad: t.requires_grad,
            param: None,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, shape: Shape4, data: Vec<f64>) -> Result<Var> {
        let t = Tensor4::from_vec(shape, data)?;
        self.leaf(&t)
    }

    /// Binds a stored parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let v = self.leaf(store.get(id))?;
        self.nodes[v.0].param = Some(id);
        Ok(v)
    }

    /// Binds every parameter in the store; the result is indexed by `ParamId.0`.
    pub fn bind_all(&mut self, store: &ParamStore) -> Result<Vec<Var>> {
        store.ids().map(|id| self.param(store, id)).collect()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, dilation: usize, groups: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::invalid("conv2d", "stride, dilation and groups must be positive"));
        }
        if ws.h != ws.w || ws.h.is_multiple_of(2) || !xs.c.is_multiple_of(groups) || !ws.n.is_multiple_of(groups) || ws.c * groups != xs.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let k = ws.h;
        let (Some(ho), Some(wo)) = (
            kernels::conv_out_len(xs.h, k, stride, dilation),
            kernels::conv_out_len(xs.w, k, stride, dilation),
        ) else {
            return Err(Error::EmptyOutput {
                op: "conv2d",
                input: xs,
            });
        };
        let geom = ConvGeom {
            input: xs,
            output: Shape4::new(xs.n, ws.n, ho, wo),
            kernel: k,
            stride,
            dilation,
            groups,
            pad: kernels::same_padding(k, dilation),
        };
        let out = kernels::conv2d_forward(&geom, self.value(x), self.value(w));
        self.push("conv2d", geom.output, out, Op::Conv2d { x, w, geom }, &[x, w])
    }

    pub fn max_pool3(&mut self, x: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        if stride == 0 {
            return Err(Error::invalid("max_pool3", "stride must be positive"));
        }
        let (Some(ho), Some(wo)) = (
            kernels::conv_out_len(xs.h, 3, stride, 1),
            kernels::conv_out_len(xs.w, 3, stride, 1),
        ) else {
            return Err(Error::EmptyOutput {
                op: "max_pool3",
                input: xs,
            });
        };
        let out_shape = Shape4::new(xs.n, xs.c, ho, wo);
        let (out, argmax) = kernels::max_pool3_forward(xs, self.value(x), out_shape, stride);
        self.push("max_pool3", out_shape, out, Op::MaxPool { x, argmax }, &[x])
    }

    /// Keeps every `stride`-th pixel starting at the origin.
    pub fn subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        if stride == 1 {
            return Ok(x);
        }
        if xs.h == 0 || xs.w == 0 || stride == 0 {
            return Err(Error::EmptyOutput {
                op: "subsample",
                input: xs,
            });
        }
        let (ho, wo) = (xs.h.div_ceil(stride), xs.w.div_ceil(stride));
        let src = self.value(x);
        let mut out = Vec::with_capacity(xs.n * xs.c * ho * wo);
        for nc in 0..xs.n * xs.c {
            for oh in 0..ho {
                for ow in 0..wo {
                    out.push(src[nc * xs.plane() + oh * stride * xs.w + ow * stride]);
                }
            }
        }
        let shape = Shape4::new(xs.n, xs.c, ho, wo);
        self.push("subsample", shape, out, Op::Subsample { x, stride }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        self.push("relu", self.shape(x), out, Op::Relu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push("add", self.shape(a), out, Op::Add { a, b }, &[a, b])
    }

    /// Left-to-right sum of same-shaped values.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| Error::invalid("add_all", "no inputs"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push("mul", self.shape(a), out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        self.push("scale", self.shape(x), out, Op::Scale { x, factor }, &[x])
    }

    /// Adds a constant tensor of the same shape (no gradient to the constant).
    pub fn add_const(&mut self, x: Var, consts: &[f64]) -> Result<Var> {
        if consts.len() != self.shape(x).numel() {
            return Err(Error::invalid("add_const", "length mismatch"));
        }
        let out = self.value(x).iter().zip(consts).map(|(a, b)| a + b).collect();
        self.push("add_const", self.shape(x), out, Op::AddConst { x }, &[x])
    }

    /// Adds a per-channel bias of shape `[1 x C x 1 x 1]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        same_shape("add_bias", Shape4::vector(xs.c), self.shape(b))?;
        let bias = self.value(b);
        let plane = xs.plane();
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[(i / plane) % xs.c])
            .collect();
        self.push("add_bias", xs, out, Op::AddBias { x, b }, &[x, b])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?);
        let mut c = 0;
        for &x in xs {
            let s = self.shape(x);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first,
                    rhs: s,
                });
            }
            c += s.c;
        }
        let shape = first.with_channels(c);
        let mut out = Vec::with_capacity(shape.numel());
        for n in 0..first.n {
            for &x in xs {
                let s = self.shape(x);
                out.extend_from_slice(&self.value(x)[n * s.c * s.plane()..][..s.c * s.plane()]);
            }
        }
        self.push("concat_channels", shape, out, Op::Concat { xs: xs.to_vec() }, xs)
    }

    /// Bilinear upsampling by an integer factor with half-pixel centers.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x);
        if factor == 0 || xs.h == 0 || xs.w == 0 {
            return Err(Error::EmptyOutput {
                op: "upsample",
                input: xs,
            });
        }
        if factor == 1 {
            return Ok(x);
        }
        let out = kernels::upsample_forward(xs, self.value(x), factor);
        let shape = Shape4::new(xs.n, xs.c, xs.h * factor, xs.w * factor);
        self.push("upsample", shape, out, Op::Upsample { x, factor }, &[x])
    }

    /// Per-channel affine normalization. Returns the batch statistics when
    /// normalizing with batch statistics.
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormStats<'_>) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x);
        same_shape("norm", Shape4::vector(xs.c), self.shape(gamma))?;
        same_shape("norm", Shape4::vector(xs.c), self.shape(beta))?;
        let plane = xs.plane();
        let count = xs.n * plane;
        if count == 0 {
            return Err(Error::EmptyOutput { op: "norm", input: xs });
        }
        let src = self.value(x);
        let (mean, var_biased, observed) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; xs.c];
                let mut var = vec![0.0; xs.c];
                for c in 0..xs.c {
                    let mut s = 0.0;
                    for n in 0..xs.n {
                        s += src[(n * xs.c + c) * plane..][..plane].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut v = 0.0;
                    for n in 0..xs.n {
                        v += src[(n * xs.c + c) * plane..][..plane]
                            .iter()
                            .map(|x| (x - m) * (x - m))
                            .sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = v / count as f64;
                }
                let unbiased = if count > 1 {
                    var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect()
                } else {
                    var.clone()
                };
                let observed = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(observed))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != xs.c || var.len() != xs.c {
                    return Err(Error::invalid("norm", "running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = Vec::with_capacity(xs.numel());
        for (i, v) in src.iter().enumerate() {
            let c = (i / plane) % xs.c;
            out.push(g[c] * (v - mean[c]) * inv_std[c] + b[c]);
        }
        let batch = observed.is_some();
        let v = self.push(
            "norm",
            xs,
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, observed))
    }

    /// `sum_i weights[slots[i]] * xs[i]`, accumulated left to right.
    pub fn mix(&mut self, xs: &[Var], weights: Var, slots: &[usize]) -> Result<Var> {
        if xs.is_empty() || xs.len() != slots.len() {
            return Err(Error::invalid(
                "mix",
                "inputs and slots must be non-empty and equal length",
            ));
        }
        let shape = self.shape(xs[0]);
        let wv = self.value(weights);
        if let Some(&bad) = slots.iter().find(|&&s| s >= wv.len()) {
            return Err(Error::invalid("mix", format!("slot {bad} out of range")));
        }
        let mut out = vec![0.0; shape.numel()];
        for (&x, &slot) in xs.iter().zip(slots) {
            same_shape("mix", shape, self.shape(x))?;
            let m = self.value(weights)[slot];
            for (o, v) in out.iter_mut().zip(self.value(x)) {
                *o += m * v;
            }
        }
        let mut inputs = xs.to_vec();
        inputs.push(weights);
        self.push(
            "mix",
            shape,
            out,
            Op::Mix {
                xs: xs.to_vec(),
                weights,
                slots: slots.to_vec(),
            },
            &inputs,
        )
    }

    /// Softmax along the channel axis for each batch row of an `[R x K x 1 x 1]` value.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h != 1 || s.w != 1 || s.c == 0 {
            return Err(Error::invalid(
                "softmax_rows",
                format!("expected [R x K x 1 x 1], got {s}"),
            ));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(s.c) {
            super::softmax_in_place(row);
        }
        self.push("softmax_rows", s, out, Op::SoftmaxRows { x }, &[x])
    }

    /// Mean pixel-wise negative log-likelihood of `labels` under channel softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[u32]>, ignore: Option<u32>) -> Result<Var> {
        let s = self.shape(logits);
        if labels.len() != s.n * s.plane() {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} labels for logits {s}", labels.len()),
            ));
        }
        let plane = s.plane();
        let src = self.value(logits);
        let mut total = 0.0;
        let mut count = 0;
        let mut row = vec![0.0; s.c];
        for n in 0..s.n {
            for p in 0..plane {
                let label = labels[n * plane + p];
                if Some(label) == ignore {
                    continue;
                }
                if label as usize >= s.c {
                    return Err(Error::LabelOutOfRange { label, classes: s.c });
                }
                for (c, r) in row.iter_mut().enumerate() {
                    *r = src[(n * s.c + c) * plane + p];
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[label as usize];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        let loss = total / count as f64;
        self.push(
            "cross_entropy",
            Shape4::scalar(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                count,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().sum();
        self.push("sum", Shape4::scalar(), vec![total], Op::Sum { x }, &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("dot", self.shape(a), self.shape(b))?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push("dot", Shape4::scalar(), vec![v], Op::Dot { a, b }, &[a, b])
    }

    pub fn dot_const(&mut self, x: Var, consts: &[f64]) -> Result<Var> {
        if consts.len() != self.shape(x).numel() {
            return Err(Error::invalid("dot_const", "length mismatch"));
        }
        let v = self.value(x).iter().zip(consts).map(|(a, b)| a * b).sum();
        self.push(
            "dot_const",
            Shape4::scalar(),
            vec![v],
            Op::DotConst {
                x,
                consts: consts.to_vec(),
            },
            &[x],
        )
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("ln", "non-positive input"));
        }
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        self.push("ln", self.shape(x), out, Op::Ln { x }, &[x])
    }

    /// Reverse cumulative sum along the channel axis of each row:
    /// `out[r, k] = sum_{j >= k} x[r, j]`.
    pub fn suffix_sum(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h != 1 || s.w != 1 {
            return Err(Error::invalid(
                "suffix_sum",
                format!("expected [R x K x 1 x 1], got {s}"),
            ));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(s.c) {
            for k in (0..row.len().saturating_sub(1)).rev() {
                row[k] += row[k + 1];
            }
        }
        self.push("suffix_sum", s, out, Op::SuffixSum { x }, &[x])
    }

    /// Stacks scalars into a `[1 x K x 1 x 1]` vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            same_shape("stack", Shape4::scalar(), self.shape(x))?;
            out.push(self.item(x));
        }
        self.push(
            "stack",
            Shape4::vector(xs.len()),
            out,
            Op::Stack { xs: xs.to_vec() },
            xs,
        )
    }

    /// Extracts one element (flat index) as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .get(index)
            .ok_or_else(|| Error::invalid("select", format!("index {index} out of range")))?;
        self.push("select", Shape4::scalar(), vec![v], Op::Select { x, index }, &[x])
    }

    /// Runs the reverse sweep from a scalar loss and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Tape { nodes } = self;
        let ls = nodes[loss.0].shape;
        if ls.numel() != 1 {
            return Err(Error::invalid("backward", format!("loss must be scalar, got {ls}")));
        }
        if !nodes[loss.0].data[0].is_finite() {
            return Err(Error::NonFinite("backward loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, &g, &mut grads)?;
        }
        let mut params = Vec::new();
        let mut out: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.data.len()]);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward gradient"));
                }
                if let Some(id) = node.param {
                    params.push((Var(i), id));
                }
                out[i] = Some(g);
            }
        }
        Ok(Gradients { grads: out, params })
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let rg = |v: &Var| nodes[v.0].requires_grad;
    let numel = |v: &Var| nodes[v.0].data.len();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, geom } => {
            let (dx, dw) = kernels::conv2d_backward(geom, &nodes[x.0].data, &nodes[w.0].data, g, rg(x), rg(w));
            if let Some(dx) = dx {
                accumulate(&mut grads[x.0], dx);
            }
            if let Some(dw) = dw {
                accumulate(&mut grads[w.0], dw);
            }
        }
        Op::MaxPool { x, argmax } => {
            accumulate_with(&mut grads[x.0], numel(x), |dx| {
                for (&idx, gv) in argmax.iter().zip(g) {
                    dx[idx as usize] += gv;
                }
            });
        }
        Op::Subsample { x, stride } => {
            let xs = nodes[x.0].shape;
            let (ho, wo) = (node.shape.h, node.shape.w);
            accumulate_with(&mut grads[x.0], numel(x), |dx| {
                let mut it = g.iter();
                for nc in 0..xs.n * xs.c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            dx[nc * xs.plane() + oh * stride * xs.w + ow * stride] += it.next().unwrap();
                        }
                    }
                }
            });
        }
        Op::Relu { x } => {
            let xv = &nodes[x.0].data;
            accumulate_with(&mut grads[x.0], numel(x), |dx| {
                for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *d += gv;
                    }
                }
            });
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if rg(v) {
                    accumulate_with(&mut grads[v.0], g.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv)
                    });
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
            if rg(a) {
                accumulate(&mut grads[a.0], g.iter().zip(bv).map(|(x, y)| x * y).collect());
            }
            if rg(b) {
                accumulate(&mut grads[b.0], g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
        }
        Op::Scale { x, factor } => {
            accumulate(&mut grads[x.0], g.iter().map(|v| v * factor).collect());
        }
        Op::AddConst { x } => accumulate(&mut grads[x.0], g.to_vec()),
        Op::AddBias { x, b } => {
            let s = node.shape;
            if rg(x) {
                accumulate(&mut grads[x.0], g.to_vec());
            }
            if rg(b) {
                let mut db = vec![0.0; s.c];
                for (i, gv) in g.iter().enumerate() {
                    db[(i / s.plane()) % s.c] += gv;
                }
                accumulate(&mut grads[b.0], db);
            }
        }
        Op::Concat { xs } => {
            let s = node.shape;
            let mut offset = 0;
            for x in xs {
                let xs_ = nodes[x.0].shape;
                if rg(x) {
                    let mut d = Vec::with_capacity(xs_.numel());
                    for n in 0..s.n {
                        d.extend_from_slice(&g[(n * s.c + offset) * s.plane()..][..xs_.c * s.plane()]);
                    }
                    accumulate(&mut grads[x.0], d);
                }
                offset += xs_.c;
            }
        }
        Op::Upsample { x, factor } => {
            accumulate(
                &mut grads[x.0],
                kernels::upsample_backward(nodes[x.0].shape, g, *factor),
            );
        }
        Op::Norm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            batch,
        } => {
            let s = nodes[x.0].shape;
            let plane = s.plane();
            let m = (s.n * plane) as f64;
            let xv = &nodes[x.0].data;
            let gam = &nodes[gamma.0].data;
            let mut sum_g = vec![0.0; s.c];
            let mut sum_gx = vec![0.0; s.c];
            for (i, (gv, v)) in g.iter().zip(xv).enumerate() {
                let c = (i / plane) % s.c;
                sum_g[c] += gv;
                sum_gx[c] += gv * (v - mean[c]) * inv_std[c];
            }
            if rg(gamma) {
                accumulate(&mut grads[gamma.0], sum_gx.clone());
            }
            if rg(beta) {
                accumulate(&mut grads[beta.0], sum_g.clone());
            }
            if rg(x) {
                accumulate_with(&mut grads[x.0], xv.len(), |dx| {
                    for (i, (d, (gv, v))) in dx.iter_mut().zip(g.iter().zip(xv)).enumerate() {
                        let c = (i / plane) % s.c;
                        let k = gam[c] * inv_std[c];
                        if *batch {
                            let xhat = (v - mean[c]) * inv_std[c];
                            *d += k * (gv - sum_g[c] / m - xhat * sum_gx[c] / m);
                        } else {
                            *d += k * gv;
                        }
                    }
                });
            }
        }
        Op::Mix { xs, weights, slots } => {
            let wv = &nodes[weights.0].data;
            let mut dw = vec![0.0; wv.len()];
            for (x, &slot) in xs.iter().zip(slots) {
                let xv = &nodes[x.0].data;
                dw[slot] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                if rg(x) {
                    let m = wv[slot];
                    accumulate_with(&mut grads[x.0], xv.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, gv)| *d += m * gv)
                    });
                }
            }
            if rg(weights) {
                accumulate(&mut grads[weights.0], dw);
            }
        }
        Op::SoftmaxRows { x } => {
            let k = node.shape.c;
            let mut dx = vec![0.0; g.len()];
            for ((d, y), gr) in dx.chunks_mut(k).zip(node.data.chunks(k)).zip(g.chunks(k)) {
                let inner: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    d[j] = y[j] * (gr[j] - inner);
                }
            }
            accumulate(&mut grads[x.0], dx);
        }
        Op::CrossEntropy {
            logits,
            labels,
            ignore,
            count,
        } => {
            let s = nodes[logits.0].shape;
            let plane = s.plane();
            let src = &nodes[logits.0].data;
            let scale = g[0] / *count as f64;
            let mut d = vec![0.0; src.len()];
            let mut row = vec![0.0; s.c];
            for n in 0..s.n {
                for p in 0..plane {
                    let label = labels[n * plane + p];
                    if Some(label) == *ignore {
                        continue;
                    }
                    for (c, r) in row.iter_mut().enumerate() {
                        *r = src[(n * s.c + c) * plane + p];
                    }
                    super::softmax_in_place(&mut row);
                    for (c, prob) in row.iter().enumerate() {
                        let target = if c == label as usize { 1.0 } else { 0.0 };
                        d[(n * s.c + c) * plane + p] = scale * (prob - target);
                    }
                }
            }
            accumulate(&mut grads[logits.0], d);
        }
        Op::Sum { x } => {
            let n = numel(x);
            accumulate_with(&mut grads[x.0], n, |d| d.iter_mut().for_each(|v| *v += g[0]));
        }
        Op::Dot { a, b } => {
            let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
            if rg(a) {
                accumulate(&mut grads[a.0], bv.iter().map(|v| v * g[0]).collect());
            }
            if rg(b) {
                accumulate(&mut grads[b.0], av.iter().map(|v| v * g[0]).collect());
            }
        }
        Op::DotConst { x, consts } => {
            accumulate(&mut grads[x.0], consts.iter().map(|v| v * g[0]).collect());
        }
        Op::Ln { x } => {
            let xv = &nodes[x.0].data;
            accumulate(&mut grads[x.0], g.iter().zip(xv).map(|(gv, v)| gv / v).collect());
        }
        Op::SuffixSum { x } => {
            // d out[k] / d x[j] = 1 for k <= j, so dx[j] = prefix sum of g.
            let k = node.shape.c;
            let mut dx = g.to_vec();
            for row in dx.chunks_mut(k) {
                for j in 1..row.len() {
                    row[j] += row[j - 1];
                }
            }
            accumulate(&mut grads[x.0], dx);
        }
        Op::Stack { xs } => {
            for (x, gv) in xs.iter().zip(g) {
                if rg(x) {
                    accumulate(&mut grads[x.0], vec![*gv]);
                }
            }
        }
        Op::Select { x, index } => {
            let idx = *index;
            accumulate_with(&mut grads[x.0], numel(x), |d| d[idx] += g[0]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t
            .leaf(&Tensor4::full(Shape4::new(2, 3, 2, 1), 0.7).with_grad())
            .unwrap();
        let l = t.sum(x).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grad_of_half_square_is_identity() {
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut t = Tape::new();
        let x = t
            .leaf(
                &Tensor4::from_vec(Shape4::new(1, 3, 2, 2), data.clone())
                    .unwrap()
                    .with_grad(),
            )
            .unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let l = t.scale(s, 0.5).unwrap();
        let g = t.backward(l).unwrap();
        for (a, b) in g.get(x).unwrap().iter().zip(&data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor4::zeros(Shape4::new(1, 2, 1, 1)).with_grad()).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor4::full(Shape4::scalar(), 1e300)).unwrap();
        assert!(matches!(t.scale(x, 1e300), Err(Error::NonFinite(_))));
    }

    #[test]
    fn conv_center_value_is_full_overlap_sum() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0)).unwrap();
        let w = t.leaf(&Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0)).unwrap();
        let y = t.conv2d(x, w, 1, 1, 1).unwrap();
        assert_eq!(t.shape(y), Shape4::new(1, 1, 3, 3));
        assert_eq!(t.value(y)[4], 9.0);
        assert_eq!(t.value(y)[0], 4.0);
    }

    #[test]
    fn conv_shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor4::zeros(Shape4::new(1, 2, 4, 4))).unwrap();
        let w = t.leaf(&Tensor4::zeros(Shape4::new(1, 3, 3, 3))).unwrap();
        let err = t.conv2d(x, w, 1, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1x2x4x4]") && err.contains("[1x3x3x3]"), "{err}");
    }

    #[test]
    fn conv_of_zero_weight_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor4::full(Shape4::new(2, 2, 5, 3), 3.5)).unwrap();
        let w = t.leaf(&Tensor4::zeros(Shape4::new(4, 2, 3, 3))).unwrap();
        let y = t.conv2d(x, w, 2, 2, 1).unwrap();
        assert_eq!(t.shape(y), Shape4::new(2, 4, 3, 2));
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_pool_constant_and_peak() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor4::full(Shape4::new(1, 1, 4, 4), 2.5)).unwrap();
        let y = t.max_pool3(x, 1).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 2.5));

        let mut data = vec![0.0; 25];
        data[12] = 7.0; // (2, 2)
        let x = t
            .leaf(&Tensor4::from_vec(Shape4::new(1, 1, 5, 5), data).unwrap())
            .unwrap();
        let y = t.max_pool3(x, 1).unwrap();
        let v = t.value(y);
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
                assert_eq!(v[r * 5 + c], if inside { 7.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn max_pool_ties_route_to_lowest_index() {
        let mut t = Tape::new();
        let x = t
            .leaf(&Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0).with_grad())
            .unwrap();
        let y = t.max_pool3(x, 3).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx[0], 1.0);
        assert_eq!(gx.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut t = Tape::new();
        let shape = Shape4::new(1, 3, 2, 2);
        let x = t.leaf(&Tensor4::zeros(shape)).unwrap();
        let labels: Arc<[u32]> = vec![0, 1, 2, 1].into();
        let l = t.cross_entropy(x, labels.clone(), None).unwrap();
        assert!((t.item(l) - 3f64.ln()).abs() < 1e-15);

        let mut data = vec![0.0; 12];
        for (p, &lab) in labels.iter().enumerate() {
            data[lab as usize * 4 + p] = 50.0;
        }
        let x = t.constant(shape, data).unwrap();
        let l = t.cross_entropy(x, labels, None).unwrap();
        assert!(t.item(l) < 1e-3);

        let bad: Arc<[u32]> = vec![0, 3, 0, 0].into();
        assert!(matches!(
            t.cross_entropy(x, bad, None),
            Err(Error::LabelOutOfRange { .. })
        ));
        let ignored: Arc<[u32]> = vec![9, 9, 9, 9].into();
        assert!(matches!(t.cross_entropy(x, ignored, Some(9)), Err(Error::AllIgnored)));
    }

    #[test]
    fn suffix_sum_values() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor4::vector(&[1.0, 2.0, 3.0])).unwrap();
        let y = t.suffix_sum(x).unwrap();
        assert_eq!(t.value(y), &[6.0, 5.0, 3.0]);
    }
}
