use serde::{Deserialize, Serialize};

use super::ops::{Adapter, Ctx, OpInstance, ParamBuilder};
use super::CellOp;
use crate::error::{Error, Result};
use crate::space::OpKind;
use crate::tensor::{Shape4, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Reduction,
}

/// Directed edge between cell nodes. Nodes 0 and 1 are the two inputs,
/// nodes `2..2+N` the intermediate nodes in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
}

/// Topology of one cell: every intermediate node receives an edge from both
/// inputs and from every earlier intermediate node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellSpec {
    pub kind: CellKind,
    pub num_nodes: usize,
    pub edges: Vec<Edge>,
}

impl CellSpec {
    pub fn new(kind: CellKind, num_nodes: usize) -> Self {
        let mut edges = Vec::new();
        for dst in 2..2 + num_nodes {
            for src in 0..dst {
                edges.push(Edge { src, dst });
            }
        }
        Self { kind, num_nodes, edges }
    }

    /// Reduction cells halve the resolution on edges leaving the inputs.
    pub fn edge_stride(&self, e: usize) -> usize {
        match self.kind {
            CellKind::Reduction if self.edges[e].src < 2 => 2,
            _ => 1,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// One cell with instantiated operations. In the relaxed super-network each
/// edge holds every candidate; in a derived network at most one.
#[derive(Clone, Debug)]
pub struct Cell {
    pub spec: CellSpec,
    /// Node width `C`; the cell outputs `N * C` channels.
    pub width: usize,
    pub pre0: Adapter,
    pub pre1: Adapter,
    /// Per edge: `(slot in the candidate list, op, instance)`.
    pub edges: Vec<Vec<(usize, CellOp, OpInstance)>>,
}

impl Cell {
    /// `in_channels`/`in1_stride` describe the two inputs; `ops[e]` lists the
    /// operations instantiated on edge `e` along with their mask slot.
    pub fn build(
        pb: &mut ParamBuilder<'_>,
        prefix: &str,
        spec: CellSpec,
        in_channels: [usize; 2],
        in1_stride: usize,
        width: usize,
        ops: &[Vec<(usize, CellOp)>],
    ) -> Result<Self> {
        let pre0 = Adapter::build(pb, &format!("{prefix}.pre0"), in_channels[0], width, 1)?;
        let pre1 = Adapter::build(pb, &format!("{prefix}.pre1"), in_channels[1], width, in1_stride)?;
        let mut edges = Vec::with_capacity(spec.num_edges());
        for (e, candidates) in ops.iter().enumerate() {
            let stride = spec.edge_stride(e);
            let mut inst = Vec::new();
            for &(slot, op) in candidates {
                if op == CellOp::Zero {
                    // Contributes nothing to the mixture and has no parameters.
                    continue;
                }
                let i = OpInstance::build(pb, &format!("{prefix}.e{e}"), OpKind::Cell(op), width, width, stride)?;
                inst.push((slot, op, i));
            }
            edges.push(inst);
        }
        Ok(Self {
            spec,
            width,
            pre0,
            pre1,
            edges,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.width * self.spec.num_nodes
    }

    /// Relaxed (`masks = Some`) or discrete (`None`) forward pass.
    ///
    /// With masks, node `j` is `sum_{i<j} sum_o m[e, o] * o(x_i)`; masks are
    /// `[E x K x 1 x 1]` rows summing to one.
    pub fn forward(&self, ctx: &mut Ctx<'_>, in0: Var, in1: Var, masks: Option<Var>) -> Result<Var> {
        if let Some(m) = masks {
            check_masks(ctx, m, self.spec.num_edges())?;
        }
        let s0 = self.pre0.forward(ctx, in0)?;
        let s1 = self.pre1.forward(ctx, in1)?;
        let (a, b) = (ctx.tape.shape(s0), ctx.tape.shape(s1));
        if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
            return Err(Error::ShapeMismatch {
                op: "cell_forward",
                lhs: a,
                rhs: b,
            });
        }
        let out_shape = match self.spec.kind {
            CellKind::Reduction => Shape4::new(a.n, self.width, a.h.div_ceil(2), a.w.div_ceil(2)),
            CellKind::Normal => a,
        };
        let k = masks.map(|m| ctx.tape.shape(m).c);
        let mut states = vec![s0, s1];
        for dst in 2..2 + self.spec.num_nodes {
            let mut terms = Vec::new();
            let mut slots = Vec::new();
            for (e, edge) in self.spec.edges.iter().enumerate() {
                if edge.dst != dst {
                    continue;
                }
                for (slot, _, op) in &self.edges[e] {
                    terms.push(op.forward(ctx, states[edge.src])?);
                    slots.push(k.map_or(0, |k| e * k + slot));
                }
            }
            let node = match (terms.is_empty(), masks) {
                (true, _) => ctx.tape.constant(out_shape, vec![0.0; out_shape.numel()])?,
                (false, Some(m)) => ctx.tape.mix(&terms, m, &slots)?,
                (false, None) => ctx.tape.add_all(&terms)?,
            };
            states.push(node);
        }
        ctx.tape.concat_channels(&states[2..])
    }
}

pub(crate) fn check_masks(ctx: &Ctx<'_>, m: Var, rows: usize) -> Result<()> {
    let s = ctx.tape.shape(m);
    if s.n != rows || s.h != 1 || s.w != 1 {
        return Err(Error::invalid(
            "masks",
            format!("expected {rows} rows of [K x 1 x 1], got {s}"),
        ));
    }
    for row in ctx.tape.value(m).chunks(s.c) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("masks", format!("row {row:?} is not a distribution")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_node_cell_has_five_edges() {
        let s = CellSpec::new(CellKind::Reduction, 2);
        assert_eq!(s.num_edges(), 5);
        let strides: Vec<_> = (0..5).map(|e| s.edge_stride(e)).collect();
        assert_eq!(strides, vec![2, 2, 2, 2, 1]);
        assert!(s.edges.iter().all(|e| e.src < e.dst));
        assert_eq!(CellSpec::new(CellKind::Normal, 1).num_edges(), 2);
    }
}
