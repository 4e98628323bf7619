use serde::{Deserialize, Serialize};

use super::cell::check_masks;
use super::ops::{Ctx, OpInstance, ParamBuilder};
use super::{AggOp, OpKind};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Edge of the aggregation DAG. Nodes 0..3 are the three hyper-cell outputs
/// (strides 8, 16, 32); node 3 sits at stride 16 and nodes 4..7 at stride 32.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggEdge {
    pub src: usize,
    pub dst: usize,
    pub stride: usize,
}

pub const AGG_NODES: usize = 7;

/// Nodes concatenated into the cell output.
pub const AGG_OUTPUTS: [usize; 3] = [4, 5, 6];

/// The fixed aggregation topology; listed in evaluation order.
pub const AGG_EDGES: [AggEdge; 7] = [
    AggEdge {
        src: 0,
        dst: 3,
        stride: 2,
    },
    AggEdge {
        src: 1,
        dst: 3,
        stride: 1,
    },
    AggEdge {
        src: 3,
        dst: 4,
        stride: 2,
    },
    AggEdge {
        src: 1,
        dst: 5,
        stride: 2,
    },
    AggEdge {
        src: 3,
        dst: 5,
        stride: 2,
    },
    AggEdge {
        src: 2,
        dst: 6,
        stride: 1,
    },
    AggEdge {
        src: 5,
        dst: 6,
        stride: 1,
    },
];

#[derive(Clone, Debug)]
pub struct Aggregation {
    /// Node width `A`; the cell outputs `3A` channels.
    pub width: usize,
    /// Per edge: `(mask slot, op, instance)`.
    pub edges: Vec<Vec<(usize, AggOp, OpInstance)>>,
}

impl Aggregation {
    /// `tap_channels` are the widths of the three hyper-cell outputs.
    pub fn build(
        pb: &mut ParamBuilder<'_>,
        prefix: &str,
        tap_channels: [usize; 3],
        width: usize,
        ops: &[Vec<(usize, AggOp)>],
    ) -> Result<Self> {
        if ops.len() != AGG_EDGES.len() {
            return Err(Error::invalid(
                "Aggregation::build",
                format!("{} op lists for {} edges", ops.len(), AGG_EDGES.len()),
            ));
        }
        let mut edges = Vec::with_capacity(ops.len());
        for (e, (edge, candidates)) in AGG_EDGES.iter().zip(ops).enumerate() {
            let cin = if edge.src < 3 { tap_channels[edge.src] } else { width };
            let mut inst = Vec::with_capacity(candidates.len());
            for &(slot, op) in candidates {
                let i = OpInstance::build(pb, &format!("{prefix}.e{e}"), OpKind::Agg(op), cin, width, edge.stride)?;
                inst.push((slot, op, i));
            }
            edges.push(inst);
        }
        Ok(Self { width, edges })
    }

    pub fn out_channels(&self) -> usize {
        self.width * AGG_OUTPUTS.len()
    }

    /// Relaxed forward with `[7 x K x 1 x 1]` masks, or discrete with `None`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, taps: [Var; 3], masks: Option<Var>) -> Result<Var> {
        if let Some(m) = masks {
            check_masks(ctx, m, AGG_EDGES.len())?;
        }
        let k = masks.map(|m| ctx.tape.shape(m).c);
        let mut nodes: Vec<Option<Var>> = vec![None; AGG_NODES];
        for (i, t) in taps.into_iter().enumerate() {
            nodes[i] = Some(t);
        }
        for dst in 3..AGG_NODES {
            let mut terms = Vec::new();
            let mut slots = Vec::new();
            for (e, edge) in AGG_EDGES.iter().enumerate() {
                if edge.dst != dst {
                    continue;
                }
                let x = nodes[edge.src].expect("edges are listed in topological order");
                for (slot, _, op) in &self.edges[e] {
                    terms.push(op.forward(ctx, x)?);
                    slots.push(k.map_or(0, |k| e * k + slot));
                }
            }
            nodes[dst] = Some(match masks {
                Some(m) => ctx.tape.mix(&terms, m, &slots)?,
                None => ctx.tape.add_all(&terms)?,
            });
        }
        let outs: Vec<Var> = AGG_OUTPUTS.iter().map(|&i| nodes[i].expect("computed")).collect();
        ctx.tape.concat_channels(&outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_is_consistent() {
        // Stride of each node relative to the first tap.
        let mut stride = [1usize, 2, 4, 0, 0, 0, 0];
        for e in AGG_EDGES {
            assert!(e.src < e.dst);
            assert!(stride[e.src] > 0, "edge {e:?} reads an unfinished node");
            let s = stride[e.src] * e.stride;
            if stride[e.dst] == 0 {
                stride[e.dst] = s;
            }
            assert_eq!(stride[e.dst], s, "edge {e:?}");
        }
        assert_eq!(stride, [1, 2, 4, 2, 4, 4, 4]);
    }
}
