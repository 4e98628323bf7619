use super::cell::{check_masks, Cell, CellKind, CellSpec};
use super::ops::{Adapter, Ctx, ParamBuilder};
use super::CellOp;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, Var};

/// Layout of one hyper-cell: a reduction cell followed by normal cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HyperSpec {
    /// Cells before pruning, including the leading reduction cell.
    pub num_cells: usize,
    pub nodes: usize,
    /// Width of both inputs, which share a resolution.
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Architecture logits attached to a searchable hyper-cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HyperLogits {
    pub reduce: ParamId,
    pub normal: ParamId,
    /// One logit per admissible output cell.
    pub depth: ParamId,
}

#[derive(Clone, Debug)]
pub struct HyperCell {
    pub spec: HyperSpec,
    pub cells: Vec<Cell>,
    /// Projects the hyper-cell input to the output width and resolution, so
    /// that it can stand in for the state before the first cell.
    pub penult: Option<Adapter>,
    pub logits: Option<HyperLogits>,
}

/// Masks driving one relaxed hyper-cell forward pass.
#[derive(Clone, Debug)]
pub struct HyperMasks {
    /// `[1 x n x 1 x 1]` weights over the `n` candidate output cells.
    pub depth: Var,
    /// `[E x K x 1 x 1]` per cell.
    pub cells: Vec<Var>,
}

/// What a hyper-cell hands on: its output and the state feeding the output
/// cell. The latter is absent when no penultimate adapter was built and the
/// pass needed one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HyperOut {
    pub out: Var,
    pub penult: Option<Var>,
}

impl HyperCell {
    /// `ops[p][e]` lists `(mask slot, op)` pairs for cell `p`.
    pub fn build(
        pb: &mut ParamBuilder<'_>,
        prefix: &str,
        spec: HyperSpec,
        ops: &[Vec<Vec<(usize, CellOp)>>],
        with_penult: bool,
    ) -> Result<Self> {
        let width = spec.out_channels / spec.nodes;
        let mut cells = Vec::with_capacity(ops.len());
        for (p, cell_ops) in ops.iter().enumerate() {
            let (kind, ins, stride1) = match p {
                0 => (CellKind::Reduction, [spec.in_channels; 2], 1),
                // Cell 1's second input is the hyper-cell input at twice the resolution.
                1 => (CellKind::Normal, [spec.out_channels, spec.in_channels], 2),
                _ => (CellKind::Normal, [spec.out_channels; 2], 1),
            };
            cells.push(Cell::build(
                pb,
                &format!("{prefix}.cell{p}"),
                CellSpec::new(kind, spec.nodes),
                ins,
                stride1,
                width,
                cell_ops,
            )?);
        }
        let penult = if with_penult {
            Some(Adapter::build(
                pb,
                &format!("{prefix}.penult"),
                spec.in_channels,
                spec.out_channels,
                2,
            )?)
        } else {
            None
        };
        Ok(Self {
            spec,
            cells,
            penult,
            logits: None,
        })
    }

    /// Relaxed or discrete forward pass.
    ///
    /// Relaxed: `out = sum_p u_p C_p` over the cells, `penult = sum_p u_p
    /// C_{p-1}` with the adapted input standing in for `C_0`. Discrete: the
    /// last built cell is the output.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x0: Var, x1: Var, masks: Option<&HyperMasks>) -> Result<HyperOut> {
        if let Some(m) = masks {
            check_masks(ctx, m.depth, 1)?;
            if ctx.tape.shape(m.depth).c != self.cells.len() || m.cells.len() != self.cells.len() {
                return Err(Error::invalid(
                    "hypercell_forward",
                    format!(
                        "{} depth weights and {} cell masks for {} cells",
                        ctx.tape.shape(m.depth).c,
                        m.cells.len(),
                        self.cells.len()
                    ),
                ));
            }
        }
        let c0 = match &self.penult {
            Some(a) => Some(a.forward(ctx, x0)?),
            None => None,
        };
        let mut states = Vec::with_capacity(self.cells.len());
        let (mut prev, mut prev2) = (x0, x1);
        for (p, cell) in self.cells.iter().enumerate() {
            let y = cell.forward(ctx, prev, prev2, masks.map(|m| m.cells[p]))?;
            states.push(y);
            prev2 = prev;
            prev = y;
        }
        let n = states.len();
        match masks {
            Some(m) => {
                let slots: Vec<usize> = (0..n).collect();
                let out = ctx.tape.mix(&states, m.depth, &slots)?;
                let penult = match c0 {
                    Some(c0) => {
                        let mut before = vec![c0];
                        before.extend_from_slice(&states[..n - 1]);
                        Some(ctx.tape.mix(&before, m.depth, &slots)?)
                    }
                    None => None,
                };
                Ok(HyperOut { out, penult })
            }
            None => {
                let penult = if n >= 2 { Some(states[n - 2]) } else { c0 };
                Ok(HyperOut {
                    out: states[n - 1],
                    penult,
                })
            }
        }
    }
}
