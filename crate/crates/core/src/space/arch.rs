use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::aggregation::AGG_EDGES;
use super::cell::{CellKind, CellSpec};
use super::network::{ChannelPlan, MaskSite, Network, STEM_STRIDE};
use super::{AggOp, CellOp};
use crate::config::SearchConfig;
use crate::error::{Error, Result};
use crate::tensor::{argmax, ParamStore};

pub const ARCH_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemInfo {
    pub channels: usize,
    pub convs: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellEdgeChoice {
    pub src: usize,
    pub dst: usize,
    pub op: CellOp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedCell {
    pub kind: CellKind,
    pub edges: Vec<CellEdgeChoice>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedHyperCell {
    /// Cells kept after pruning.
    pub depth: usize,
    pub initial_cells: usize,
    pub cells: Vec<DerivedCell>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggEdgeChoice {
    pub src: usize,
    pub dst: usize,
    pub stride: usize,
    pub op: AggOp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedAggregation {
    pub edges: Vec<AggEdgeChoice>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// `search`, `random`, or `manual`.
    pub source: String,
    pub config_hash: String,
    pub seed: u64,
}

/// A discrete architecture, self-contained enough to rebuild the network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedArchitecture {
    pub version: u32,
    pub stem: StemInfo,
    pub hyper_cells: Vec<DerivedHyperCell>,
    pub aggregation: DerivedAggregation,
    pub channel_plan: ChannelPlan,
    pub provenance: Provenance,
}

impl DerivedArchitecture {
    /// Assembles an architecture from per-hyper-cell choices: depth, the
    /// reduction cell's op per edge, and the normal cells' shared op per edge.
    pub fn assemble(
        config: &SearchConfig,
        choices: &[(usize, Vec<CellOp>, Vec<CellOp>)],
        agg: &[AggOp],
        provenance: Provenance,
    ) -> Result<Self> {
        let plan = ChannelPlan::from_config(config);
        let mut hyper_cells = Vec::with_capacity(3);
        for (s, (depth, reduce, normal)) in choices.iter().enumerate() {
            let mut cells = Vec::with_capacity(*depth);
            for p in 0..*depth {
                let kind = if p == 0 { CellKind::Reduction } else { CellKind::Normal };
                let ops = if p == 0 { reduce } else { normal };
                let spec = CellSpec::new(kind, plan.nodes);
                let edges = spec
                    .edges
                    .iter()
                    .zip(ops)
                    .map(|(e, &op)| CellEdgeChoice {
                        src: e.src,
                        dst: e.dst,
                        op,
                    })
                    .collect();
                cells.push(DerivedCell { kind, edges });
            }
            hyper_cells.push(DerivedHyperCell {
                depth: *depth,
                initial_cells: config.cells[s],
                cells,
            });
        }
        let aggregation = DerivedAggregation {
            edges: AGG_EDGES
                .iter()
                .zip(agg)
                .map(|(e, &op)| AggEdgeChoice {
                    src: e.src,
                    dst: e.dst,
                    stride: e.stride,
                    op,
                })
                .collect(),
        };
        let arch = Self {
            version: ARCH_VERSION,
            stem: StemInfo {
                channels: plan.stem,
                convs: 2,
                stride: STEM_STRIDE,
            },
            hyper_cells,
            aggregation,
            channel_plan: plan,
            provenance,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Malformed {
            kind: "architecture",
            msg,
        };
        if self.version != ARCH_VERSION {
            return Err(Error::SchemaVersion {
                kind: "architecture",
                found: self.version,
                expected: ARCH_VERSION,
            });
        }
        self.channel_plan.validate()?;
        if self.stem.channels != self.channel_plan.stem || self.stem.stride != STEM_STRIDE || self.stem.convs != 2 {
            return Err(bad(format!("unsupported stem {:?}", self.stem)));
        }
        if self.hyper_cells.len() != 3 {
            return Err(bad(format!("{} hyper-cells, expected 3", self.hyper_cells.len())));
        }
        for (s, h) in self.hyper_cells.iter().enumerate() {
            if h.depth == 0 || h.depth > h.initial_cells || h.cells.len() != h.depth {
                return Err(bad(format!(
                    "hyper-cell {s}: depth {} with {} cells of {} initial",
                    h.depth,
                    h.cells.len(),
                    h.initial_cells
                )));
            }
            for (p, c) in h.cells.iter().enumerate() {
                let kind = if p == 0 { CellKind::Reduction } else { CellKind::Normal };
                let spec = CellSpec::new(kind, self.channel_plan.nodes);
                let same = c.kind == kind
                    && c.edges.len() == spec.edges.len()
                    && c.edges
                        .iter()
                        .zip(&spec.edges)
                        .all(|(a, b)| a.src == b.src && a.dst == b.dst);
                if !same {
                    return Err(bad(format!("hyper-cell {s} cell {p} does not match the cell topology")));
                }
            }
        }
        let agg = &self.aggregation.edges;
        let same = agg.len() == AGG_EDGES.len()
            && agg
                .iter()
                .zip(&AGG_EDGES)
                .all(|(a, b)| a.src == b.src && a.dst == b.dst && a.stride == b.stride);
        if !same {
            return Err(bad("aggregation edges do not match the aggregation topology".into()));
        }
        Ok(())
    }

    pub fn depths(&self) -> [usize; 3] {
        [
            self.hyper_cells[0].depth,
            self.hyper_cells[1].depth,
            self.hyper_cells[2].depth,
        ]
    }

    /// Everything except provenance, for comparing architectures.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.hyper_cells == other.hyper_cells
            && self.aggregation == other.aggregation
            && self.channel_plan == other.channel_plan
    }

    /// Hard one-hot mask selecting this architecture at a super-network mask
    /// site. Cells past the depth are pruned, so any one-hot row will do; they
    /// get the first candidate.
    pub fn one_hot_mask(&self, site: MaskSite, cell_ops: &[CellOp], agg_ops: &[AggOp]) -> Result<Vec<f64>> {
        fn rows<T: PartialEq + Copy + std::fmt::Debug>(picks: &[T], catalog: &[T]) -> Result<Vec<f64>> {
            let k = catalog.len();
            let mut out = vec![0.0; picks.len() * k];
            for (r, op) in picks.iter().enumerate() {
                let i = catalog.iter().position(|c| c == op).ok_or_else(|| Error::Malformed {
                    kind: "architecture",
                    msg: format!("{op:?} is not a candidate"),
                })?;
                out[r * k + i] = 1.0;
            }
            Ok(out)
        }
        let hyper = |s: usize| {
            self.hyper_cells.get(s).ok_or_else(|| Error::Malformed {
                kind: "architecture",
                msg: format!("no hyper-cell {s}"),
            })
        };
        match site {
            MaskSite::Depth(s) => {
                let h = hyper(s)?;
                let mut m = vec![0.0; h.initial_cells];
                m[h.depth - 1] = 1.0;
                Ok(m)
            }
            MaskSite::Cell(s, p) => {
                let h = hyper(s)?;
                match h.cells.get(p) {
                    Some(c) => rows(&c.edges.iter().map(|e| e.op).collect::<Vec<_>>(), cell_ops),
                    None => {
                        let edges = CellSpec::new(CellKind::Normal, self.channel_plan.nodes).num_edges();
                        rows(&vec![cell_ops[0]; edges], cell_ops)
                    }
                }
            }
            MaskSite::Agg => rows(
                &self.aggregation.edges.iter().map(|e| e.op).collect::<Vec<_>>(),
                agg_ops,
            ),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("version").and_then(|v| v.as_u64()).ok_or(Error::Malformed {
            kind: "architecture",
            msg: "missing version".into(),
        })?;
        if found != u64::from(ARCH_VERSION) {
            return Err(Error::SchemaVersion {
                kind: "architecture",
                found: found as u32,
                expected: ARCH_VERSION,
            });
        }
        let arch: Self = serde_json::from_value(value).map_err(|e| Error::Malformed {
            kind: "architecture",
            msg: e.to_string(),
        })?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Discretizes a searched super-network: depth by argmax of the depth logits
/// (ties to the shallower depth), each edge's op by argmax of its logits
/// (ties to the earlier candidate), cells past the depth pruned. Cells after
/// the reduction cell share the normal-cell logits and so the same ops.
pub fn derive(net: &Network, store: &ParamStore, config: &SearchConfig) -> Result<DerivedArchitecture> {
    if !net.is_relaxed() {
        return Err(Error::invalid("derive", "network has no architecture logits"));
    }
    let rows = |site: MaskSite| -> Vec<usize> {
        let id = net.logits_at(site).expect("relaxed network");
        let t = store.get(id);
        t.data().chunks(t.shape().c).map(argmax).collect()
    };
    let mut choices = Vec::with_capacity(3);
    for s in 0..net.hyper.len() {
        let depth = rows(MaskSite::Depth(s))[0] + 1;
        let reduce = rows(MaskSite::Cell(s, 0))
            .into_iter()
            .map(|i| net.cell_ops[i])
            .collect();
        let normal = rows(MaskSite::Cell(s, 1))
            .into_iter()
            .map(|i| net.cell_ops[i])
            .collect();
        choices.push((depth, reduce, normal));
    }
    let agg: Vec<AggOp> = rows(MaskSite::Agg).into_iter().map(|i| net.agg_ops[i]).collect();
    DerivedArchitecture::assemble(
        config,
        &choices,
        &agg,
        Provenance {
            source: "search".into(),
            config_hash: config.hash(),
            seed: config.seed,
        },
    )
}

/// Uniform sample from the discrete space: depth, per-edge ops of the
/// reduction cell and of the shared normal cell, per-edge aggregation ops.
pub fn random_architecture(config: &SearchConfig, rng: &mut impl Rng, seed: u64) -> Result<DerivedArchitecture> {
    let edges = CellSpec::new(CellKind::Normal, config.nodes).num_edges();
    let mut pick = |n: usize| rng.gen_range(0..n);
    let mut choices = Vec::with_capacity(3);
    for s in 0..3 {
        let depth = pick(config.cells[s]) + 1;
        let reduce = (0..edges)
            .map(|_| config.cell_ops[pick(config.cell_ops.len())])
            .collect();
        let normal: Vec<CellOp> = (0..edges)
            .map(|_| config.cell_ops[pick(config.cell_ops.len())])
            .collect();
        let reduce = if config.share_reduction_alpha {
            normal.clone()
        } else {
            reduce
        };
        choices.push((depth, reduce, normal));
    }
    let agg: Vec<AggOp> = (0..AGG_EDGES.len())
        .map(|_| config.agg_ops[pick(config.agg_ops.len())])
        .collect();
    DerivedArchitecture::assemble(
        config,
        &choices,
        &agg,
        Provenance {
            source: "random".into(),
            config_hash: config.hash(),
            seed,
        },
    )
}

/// Every architecture of the discrete space, in a fixed order. Only sensible
/// for tiny spaces; fails if the count exceeds `limit`.
pub fn enumerate_architectures(config: &SearchConfig, limit: usize) -> Result<Vec<DerivedArchitecture>> {
    let edges = CellSpec::new(CellKind::Normal, config.nodes).num_edges();
    let k = config.cell_ops.len();
    let op_lists = |n: usize| -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..k).map(move |o| {
                        let mut v = prefix.clone();
                        v.push(o);
                        v
                    })
                })
                .collect();
        }
        out
    };
    let cell_lists = op_lists(edges);
    // Per hyper-cell alternatives: (depth, reduce, normal).
    let mut per_hyper: Vec<Vec<(usize, Vec<CellOp>, Vec<CellOp>)>> = Vec::new();
    for s in 0..3 {
        let mut alts = Vec::new();
        for depth in 1..=config.cells[s] {
            for r in &cell_lists {
                let reduce: Vec<CellOp> = r.iter().map(|&i| config.cell_ops[i]).collect();
                if depth == 1 || config.share_reduction_alpha {
                    alts.push((depth, reduce.clone(), reduce));
                    continue;
                }
                for n in &cell_lists {
                    let normal = n.iter().map(|&i| config.cell_ops[i]).collect();
                    alts.push((depth, reduce.clone(), normal));
                }
            }
        }
        per_hyper.push(alts);
    }
    let agg_k = config.agg_ops.len();
    let agg_count = agg_k.checked_pow(AGG_EDGES.len() as u32).unwrap_or(usize::MAX);
    let total = per_hyper
        .iter()
        .map(Vec::len)
        .try_fold(agg_count, |acc, n| acc.checked_mul(n))
        .unwrap_or(usize::MAX);
    if total > limit {
        return Err(Error::invalid(
            "enumerate_architectures",
            format!("{total} architectures exceed the limit of {limit}"),
        ));
    }
    let mut out = Vec::with_capacity(total);
    for a in &per_hyper[0] {
        for b in &per_hyper[1] {
            for c in &per_hyper[2] {
                for g in 0..agg_count {
                    let mut code = g;
                    let agg: Vec<AggOp> = (0..AGG_EDGES.len())
                        .map(|_| {
                            let op = config.agg_ops[code % agg_k];
                            code /= agg_k;
                            op
                        })
                        .collect();
                    out.push(DerivedArchitecture::assemble(
                        config,
                        &[a.clone(), b.clone(), c.clone()],
                        &agg,
                        Provenance {
                            source: "manual".into(),
                            config_hash: config.hash(),
                            seed: config.seed,
                        },
                    )?);
                }
            }
        }
    }
    Ok(out)
}
