//! Operation latency lookup table and the differentiable latency estimate.
//!
//! Costs are micro-benchmarked on the host, single-threaded, at batch size
//! one. During search they are combined linearly with the architecture masks,
//! so the estimate is differentiable in the masks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{
    AggOp, CellKind, CellOp, CellSpec, ChannelPlan, Ctx, DerivedArchitecture, Mode, NetMasks, OpInstance, OpKind,
    ParamBuilder, AGG_EDGES, STEM_STRIDE,
};
use crate::tensor::{ParamStore, Shape4, Tape, Tensor4, Var};

pub const TABLE_VERSION: u32 = 1;
pub const WARMUP_RUNS: usize = 5;
pub const MIN_REPS: usize = 30;

/// One benchmarked configuration: an operation applied to a `cin x h x w`
/// input producing `cout` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatencyKey {
    pub op: OpKind,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl LatencyKey {
    pub fn dilation(&self) -> usize {
        use AggOp as A;
        use CellOp as C;
        match self.op {
            OpKind::Cell(C::DilSepConv3D2 | C::DilSepConv3D2x2) | OpKind::Agg(A::DilSepConv3D2x2) => 2,
            OpKind::Cell(C::DilSepConv3D4) | OpKind::Agg(A::DilSepConv3D4x2) => 4,
            OpKind::Agg(A::DilSepConv3D8x2) => 8,
            _ => 1,
        }
    }
}

impl fmt::Display for LatencyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}|{}>{}|{}x{}|s{}|d{}",
            self.op,
            self.cin,
            self.cout,
            self.h,
            self.w,
            self.stride,
            self.dilation()
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableMeta {
    pub host: String,
    pub reps: usize,
    pub warmup: usize,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub timer_tick_ns: f64,
}

/// Costs in microseconds keyed by the flattened [`LatencyKey`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyTable {
    pub version: u32,
    pub meta: TableMeta,
    pub entries: BTreeMap<String, f64>,
}

impl LatencyTable {
    pub fn new(meta: TableMeta) -> Self {
        Self {
            version: TABLE_VERSION,
            meta,
            entries: BTreeMap::new(),
        }
    }

    /// Stores `us` rounded to three decimals, never below 0.001.
    pub fn insert(&mut self, key: LatencyKey, us: f64) -> Result<()> {
        if !(us.is_finite() && us >= 0.0) {
            return Err(Error::invalid("LatencyTable::insert", format!("cost {us} for {key}")));
        }
        let rounded = ((us * 1000.0).round() / 1000.0).max(0.001);
        self.entries.insert(key.to_string(), rounded);
        Ok(())
    }

    pub fn get(&self, key: &LatencyKey) -> Result<f64> {
        let k = key.to_string();
        self.entries.get(&k).copied().ok_or(Error::MissingLatency(k))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("version").and_then(|v| v.as_u64()).ok_or(Error::Malformed {
            kind: "latency table",
            msg: "missing version".into(),
        })?;
        if found != u64::from(TABLE_VERSION) {
            return Err(Error::SchemaVersion {
                kind: "latency table",
                found: found as u32,
                expected: TABLE_VERSION,
            });
        }
        let table: Self = serde_json::from_value(value).map_err(|e| Error::Malformed {
            kind: "latency table",
            msg: e.to_string(),
        })?;
        if let Some((k, v)) = table.entries.iter().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Malformed {
                kind: "latency table",
                msg: format!("cost {v} for {k} is not positive"),
            });
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Input geometry of one edge, shared by all candidates on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl EdgeGeom {
    pub fn key(&self, op: OpKind) -> LatencyKey {
        LatencyKey {
            op,
            cin: self.cin,
            cout: self.cout,
            h: self.h,
            w: self.w,
            stride: self.stride,
        }
    }
}

/// Edge geometries of cell `p` of hyper-cell `s` for an `h x w` input image.
pub fn cell_edges(plan: &ChannelPlan, s: usize, p: usize, h: usize, w: usize) -> Vec<EdgeGeom> {
    let div = STEM_STRIDE << s;
    let (hi, wi) = (h.div_ceil(div), w.div_ceil(div));
    let (ho, wo) = (hi.div_ceil(2), wi.div_ceil(2));
    let width = plan.hyper[s] / plan.nodes;
    let kind = if p == 0 { CellKind::Reduction } else { CellKind::Normal };
    let spec = CellSpec::new(kind, plan.nodes);
    (0..spec.num_edges())
        .map(|e| {
            let stride = spec.edge_stride(e);
            let (eh, ew) = if stride == 2 { (hi, wi) } else { (ho, wo) };
            EdgeGeom {
                cin: width,
                cout: width,
                h: eh,
                w: ew,
                stride,
            }
        })
        .collect()
}

/// Edge geometries of the aggregation cell.
pub fn agg_edges(plan: &ChannelPlan, h: usize, w: usize) -> Vec<EdgeGeom> {
    // Stride of each aggregation node relative to the input image.
    let node_stride = [8, 16, 32, 16, 32, 32, 32];
    AGG_EDGES
        .iter()
        .map(|e| {
            let d = node_stride[e.src];
            EdgeGeom {
                cin: if e.src < 3 { plan.hyper[e.src] } else { plan.agg_width },
                cout: plan.agg_width,
                h: h.div_ceil(d),
                w: w.div_ceil(d),
                stride: e.stride,
            }
        })
        .collect()
}

/// Table costs laid out like the architecture masks.
#[derive(Clone, Debug, PartialEq)]
pub struct CostPlan {
    /// `[s][p]` flattened `E x K` costs of every cell.
    pub cells: Vec<Vec<Vec<f64>>>,
    /// Flattened `7 x K_agg` aggregation costs.
    pub agg: Vec<f64>,
}

impl CostPlan {
    pub fn new(
        plan: &ChannelPlan,
        cells: [usize; 3],
        cell_ops: &[CellOp],
        agg_ops: &[AggOp],
        table: &LatencyTable,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(3);
        for (s, &n) in cells.iter().enumerate() {
            let mut per_cell = Vec::with_capacity(n);
            for p in 0..n {
                let mut costs = Vec::new();
                for g in cell_edges(plan, s, p, h, w) {
                    for &op in cell_ops {
                        costs.push(table.get(&g.key(OpKind::Cell(op)))?);
                    }
                }
                per_cell.push(costs);
            }
            out.push(per_cell);
        }
        let mut agg = Vec::new();
        for g in agg_edges(plan, h, w) {
            for &op in agg_ops {
                agg.push(table.get(&g.key(OpKind::Agg(op)))?);
            }
        }
        Ok(Self { cells: out, agg })
    }
}

/// Every key a super-network with these candidates needs.
pub fn required_keys(
    plan: &ChannelPlan,
    cells: [usize; 3],
    cell_ops: &[CellOp],
    agg_ops: &[AggOp],
    h: usize,
    w: usize,
) -> Vec<LatencyKey> {
    let mut keys = Vec::new();
    for (s, &n) in cells.iter().enumerate() {
        // Normal cells of one hyper-cell share their geometry.
        for p in 0..n.min(2) {
            for g in cell_edges(plan, s, p, h, w) {
                keys.extend(cell_ops.iter().map(|&op| g.key(OpKind::Cell(op))));
            }
        }
    }
    for g in agg_edges(plan, h, w) {
        keys.extend(agg_ops.iter().map(|&op| g.key(OpKind::Agg(op))));
    }
    keys.sort();
    keys.dedup();
    keys
}

/// `lat_p = sum_e sum_o m[e, o] * cost[e, o]` for one cell.
pub fn cell_latency(tape: &mut Tape, masks: Var, costs: &[f64]) -> Result<Var> {
    if tape.shape(masks).numel() != costs.len() {
        return Err(Error::invalid(
            "cell_latency",
            format!("{} costs for masks of shape {}", costs.len(), tape.shape(masks)),
        ));
    }
    tape.dot_const(masks, costs)
}

/// `sum_s sum_p keep(s, p) * lat_{s,p}` where cell `p` is kept with
/// probability `sum_{e >= p} u_e`, the total weight of output edges at or
/// after it.
pub fn network_latency(tape: &mut Tape, depth_masks: &[Var], cell_lats: &[Vec<Var>]) -> Result<Var> {
    if depth_masks.len() != cell_lats.len() || depth_masks.is_empty() {
        return Err(Error::invalid(
            "network_latency",
            format!("{} depth masks for {} hyper-cells", depth_masks.len(), cell_lats.len()),
        ));
    }
    let mut terms = Vec::with_capacity(depth_masks.len());
    for (&u, lats) in depth_masks.iter().zip(cell_lats) {
        if tape.shape(u).numel() != lats.len() {
            return Err(Error::invalid(
                "network_latency",
                format!("{} cells for depth mask of shape {}", lats.len(), tape.shape(u)),
            ));
        }
        let keep = tape.suffix_sum(u)?;
        let lat = tape.stack(lats)?;
        terms.push(tape.dot(keep, lat)?);
    }
    tape.add_all(&terms)
}

/// `ce + gamma * ln(latency)`.
pub fn total_loss(tape: &mut Tape, ce: Var, latency: Var, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(
            "total_loss",
            format!("gamma must be non-negative, got {gamma}"),
        ));
    }
    let lat = tape.item(latency);
    if lat <= 0.0 {
        return Err(Error::invalid(
            "total_loss",
            format!("latency must be positive, got {lat}"),
        ));
    }
    let ln = tape.ln(latency)?;
    let term = tape.scale(ln, gamma)?;
    tape.add(ce, term)
}

/// Expected latency of the relaxed network: the hyper-cells' kept cells plus
/// the aggregation cell, which is never pruned.
pub fn search_latency(tape: &mut Tape, masks: &NetMasks, costs: &CostPlan) -> Result<Var> {
    let mut cell_lats = Vec::with_capacity(masks.hyper.len());
    for (hm, cc) in masks.hyper.iter().zip(&costs.cells) {
        let lats = hm
            .cells
            .iter()
            .zip(cc)
            .map(|(&m, c)| cell_latency(tape, m, c))
            .collect::<Result<Vec<_>>>()?;
        cell_lats.push(lats);
    }
    let depth: Vec<Var> = masks.hyper.iter().map(|h| h.depth).collect();
    let net = network_latency(tape, &depth, &cell_lats)?;
    let agg = cell_latency(tape, masks.agg, &costs.agg)?;
    tape.add(net, agg)
}

/// Table-sum latency of a discrete architecture.
pub fn discrete_latency(arch: &DerivedArchitecture, table: &LatencyTable, h: usize, w: usize) -> Result<f64> {
    let plan = &arch.channel_plan;
    let mut total = 0.0;
    for (s, hc) in arch.hyper_cells.iter().enumerate() {
        for (p, cell) in hc.cells.iter().enumerate() {
            for (g, e) in cell_edges(plan, s, p, h, w).iter().zip(&cell.edges) {
                total += table.get(&g.key(OpKind::Cell(e.op)))?;
            }
        }
    }
    for (g, e) in agg_edges(plan, h, w).iter().zip(&arch.aggregation.edges) {
        total += table.get(&g.key(OpKind::Agg(e.op)))?;
    }
    Ok(total)
}

/// Smallest observable difference between two clock readings.
pub fn timer_tick() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Median forward time of one operation, in microseconds.
///
/// Each sample repeats the forward pass enough times to span at least ten
/// timer ticks and divides by the repetition count.
pub fn bench_op(key: &LatencyKey, reps: usize, tick: Duration, seed: u64) -> Result<f64> {
    if reps < MIN_REPS {
        return Err(Error::invalid(
            "bench_op",
            format!("need at least {MIN_REPS} repetitions, got {reps}"),
        ));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let op = OpInstance::build(
        &mut ParamBuilder {
            store: &mut store,
            rng: &mut rng,
        },
        "bench",
        key.op,
        key.cin,
        key.cout,
        key.stride,
    )?;
    let shape = Shape4::new(1, key.cin, key.h, key.w);
    let data = (0..shape.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let input = Tensor4::from_vec(shape, data)?;
    let run = || -> Result<()> {
        let mut tape = Tape::new();
        let vars = tape.bind_all(&store)?;
        let x = tape.leaf(&input)?;
        let mut ctx = Ctx::new(&mut tape, &store, &vars, Mode::Eval);
        std::hint::black_box(op.forward(&mut ctx, x)?);
        Ok(())
    };
    for _ in 0..WARMUP_RUNS {
        run()?;
    }
    let start = Instant::now();
    run()?;
    let single = start.elapsed().max(Duration::from_nanos(1));
    let inner = ((tick.as_nanos() * 10) / single.as_nanos()).max(1) as u32;
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for _ in 0..inner {
            run()?;
        }
        samples.push(start.elapsed().as_secs_f64() * 1e6 / f64::from(inner));
    }
    Ok(median(&mut samples))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Benchmarks every key, reporting progress through `progress(done, total)`.
pub fn bench_table(keys: &[LatencyKey], reps: usize, mut progress: impl FnMut(usize, usize)) -> Result<LatencyTable> {
    let tick = timer_tick();
    let meta = TableMeta {
        host: host_id(),
        reps,
        warmup: WARMUP_RUNS,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        timer_tick_ns: tick.as_nanos() as f64,
    };
    let mut table = LatencyTable::new(meta);
    for (i, key) in keys.iter().enumerate() {
        let us = bench_op(key, reps, tick, i as u64)?;
        table.insert(*key, us)?;
        progress(i + 1, keys.len());
    }
    Ok(table)
}

fn host_id() -> String {
    let name = fs::read_to_string("/etc/hostname")
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| "unknown".into());
    format!("{name}/{}-{}", std::env::consts::OS, std::env::consts::ARCH)
}
