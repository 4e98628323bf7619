//! Central finite-difference checks against the tape's analytic gradients.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::latency::{cell_latency, network_latency, total_loss};
use crate::sampling::{gumbel_softmax_rows, GumbelSampler};
use crate::space::{
    Cell, CellKind, CellOp, CellSpec, Ctx, HyperCell, HyperSpec, Mode, OpInstance, OpKind, ParamBuilder,
};
use crate::tensor::{ParamGroup, ParamStore, Shape4, Tape, Tensor4, Var};

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input, flat index, analytic, numeric)` for the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks `coords` randomly chosen coordinates (spread over all inputs) of the
/// gradient of `f` at `inputs` with central differences of step `h`.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
pub fn check<F>(inputs: &[Tensor4], coords: usize, h: f64, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_subset(inputs, &vec![true; inputs.len()], coords, h, seed, f)
}

/// [`check`] sampling coordinates only from inputs flagged in `eligible`.
pub fn check_subset<F>(
    inputs: &[Tensor4],
    eligible: &[bool],
    coords: usize,
    h: f64,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor4]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ts.iter().map(|t| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let leaves: Vec<Tensor4> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let vars = leaves.iter().map(|t| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let sizes: Vec<usize> = inputs
        .iter()
        .zip(eligible)
        .map(|(t, &e)| if e { t.shape().numel() } else { 0 })
        .collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, coords.min(total)).into_vec();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe: Vec<Tensor4> = inputs.to_vec();
    for flat in picks {
        let (mut which, mut idx) = (0, flat);
        while idx >= sizes[which] {
            idx -= sizes[which];
            which += 1;
        }
        let base = inputs[which].data()[idx];
        probe[which].data_mut()[idx] = base + h;
        let up = eval(&probe)?;
        probe[which].data_mut()[idx] = base - h;
        let down = eval(&probe)?;
        probe[which].data_mut()[idx] = base;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(vars[which]).map_or(0.0, |g| g[idx]);
        let err = rel_error(analytic, numeric);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((which, idx, analytic, numeric));
        }
    }
    Ok(report)
}

/// [`check`] over explicit inputs followed by every tensor of `store`.
///
/// `f` receives the input leaves and a slice of parameter leaves indexed by
/// `ParamId`, suitable for a forward [`crate::space::Ctx`].
pub fn check_with_store<F>(
    inputs: &[Tensor4],
    store: &ParamStore,
    coords: usize,
    h: f64,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var], &[Var]) -> Result<Var>,
{
    let mut all = inputs.to_vec();
    let mut eligible = vec![true; inputs.len()];
    for (_, group, t) in store.iter() {
        let mut t = t.clone();
        t.clear_grad();
        t.requires_grad = false;
        all.push(t);
        eligible.push(group != ParamGroup::Buffer);
    }
    let n = inputs.len();
    check_subset(&all, &eligible, coords, h, seed, |tape, vars| {
        f(tape, &vars[..n], &vars[n..])
    })
}

/// One named check of [`standard_suite`].
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn random_tensor(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor4::from_vec(shape, data).expect("length matches shape")
}

/// Scalar objective `sum_i r_i y_i` with fixed random `r`, so that no
/// gradient vanishes by symmetry.
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let n = tape.shape(y).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.dot_const(y, &r)
}

/// Gradient checks of every catalog operation (in training mode, so through
/// batch statistics), the Gumbel-Softmax, the cross-entropy, a relaxed cell,
/// a relaxed hyper-cell, the expected network latency and the total loss.
pub fn standard_suite(coords: usize, h: f64, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: String, report: GradCheckReport| out.push(SuiteEntry { name, report });

    for kind in OpKind::all() {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(rng.gen());
        let op = OpInstance::build(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut prng,
            },
            "op",
            kind,
            4,
            4,
            1,
        )?;
        let x = random_tensor(Shape4::new(2, 4, 6, 6), &mut rng);
        let report = check_with_store(&[x], &store, coords, h, rng.gen(), |tape, xs, ps| {
            let mut ctx = Ctx::new(tape, &store, ps, Mode::Train);
            let y = op.forward(&mut ctx, xs[0])?;
            weighted(tape, y, 1)
        })?;
        push(kind.name().to_string(), report);
    }

    let logits = random_tensor(Shape4::new(3, 5, 1, 1), &mut rng);
    let noise_seed = rng.gen();
    let report = check(&[logits], coords, h, rng.gen(), |tape, v| {
        // A fresh sampler per evaluation keeps the noise fixed.
        let mut sampler = GumbelSampler::new(noise_seed, 0.7)?;
        let y = gumbel_softmax_rows(tape, v[0], &mut sampler)?;
        weighted(tape, y, 2)
    })?;
    push("gumbel_softmax".into(), report);

    let seg = random_tensor(Shape4::new(2, 4, 3, 3), &mut rng);
    let labels: Arc<[u32]> = (0..18).map(|_| rng.gen_range(0..4)).collect();
    let report = check(std::slice::from_ref(&seg), coords, h, rng.gen(), |tape, v| {
        tape.cross_entropy(v[0], labels.clone(), None)
    })?;
    push("cross_entropy".into(), report);

    let candidates = [CellOp::Zero, CellOp::Skip, CellOp::MaxPool3, CellOp::SepConv3];
    let slots: Vec<(usize, CellOp)> = candidates.iter().copied().enumerate().collect();
    let spec = CellSpec::new(CellKind::Normal, 2);
    let edges = spec.num_edges();
    let mut store = ParamStore::new();
    let mut prng = ChaCha8Rng::seed_from_u64(rng.gen());
    let cell = Cell::build(
        &mut ParamBuilder {
            store: &mut store,
            rng: &mut prng,
        },
        "cell",
        spec,
        [4, 4],
        1,
        2,
        &vec![slots; edges],
    )?;
    let inputs = [
        random_tensor(Shape4::new(2, 4, 4, 4), &mut rng),
        random_tensor(Shape4::new(2, 4, 4, 4), &mut rng),
        random_tensor(Shape4::new(edges, candidates.len(), 1, 1), &mut rng),
    ];
    let report = check_with_store(&inputs, &store, coords, h, rng.gen(), |tape, xs, ps| {
        let m = tape.softmax_rows(xs[2])?;
        let mut ctx = Ctx::new(tape, &store, ps, Mode::Train);
        let y = cell.forward(&mut ctx, xs[0], xs[1], Some(m))?;
        weighted(tape, y, 3)
    })?;
    push("cell_forward".into(), report);

    let spec = HyperSpec {
        num_cells: 2,
        nodes: 2,
        in_channels: 4,
        out_channels: 8,
    };
    let slots = vec![(0, CellOp::Skip), (1, CellOp::Conv3)];
    let ops = vec![vec![slots; edges]; 2];
    let mut store = ParamStore::new();
    let mut prng = ChaCha8Rng::seed_from_u64(rng.gen());
    let hyper = HyperCell::build(
        &mut ParamBuilder {
            store: &mut store,
            rng: &mut prng,
        },
        "hc",
        spec,
        &ops,
        true,
    )?;
    let inputs = [
        random_tensor(Shape4::new(2, 4, 4, 4), &mut rng),
        random_tensor(Shape4::new(2, 4, 4, 4), &mut rng),
        random_tensor(Shape4::new(1, 2, 1, 1), &mut rng),
        random_tensor(Shape4::new(edges, 2, 1, 1), &mut rng),
        random_tensor(Shape4::new(edges, 2, 1, 1), &mut rng),
    ];
    let report = check_with_store(&inputs, &store, coords, h, rng.gen(), |tape, xs, ps| {
        let depth = tape.softmax_rows(xs[2])?;
        let cells = vec![tape.softmax_rows(xs[3])?, tape.softmax_rows(xs[4])?];
        let masks = crate::space::HyperMasks { depth, cells };
        let mut ctx = Ctx::new(tape, &store, ps, Mode::Train);
        let o = hyper.forward(&mut ctx, xs[0], xs[1], Some(&masks))?;
        let a = weighted(tape, o.out, 4)?;
        let b = weighted(tape, o.penult.expect("adapter built"), 5)?;
        tape.add(a, b)
    })?;
    push("hypercell_forward".into(), report);

    // Three hyper-cells of 2, 3 and 2 cells with 4 candidates on 5 edges.
    let depths = [2usize, 3, 2];
    let mut lat_inputs: Vec<Tensor4> = depths
        .iter()
        .map(|&n| random_tensor(Shape4::new(1, n, 1, 1), &mut rng))
        .collect();
    let cells: usize = depths.iter().sum();
    lat_inputs.extend((0..cells).map(|_| random_tensor(Shape4::new(edges, 4, 1, 1), &mut rng)));
    let costs: Vec<Vec<f64>> = (0..cells)
        .map(|_| (0..edges * 4).map(|_| rng.gen_range(0.5..20.0)).collect())
        .collect();
    let latency = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut depth_masks = Vec::new();
        let mut lats = Vec::new();
        let mut next = depths.len();
        for (s, &n) in depths.iter().enumerate() {
            depth_masks.push(tape.softmax_rows(v[s])?);
            let mut row = Vec::new();
            for _ in 0..n {
                let m = tape.softmax_rows(v[next])?;
                row.push(cell_latency(tape, m, &costs[next - depths.len()])?);
                next += 1;
            }
            lats.push(row);
        }
        network_latency(tape, &depth_masks, &lats)
    };
    let report = check(&lat_inputs, coords, h, rng.gen(), latency)?;
    push("network_latency".into(), report);

    let mut loss_inputs = lat_inputs;
    loss_inputs.push(seg);
    let report = check(&loss_inputs, coords, h, rng.gen(), |tape, v| {
        let lat = latency(tape, &v[..v.len() - 1])?;
        let ce = tape.cross_entropy(v[v.len() - 1], labels.clone(), None)?;
        total_loss(tape, ce, lat, 0.1)
    })?;
    push("total_loss".into(), report);
    Ok(out)
}
