//! Super-network, derived networks and the architecture record.

use hypercell_core::space::{
    derive, enumerate_architectures, random_architecture, AggOp, CellOp, Ctx, DerivedArchitecture, MaskSite, Mode,
    Network, AGG_EDGES,
};
use hypercell_core::tensor::argmax;
use hypercell_core::{Error, ParamGroup, ParamStore, SearchConfig, Shape4, Tape, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(cells: [usize; 3], seed: u64) -> SearchConfig {
    let mut c = SearchConfig {
        cells,
        stem_channels: 4,
        channel_multiplier: 2,
        seed,
        ..SearchConfig::default()
    };
    c.dataset.height = 64;
    c.dataset.width = 64;
    c
}

fn image(seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape4::new(2, 3, 64, 64);
    Tensor4::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn supernet_output(net: &Network, store: &ParamStore, arch: &DerivedArchitecture, x: &Tensor4, mode: Mode) -> Tensor4 {
    let mut tape = Tape::new();
    let vars = tape.bind_all(store).unwrap();
    let xv = tape.leaf(x).unwrap();
    let mut ctx = Ctx::new(&mut tape, store, &vars, mode);
    let masks = net
        .masks_with(&mut ctx, |site, _, _| {
            arch.one_hot_mask(site, &net.cell_ops, &net.agg_ops)
        })
        .unwrap();
    let y = net.forward(&mut ctx, xv, Some(&masks)).unwrap();
    tape.to_tensor(y)
}

fn derived_output(net: &Network, store: &ParamStore, x: &Tensor4, mode: Mode) -> Tensor4 {
    let mut tape = Tape::new();
    let vars = tape.bind_all(store).unwrap();
    let xv = tape.leaf(x).unwrap();
    let mut ctx = Ctx::new(&mut tape, store, &vars, mode);
    let y = net.forward(&mut ctx, xv, None).unwrap();
    tape.to_tensor(y)
}

#[test]
fn hard_masks_reproduce_the_derived_network() {
    for seed in 0..3 {
        let config = small_config([2, 2, 2], seed);
        let (net, store) = Network::supernet(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = image(seed);
        for _ in 0..2 {
            let arch = random_architecture(&config, &mut rng, seed).unwrap();
            let (dnet, mut dstore) = Network::derived(&arch, 999).unwrap();
            dstore.copy_matching(&store).unwrap();
            for mode in [Mode::Eval, Mode::Train] {
                let a = supernet_output(&net, &store, &arch, &x, mode);
                let b = derived_output(&dnet, &dstore, &x, mode);
                assert!(
                    a.max_abs_diff(&b) < 1e-10,
                    "seed {seed} {mode:?}: {}",
                    a.max_abs_diff(&b)
                );
            }
        }
    }
}

#[test]
fn derived_weights_are_a_subset_of_the_supernet() {
    let config = small_config([3, 2, 2], 4);
    let (_, store) = Network::supernet(&config).unwrap();
    let arch = random_architecture(&config, &mut ChaCha8Rng::seed_from_u64(1), 4).unwrap();
    let (_, mut dstore) = Network::derived(&arch, 0).unwrap();
    assert_eq!(dstore.copy_matching(&store).unwrap(), dstore.len());
}

/// Trainable values of an op mapping `cin` to `cout` channels.
fn op_params(op: OpSpec, cin: usize, cout: usize) -> usize {
    let block = |k: usize, sep: bool, c_in: usize| {
        let conv = if sep {
            k * k * c_in + c_in * cout
        } else {
            k * k * c_in * cout
        };
        conv + 2 * cout
    };
    match op {
        OpSpec::Free => 0,
        OpSpec::Blocks { k, sep, repeat } => block(k, sep, cin) + (repeat - 1) * block(k, sep, cout),
    }
}

#[derive(Clone, Copy)]
enum OpSpec {
    Free,
    Blocks { k: usize, sep: bool, repeat: usize },
}

fn cell_spec(op: CellOp) -> OpSpec {
    use CellOp::*;
    let b = |k, sep, repeat| OpSpec::Blocks { k, sep, repeat };
    match op {
        Zero | Skip | MaxPool3 => OpSpec::Free,
        Conv3 => b(3, false, 1),
        Conv3x2 => b(3, false, 2),
        SepConv3 | DilSepConv3D2 | DilSepConv3D4 => b(3, true, 1),
        SepConv3x2 | DilSepConv3D2x2 => b(3, true, 2),
    }
}

fn agg_spec(op: AggOp) -> OpSpec {
    match op {
        AggOp::Conv1x2 => OpSpec::Blocks {
            k: 1,
            sep: false,
            repeat: 2,
        },
        AggOp::Conv3x2 => OpSpec::Blocks {
            k: 3,
            sep: false,
            repeat: 2,
        },
        _ => OpSpec::Blocks {
            k: 3,
            sep: true,
            repeat: 2,
        },
    }
}

fn expected_weight_count(arch: &DerivedArchitecture) -> usize {
    let plan = &arch.channel_plan;
    let adapter = |cin: usize, cout: usize| cin * cout + 2 * cout;
    let stem = plan.stem;
    let mut total = 27 * stem + 2 * stem + 9 * stem * stem + 2 * stem;
    for (s, h) in arch.hyper_cells.iter().enumerate() {
        let cin = if s == 0 { plan.stem } else { plan.hyper[s - 1] };
        let cout = plan.hyper[s];
        let w = cout / plan.nodes;
        for (p, cell) in h.cells.iter().enumerate() {
            let ins = match p {
                0 => [cin, cin],
                1 => [cout, cin],
                _ => [cout, cout],
            };
            total += adapter(ins[0], w) + adapter(ins[1], w);
            total += cell
                .edges
                .iter()
                .map(|e| op_params(cell_spec(e.op), w, w))
                .sum::<usize>();
        }
        if s < 2 && h.depth == 1 {
            total += adapter(cin, cout);
        }
    }
    let a = plan.agg_width;
    for e in &arch.aggregation.edges {
        let cin = if e.src < 3 { plan.hyper[e.src] } else { a };
        total += op_params(agg_spec(e.op), cin, a);
    }
    total + 3 * a * plan.num_classes + plan.num_classes
}

#[test]
fn derived_parameter_count_matches_closed_form() {
    let config = small_config([3, 4, 2], 0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let arch = random_architecture(&config, &mut rng, 0).unwrap();
        let (_, store) = Network::derived(&arch, 0).unwrap();
        assert_eq!(
            store.count(ParamGroup::Weight),
            expected_weight_count(&arch),
            "{:?}",
            arch.depths()
        );
        assert_eq!(store.count(ParamGroup::Alpha) + store.count(ParamGroup::Beta), 0);
    }
}

#[test]
fn supernet_registers_every_logit_block() {
    let config = small_config([3, 4, 2], 0);
    let (net, store) = Network::supernet(&config).unwrap();
    // 5 edges x 10 candidates, normal and reduction per hyper-cell.
    assert_eq!(store.count(ParamGroup::Alpha), 3 * 2 * 5 * 10);
    assert_eq!(store.count(ParamGroup::Beta), 3 + 4 + 2);
    assert_eq!(store.count(ParamGroup::AggAlpha), 7 * 5);
    assert_eq!(net.mask_sites().len(), 3 + (3 + 4 + 2) + 1);

    let shared = SearchConfig {
        share_reduction_alpha: true,
        ..config
    };
    let (_, store) = Network::supernet(&shared).unwrap();
    assert_eq!(store.count(ParamGroup::Alpha), 3 * 5 * 10);
}

#[test]
fn stage_shapes_follow_the_strides() {
    let config = small_config([2, 2, 2], 0);
    let (net, store) = Network::supernet(&config).unwrap();
    let shapes = net.stage_shapes(64, 96);
    assert_eq!((shapes[0].c, shapes[0].h, shapes[0].w), (4, 16, 24));
    assert_eq!((shapes[3].c, shapes[3].h, shapes[3].w), (32, 2, 3));
    let mut tape = Tape::new();
    let vars = tape.bind_all(&store).unwrap();
    let x = tape.leaf(&Tensor4::zeros(Shape4::new(1, 3, 64, 96))).unwrap();
    let mut ctx = Ctx::new(&mut tape, &store, &vars, Mode::Eval);
    let masks = net
        .masks_with(&mut ctx, |_, logits, k| Ok(vec![1.0 / k as f64; logits.len()]))
        .unwrap();
    let taps = net.features(&mut ctx, x, Some(&masks)).unwrap();
    for (s, t) in taps.iter().enumerate() {
        let got = tape.shape(*t);
        assert_eq!(
            (got.c, got.h, got.w),
            (shapes[s + 1].c, shapes[s + 1].h, shapes[s + 1].w)
        );
    }
    let mut tape = Tape::new();
    let vars = tape.bind_all(&store).unwrap();
    let bad = tape.leaf(&Tensor4::zeros(Shape4::new(1, 3, 48, 64))).unwrap();
    let mut ctx = Ctx::new(&mut tape, &store, &vars, Mode::Eval);
    assert!(net.forward(&mut ctx, bad, None).is_err());
}

fn set_logits(store: &mut ParamStore, name: &str, values: &[f64]) {
    let id = store.id(name).unwrap();
    store.get_mut(id).data_mut().copy_from_slice(values);
}

#[test]
fn derive_takes_argmax_with_ties_to_the_lower_index() {
    let config = small_config([3, 2, 2], 5);
    let (net, mut store) = Network::supernet(&config).unwrap();
    // All-zero logits: every tie resolves to depth 1 and the first candidate.
    let arch = derive(&net, &store, &config).unwrap();
    assert_eq!(arch.depths(), [1, 1, 1]);
    assert!(arch
        .hyper_cells
        .iter()
        .all(|h| h.cells[0].edges.iter().all(|e| e.op == CellOp::Zero)));
    assert!(arch.aggregation.edges.iter().all(|e| e.op == AggOp::Conv1x2));

    set_logits(&mut store, "hc0.beta", &[0.1, 0.7, 0.7]);
    set_logits(&mut store, "hc1.beta", &[-1.0, 2.0]);
    let mut normal = vec![0.0; 50];
    for (e, op) in [3, 5, 9, 1, 2].into_iter().enumerate() {
        normal[e * 10 + op] = 1.0;
    }
    set_logits(&mut store, "hc0.alpha_normal", &normal);
    let mut agg = vec![0.0; 35];
    agg[2 * 5 + 4] = 3.0;
    set_logits(&mut store, "agg.alpha", &agg);
    let arch = derive(&net, &store, &config).unwrap();
    assert_eq!(arch.depths(), [2, 2, 1]);
    let ops: Vec<CellOp> = arch.hyper_cells[0].cells[1].edges.iter().map(|e| e.op).collect();
    assert_eq!(
        ops,
        vec![
            CellOp::Conv3,
            CellOp::SepConv3,
            CellOp::DilSepConv3D2x2,
            CellOp::Skip,
            CellOp::MaxPool3
        ]
    );
    assert_eq!(arch.aggregation.edges[2].op, AggOp::DilSepConv3D8x2);
    assert_eq!(arch.provenance.source, "search");
    assert_eq!(arch.provenance.config_hash, config.hash());
}

#[test]
fn one_hot_masks_invert_derivation() {
    let config = small_config([3, 2, 2], 6);
    let (net, mut store) = Network::supernet(&config).unwrap();
    let arch = random_architecture(&config, &mut ChaCha8Rng::seed_from_u64(3), 6).unwrap();
    // Use the one-hot masks as logits; derivation must recover the architecture.
    for site in net.mask_sites() {
        let id = net.logits_at(site).unwrap();
        let m = arch.one_hot_mask(site, &net.cell_ops, &net.agg_ops).unwrap();
        let pruned = matches!(site, MaskSite::Cell(s, p) if p >= arch.hyper_cells[s].depth);
        if !pruned {
            store.get_mut(id).data_mut().copy_from_slice(&m);
        }
        let k = store.shape(id).c;
        assert!(m.chunks(k).all(|r| r.iter().sum::<f64>() == 1.0 && r[argmax(r)] == 1.0));
    }
    // Cells 1.. share the normal logits; a depth-1 hyper-cell has no normal
    // cell, so its normal logits stay zero and derive to the first candidate.
    let derived = derive(&net, &store, &config).unwrap();
    for (a, b) in derived.hyper_cells.iter().zip(&arch.hyper_cells) {
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.cells[0], b.cells[0]);
        if b.depth > 1 {
            assert_eq!(a.cells, b.cells);
        }
    }
    assert_eq!(derived.aggregation, arch.aggregation);
}

#[test]
fn architecture_json_round_trips_and_rejects_bad_input() {
    let config = small_config([3, 2, 2], 7);
    let arch = random_architecture(&config, &mut ChaCha8Rng::seed_from_u64(9), 7).unwrap();
    let text = arch.to_json();
    assert_eq!(DerivedArchitecture::from_json(&text).unwrap(), arch);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("arch.json");
    arch.save(&path).unwrap();
    assert_eq!(DerivedArchitecture::load(&path).unwrap(), arch);

    let newer = text.replacen("\"version\": 1", "\"version\": 2", 1);
    assert!(matches!(
        DerivedArchitecture::from_json(&newer),
        Err(Error::SchemaVersion { found: 2, .. })
    ));
    let extra = text.replacen("{", "{\n  \"surprise\": 1,", 1);
    assert!(DerivedArchitecture::from_json(&extra).is_err());
    let mut wrong = arch.clone();
    wrong.hyper_cells[0].depth += 1;
    assert!(DerivedArchitecture::from_json(&wrong.to_json()).is_err());
}

#[test]
fn enumeration_counts_the_space() {
    let mut config = small_config([2, 2, 1], 0);
    config.cell_ops = vec![CellOp::MaxPool3, CellOp::Conv3];
    config.agg_ops = vec![AggOp::Conv1x2];
    config.share_reduction_alpha = true;
    // Per hyper-cell: depth x 2^5 op choices; shared cells make depth 2
    // contribute the same 2^5.
    let per = |cells: usize| cells * 32;
    let archs = enumerate_architectures(&config, 1 << 20).unwrap();
    assert_eq!(archs.len(), per(2) * per(2) * per(1));
    for (i, a) in archs.iter().enumerate().step_by(997) {
        assert!(archs[i + 1..].iter().take(50).all(|b| !a.same_structure(b)));
    }
    assert!(enumerate_architectures(&config, 100).is_err());

    config.share_reduction_alpha = false;
    config.cells = [2, 1, 1];
    config.nodes = 1;
    // One node: 2 edges, so 4 op choices per cell; depth 2 adds an
    // independent normal cell.
    let archs = enumerate_architectures(&config, 1 << 20).unwrap();
    assert_eq!(archs.len(), (4 + 4 * 4) * 4 * 4);
    assert!(archs.iter().all(|a| a.aggregation.edges.len() == AGG_EDGES.len()));
}
