//! Shared fixtures for the benchmarks.

use hypercell_core::latency::{required_keys, LatencyTable, TableMeta};
use hypercell_core::space::ChannelPlan;
use hypercell_core::{SearchConfig, Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: Shape4, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor4::from_vec(shape, data).expect("length matches shape")
}

/// A small search configuration that keeps one epoch well under a second.
pub fn small_config() -> SearchConfig {
    let mut c = SearchConfig {
        cells: [2, 3, 3],
        stem_channels: 4,
        channel_multiplier: 2,
        epochs: 4,
        warmup_epochs: 1,
        batch_size: 4,
        ..SearchConfig::default()
    };
    c.dataset.height = 32;
    c.dataset.width = 64;
    c.dataset.train_count = 8;
    c.dataset.val_count = 4;
    c
}

/// Made-up but complete costs, so benchmarks skip the measurement pass.
pub fn synthetic_table(config: &SearchConfig) -> LatencyTable {
    let d = &config.dataset;
    let keys = required_keys(
        &ChannelPlan::from_config(config),
        config.cells,
        &config.cell_ops,
        &config.agg_ops,
        d.height,
        d.width,
    );
    let mut table = LatencyTable::new(TableMeta {
        host: "synthetic".into(),
        reps: 0,
        warmup: 0,
        timestamp: 0,
        timer_tick_ns: 1.0,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in keys {
        table.insert(k, rng.gen_range(1.0..100.0)).expect("finite cost");
    }
    table
}
