//! Search, derivation hand-off, retraining, evaluation, and the random
//! baseline.

mod checkpoint;
mod optim;
mod search;
mod train;

pub use checkpoint::{restore_store, store_arrays, RngState, Snapshot};
pub use optim::{cosine_lr, poly_lr, Adam, AdamSlot, Sgd};
pub use search::{search, EpochRecord, SearchOutcome, Searcher, TrajectoryLog, CHECKPOINT_VERSION, METRICS_HEADER};
pub use train::{
    argmax_channels, evaluate, evaluate_with, random_search_baseline, retrain, retrain_on, EpochEval, EvalMetrics,
    RandomSample, RandomSearchReport, RetrainOutcome, BN_MOMENTUM,
};

/// Independent seed for a named purpose, derived from the master seed.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
