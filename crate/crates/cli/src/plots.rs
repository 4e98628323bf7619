//! Plot-data export: depth trajectories and latency/accuracy sweep tables as
//! CSV.

use hypercell_core::engine::TrajectoryLog;
use serde::{Deserialize, Serialize};

/// `epoch,actual_depth,expected_depth` for one hyper-cell.
pub fn depth_series(log: &TrajectoryLog, hyper: usize) -> String {
    let mut out = String::from("epoch,actual_depth,expected_depth\n");
    for r in &log.records {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.depth[hyper], r.expected_depth[hyper]));
    }
    out
}

/// One finished run of a latency-weight sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run_id: String,
    pub gamma: f64,
    pub seed: u64,
    pub latency_us: f64,
    pub miou: f64,
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.gamma.total_cmp(&b.gamma).then(a.seed.cmp(&b.seed)));
    let mut out = String::from("gamma,seed,latency_us,miou,run_id\n");
    for r in &sorted {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.gamma, r.seed, r.latency_us, r.miou, r.run_id
        ));
    }
    out
}
