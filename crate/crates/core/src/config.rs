//! The full hyperparameter record of a run.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::sampling::TemperatureSchedule;
use crate::space::{AggOp, CellOp, AGG_OPS, CELL_OPS};

/// Adaptive-moment optimizer settings (architecture parameters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum SGD with cosine decay from `lr_max` to `lr_min` (network weights).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr_max: 0.025,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 1e-3,
        }
    }
}

/// Retraining of a derived architecture: momentum SGD with a poly schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 0.01,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Initial number of cells (reduction + normal) in each hyper-cell.
    pub cells: [usize; 3],
    /// Intermediate nodes per cell.
    pub nodes: usize,
    /// Output channels of the stem, i.e. the first hyper-cell's input.
    pub stem_channels: usize,
    /// Channel growth of each reduction cell.
    pub channel_multiplier: usize,
    /// Width of aggregation-cell nodes; defaults to the first hyper-cell's output width.
    pub agg_channels: Option<usize>,
    /// Candidate subsets; defaults are the full catalogs in catalog order.
    pub cell_ops: Vec<CellOp>,
    pub agg_ops: Vec<AggOp>,
    /// Tie the reduction cell's operation logits to the shared normal-cell logits.
    pub share_reduction_alpha: bool,
    pub epochs: usize,
    /// Epochs during which the depth logits stay frozen.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Weight of the log-latency term.
    pub gamma: f64,
    pub temperature: TemperatureSchedule,
    pub arch_optim: AdamConfig,
    pub weight_optim: SgdConfig,
    /// Use disjoint halves of the training split for weight and architecture steps.
    pub split_arch_data: bool,
    pub augment: bool,
    pub retrain: RetrainConfig,
    pub seed: u64,
    pub dataset: DatasetSpec,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            cells: [5, 10, 10],
            nodes: 2,
            stem_channels: 8,
            channel_multiplier: 3,
            agg_channels: None,
            cell_ops: CELL_OPS.to_vec(),
            agg_ops: AGG_OPS.to_vec(),
            share_reduction_alpha: false,
            epochs: 60,
            warmup_epochs: 20,
            batch_size: 8,
            gamma: 0.01,
            temperature: TemperatureSchedule::default(),
            arch_optim: AdamConfig::default(),
            weight_optim: SgdConfig::default(),
            split_arch_data: false,
            augment: true,
            retrain: RetrainConfig::default(),
            seed: 1,
            dataset: DatasetSpec::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        fn bad(field: &'static str, msg: impl Into<String>) -> Result<()> {
            Err(Error::InvalidConfig { field, msg: msg.into() })
        }
        fn positive(field: &'static str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                bad(field, format!("must be positive, got {v}"))
            }
        }
        if self.cells.contains(&0) {
            return bad("cells", "every hyper-cell needs at least its reduction cell");
        }
        if self.nodes == 0 {
            return bad("nodes", "must be positive");
        }
        if self.stem_channels == 0 {
            return bad("stem_channels", "must be positive");
        }
        if self.channel_multiplier == 0 {
            return bad("channel_multiplier", "must be positive");
        }
        for s in 0..3 {
            if !self.hyper_out_channels(s).is_multiple_of(self.nodes) {
                return bad("nodes", "each hyper-cell's width must be divisible by the node count");
            }
        }
        if self.agg_channels == Some(0) {
            return bad("agg_channels", "must be positive");
        }
        if self.cell_ops.is_empty() || has_duplicates(&self.cell_ops) {
            return bad("cell_ops", "must be a non-empty list without duplicates");
        }
        if self.agg_ops.is_empty() || has_duplicates(&self.agg_ops) {
            return bad("agg_ops", "must be a non-empty list without duplicates");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs", "must be smaller than epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma", "must be finite and non-negative");
        }
        positive("temperature.initial", self.temperature.initial)?;
        positive("temperature.minimum", self.temperature.minimum)?;
        if self.temperature.minimum > self.temperature.initial {
            return bad("temperature.minimum", "exceeds the initial temperature");
        }
        positive("arch_optim.lr", self.arch_optim.lr)?;
        positive("weight_optim.lr_max", self.weight_optim.lr_max)?;
        positive("weight_optim.lr_min", self.weight_optim.lr_min)?;
        positive("retrain.lr", self.retrain.lr)?;
        if self.retrain.batch_size == 0 {
            return bad("retrain.batch_size", "must be positive");
        }
        let need = if self.split_arch_data { 2 } else { 1 };
        if self.dataset.train_count < need {
            return bad("dataset.train_count", "too few training samples");
        }
        if self.dataset.val_count == 0 {
            return bad("dataset.val_count", "must be positive");
        }
        let stride = 32;
        if !self.dataset.height.is_multiple_of(stride) || !self.dataset.width.is_multiple_of(stride) {
            return bad("dataset.height", "image dimensions must be multiples of 32");
        }
        self.dataset.validate()
    }

    /// Output width of hyper-cell `s` (0-based).
    pub fn hyper_out_channels(&self, s: usize) -> usize {
        self.stem_channels * self.channel_multiplier.pow(s as u32 + 1)
    }

    /// Input width of each hyper-cell.
    pub fn channel_plan(&self) -> [usize; 3] {
        [
            self.stem_channels,
            self.hyper_out_channels(0),
            self.hyper_out_channels(1),
        ]
    }

    pub fn agg_width(&self) -> usize {
        self.agg_channels.unwrap_or_else(|| self.hyper_out_channels(0))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

fn has_duplicates<T: PartialEq>(v: &[T]) -> bool {
    v.iter().enumerate().any(|(i, a)| v[..i].contains(a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_channel_plan() {
        let c = SearchConfig::default();
        c.validate().unwrap();
        assert_eq!(c.channel_plan(), [8, 24, 72]);
        assert_eq!(c.hyper_out_channels(2), 216);
    }

    #[test]
    fn invalid_fields_are_named() {
        let c = SearchConfig {
            warmup_epochs: 60,
            ..Default::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("warmup_epochs"), "{err}");
        let c = SearchConfig {
            gamma: -1.0,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("gamma"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = SearchConfig::default();
        assert_eq!(a.hash(), SearchConfig::default().hash());
        let b = SearchConfig { seed: 2, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
    }
}
