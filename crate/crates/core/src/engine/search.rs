use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{restore_store, store_arrays, RngState, Snapshot};
use super::optim::{cosine_lr, Adam, AdamSlot, Sgd};
use super::sub_seed;
use super::train::BN_MOMENTUM;
use crate::config::SearchConfig;
use crate::data::{augment, collate, load_split, Sample, Split};
use crate::error::{Error, Result};
use crate::latency::{search_latency, total_loss, CostPlan, LatencyTable};
use crate::sampling::GumbelSampler;
use crate::space::{derive, update_running_stats, Ctx, DerivedArchitecture, MaskSite, Mode, Network};
use crate::tensor::{argmax, softmax_lastdim, ParamGroup, ParamId, ParamStore, Tape};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_KIND: &str = "search-checkpoint";

/// One row of the search trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean over the epoch's batches.
    pub ce: f64,
    pub total_loss: f64,
    /// Latency under the softmax expectation of every mask, after the epoch.
    pub expected_latency_us: f64,
    /// Argmax depth per hyper-cell, after the epoch.
    pub depth: [usize; 3],
    /// `sum_p p * softmax(beta)_p` per hyper-cell.
    pub expected_depth: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub records: Vec<EpochRecord>,
}

pub const METRICS_HEADER: &str = "epoch,lambda,ce,total_loss,expected_latency_us,depth_1,depth_2,depth_3,expected_depth_1,expected_depth_2,expected_depth_3";

impl TrajectoryLog {
    /// One line per epoch, columns as in [`METRICS_HEADER`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.lambda,
                r.ce,
                r.total_loss,
                r.expected_latency_us,
                r.depth[0],
                r.depth[1],
                r.depth[2],
                r.expected_depth[0],
                r.expected_depth[1],
                r.expected_depth[2]
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: SearchConfig,
    table: LatencyTable,
    next_epoch: usize,
    trajectory: TrajectoryLog,
    sampler: RngState,
    data_rng: RngState,
    adam_steps: Vec<(usize, u64)>,
    sgd_ids: Vec<usize>,
}

/// The search loop as a resumable state machine: one call to
/// [`Searcher::run_epoch`] per epoch.
pub struct Searcher {
    config: SearchConfig,
    table: LatencyTable,
    net: Network,
    store: ParamStore,
    costs: CostPlan,
    train: Vec<Sample>,
    sgd: Sgd,
    adam: Adam,
    sampler: GumbelSampler,
    data_rng: ChaCha8Rng,
    next_epoch: usize,
    trajectory: TrajectoryLog,
    weights: Vec<ParamId>,
    alphas: Vec<ParamId>,
    betas: Vec<ParamId>,
}

pub struct SearchOutcome {
    pub net: Network,
    pub store: ParamStore,
    pub trajectory: TrajectoryLog,
    pub arch: DerivedArchitecture,
}

impl Searcher {
    pub fn new(config: &SearchConfig, table: &LatencyTable) -> Result<Self> {
        let (net, store) = Network::supernet(config)?;
        let d = &config.dataset;
        let costs = CostPlan::new(
            &net.plan,
            config.cells,
            &config.cell_ops,
            &config.agg_ops,
            table,
            d.height,
            d.width,
        )?;
        let train = load_split(d, Split::Train)?;
        let ids = |g: ParamGroup| store.ids_in(g).collect::<Vec<_>>();
        let (weights, betas) = (ids(ParamGroup::Weight), ids(ParamGroup::Beta));
        let mut alphas = ids(ParamGroup::Alpha);
        alphas.extend(ids(ParamGroup::AggAlpha));
        let lambda = config.temperature.anneal(0, config.epochs);
        Ok(Self {
            sgd: Sgd::from_config(&config.weight_optim),
            adam: Adam::new(config.arch_optim.clone()),
            sampler: GumbelSampler::new(sub_seed(config.seed, 1), lambda)?,
            data_rng: ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 2)),
            config: config.clone(),
            table: table.clone(),
            net,
            store,
            costs,
            train,
            next_epoch: 0,
            trajectory: TrajectoryLog::default(),
            weights,
            alphas,
            betas,
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    pub fn table(&self) -> &LatencyTable {
        &self.table
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn trajectory(&self) -> &TrajectoryLog {
        &self.trajectory
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn is_done(&self) -> bool {
        self.next_epoch >= self.config.epochs
    }

    /// Runs the next epoch and returns its trajectory record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.next_epoch;
        if self.is_done() {
            return Err(Error::invalid("search", "all epochs have run"));
        }
        let c = &self.config;
        let lambda = c.temperature.anneal(epoch, c.epochs);
        self.sampler.set_lambda(lambda)?;
        let lr = cosine_lr(c.weight_optim.lr_max, c.weight_optim.lr_min, epoch, c.epochs);
        let update_beta = epoch >= c.warmup_epochs;
        let batch = c.batch_size;
        let n = self.train.len();
        let (weight_idx, arch_idx): (Vec<usize>, Vec<usize>) = if c.split_arch_data {
            ((0..n / 2).collect(), (n / 2..n).collect())
        } else {
            ((0..n).collect(), Vec::new())
        };
        let mut weight_order = weight_idx;
        weight_order.shuffle(&mut self.data_rng);
        let mut arch_order = arch_idx;
        arch_order.shuffle(&mut self.data_rng);
        let mut arch_batches = arch_order.chunks(batch).cycle();
        let (mut ce_sum, mut loss_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in weight_order.chunks(batch) {
            if self.config.split_arch_data {
                let (ce, loss) = self.step(chunk, true, false, update_beta, lr)?;
                let arch_chunk = arch_batches.next().expect("non-empty arch half");
                self.step(arch_chunk, false, true, update_beta, lr)?;
                ce_sum += ce;
                loss_sum += loss;
            } else {
                let (ce, loss) = self.step(chunk, true, true, update_beta, lr)?;
                ce_sum += ce;
                loss_sum += loss;
            }
            steps += 1;
        }
        let (depth, expected_depth) = self.depth_summary()?;
        let record = EpochRecord {
            epoch,
            lambda,
            ce: ce_sum / steps as f64,
            total_loss: loss_sum / steps as f64,
            expected_latency_us: self.expected_latency()?,
            depth,
            expected_depth,
        };
        self.trajectory.records.push(record.clone());
        self.next_epoch += 1;
        Ok(record)
    }

    /// One sampled forward/backward pass followed by the requested updates.
    fn step(
        &mut self,
        idx: &[usize],
        update_w: bool,
        update_arch: bool,
        update_beta: bool,
        lr: f64,
    ) -> Result<(f64, f64)> {
        let batch: Vec<Sample> = idx
            .iter()
            .map(|&i| {
                if self.config.augment {
                    augment(&self.train[i], &mut self.data_rng)
                } else {
                    self.train[i].clone()
                }
            })
            .collect();
        let (img, labels) = collate(&batch)?;
        let mut tape = Tape::new();
        let vars = tape.bind_all(&self.store)?;
        let x = tape.leaf(&img)?;
        let mut ctx = Ctx::new(&mut tape, &self.store, &vars, Mode::Train);
        let masks = self.net.sample_masks(&mut ctx, &mut self.sampler)?;
        let y = self.net.forward(&mut ctx, x, Some(&masks))?;
        let stats = std::mem::take(&mut ctx.stats);
        let ce = tape.cross_entropy(y, labels, None)?;
        let lat = search_latency(&mut tape, &masks, &self.costs)?;
        let loss = total_loss(&mut tape, ce, lat, self.config.gamma)?;
        let (ce_v, loss_v) = (tape.item(ce), tape.item(loss));
        tape.backward(loss)?.apply_to(&mut self.store)?;
        if update_w {
            self.sgd.step(&mut self.store, &self.weights, lr)?;
            update_running_stats(&mut self.store, &stats, BN_MOMENTUM);
        }
        if update_arch {
            self.adam.step(&mut self.store, &self.alphas)?;
            if update_beta {
                self.adam.step(&mut self.store, &self.betas)?;
            }
        }
        self.store.clear_grads();
        if !self.store.all_finite() {
            return Err(Error::NonFinite("search parameters"));
        }
        Ok((ce_v, loss_v))
    }

    fn depth_summary(&self) -> Result<([usize; 3], [f64; 3])> {
        let mut depth = [0; 3];
        let mut expected = [0.0; 3];
        for s in 0..3 {
            let id = self.net.logits_at(MaskSite::Depth(s)).expect("super-network");
            let beta = self.store.get(id).data();
            depth[s] = argmax(beta) + 1;
            expected[s] = softmax_lastdim(beta)?
                .iter()
                .enumerate()
                .map(|(p, u)| (p + 1) as f64 * u)
                .sum();
        }
        Ok((depth, expected))
    }

    /// Latency with every mask at its softmax expectation.
    pub fn expected_latency(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = tape.bind_all(&self.store)?;
        let mut ctx = Ctx::new(&mut tape, &self.store, &vars, Mode::Eval);
        let masks = self.net.masks_with(&mut ctx, |_, logits, k| {
            let mut out = Vec::with_capacity(logits.len());
            for row in logits.chunks(k) {
                out.extend(softmax_lastdim(row)?);
            }
            Ok(out)
        })?;
        let lat = search_latency(&mut tape, &masks, &self.costs)?;
        Ok(tape.item(lat))
    }

    pub fn derive(&self) -> Result<DerivedArchitecture> {
        derive(&self.net, &self.store, &self.config)
    }

    pub fn finish(self) -> Result<SearchOutcome> {
        let arch = self.derive()?;
        Ok(SearchOutcome {
            net: self.net,
            store: self.store,
            trajectory: self.trajectory,
            arch,
        })
    }

    /// Writes everything needed to continue bit-identically.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut arrays = store_arrays(&self.store);
        for (id, buf) in &self.sgd.buffers {
            arrays.push((format!("sgd:{id}"), buf.clone()));
        }
        for (id, slot) in &self.adam.slots {
            arrays.push((format!("adam_m:{id}"), slot.m.clone()));
            arrays.push((format!("adam_v:{id}"), slot.v.clone()));
        }
        let meta = CheckpointMeta {
            config: self.config.clone(),
            table: self.table.clone(),
            next_epoch: self.next_epoch,
            trajectory: self.trajectory.clone(),
            sampler: RngState::capture(self.sampler.rng()),
            data_rng: RngState::capture(&self.data_rng),
            adam_steps: self.adam.slots.iter().map(|(id, s)| (*id, s.step)).collect(),
            sgd_ids: self.sgd.buffers.keys().copied().collect(),
        };
        Snapshot { meta, arrays }.write(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)
    }

    pub fn resume(path: &Path) -> Result<Self> {
        let snap: Snapshot<CheckpointMeta> = Snapshot::read(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
        let meta = &snap.meta;
        let mut s = Self::new(&meta.config, &meta.table)?;
        restore_store(&snap, &mut s.store)?;
        let missing = |name: String| Error::Malformed {
            kind: "checkpoint",
            msg: format!("missing {name}"),
        };
        for &id in &meta.sgd_ids {
            let name = format!("sgd:{id}");
            let v = snap.array(&name).ok_or_else(|| missing(name.clone()))?;
            s.sgd.buffers.insert(id, v.to_vec());
        }
        for &(id, step) in &meta.adam_steps {
            let (mn, vn) = (format!("adam_m:{id}"), format!("adam_v:{id}"));
            let m = snap.array(&mn).ok_or_else(|| missing(mn.clone()))?.to_vec();
            let v = snap.array(&vn).ok_or_else(|| missing(vn.clone()))?.to_vec();
            s.adam.slots.insert(id, AdamSlot { step, m, v });
        }
        let lambda = meta.config.temperature.anneal(meta.next_epoch, meta.config.epochs);
        s.sampler = GumbelSampler::from_rng(meta.sampler.restore(), lambda)?;
        s.data_rng = meta.data_rng.restore();
        s.next_epoch = meta.next_epoch;
        s.trajectory = meta.trajectory.clone();
        Ok(s)
    }
}

/// Runs a whole search. With `checkpoint`, the state is saved there after
/// every epoch, so a failure leaves the last good epoch on disk.
pub fn search(config: &SearchConfig, table: &LatencyTable, checkpoint: Option<&Path>) -> Result<SearchOutcome> {
    let mut s = Searcher::new(config, table)?;
    while !s.is_done() {
        s.run_epoch()?;
        if let Some(path) = checkpoint {
            s.save_checkpoint(path)?;
        }
    }
    s.finish()
}
