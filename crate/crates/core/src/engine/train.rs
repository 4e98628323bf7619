use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{poly_lr, Sgd};
use super::sub_seed;
use crate::config::{RetrainConfig, SearchConfig};
use crate::data::{augment, collate, load_split, Confusion, DatasetSpec, Sample, Split};
use crate::error::{Error, Result};
use crate::latency::{discrete_latency, LatencyTable};
use crate::space::{random_architecture, update_running_stats, Ctx, DerivedArchitecture, Mode, Network};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tape, Tensor4};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub miou: f64,
    /// Mean per-pixel cross-entropy, when the predictor reports it.
    pub ce: Option<f64>,
    pub pixels: usize,
}

/// Per-pixel argmax over channels of `[B x K x H x W]` scores.
pub fn argmax_channels(scores: &Tensor4) -> Vec<u32> {
    let s = scores.shape();
    let plane = s.plane();
    let data = scores.data();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let base = n * s.c * plane;
        for i in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if data[base + c * plane + i] > data[base + best * plane + i] {
                    best = c;
                }
            }
            out.push(best as u32);
        }
    }
    out
}

/// Dataset-level metrics of an arbitrary predictor, batch by batch. The
/// predictor returns labels for every pixel and optionally the summed
/// cross-entropy of the batch.
pub fn evaluate_with<F>(samples: &[Sample], classes: usize, batch: usize, mut predict: F) -> Result<EvalMetrics>
where
    F: FnMut(&Tensor4, &[u32]) -> Result<(Vec<u32>, Option<f64>)>,
{
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "empty split"));
    }
    let mut confusion = Confusion::new(classes);
    let mut ce_sum = Some(0.0);
    let mut pixels = 0;
    for chunk in samples.chunks(batch.max(1)) {
        let (img, labels) = collate(chunk)?;
        let (pred, ce) = predict(&img, &labels)?;
        confusion.add(&pred, &labels)?;
        pixels += labels.len();
        ce_sum = match (ce_sum, ce) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
    }
    Ok(EvalMetrics {
        miou: confusion.miou(),
        ce: ce_sum.map(|s| s / pixels as f64),
        pixels,
    })
}

/// Evaluation-mode metrics of a discrete network.
pub fn evaluate(
    net: &Network,
    store: &ParamStore,
    samples: &[Sample],
    classes: usize,
    batch: usize,
) -> Result<EvalMetrics> {
    evaluate_with(samples, classes, batch, |img, labels| {
        let mut tape = Tape::new();
        let vars = tape.bind_all(store)?;
        let x = tape.leaf(img)?;
        let mut ctx = Ctx::new(&mut tape, store, &vars, Mode::Eval);
        let y = net.forward(&mut ctx, x, None)?;
        let pred = argmax_channels(&tape.to_tensor(y));
        let ce = tape.cross_entropy(y, labels.into(), None)?;
        Ok((pred, Some(tape.item(ce) * labels.len() as f64)))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_miou: f64,
}

pub struct RetrainOutcome {
    pub net: Network,
    pub store: ParamStore,
    pub best_val_miou: f64,
    pub final_val: EvalMetrics,
    pub history: Vec<EpochEval>,
}

/// Trains a derived architecture from fresh weights with momentum SGD and a
/// poly schedule, evaluating on the validation split after every epoch.
pub fn retrain(
    arch: &DerivedArchitecture,
    rc: &RetrainConfig,
    data: &DatasetSpec,
    seed: u64,
) -> Result<RetrainOutcome> {
    let train = load_split(data, Split::Train)?;
    let val = load_split(data, Split::Val)?;
    retrain_on(arch, rc, data.num_classes, &train, &val, seed)
}

/// [`retrain`] on pre-generated samples.
pub fn retrain_on(
    arch: &DerivedArchitecture,
    rc: &RetrainConfig,
    classes: usize,
    train: &[Sample],
    val: &[Sample],
    seed: u64,
) -> Result<RetrainOutcome> {
    if train.is_empty() || rc.batch_size == 0 {
        return Err(Error::invalid(
            "retrain",
            "need training samples and a positive batch size",
        ));
    }
    let (net, mut store) = Network::derived(arch, sub_seed(seed, 10))?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 11));
    let weights: Vec<ParamId> = store.ids_in(ParamGroup::Weight).collect();
    let mut sgd = Sgd::new(rc.momentum, rc.weight_decay);
    let steps_per_epoch = train.len().div_ceil(rc.batch_size);
    let total = rc.epochs * steps_per_epoch;
    let mut step = 0;
    let mut history = Vec::with_capacity(rc.epochs);
    let mut best = evaluate(&net, &store, val, classes, rc.batch_size)?.miou;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..rc.epochs {
        order.shuffle(&mut rng);
        let mut ce_sum = 0.0;
        for chunk in order.chunks(rc.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if rc.augment {
                        augment(&train[i], &mut rng)
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let (img, labels) = collate(&batch)?;
            let mut tape = Tape::new();
            let vars = tape.bind_all(&store)?;
            let x = tape.leaf(&img)?;
            let mut ctx = Ctx::new(&mut tape, &store, &vars, Mode::Train);
            let y = net.forward(&mut ctx, x, None)?;
            let stats = std::mem::take(&mut ctx.stats);
            let loss = tape.cross_entropy(y, labels, None)?;
            ce_sum += tape.item(loss);
            tape.backward(loss)?.apply_to(&mut store)?;
            sgd.step(&mut store, &weights, poly_lr(rc.lr, rc.power, step, total))?;
            update_running_stats(&mut store, &stats, BN_MOMENTUM);
            store.clear_grads();
            if !store.all_finite() {
                return Err(Error::NonFinite("retrain weights"));
            }
            step += 1;
        }
        let val_miou = evaluate(&net, &store, val, classes, rc.batch_size)?.miou;
        best = best.max(val_miou);
        history.push(EpochEval {
            epoch,
            train_ce: ce_sum / steps_per_epoch as f64,
            val_miou,
        });
    }
    let final_val = evaluate(&net, &store, val, classes, rc.batch_size)?;
    Ok(RetrainOutcome {
        net,
        store,
        best_val_miou: best,
        final_val,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomSample {
    pub arch: DerivedArchitecture,
    pub val_miou: f64,
    pub latency_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomSearchReport {
    pub samples: Vec<RandomSample>,
    pub mean_miou: f64,
    pub sd_miou: f64,
    pub best: usize,
}

/// Samples `count` architectures uniformly and retrains each with the
/// retrain budget of `config`.
pub fn random_search_baseline(
    config: &SearchConfig,
    table: &LatencyTable,
    count: usize,
    seed: u64,
) -> Result<RandomSearchReport> {
    if count == 0 {
        return Err(Error::invalid("random_search_baseline", "need at least one sample"));
    }
    let data = &config.dataset;
    let train = load_split(data, Split::Train)?;
    let val = load_split(data, Split::Val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 20));
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let arch = random_architecture(config, &mut rng, seed)?;
        let out = retrain_on(
            &arch,
            &config.retrain,
            data.num_classes,
            &train,
            &val,
            sub_seed(seed, 100 + i as u64),
        )?;
        let latency_us = discrete_latency(&arch, table, data.height, data.width)?;
        samples.push(RandomSample {
            arch,
            val_miou: out.best_val_miou,
            latency_us,
        });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.val_miou).sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|s| (s.val_miou - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let best = samples
        .iter()
        .enumerate()
        .fold(0, |b, (i, s)| if s.val_miou > samples[b].val_miou { i } else { b });
    Ok(RandomSearchReport {
        samples,
        mean_miou: mean,
        sd_miou: var.sqrt(),
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn argmax_channels_per_pixel() {
        let t = Tensor4::from_vec(Shape4::new(1, 2, 1, 2), vec![0.0, 5.0, 1.0, 5.0]).unwrap();
        // Pixel 1 ties; the lower class wins.
        assert_eq!(argmax_channels(&t), vec![1, 0]);
    }

    #[test]
    fn oracle_predictor_scores_one() {
        let spec = DatasetSpec {
            height: 32,
            width: 32,
            val_count: 3,
            ..DatasetSpec::default()
        };
        let val = load_split(&spec, Split::Val).unwrap();
        let m = evaluate_with(&val, spec.num_classes, 2, |_, labels| Ok((labels.to_vec(), None))).unwrap();
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.ce, None);
        assert!(evaluate_with(&[], 6, 2, |_, l| Ok((l.to_vec(), None))).is_err());
    }
}
