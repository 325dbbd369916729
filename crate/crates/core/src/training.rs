//! Initialization and the training loop.
//!
//! Each epoch walks the training facts grouped by ascending arity. Within a
//! group the facts are shuffled and cut into batches of `batch_size`
//! positives; every positive gets one fresh negative. One Adam step per
//! batch. Every `eval_every` epochs the filtered value-prediction MRR on the
//! probe split decides which parameters to keep.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{group_by_arity, DatasetSplits, Fact, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{Metrics, RankQuery, Ranker, TieMode};
use crate::math::{BnMode, ParamTensor};
use crate::model::{Dims, Label, Model, ModelConfig, Target};
use crate::sampling::{NegSamplerConfig, NegativeSampler};

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NEGATIVES: u64 = 2;
const STREAM_PROBE: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub k_type: usize,
    pub n_filters: usize,
    pub n_gfcn: usize,
    pub n_tfcn: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub eval_every: usize,
    /// Probes without improvement before stopping.
    pub patience: usize,
    /// Upper bound on probe queries; `None` ranks every position.
    pub probe_cap: Option<usize>,
    pub probe_split: Split,
    pub seed: u64,
    pub model: ModelConfig,
    pub sampler: NegSamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 100,
            k_type: 20,
            n_filters: 200,
            n_gfcn: 1200,
            n_tfcn: 100,
            batch_size: 128,
            learning_rate: 1e-4,
            max_epochs: 5000,
            eval_every: 5,
            patience: 10,
            probe_cap: Some(2000),
            probe_split: Split::Valid,
            seed: 0,
            model: ModelConfig::default(),
            sampler: NegSamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn dims(&self, vocab: &Vocabulary) -> Dims {
        Dims {
            n_roles: vocab.n_roles(),
            n_values: vocab.n_values(),
            k: self.k,
            n_filters: self.n_filters,
            n_gfcn: self.n_gfcn,
            k_type: self.k_type,
            n_tfcn: self.n_tfcn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("k", self.k),
            ("n_f", self.n_filters),
            ("n_gFCN", self.n_gfcn),
            ("batch size", self.batch_size),
            ("max epochs", self.max_epochs),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.probe_cap == Some(0) {
            return Err(Error::Config("probe cap must be positive".into()));
        }
        self.sampler.validate()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Normal(0, σ) redrawn until it lies within two standard deviations.
pub fn truncated_normal(rng: &mut impl Rng, sigma: f64) -> f64 {
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * sigma {
            return x;
        }
    }
}

fn fill_uniform(t: &mut ParamTensor, bound: f64, rng: &mut impl Rng) {
    for v in t.value.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
}

fn fill_glorot(t: &mut ParamTensor, rng: &mut impl Rng) {
    let (fan_in, fan_out) = t.shape();
    fill_uniform(t, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng);
}

/// Embeddings uniform in `±1/√width`, filters truncated normal with σ = 0.1,
/// dense weights Glorot uniform, biases zero, batch norm at identity.
pub fn initialize(dims: Dims, config: ModelConfig, rng: &mut impl Rng) -> Result<Model> {
    let mut model = Model::zeros(dims, config)?;
    let n = &mut model.nalp;
    let b = 1.0 / (dims.k as f64).sqrt();
    fill_uniform(&mut n.role_emb, b, rng);
    fill_uniform(&mut n.value_emb, b, rng);
    if let Some(f) = &mut n.filters {
        for v in f.value.data_mut() {
            *v = truncated_normal(rng, 0.1);
        }
    }
    fill_glorot(&mut n.g_weight, rng);
    fill_glorot(&mut n.f_weight, rng);
    if let Some(t) = &mut model.types {
        let b = 1.0 / (dims.k_type as f64).sqrt();
        fill_uniform(&mut t.role_type, b, rng);
        fill_uniform(&mut t.value_type, b, rng);
        fill_glorot(&mut t.t_weight, rng);
        fill_glorot(&mut t.y_weight, rng);
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Loss per labelled example (positives and negatives).
    pub mean_loss: f64,
    pub wall_secs: f64,
    pub probe: Option<Metrics>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// `epoch  mean_loss  wall_secs`, with `mrr hits@1 hits@3 hits@10`
    /// appended on probe epochs.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let _ = write!(out, "{}\t{:.6}\t{:.3}", e.epoch, e.mean_loss, e.wall_secs);
            if let Some(p) = &e.probe {
                let _ = write!(out, "\t{:.6}\t{:.6}\t{:.6}\t{:.6}", p.mrr, p.hits1, p.hits3, p.hits10);
            }
            out.push('\n');
        }
        out
    }

    pub fn probes(&self) -> impl Iterator<Item = (usize, &Metrics)> {
        self.epochs.iter().filter_map(|e| e.probe.as_ref().map(|p| (e.epoch, p)))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best probe (or after the last epoch when nothing
    /// was probed).
    pub model: Model,
    pub best_epoch: usize,
    pub best_probe: Option<Metrics>,
    pub log: TrainLog,
}

fn probe_queries(facts: &[Fact], cap: Option<usize>, rng: &mut impl Rng) -> Vec<RankQuery> {
    let all: Vec<RankQuery> = facts
        .iter()
        .flat_map(|f| {
            (0..f.arity()).map(move |position| RankQuery {
                fact: f.clone(),
                position,
                target: Target::Value,
            })
        })
        .collect();
    match cap {
        Some(cap) if cap < all.len() => {
            let mut idx = sample(rng, all.len(), cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i].clone()).collect()
        }
        _ => all,
    }
}

fn probe(model: &Model, splits: &DatasetSplits, queries: &[RankQuery]) -> Result<Metrics> {
    use rayon::prelude::*;
    let ranker = Ranker::new(model, splits, TieMode::Optimistic);
    let ranks = queries
        .par_iter()
        .map(|q| ranker.rank(q))
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::from_ranks(ranks))
}

pub fn train(splits: &DatasetSplits, vocab: &Vocabulary, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(splits, vocab, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    splits: &DatasetSplits,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    for f in splits.all_facts() {
        vocab.check_fact(f)?;
    }
    let dims = cfg.dims(vocab);
    let mut model = initialize(dims, cfg.model, &mut stream(cfg.seed, STREAM_INIT))?;
    let sampler = NegativeSampler::new(cfg.sampler, vocab, splits)?;
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut neg_rng = stream(cfg.seed, STREAM_NEGATIVES);
    let queries = probe_queries(
        splits.split(cfg.probe_split),
        cfg.probe_cap,
        &mut stream(cfg.seed, STREAM_PROBE),
    );
    let groups = group_by_arity(&splits.train);

    let mut log = TrainLog::default();
    let mut best: Option<(Model, usize, Metrics)> = None;
    let mut stale = 0;
    let started = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        let mut examples = 0usize;
        for (_, group) in &groups {
            let mut order: Vec<usize> = (0..group.len()).collect();
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.batch_size) {
                let mut batch = Vec::with_capacity(2 * chunk.len());
                for &i in chunk {
                    batch.push((group[i].clone(), Label::Positive));
                }
                for &i in chunk {
                    batch.push((sampler.sample(&group[i], &mut neg_rng)?.fact, Label::Negative));
                }
                debug_assert!(model.grads_are_zero());
                let out = model.loss_and_grads(&batch, BnMode::Train)?;
                if !out.loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss {} in epoch {epoch} on a batch of {} examples (arity {}), learning rate {:e}",
                        out.loss,
                        batch.len(),
                        batch[0].0.arity(),
                        cfg.learning_rate
                    )));
                }
                if let Some(stats) = &out.bn_stats {
                    model.nalp.bn.update_running(stats);
                }
                model.adam_step(cfg.learning_rate)?;
                total += out.loss;
                examples += batch.len();
            }
        }

        let probed = !queries.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs);
        let probe_metrics = if probed {
            Some(probe(&model, splits, &queries)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            mean_loss: total / examples as f64,
            wall_secs: started.elapsed().as_secs_f64(),
            probe: probe_metrics,
        };
        log::info!(
            "epoch {epoch}: loss {:.6}{}",
            entry.mean_loss,
            probe_metrics.map_or(String::new(), |m| format!(", probe MRR {:.4}", m.mrr))
        );
        on_epoch(&entry);
        log.epochs.push(entry);

        if let Some(m) = probe_metrics {
            if best.as_ref().is_none_or(|(_, _, b)| m.mrr > b.mrr) {
                best = Some((model.clone(), epoch, m));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    log::info!("no improvement in {stale} probes, stopping");
                    break;
                }
            }
        }
    }

    Ok(match best {
        Some((model, best_epoch, m)) => TrainOutcome {
            model,
            best_epoch,
            best_probe: Some(m),
            log,
        },
        None => TrainOutcome {
            best_epoch: log.epochs.len(),
            model,
            best_probe: None,
            log,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Pair;
    use crate::model::Mode;

    fn toy(seed: u64, n: usize) -> (Vocabulary, DatasetSplits) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vocab = Vocabulary::synthetic(6, 30);
        let mut seen = std::collections::HashSet::new();
        let mut facts = Vec::new();
        while facts.len() < n {
            let m = rng.random_range(2..=4);
            let f = Fact::new(
                (0..m)
                    .map(|_| Pair::new(rng.random_range(0..6), rng.random_range(0..30)))
                    .collect(),
            )
            .unwrap();
            if seen.insert(f.canonical()) {
                facts.push(f);
            }
        }
        vocab.rebuild_domains(&facts);
        (vocab, DatasetSplits::new(facts, vec![], vec![]))
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            k: 16,
            k_type: 4,
            n_filters: 16,
            n_gfcn: 32,
            n_tfcn: 8,
            batch_size: 16,
            learning_rate: 1e-3,
            max_epochs: 12,
            eval_every: 4,
            patience: 3,
            probe_cap: None,
            probe_split: Split::Train,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn initialization_ranges() {
        let dims = Dims {
            n_roles: 10,
            n_values: 40,
            k: 25,
            n_filters: 8,
            n_gfcn: 6,
            k_type: 4,
            n_tfcn: 3,
        };
        let model = initialize(dims, ModelConfig::typed(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = 0.2;
        assert!(model.nalp.role_emb.value.data().iter().all(|v| v.abs() < b));
        assert!(model.nalp.value_emb.value.data().iter().all(|v| v.abs() < b));
        assert!(model.nalp.g_bias.value.data().iter().all(|&v| v == 0.0));
        assert_eq!(model.nalp.f_bias.value.data(), &[0.0]);
        assert!(model.nalp.bn.gamma.value.data().iter().all(|&v| v == 1.0));
        let glorot = (6.0f64 / (16 + 6) as f64).sqrt();
        assert!(model.nalp.g_weight.value.data().iter().all(|v| v.abs() <= glorot));
        let filters = model.nalp.filters.as_ref().unwrap().value.data();
        assert!(filters.iter().all(|v| v.abs() <= 0.2));
        let t = model.types.as_ref().unwrap();
        assert!(t.role_type.value.data().iter().all(|v| v.abs() < 0.5));
        assert_eq!(t.y_bias.value.data(), &[0.0]);
    }

    #[test]
    fn truncated_normal_spread() {
        // std of N(0, σ) truncated at ±2σ is σ·sqrt(1 − 4φ(2)/(2Φ(2) − 1))
        let phi2 = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mass = 0.954_499_736_103_642; // 2Φ(2) − 1
        let expected = 0.1 * (1.0 - 4.0 * phi2 / mass).sqrt();
        assert!((expected / 0.1 - 0.88).abs() < 0.005);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f64> = (0..100_000).map(|_| truncated_normal(&mut rng, 0.1)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!((std / expected - 1.0).abs() < 0.02, "{std} vs {expected}");
        assert!(xs.iter().all(|x| x.abs() <= 0.2));
    }

    #[test]
    fn loss_decreases_early() {
        let (vocab, splits) = toy(3, 50);
        let cfg = TrainConfig {
            batch_size: 8,
            learning_rate: 3e-3,
            max_epochs: 10,
            probe_split: Split::Valid,
            seed: 7,
            ..small_cfg()
        };
        let out = train(&splits, &vocab, &cfg).unwrap();
        let losses: Vec<f64> = out.log.epochs.iter().map(|e| e.mean_loss).collect();
        assert_eq!(losses.len(), 10);
        // fresh negatives every epoch make single epochs noisy
        let smooth: Vec<f64> = losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
        assert!(smooth.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        assert!(out.best_probe.is_none());
        assert_eq!(out.best_epoch, 10);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (vocab, splits) = toy(4, 30);
        let cfg = TrainConfig {
            model: ModelConfig::typed(),
            max_epochs: 4,
            ..small_cfg()
        };
        let a = train(&splits, &vocab, &cfg).unwrap();
        let b = train(&splits, &vocab, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.model.config.mode, Mode::TNalp);
        let c = train(&splits, &vocab, &TrainConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn best_probe_dominates_log() {
        let (vocab, splits) = toy(5, 30);
        let out = train(&splits, &vocab, &small_cfg()).unwrap();
        let best = out.best_probe.unwrap().mrr;
        assert!(out.log.probes().all(|(_, m)| m.mrr <= best));
        let (epoch, m) = out.log.probes().find(|(_, m)| m.mrr == best).unwrap();
        assert_eq!(epoch, out.best_epoch);
        assert_eq!(m.mrr, best);
        let tsv = out.log.to_tsv();
        assert_eq!(tsv.lines().count(), out.log.epochs.len());
        assert_eq!(tsv.lines().nth(3).unwrap().split('\t').count(), 7);
    }

    #[test]
    fn invalid_configs_rejected() {
        let (vocab, splits) = toy(6, 10);
        for cfg in [
            TrainConfig {
                learning_rate: 0.0,
                ..small_cfg()
            },
            TrainConfig {
                batch_size: 0,
                ..small_cfg()
            },
            TrainConfig {
                probe_cap: Some(0),
                ..small_cfg()
            },
        ] {
            assert!(matches!(train(&splits, &vocab, &cfg), Err(Error::Config(_))));
        }
        let empty = DatasetSplits::new(vec![], vec![], vec![]);
        assert!(matches!(train(&empty, &vocab, &small_cfg()), Err(Error::Data(_))));
    }

    #[test]
    fn diverging_learning_rate_aborts() {
        let (vocab, splits) = toy(7, 20);
        let cfg = TrainConfig {
            learning_rate: f64::MAX,
            max_epochs: 50,
            ..small_cfg()
        };
        match train(&splits, &vocab, &cfg) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("learning rate")),
            other => panic!("expected numerical abort, got {other:?}"),
        }
    }

    #[test]
    fn probe_cap_limits_queries() {
        let (_, splits) = toy(8, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(probe_queries(&splits.train, Some(7), &mut rng).len(), 7);
        let total: usize = splits.train.iter().map(Fact::arity).sum();
        assert_eq!(probe_queries(&splits.train, None, &mut rng).len(), total);
    }
}
