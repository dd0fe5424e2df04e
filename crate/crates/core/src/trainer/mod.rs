//! Optimization loop: Adam, EMA shadow weights, paired-domain batching,
//! evaluation and metrics.
//!
//! Each step is computed in fixed-size chunks of the mixed batch. Every chunk
//! runs forward/backward on its own tape (in parallel with the `parallel`
//! feature) and normalizes its losses by the whole batch's counts; chunk
//! gradients are then summed in chunk order. The result is identical with and
//! without the `parallel` feature.

mod metrics;
mod optim;

pub use metrics::{EpochRecord, EvalRecord, MetricLog, MetricRecord, StepRecord, TrainObserver};
pub use optim::{ema_update as ema_update_params, AdamConfig, AdamState};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::featio::{Dataset, Domain};
use crate::losses::LossWeights;
use crate::network::{ArchConfig, Network, NetworkConfig};
use crate::rng::{derive_seed, permutation, seeded, StdRng};
use crate::vat::{self, Batch, LossBreakdown, LossCounts, VatConfig};

/// Samples per evaluation chunk.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples drawn from each domain per step.
    pub batch_size: usize,
    /// Samples per gradient chunk; fixes the summation order of a step.
    pub chunk_size: usize,
    pub seed: u64,
    pub ema_decay: f64,
    /// Multiplicative learning-rate factor applied per epoch; 1 is constant.
    pub lr_decay: f64,
    /// Evaluate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    /// Checkpoint every this many epochs (0: never during training).
    pub checkpoint_every: usize,
    /// Adds wall-clock seconds to step and epoch records; breaks byte
    /// identity of logs between runs.
    pub log_wall_time: bool,
    pub use_vat: bool,
    pub use_ema_eval: bool,
    pub use_zscore: bool,
    pub use_ce: bool,
    pub source_only: bool,
    pub adam: AdamConfig,
    pub network: ArchConfig,
    pub loss: LossWeights,
    pub vat: VatConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            chunk_size: 16,
            seed: 0,
            ema_decay: 0.999,
            lr_decay: 1.0,
            eval_every: 0,
            checkpoint_every: 0,
            log_wall_time: false,
            use_vat: true,
            use_ema_eval: true,
            use_zscore: true,
            use_ce: false,
            source_only: false,
            adam: AdamConfig::default(),
            network: ArchConfig::default(),
            loss: LossWeights::default(),
            vat: VatConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::config("batch_size and chunk_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!("EMA decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        self.adam.validate()?;
        self.loss.validate()?;
        self.vat.validate()
    }

    /// Loss weights and VAT settings after applying the mode flags.
    pub fn effective_weights(&self) -> (LossWeights, VatConfig) {
        let mut vat = self.vat.clone();
        if self.source_only {
            vat.lambda_vat = 0.0;
            return (
                LossWeights {
                    beta: self.loss.beta,
                    ..LossWeights::source_only()
                },
                vat,
            );
        }
        let mut w = self.loss.clone();
        if !self.use_ce {
            w.lambda_ce = 0.0;
        }
        if !self.use_vat {
            vat.lambda_vat = 0.0;
        }
        (w, vat)
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: Network,
    /// Shadow weights; written only by [`ema_update`].
    pub ema: Network,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: usize,
    /// Drives batch shuffling.
    pub rng: StdRng,
    /// Whether inputs are z-score normalized before the network.
    pub zscore: bool,
}

impl TrainState {
    pub fn new(net_config: &NetworkConfig, cfg: &TrainConfig) -> Result<Self> {
        let student = Network::init(net_config, derive_seed(cfg.seed, &[0]))?;
        Ok(TrainState {
            ema: student.clone(),
            adam: AdamState::new(student.params()),
            student,
            step: 0,
            epoch: 0,
            rng: seeded(derive_seed(cfg.seed, &[1])),
            zscore: cfg.use_zscore,
        })
    }

    pub fn network(&self, use_ema: bool) -> &Network {
        if use_ema {
            &self.ema
        } else {
            &self.student
        }
    }
}

/// One Adam update of the student.
pub fn adam_step(state: &mut TrainState, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
    let names = state.student.names().to_vec();
    state.adam.step(state.student.params_mut(), &names, grads, cfg)
}

/// `shadow ← decay·shadow + (1 − decay)·student`.
pub fn ema_update(state: &mut TrainState, decay: f64) {
    let student = state.student.params().to_vec();
    optim::ema_update(state.ema.params_mut(), &student, decay);
}

/// Result of a training run. When `abort` is set, `state` is the last state
/// whose loss and gradients were finite.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub abort: Option<Error>,
}

/// Trains without evaluation sets and collects all records in memory.
pub fn train(source: &Dataset, target: &Dataset, cfg: &TrainConfig) -> Result<(TrainState, MetricLog)> {
    let mut log = MetricLog::default();
    let out = train_with(source, target, cfg, &[], &mut log)?;
    match out.abort {
        Some(e) => Err(e),
        None => Ok((out.state, log)),
    }
}

fn check_compatible(a: &Dataset, b: &Dataset, what: &str) -> Result<()> {
    if (a.frames, a.dim, a.num_classes) != (b.frames, b.dim, b.num_classes) {
        return Err(Error::config(format!(
            "{what}: (T, D, K) = {:?} vs {:?}",
            (a.frames, a.dim, a.num_classes),
            (b.frames, b.dim, b.num_classes)
        )));
    }
    Ok(())
}

/// Builds the sample order of one epoch for a domain: reshuffled passes over
/// `n` samples concatenated until `len` entries.
fn epoch_order(rng: &mut StdRng, n: usize, len: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(len + n);
    while order.len() < len {
        order.extend(permutation(rng, n));
    }
    order.truncate(len);
    order
}

struct ChunkResult {
    grads: Vec<Tensor>,
    breakdown: LossBreakdown,
    source_correct: usize,
    fallbacks: usize,
}

#[derive(Clone, Copy)]
struct Entry {
    domain: Domain,
    index: usize,
    seed: u64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

struct StepContext<'a> {
    net: &'a Network,
    source: &'a Dataset,
    target: &'a Dataset,
    weights: &'a LossWeights,
    vat: &'a VatConfig,
    counts: LossCounts,
    beta: f64,
}

impl StepContext<'_> {
    fn batch(&self, entries: &[Entry]) -> Batch {
        let width = self.source.frames * self.source.dim;
        let mut x = Vec::with_capacity(entries.len() * width);
        let mut labels = Vec::with_capacity(entries.len());
        for e in entries {
            let s = match e.domain {
                Domain::Source => &self.source.samples[e.index],
                Domain::Target => &self.target.samples[e.index],
            };
            x.extend_from_slice(&s.values);
            // target labels are never used for training
            labels.push(if e.domain == Domain::Source { s.label } else { None });
        }
        Batch {
            x: Tensor::new(vec![entries.len(), width], x).expect("batch rows have sample width"),
            labels,
            domains: entries.iter().map(|e| e.domain).collect(),
            vat_seeds: entries.iter().map(|e| e.seed).collect(),
        }
    }

    fn chunk(&self, entries: &[Entry]) -> Result<ChunkResult> {
        let batch = self.batch(entries);
        let tape = Tape::new();
        let params = self.net.bind(&tape, true);
        let x = tape.constant(batch.x.clone());
        let out = self.net.forward(&params, x, self.beta)?;
        let loss = vat::total_loss_with_counts(&out, &batch, self.net, &params, x, self.weights, self.vat, self.counts)?;
        let grads = tape.backward(loss.total)?;
        let probs = out.class_probs.value();
        let source_correct = batch
            .labels
            .iter()
            .zip(probs.rows())
            .filter(|(l, row)| l.is_some_and(|l| argmax(row) == l))
            .count();
        Ok(ChunkResult {
            grads: self.net.collect_grads(&params, &grads),
            breakdown: loss.breakdown,
            source_correct,
            fallbacks: loss.vat_fallbacks,
        })
    }
}

/// Full training loop. Records go to `observer` as they are produced; each
/// entry of `evals` is evaluated at the evaluation cadence.
pub fn train_with(
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
    evals: &[(&str, &Dataset)],
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(source, target, "source and target datasets differ")?;
    for (name, ds) in evals {
        check_compatible(source, ds, &format!("evaluation set {name} differs from training data"))?;
    }
    if source.is_empty() {
        return Err(Error::config("source training set is empty"));
    }
    if !source.is_labeled() {
        return Err(Error::config("source training set must be fully labeled"));
    }
    if !cfg.source_only && target.is_empty() {
        return Err(Error::config("target training set is empty"));
    }
    let net_config = NetworkConfig::new(source.dim, source.frames, source.num_classes, cfg.network.clone())?;
    let mut state = TrainState::new(&net_config, cfg)?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { state, abort: None });
    }
    let (source, target) = if cfg.use_zscore {
        (source.normalized(), target.normalized())
    } else {
        (source.clone(), target.clone())
    };
    let (weights, vat_cfg) = cfg.effective_weights();
    let use_target = !cfg.source_only;
    let epoch_len = if use_target {
        source.len().max(target.len())
    } else {
        source.len()
    };
    let steps_per_epoch = epoch_len.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let started = std::time::Instant::now();
    let wall = || cfg.log_wall_time.then(|| started.elapsed().as_secs_f64());

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let src_order = epoch_order(&mut state.rng, source.len(), epoch_len);
        let tgt_order = if use_target {
            epoch_order(&mut state.rng, target.len(), epoch_len)
        } else {
            Vec::new()
        };
        let mut adam = cfg.adam.clone();
        adam.lr *= cfg.lr_decay.powi(epoch as i32);
        let (mut epoch_total, mut epoch_correct, mut epoch_seen) = (0.0, 0usize, 0usize);

        for j in 0..steps_per_epoch {
            let range = j * cfg.batch_size..((j + 1) * cfg.batch_size).min(epoch_len);
            let step = state.step;
            let mut entries: Vec<Entry> = src_order[range.clone()]
                .iter()
                .map(|&index| Entry {
                    domain: Domain::Source,
                    index,
                    seed: 0,
                })
                .collect();
            if use_target {
                entries.extend(tgt_order[range].iter().map(|&index| Entry {
                    domain: Domain::Target,
                    index,
                    seed: 0,
                }));
            }
            for (i, e) in entries.iter_mut().enumerate() {
                e.seed = derive_seed(cfg.seed, &[2, step, i as u64]);
            }
            let n_source = entries.iter().filter(|e| e.domain == Domain::Source).count();
            let ctx = StepContext {
                net: &state.student,
                source: &source,
                target: &target,
                weights: &weights,
                vat: &vat_cfg,
                counts: LossCounts {
                    all: entries.len(),
                    source: n_source,
                    target: entries.len() - n_source,
                },
                beta: weights.beta * cfg.network.grl_schedule.factor(step as f64 / total_steps),
            };
            let chunks: Vec<&[Entry]> = entries.chunks(cfg.chunk_size).collect();
            let results = crate::par::map(&chunks, |c| ctx.chunk(c));
            let mut grads: Option<Vec<Tensor>> = None;
            let mut breakdown = LossBreakdown::default();
            let (mut correct, mut fallbacks) = (0, 0);
            for r in results {
                let r = r?;
                breakdown.accumulate(&r.breakdown);
                correct += r.source_correct;
                fallbacks += r.fallbacks;
                match grads.as_mut() {
                    None => grads = Some(r.grads),
                    Some(acc) => acc.iter_mut().zip(&r.grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let beta = ctx.beta;
            if !breakdown.total.is_finite() {
                return Ok(TrainOutcome {
                    state,
                    abort: Some(Error::NonFinite(format!("loss at step {step} (epoch {epoch})"))),
                });
            }
            let grads = grads.expect("batch has at least one chunk");
            if let Err(e) = adam_step(&mut state, &grads, &adam) {
                return match e {
                    Error::NonFinite(msg) => Ok(TrainOutcome {
                        state,
                        abort: Some(Error::NonFinite(format!("{msg} at step {step}"))),
                    }),
                    other => Err(other),
                };
            }
            ema_update(&mut state, cfg.ema_decay);
            state.step += 1;

            epoch_total += breakdown.total;
            epoch_correct += correct;
            epoch_seen += n_source;
            observer.record(&MetricRecord::Step(StepRecord {
                step,
                epoch,
                total: breakdown.total,
                classification: breakdown.classification,
                domain: breakdown.domain,
                attentive: breakdown.attentive,
                vat: breakdown.vat,
                conditional_entropy: breakdown.conditional_entropy,
                lds: breakdown.lds,
                source_batch_accuracy: correct as f64 / n_source as f64,
                beta,
                vat_fallbacks: fallbacks,
                wall_time_s: wall(),
            }))?;
        }

        observer.record(&MetricRecord::Epoch(EpochRecord {
            epoch,
            steps: steps_per_epoch,
            mean_total: epoch_total / steps_per_epoch as f64,
            source_train_accuracy: epoch_correct as f64 / epoch_seen as f64,
            wall_time_s: wall(),
        }))?;
        let last = epoch + 1 == cfg.epochs;
        if last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            for (name, ds) in evals {
                let ev = evaluate(&state, ds, cfg.use_ema_eval)?;
                observer.record(&MetricRecord::Eval(EvalRecord {
                    epoch,
                    split: name.to_string(),
                    weights: if cfg.use_ema_eval { "ema" } else { "student" }.into(),
                    accuracy: ev.accuracy,
                    per_class: ev.per_class,
                }))?;
            }
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            observer.checkpoint(&state, epoch)?;
        }
    }
    state.epoch = cfg.epochs;
    Ok(TrainOutcome { state, abort: None })
}

/// Top-1 accuracy with a per-class breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Accuracy per class; 0 for classes without samples.
    pub per_class: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub predictions: Vec<usize>,
}

/// Class distributions for every sample of `ds`, batched in fixed chunks.
pub fn predict_dataset(net: &Network, ds: &Dataset, zscore: bool) -> Result<Vec<Tensor>> {
    let ds = if zscore { ds.normalized() } else { ds.clone() };
    let starts: Vec<usize> = (0..ds.len()).step_by(EVAL_CHUNK).collect();
    crate::par::map(&starts, |&s| {
        let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(ds.len())).collect();
        net.predict(&ds.batch_tensor(&idx))
    })
    .into_iter()
    .collect()
}

pub fn evaluate_network(net: &Network, ds: &Dataset, zscore: bool) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    if let Some(i) = ds.samples.iter().position(|s| s.label.is_none()) {
        return Err(Error::contract(format!("evaluation set has an unlabeled sample at index {i}")));
    }
    let cfg = net.config();
    if (ds.frames, ds.dim) != (cfg.frames, cfg.input_dim) || ds.num_classes != cfg.num_classes {
        return Err(Error::config(format!(
            "dataset (T, D, K) = {:?} does not match network {:?}",
            (ds.frames, ds.dim, ds.num_classes),
            (cfg.frames, cfg.input_dim, cfg.num_classes)
        )));
    }
    let probs = predict_dataset(net, ds, zscore)?;
    let predictions: Vec<usize> = probs.iter().flat_map(|p| p.rows().map(argmax).collect::<Vec<_>>()).collect();
    let k = ds.num_classes;
    let (mut correct, mut counts) = (vec![0usize; k], vec![0usize; k]);
    for (s, &p) in ds.samples.iter().zip(&predictions) {
        let l = s.label.expect("checked above");
        counts[l] += 1;
        correct[l] += (p == l) as usize;
    }
    Ok(Evaluation {
        accuracy: correct.iter().sum::<usize>() as f64 / ds.len() as f64,
        per_class: correct
            .iter()
            .zip(&counts)
            .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect(),
        class_counts: counts,
        predictions,
    })
}

/// Evaluates the shadow weights when `use_ema`, else the student.
pub fn evaluate(state: &TrainState, ds: &Dataset, use_ema: bool) -> Result<Evaluation> {
    evaluate_network(state.network(use_ema), ds, state.zscore)
}

/// Mean LDS of `net` over `ds` (labels unused). Sample `i` draws its random
/// start from `derive_seed(seed, [3, i])`.
pub fn mean_lds(net: &Network, ds: &Dataset, cfg: &VatConfig, seed: u64, zscore: bool) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract("cannot compute LDS of an empty dataset"));
    }
    let ds = if zscore { ds.normalized() } else { ds.clone() };
    let starts: Vec<usize> = (0..ds.len()).step_by(EVAL_CHUNK).collect();
    let sums = crate::par::map(&starts, |&s| -> Result<f64> {
        let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(ds.len())).collect();
        let x = ds.batch_tensor(&idx);
        let seeds: Vec<u64> = idx.iter().map(|&i| derive_seed(seed, &[3, i as u64])).collect();
        let tape = Tape::new();
        let params = net.bind(&tape, false);
        Ok(vat::lds(net, &params, &x, cfg, &seeds)?.value.item() * idx.len() as f64)
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / ds.len() as f64)
}
