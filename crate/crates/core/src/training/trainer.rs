use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, Phase, RngState};
use super::loss::{assemble_loss, LossBreakdown, LossWeights};
use super::optim::Adam;
use super::projection::{project_prototypes, ProjectionReport};
use super::schedule::{temperature, Schedule};
use super::TrainError;
use crate::dataio::{stream_rng, FeatureMapDataset, RngStream};
use crate::poolcore::{argmax, FeatureMap, ForwardMode, ModelConfig, ModelError, ProtoPoolModel, Trainable};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub seed: u64,
    /// Cap on the total number of epochs over all phases. `Some(0)` returns
    /// the initialized model untouched.
    pub epoch_budget: Option<u32>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            schedule: Schedule::default(),
            weights: LossWeights::default(),
            seed: 0,
            epoch_budget: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.weights.validate()
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub phase: Phase,
    pub tau: f64,
    pub loss: LossBreakdown,
    pub train_acc: f64,
    pub val_acc: f64,
    pub max_q_median: f64,
}

pub const METRICS_HEADER: &str = "epoch,phase,tau,loss,ce,clst,sep,orth,l1,train_acc,val_acc,max_q_median";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch, r.phase, r.tau, l.total, l.ce, l.clst, l.sep, l.orth, l.l1, r.train_acc, r.val_acc, r.max_q_median
        );
    }
    out
}

pub fn write_metrics(rows: &[EpochMetrics], path: &Path) -> std::io::Result<()> {
    std::fs::write(path, metrics_csv(rows))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub mean_ce: f64,
    pub correct: usize,
    pub total: usize,
}

fn log_softmax_at(row: &[f64], label: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[label] - lse
}

/// Eval-mode class logits for every sample, `[N × C]` row-major.
pub fn predict_logits(model: &ProtoPoolModel, ds: &FeatureMapDataset, batch_size: usize) -> Result<Vec<f64>, ModelError> {
    let maps: Vec<&FeatureMap> = ds.samples().iter().map(|s| &s.map).collect();
    let mut out = Vec::with_capacity(ds.len() * model.classes());
    for chunk in maps.chunks(batch_size.max(1)) {
        out.extend(model.forward_batch(chunk, ForwardMode::Eval)?);
    }
    Ok(out)
}

/// Top-1 accuracy under hardened, noiseless inference.
pub fn evaluate(model: &ProtoPoolModel, ds: &FeatureMapDataset, batch_size: usize) -> Result<EvalReport, ModelError> {
    let c = model.classes();
    if ds.num_classes() > c {
        return Err(ModelError::Dim(format!("dataset has {} classes, model {c}", ds.num_classes())));
    }
    let logits = predict_logits(model, ds, batch_size)?;
    let mut hits = vec![0usize; c];
    let mut counts = vec![0usize; c];
    let mut ce = 0.0;
    for (row, s) in logits.chunks(c).zip(ds.samples()) {
        counts[s.label] += 1;
        if argmax(row) == s.label {
            hits[s.label] += 1;
        }
        ce -= log_softmax_at(row, s.label);
    }
    let correct = hits.iter().sum();
    let total = ds.len();
    Ok(EvalReport {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
            .collect(),
        mean_ce: if total == 0 { 0.0 } else { ce / total as f64 },
        correct,
        total,
    })
}

/// Median over slots of the largest noise-free relaxed entry.
pub fn max_q_median(model: &ProtoPoolModel) -> f64 {
    let m = model.config.prototypes;
    let mut maxes: Vec<f64> = model
        .slots
        .relaxed(model.config.relaxation)
        .chunks(m)
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    maxes.sort_by(f64::total_cmp);
    let n = maxes.len();
    if n % 2 == 1 {
        maxes[n / 2]
    } else {
        0.5 * (maxes[n / 2 - 1] + maxes[n / 2])
    }
}

/// Fraction of slots whose largest noise-free relaxed entry exceeds `threshold`.
pub fn binarized_fraction(model: &ProtoPoolModel, threshold: f64) -> f64 {
    let m = model.config.prototypes;
    let relaxed = model.slots.relaxed(model.config.relaxation);
    let rows = relaxed.len() / m;
    let hits = relaxed.chunks(m).filter(|r| r.iter().any(|&v| v > threshold)).count();
    hits as f64 / rows as f64
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    pub projection: Option<ProjectionReport>,
    /// Validation results right before and after projection.
    pub pre_projection: Option<EvalReport>,
    pub post_projection: Option<EvalReport>,
    /// Fraction of slots binarized (max entry > 0.95) at the end of the joint phase.
    pub binarized_after_joint: Option<f64>,
    pub val: EvalReport,
    pub stopped_early: bool,
}

struct Optimizers {
    addon: Option<Adam>,
    pool: Adam,
    slots: Adam,
    head: Adam,
}

impl Optimizers {
    fn new(model: &ProtoPoolModel, s: &Schedule, weight_decay: f64) -> Self {
        let adam = |n| Adam::new(n, s.beta1, s.beta2, weight_decay);
        Self {
            addon: model.addon.as_ref().map(|a| adam(a.weights().len())),
            pool: adam(model.pool.data().len()),
            slots: adam(model.slots.logits().len()),
            head: adam(model.head.weights().len()),
        }
    }
}

#[derive(Clone, Copy)]
struct Rates {
    addon: f64,
    pool: f64,
    head: f64,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    train: &'a FeatureMapDataset,
    model: ProtoPoolModel,
    rng: ChaCha8Rng,
    epoch: u32,
    phase: Phase,
    metrics: Vec<EpochMetrics>,
}

impl Trainer<'_> {
    fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone());
        ck.phase = self.phase;
        ck.epoch = self.epoch;
        ck.rng = Some(RngState::capture(&self.rng));
        let s = &self.cfg.schedule;
        let w = &self.cfg.weights;
        for (k, v) in [
            ("train.seed", self.cfg.seed.to_string()),
            ("schedule.alpha", s.alpha.to_string()),
            ("schedule.tau_floor", s.tau_floor.to_string()),
            ("schedule.tau_switch_epoch", s.tau_switch_epoch.to_string()),
            ("schedule.tau_schedule", s.tau_schedule.to_string()),
            ("schedule.batch_size", s.batch_size.to_string()),
            ("loss.entropy", w.entropy.to_string()),
            ("loss.clst", w.clst.to_string()),
            ("loss.sep", w.sep.to_string()),
            ("loss.orth", w.orth.to_string()),
            ("loss.l1", w.l1.to_string()),
        ] {
            ck.meta.insert(k.to_string(), v);
        }
        ck
    }

    fn diverged(&self, last_good: &Checkpoint, what: String) -> TrainError {
        TrainError::Diverged {
            phase: self.phase,
            epoch: self.epoch,
            what,
            last_good: Box::new(last_good.clone()),
        }
    }

    /// One pass over the training set. `hardened` trains on one-hot slots
    /// without noise (the fine-tuning setup).
    fn run_epoch(
        &mut self,
        trainable: Trainable,
        opt: &mut Optimizers,
        rates: Rates,
        hardened: bool,
        last_good: &Checkpoint,
    ) -> Result<(LossBreakdown, f64), TrainError> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let n = order.len();
        let mut sum = LossBreakdown::default();
        let mut correct = 0usize;
        let c = self.model.classes();
        for chunk in order.chunks(self.cfg.schedule.batch_size) {
            let batch: Vec<&FeatureMap> = chunk.iter().map(|&i| &self.train.sample(i).map).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| self.train.sample(i).label).collect();
            let noise = if hardened { None } else { self.model.sample_noise(&mut self.rng) };
            let mode = if hardened {
                ForwardMode::Eval
            } else {
                ForwardMode::Train { noise: noise.as_deref() }
            };
            let mut bg = self.model.build_graph(&batch, mode, trainable)?;
            let lv = assemble_loss(&mut bg.graph, &self.model.config, &bg.params, &bg.out, &labels, &self.cfg.weights)?;
            let br = lv.breakdown(&bg.graph);
            if let Some(name) = br.non_finite() {
                return Err(self.diverged(last_good, format!("non-finite {name} loss")));
            }
            sum.accumulate(&br, chunk.len() as f64 / n as f64);
            for (row, &y) in bg.graph.data(bg.out.logits).chunks(c).zip(&labels) {
                correct += usize::from(argmax(row) == y);
            }
            if let Err(e) = bg.graph.backward(lv.total) {
                return Err(self.diverged(last_good, e.to_string()));
            }

            let g = &bg.graph;
            let p = &bg.params;
            if let (Some(var), Some(adam), Some(addon)) = (p.addon, opt.addon.as_mut(), self.model.addon.as_mut()) {
                if trainable.addon {
                    let grad = g.grad(var).expect("trainable add-on has a gradient");
                    adam.step(addon.weights_mut(), grad, rates.addon);
                }
            }
            if trainable.prototypes {
                let grad = g.grad(p.prototypes).expect("trainable pool has a gradient");
                opt.pool.step(self.model.pool.data_mut(), grad, rates.pool);
            }
            if trainable.slots {
                let grad = g.grad(p.slot_logits).expect("trainable slots have a gradient");
                opt.slots.step(self.model.slots.logits_mut(), grad, rates.pool);
            }
            if trainable.head {
                let grad = g.grad(p.head).expect("trainable head has a gradient");
                opt.head.step(self.model.head.weights_mut(), grad, rates.head);
            }
            if !self.params_finite() {
                return Err(self.diverged(last_good, "non-finite parameters after update".into()));
            }
        }
        Ok((sum, correct as f64 / n as f64))
    }

    fn params_finite(&self) -> bool {
        let m = &self.model;
        m.pool.data().iter().all(|v| v.is_finite())
            && m.slots.logits().iter().all(|v| v.is_finite())
            && m.head.weights().iter().all(|v| v.is_finite())
            && m.addon.as_ref().is_none_or(|a| a.weights().iter().all(|v| v.is_finite()))
    }

    fn record(&mut self, loss: LossBreakdown, train_acc: f64, val: &EvalReport) {
        self.metrics.push(EpochMetrics {
            epoch: self.epoch,
            phase: self.phase,
            tau: self.model.slots.tau,
            loss,
            train_acc,
            val_acc: val.accuracy,
            max_q_median: max_q_median(&self.model),
        });
    }

    /// Loss of the current model on the training set without updating it.
    fn measure(&mut self, hardened: bool) -> Result<(LossBreakdown, f64), TrainError> {
        let n = self.train.len();
        let mut sum = LossBreakdown::default();
        let mut correct = 0usize;
        let c = self.model.classes();
        let order: Vec<usize> = (0..n).collect();
        for chunk in order.chunks(self.cfg.schedule.batch_size) {
            let batch: Vec<&FeatureMap> = chunk.iter().map(|&i| &self.train.sample(i).map).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| self.train.sample(i).label).collect();
            let mode = if hardened { ForwardMode::Eval } else { ForwardMode::Train { noise: None } };
            let mut bg = self.model.build_graph(&batch, mode, Trainable::NONE)?;
            let lv = assemble_loss(&mut bg.graph, &self.model.config, &bg.params, &bg.out, &labels, &self.cfg.weights)?;
            sum.accumulate(&lv.breakdown(&bg.graph), chunk.len() as f64 / n as f64);
            for (row, &y) in bg.graph.data(bg.out.logits).chunks(c).zip(&labels) {
                correct += usize::from(argmax(row) == y);
            }
        }
        Ok((sum, correct as f64 / n as f64))
    }
}

/// Warm-up, joint training with early stopping, projection, then last-layer
/// fine-tuning on hardened slots.
pub fn train(train: &FeatureMapDataset, val: &FeatureMapDataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    check_inputs(train, val, config)?;
    let mut rng = stream_rng(config.seed, RngStream::Training);
    let model = ProtoPoolModel::init(config.model.clone(), &mut rng)?;
    run_phases(model, rng, train, val, config)
}

fn check_inputs(train: &FeatureMapDataset, val: &FeatureMapDataset, config: &TrainConfig) -> Result<(), TrainError> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("training and validation sets must be non-empty".into()));
    }
    for (name, ds) in [("training", train), ("validation", val)] {
        let (_, _, d) = ds.dims();
        if d != config.model.input_depth {
            return Err(TrainError::Config(format!(
                "{name} feature depth {d} vs configured input depth {}",
                config.model.input_depth
            )));
        }
        if ds.num_classes() > config.model.classes {
            return Err(TrainError::Config(format!(
                "{name} set has {} classes but the model {}",
                ds.num_classes(),
                config.model.classes
            )));
        }
    }
    Ok(())
}

/// Same phases as [`train`], starting from an existing model. The RNG used for
/// shuffling and noise is seeded from `config.seed`.
pub fn train_from(
    model: ProtoPoolModel,
    train: &FeatureMapDataset,
    val: &FeatureMapDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if model.config != config.model {
        return Err(TrainError::Config("model does not match the configured dimensions".into()));
    }
    check_inputs(train, val, config)?;
    let rng = stream_rng(config.seed, RngStream::Training);
    run_phases(model, rng, train, val, config)
}

fn run_phases(
    model: ProtoPoolModel,
    rng: ChaCha8Rng,
    train: &FeatureMapDataset,
    val: &FeatureMapDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut t = Trainer {
        cfg: config,
        train,
        model,
        rng,
        epoch: 0,
        phase: Phase::Init,
        metrics: Vec::new(),
    };
    let s = &config.schedule;
    let bs = s.batch_size;
    let mut budget = config.epoch_budget.unwrap_or(u32::MAX);

    if budget == 0 {
        let val_report = evaluate(&t.model, val, bs)?;
        return Ok(TrainOutcome {
            checkpoint: t.checkpoint(),
            metrics: t.metrics,
            projection: None,
            pre_projection: None,
            post_projection: None,
            binarized_after_joint: None,
            val: val_report,
            stopped_early: false,
        });
    }

    // warm-up
    t.phase = Phase::Warmup;
    let warm = Trainable {
        addon: s.addon_in_warmup,
        prototypes: true,
        slots: true,
        head: false,
    };
    let mut opt = Optimizers::new(&t.model, s, 0.0);
    for _ in 0..s.warmup_epochs.min(budget) {
        let last_good = t.checkpoint();
        t.epoch += 1;
        budget -= 1;
        t.model.slots.tau = temperature(t.epoch, s)?;
        let rates = Rates {
            addon: s.lr_addon,
            pool: s.lr_pool,
            head: 0.0,
        };
        let (loss, acc) = t.run_epoch(warm, &mut opt, rates, false, &last_good)?;
        let v = evaluate(&t.model, val, bs)?;
        t.record(loss, acc, &v);
    }

    // joint
    t.phase = Phase::Joint;
    let joint = Trainable {
        addon: true,
        prototypes: true,
        slots: true,
        head: false,
    };
    let mut opt = Optimizers::new(&t.model, s, s.weight_decay);
    let mut best_ce = f64::INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut joint_run = 0;
    for e in 0..s.joint_epochs.min(budget) {
        let last_good = t.checkpoint();
        t.epoch += 1;
        budget -= 1;
        joint_run += 1;
        t.model.slots.tau = temperature(t.epoch, s)?;
        let rates = Rates {
            addon: s.joint_lr(s.lr_addon, e),
            pool: s.joint_lr(s.lr_pool, e),
            head: 0.0,
        };
        let (loss, acc) = t.run_epoch(joint, &mut opt, rates, false, &last_good)?;
        let v = evaluate(&t.model, val, bs)?;
        t.record(loss, acc, &v);
        if v.mean_ce < best_ce {
            best_ce = v.mean_ce;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= s.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let binarized_after_joint = (joint_run > 0).then(|| binarized_fraction(&t.model, 0.95));

    // projection
    let mut projection = None;
    let mut pre_projection = None;
    let mut post_projection = None;
    if t.epoch > 0 {
        t.phase = Phase::Projection;
        let pre = evaluate(&t.model, val, bs)?;
        let report = project_prototypes(&mut t.model, train)?;
        let post = evaluate(&t.model, val, bs)?;
        let (loss, acc) = t.measure(true)?;
        t.record(loss, acc, &post);
        projection = Some(report);
        pre_projection = Some(pre);
        post_projection = Some(post);
    }

    // last-layer fine-tuning
    t.phase = Phase::Finetune;
    let head_only = Trainable {
        head: true,
        ..Trainable::NONE
    };
    let mut opt = Optimizers::new(&t.model, s, 0.0);
    for _ in 0..s.finetune_epochs.min(budget) {
        let last_good = t.checkpoint();
        t.epoch += 1;
        let rates = Rates {
            addon: 0.0,
            pool: 0.0,
            head: s.lr_finetune,
        };
        let (loss, acc) = t.run_epoch(head_only, &mut opt, rates, true, &last_good)?;
        let v = evaluate(&t.model, val, bs)?;
        t.record(loss, acc, &v);
    }

    let val_report = evaluate(&t.model, val, bs)?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        metrics: t.metrics,
        projection,
        pre_projection,
        post_projection,
        binarized_after_joint,
        val: val_report,
        stopped_early,
    })
}
