//! Mini-batch training with sparse optimizers, decay on plateau and early stopping.
//!
//! Per-example work (scoring and the loss) runs in parallel; gradients are then
//! accumulated serially in batch order so every thread count gives identical bits.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{frequency_table, EntityId, FreqTable, Query, QuerySet};
use crate::error::{LossError, TrainError};
use crate::eval::{evaluate, FilterIndex};
use crate::losses::{
    ns_exact, ns_sampled, sans_weights, sce_bc_loss, sce_loss, softmax, softplus, LossFamily,
    LossMode, LossSpec, NoiseSampler,
};
use crate::models::{CheckpointHeader, GradBuffer, Model, ModelSpec, QueryCtx, Table};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAGRAD_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Multiplies the learning rate after every evaluation that fails to improve.
    #[serde(default = "one")]
    pub decay: f64,
    /// Consecutive non-improving evaluations before stopping; 0 disables early stopping.
    #[serde(default)]
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default = "five")]
    pub eval_every: usize,
}

fn one() -> f64 {
    1.0
}

fn five() -> usize {
    5
}

/// `weight · Σ |θ|^p` over the rows a batch touches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regularization {
    pub p: u32,
    #[serde(default)]
    pub entity_weight: f64,
    #[serde(default)]
    pub relation_weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dropout {
    #[serde(default)]
    pub entity: f64,
    #[serde(default)]
    pub relation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub loss: LossSpec,
    pub optim: OptimConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularization: Option<Regularization>,
    #[serde(default)]
    pub dropout: Dropout,
    /// Checkpoint to start from instead of a fresh initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<std::path::PathBuf>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be > 0, got {}", o.lr)));
        }
        if !(o.decay > 0.0 && o.decay <= 1.0) {
            return Err(TrainError::Config(format!("decay must be in (0, 1], got {}", o.decay)));
        }
        if o.eval_every < 1 {
            return Err(TrainError::Config("eval_every must be >= 1".into()));
        }
        if o.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        for (name, rate) in [("entity", self.dropout.entity), ("relation", self.dropout.relation)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(TrainError::Config(format!("{name} dropout {rate} outside [0, 1)")));
            }
        }
        if let Some(r) = &self.regularization {
            if !(1..=3).contains(&r.p) {
                return Err(TrainError::Config(format!("regularization p must be 1, 2 or 3, got {}", r.p)));
            }
        }
        self.model.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// Per-table optimizer slots.
#[derive(Debug, Clone)]
struct Slots {
    first: Table,
    second: Table,
}

impl Slots {
    fn for_table(t: &Table, kind: OptimizerKind) -> Self {
        let (r1, r2) = match kind {
            OptimizerKind::Sgd => (0, 0),
            OptimizerKind::Adagrad => (t.rows, 0),
            OptimizerKind::Adam => (t.rows, t.rows),
        };
        Self {
            first: Table::zeros(r1, t.cols),
            second: Table::zeros(r2, t.cols),
        }
    }
}

/// Optimizer state; created fresh for every run (warm starts reset it).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    entity: Slots,
    relation: Slots,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, model: &Model) -> Self {
        Self {
            kind,
            entity: Slots::for_table(&model.params.entity, kind),
            relation: Slots::for_table(&model.params.relation, kind),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One update of a parameter slice. `first`/`second` are the optimizer slots for it
/// (ignored by the kinds that do not use them); `t` is the 1-based step count.
pub fn optimizer_step(
    kind: OptimizerKind,
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    t: u64,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::Divergence {
            epoch: 0,
            detail: "non-finite gradient".into(),
        });
    }
    match kind {
        OptimizerKind::Sgd => {
            params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g);
        }
        OptimizerKind::Adagrad => {
            for ((p, g), a) in params.iter_mut().zip(grads).zip(first.iter_mut()) {
                *a += g * g;
                *p -= lr * g / (a.sqrt() + ADAGRAD_EPS);
            }
        }
        OptimizerKind::Adam => {
            let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
            let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
            for (((p, g), m), v) in params
                .iter_mut()
                .zip(grads)
                .zip(first.iter_mut())
                .zip(second.iter_mut())
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}

fn apply_updates(
    model: &mut Model,
    buf: &GradBuffer,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step;
    let kind = state.kind;
    let tables = [
        (&mut model.params.entity, &buf.entity, &mut state.entity, buf.entity_rows()),
        (&mut model.params.relation, &buf.relation, &mut state.relation, buf.relation_rows()),
    ];
    for (params, grads, slots, rows) in tables {
        if params.cols == 0 {
            continue;
        }
        for i in rows {
            let empty: &mut [f64] = &mut [];
            let first = if slots.first.rows > 0 { slots.first.row_mut(i) } else { empty };
            let empty2: &mut [f64] = &mut [];
            let second = if slots.second.rows > 0 { slots.second.row_mut(i) } else { empty2 };
            optimizer_step(kind, params.row_mut(i), grads.row(i), first, second, t, lr)?;
        }
    }
    Ok(())
}

/// Adds `weight · Σ|θ|^p` over touched rows to the gradient; returns its value.
fn regularize(model: &Model, buf: &mut GradBuffer, reg: &Regularization, scale: f64) -> f64 {
    let p = reg.p as i32;
    let mut value = 0.0;
    for (rows, weight, is_entity) in [
        (buf.entity_rows(), reg.entity_weight, true),
        (buf.relation_rows(), reg.relation_weight, false),
    ] {
        if weight == 0.0 {
            continue;
        }
        for i in rows {
            let theta = if is_entity {
                model.params.entity.row(i)
            } else {
                model.params.relation.row(i)
            };
            let g = if is_entity {
                buf.entity.row_mut(i)
            } else {
                buf.relation.row_mut(i)
            };
            for (gv, &th) in g.iter_mut().zip(theta) {
                value += weight * th.abs().powi(p);
                *gv += scale * weight * p as f64 * th.abs().powi(p - 1) * th.signum();
            }
        }
    }
    value
}

/// Shared, read-only inputs of the per-example loss.
pub struct LossContext<'a> {
    pub spec: &'a LossSpec,
    pub freq: &'a FreqTable,
    pub sampler: Option<NoiseSampler>,
    pub noise_probs: Option<Vec<f64>>,
}

impl<'a> LossContext<'a> {
    pub fn new(spec: &'a LossSpec, freq: &'a FreqTable, num_entities: usize) -> Result<Self, LossError> {
        spec.validate()?;
        let sampler = match spec.noise_source() {
            Some(src) => Some(NoiseSampler::new(src, num_entities, Some(freq))?),
            None => None,
        };
        let noise_probs = sampler.as_ref().map(NoiseSampler::probs);
        Ok(Self {
            spec,
            freq,
            sampler,
            noise_probs,
        })
    }
}

/// Loss value and `∂loss/∂score` for one observed pair.
pub fn example_loss<R: rand::Rng + ?Sized>(
    model: &Model,
    ctx: &QueryCtx,
    query: &Query,
    gold: EntityId,
    lc: &LossContext<'_>,
    alpha: f64,
    rng: &mut R,
) -> Result<(f64, Vec<(EntityId, f64)>), TrainError> {
    let spec = lc.spec;
    let nu = spec.nu;
    let out = match (spec.family, spec.mode) {
        (LossFamily::Sce, _) => sce_loss(&model.score_ctx(ctx), gold, 0.0)?,
        (LossFamily::SceLs, _) => sce_loss(&model.score_ctx(ctx), gold, spec.lambda.unwrap_or(0.0))?,
        (LossFamily::SceBc, _) => sce_bc_loss(&model.score_ctx(ctx), gold, lc.freq, query, spec.bc_clamp)?,
        (LossFamily::NsUni | LossFamily::NsFreq, LossMode::ExactExpectation) => {
            ns_exact(&model.score_ctx(ctx), gold, lc.noise_probs.as_deref().unwrap_or(&[]), nu)?
        }
        (LossFamily::Sans, LossMode::ExactExpectation) => {
            let scores = model.score_ctx(ctx);
            let scaled: Vec<f64> = scores.iter().map(|s| alpha * s).collect();
            ns_exact(&scores, gold, &softmax(&scaled), nu)?
        }
        (_, LossMode::Sampled) => {
            let sampler = lc.sampler.as_ref().expect("negative sampling has a sampler");
            let negs = sampler.sample(nu, rng)?;
            let pos = model.score_ctx_candidates(ctx, &[gold])?[0];
            let neg_scores = model.score_ctx_candidates(ctx, &negs)?;
            let weights = (spec.family == LossFamily::Sans).then(|| {
                sans_weights(&neg_scores, alpha)
                    .into_iter()
                    .map(|w| w * nu as f64)
                    .collect::<Vec<_>>()
            });
            let (value, dpos, dnegs) = ns_sampled(pos, &neg_scores, weights.as_deref());
            let mut grad = Vec::with_capacity(nu + 1);
            grad.push((gold, dpos));
            grad.extend(negs.into_iter().zip(dnegs));
            return Ok((value, grad));
        }
    };
    Ok((out.value, out.grad))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub dev_mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean per-example training loss of every epoch (regularization excluded).
    pub epoch_losses: Vec<f64>,
    /// Dev MRR at epoch 0 and after every `eval_every` epochs.
    pub dev_mrr: Vec<EvalPoint>,
    pub best_epoch: usize,
    pub best_dev_mrr: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_lr: f64,
    pub optimizer_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// `epoch<TAB>loss<TAB>dev_mrr` lines; epochs without an evaluation print `-`.
    pub fn progress_log(&self) -> String {
        let evals: BTreeMap<usize, f64> = self.dev_mrr.iter().map(|p| (p.epoch, p.dev_mrr)).collect();
        let mut out = String::new();
        for (i, loss) in self.epoch_losses.iter().enumerate() {
            let epoch = i + 1;
            match evals.get(&epoch) {
                Some(m) => out.push_str(&format!("{epoch}\t{loss:.10e}\t{m:.6}\n")),
                None => out.push_str(&format!("{epoch}\t{loss:.10e}\t-\n")),
            }
        }
        out
    }
}

/// Everything a finished run produces.
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters with the best dev MRR.
    pub best: Model,
    /// Parameters after the last epoch.
    pub last: Model,
    pub wall_time_secs: f64,
}

/// Checks a checkpoint header against the run; mismatching fields are listed.
pub fn check_warm_start(
    header: &CheckpointHeader,
    spec: &ModelSpec,
    num_entities: usize,
    num_relations: usize,
) -> Result<(), TrainError> {
    let diffs = header.mismatches(spec, num_entities, num_relations);
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(crate::error::ModelError::HeaderMismatch(diffs).into())
    }
}

/// Loads a checkpoint as the starting point of a run. Optimizer state always
/// starts fresh; the run's own seed and init scheme are kept in the spec.
pub fn warm_start(
    config: &TrainConfig,
    path: impl AsRef<std::path::Path>,
    num_entities: usize,
    num_relations: usize,
) -> Result<Model, TrainError> {
    let header = CheckpointHeader::read_path(&path)?;
    check_warm_start(&header, &config.model, num_entities, num_relations)?;
    let mut model = Model::load(path)?;
    model.spec = config.model.clone();
    Ok(model)
}

fn dev_mrr(model: &Model, dev: &QuerySet, filter: Option<&FilterIndex>) -> Result<f64, TrainError> {
    if dev.is_empty() {
        return Ok(0.0);
    }
    Ok(evaluate(model, dev, filter)?.metrics.mrr)
}

/// Trains from `init` (else the configured warm start, else a fresh model) on
/// `train`, selecting by dev MRR.
pub fn train(
    config: &TrainConfig,
    train: &QuerySet,
    dev: &QuerySet,
    filter: Option<&FilterIndex>,
    num_entities: usize,
    num_relations: usize,
    init: Option<Model>,
) -> Result<TrainOutcome, TrainError> {
    let started = Instant::now();
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut model = match init {
        Some(m) => {
            let diffs = mismatches_of(&m, &config.model, num_entities, num_relations);
            if !diffs.is_empty() {
                return Err(crate::error::ModelError::HeaderMismatch(diffs).into());
            }
            m
        }
        None => match &config.warm_start {
            Some(path) => warm_start(config, path, num_entities, num_relations)?,
            None => Model::new(config.model.clone(), num_entities, num_relations)?,
        },
    };
    let freq = frequency_table(train, num_entities);
    let lc = LossContext::new(&config.loss, &freq, num_entities)?;
    let mut state = OptimizerState::new(config.optim.optimizer, &model);
    let mut buf = GradBuffer::for_params(&model.params);
    let o = &config.optim;
    let mut lr = o.lr;
    let alpha_base = config.loss.alpha.unwrap_or(0.0);
    let schedule = config.loss.alpha_schedule.unwrap_or(crate::losses::AlphaSchedule::Constant);

    let mut best_mrr = dev_mrr(&model, dev, filter)?;
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        dev_mrr: vec![EvalPoint {
            epoch: 0,
            dev_mrr: best_mrr,
        }],
        best_epoch: 0,
        best_dev_mrr: best_mrr,
        epochs_run: 0,
        stopped_early: false,
        final_lr: lr,
        optimizer_steps: 0,
        checkpoint: None,
    };
    let mut best = model.clone();
    let mut bad_evals = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let pairs = train.pairs();

    for epoch in 1..=o.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(config.seed, &[epoch as u64, u64::MAX]));
        let alpha = schedule.alpha_at(alpha_base, epoch - 1);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(o.batch_size).enumerate() {
            let results: Vec<Result<(f64, QueryCtx, Vec<(EntityId, f64)>), TrainError>> = chunk
                .par_iter()
                .enumerate()
                .map(|(pos, &idx)| {
                    let (q, y) = pairs[idx];
                    let mut rng = stream(config.seed, &[epoch as u64, b as u64, pos as u64]);
                    let ctx = model.prepare_with_dropout(
                        &q,
                        config.dropout.entity,
                        config.dropout.relation,
                        &mut rng,
                    )?;
                    let (v, w) = example_loss(&model, &ctx, &q, y, &lc, alpha, &mut rng)?;
                    Ok((v, ctx, w))
                })
                .collect();
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for r in results {
                let (v, ctx, mut w) = r?;
                if !v.is_finite() {
                    return Err(TrainError::Divergence {
                        epoch,
                        detail: format!("non-finite loss in batch {b}"),
                    });
                }
                batch_loss += v;
                w.iter_mut().for_each(|(_, g)| *g *= scale);
                model.grad_ctx(&ctx, &w, &mut buf)?;
            }
            if let Some(reg) = &config.regularization {
                regularize(&model, &mut buf, reg, 1.0);
            }
            apply_updates(&mut model, &buf, &mut state, lr).map_err(|e| match e {
                TrainError::Divergence { detail, .. } => TrainError::Divergence { epoch, detail },
                other => other,
            })?;
            buf.clear();
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / train.len() as f64;
        if !mean.is_finite() || model.params.entity.data.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Divergence {
                epoch,
                detail: format!("epoch loss {mean}"),
            });
        }
        report.epoch_losses.push(mean);
        report.epochs_run = epoch;
        if epoch % o.eval_every == 0 {
            let mrr = dev_mrr(&model, dev, filter)?;
            report.dev_mrr.push(EvalPoint { epoch, dev_mrr: mrr });
            log::info!("epoch {epoch}: loss {mean:.6e}, dev mrr {mrr:.4}");
            if mrr > best_mrr {
                best_mrr = mrr;
                best = model.clone();
                report.best_epoch = epoch;
                report.best_dev_mrr = mrr;
                bad_evals = 0;
            } else {
                bad_evals += 1;
                lr *= o.decay;
                if o.patience > 0 && bad_evals >= o.patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    report.final_lr = lr;
    report.optimizer_steps = state.step();
    Ok(TrainOutcome {
        report,
        best,
        last: model,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Outcome of pre-training, warm-started fine-tuning and a cold-start control run.
pub struct PipelineOutcome {
    pub pretrain: TrainOutcome,
    pub finetune: TrainOutcome,
    pub cold: TrainOutcome,
}

/// Pre-trains with `pre`, fine-tunes its best parameters with `fine`, and trains
/// `fine` from scratch as the reference. Both configs must share the model shape.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_pipeline(
    pre: &TrainConfig,
    fine: &TrainConfig,
    train_set: &QuerySet,
    dev: &QuerySet,
    filter: Option<&FilterIndex>,
    num_entities: usize,
    num_relations: usize,
) -> Result<PipelineOutcome, TrainError> {
    let pretrain = train(pre, train_set, dev, filter, num_entities, num_relations, None)?;
    let mut fine_cfg = fine.clone();
    fine_cfg.warm_start = None;
    let finetune = train(
        &fine_cfg,
        train_set,
        dev,
        filter,
        num_entities,
        num_relations,
        Some(pretrain.best.clone()),
    )?;
    let cold = train(&fine_cfg, train_set, dev, filter, num_entities, num_relations, None)?;
    Ok(PipelineOutcome {
        pretrain,
        finetune,
        cold,
    })
}

fn mismatches_of(m: &Model, spec: &ModelSpec, ne: usize, nr: usize) -> Vec<String> {
    let header = CheckpointHeader {
        family: m.spec.family,
        dim: m.spec.dim,
        num_entities: m.num_entities,
        num_relations: m.num_relations,
        seed: m.spec.seed,
        entity_shape: (m.params.entity.rows, m.params.entity.cols),
        relation_shape: (m.params.relation.rows, m.params.relation.cols),
    };
    header.mismatches(spec, ne, nr)
}

fn group_by_query(pairs: &QuerySet) -> Vec<(Query, Vec<EntityId>)> {
    let mut groups: BTreeMap<Query, Vec<EntityId>> = BTreeMap::new();
    for &(q, y) in pairs.pairs() {
        groups.entry(q).or_default().push(y);
    }
    groups.into_iter().collect()
}

fn noise_for(spec: &LossSpec, pairs: &QuerySet, num_entities: usize) -> Result<Vec<f64>, TrainError> {
    match spec.family {
        LossFamily::NsUni => Ok(vec![1.0 / num_entities as f64; num_entities]),
        LossFamily::NsFreq => Ok(frequency_table(pairs, num_entities).unigram()),
        other => Err(TrainError::Config(format!(
            "no exact training objective for {}",
            other.name()
        ))),
    }
}

/// Mean exact-expectation training loss of `model` over `pairs`.
///
/// Supported for `sce` (cross-entropy) and `ns-uni`/`ns-freq` (noise summed analytically).
pub fn exact_training_loss(model: &Model, pairs: &QuerySet, spec: &LossSpec) -> Result<f64, TrainError> {
    let groups = group_by_query(pairs);
    let ne = model.num_entities;
    let noise = match spec.family {
        LossFamily::Sce => None,
        _ => Some(noise_for(spec, pairs, ne)?),
    };
    let nu = spec.nu as f64;
    let parts: Vec<Result<f64, TrainError>> = groups
        .par_iter()
        .map(|(q, ys)| {
            let s = model.score_all(q)?;
            Ok(match &noise {
                None => {
                    let lse = log_sum_exp(&s);
                    ys.iter().map(|&y| lse - s[y]).sum()
                }
                Some(pn) => {
                    let pos: f64 = ys.iter().map(|&y| softplus(-s[y])).sum();
                    let neg: f64 = s.iter().zip(pn).map(|(&v, &p)| p * softplus(v)).sum();
                    pos + ys.len() as f64 * nu * neg
                }
            })
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / pairs.len() as f64)
}

/// The minimum of [`exact_training_loss`] over unconstrained per-query scores.
pub fn optimal_training_loss(pairs: &QuerySet, spec: &LossSpec, num_entities: usize) -> Result<f64, TrainError> {
    let groups = group_by_query(pairs);
    let noise = match spec.family {
        LossFamily::Sce => None,
        _ => Some(noise_for(spec, pairs, num_entities)?),
    };
    let nu = spec.nu as f64;
    let mut total = 0.0;
    for (_, ys) in &groups {
        let n = ys.len() as f64;
        let mut counts: BTreeMap<EntityId, f64> = BTreeMap::new();
        ys.iter().for_each(|&y| *counts.entry(y).or_default() += 1.0);
        for (&y, &c) in &counts {
            let pd = c / n;
            total += match &noise {
                None => -c * pd.ln(),
                // score log(p_d / ν p_n) on the support, -∞ elsewhere
                Some(pn) => {
                    let b = nu * pn[y];
                    n * (pd * (1.0 + b / pd).ln() + b * (1.0 + pd / b).ln())
                }
            };
        }
    }
    Ok(total / pairs.len() as f64)
}

fn log_sum_exp(s: &[f64]) -> f64 {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelFamily, ModelSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn optimizer_examples() {
        let mut p = [0.0];
        optimizer_step(OptimizerKind::Sgd, &mut p, &[1.0], &mut [], &mut [], 1, 0.1).unwrap();
        assert_abs_diff_eq!(p[0], -0.1);
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adagrad, OptimizerKind::Adam] {
            let mut p = [0.3, -0.2];
            let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
            optimizer_step(kind, &mut p, &[0.0, 0.0], &mut a, &mut b, 1, 0.1).unwrap();
            assert_eq!(p, [0.3, -0.2], "{kind:?}");
        }
        let mut p = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        optimizer_step(OptimizerKind::Adam, &mut p, &[0.37], &mut m, &mut v, 1, 0.01).unwrap();
        assert_abs_diff_eq!(1.0 - p[0], 0.01, epsilon = 1e-9);
        let mut p = [1.0];
        let mut a = [0.0];
        optimizer_step(OptimizerKind::Adagrad, &mut p, &[-4.0], &mut a, &mut [], 1, 0.5).unwrap();
        assert_abs_diff_eq!(p[0], 1.5, epsilon = 1e-9);
        assert!(optimizer_step(OptimizerKind::Sgd, &mut p, &[f64::NAN], &mut [], &mut [], 1, 0.1).is_err());
    }

    fn functional_world() -> QuerySet {
        // 4 entities, 1 relation, tail of (e, r) is (e + 1) mod 4
        let mut pairs = Vec::new();
        for e in 0..4 {
            pairs.push((Query::tail(e, 0), (e + 1) % 4));
            pairs.push((Query::head((e + 1) % 4, 0), e));
        }
        pairs.into_iter().collect()
    }

    fn config(family: ModelFamily, loss: LossSpec) -> TrainConfig {
        TrainConfig {
            seed: 3,
            model: ModelSpec::new(family, 8, 3),
            loss,
            optim: OptimConfig {
                optimizer: OptimizerKind::Adam,
                lr: 0.1,
                decay: 1.0,
                patience: 0,
                batch_size: 4,
                max_epochs: 60,
                eval_every: 5,
            },
            regularization: None,
            dropout: Dropout::default(),
            warm_start: None,
        }
    }

    #[test]
    fn tabular_memorizes_functional_relation() {
        let data = functional_world();
        let cfg = config(ModelFamily::Tabular, LossSpec::sce().with_mode(LossMode::ExactExpectation));
        let out = train(&cfg, &data, &data, None, 4, 1, None).unwrap();
        assert_eq!(out.report.best_dev_mrr, 1.0);
        let m = out.report.dev_mrr.iter().map(|p| p.dev_mrr).fold(0.0, f64::max);
        assert_eq!(m, out.report.best_dev_mrr);
    }

    #[test]
    fn runs_are_deterministic() {
        let data = functional_world();
        for loss in [LossSpec::ns_uni(3), LossSpec::sans(2, 1.0), LossSpec::sce_ls(0.1)] {
            let mut cfg = config(ModelFamily::Distmult, loss);
            cfg.optim.max_epochs = 10;
            cfg.dropout.entity = 0.2;
            let a = train(&cfg, &data, &data, None, 4, 1, None).unwrap();
            let b = train(&cfg, &data, &data, None, 4, 1, None).unwrap();
            assert_eq!(a.report, b.report);
            assert_eq!(a.last.params, b.last.params);
        }
    }

    #[test]
    fn early_stopping_counts_bad_evaluations() {
        let data = functional_world();
        let mut cfg = config(ModelFamily::Tabular, LossSpec::sce());
        cfg.optim.patience = 3;
        cfg.optim.eval_every = 1;
        cfg.optim.decay = 0.5;
        cfg.optim.max_epochs = 500;
        let out = train(&cfg, &data, &data, None, 4, 1, None).unwrap();
        let r = &out.report;
        assert!(r.stopped_early);
        // the last `patience` evaluations failed to beat the best
        let tail: Vec<f64> = r.dev_mrr.iter().rev().take(3).map(|p| p.dev_mrr).collect();
        assert!(tail.iter().all(|&m| m <= r.best_dev_mrr));
        assert_eq!(r.dev_mrr.last().unwrap().epoch, r.best_epoch + 3);
        assert_abs_diff_eq!(r.final_lr, 0.1 * 0.5f64.powi(3));
    }

    #[test]
    fn zero_epoch_warm_start_is_identity() {
        let data = functional_world();
        let cfg = config(ModelFamily::Distmult, LossSpec::sce());
        let first = train(&cfg, &data, &data, None, 4, 1, None).unwrap();
        let mut again = cfg.clone();
        again.optim.max_epochs = 0;
        let out = train(&again, &data, &data, None, 4, 1, Some(first.last.clone())).unwrap();
        assert_eq!(out.last.params, first.last.params);
        assert_eq!(out.report.dev_mrr[0].dev_mrr, first.report.dev_mrr.last().unwrap().dev_mrr);
    }

    #[test]
    fn warm_start_rejects_other_dims() {
        let data = functional_world();
        let cfg = config(ModelFamily::Distmult, LossSpec::sce());
        let m = Model::new(ModelSpec::new(ModelFamily::Distmult, 4, 0), 4, 1).unwrap();
        let err = train(&cfg, &data, &data, None, 4, 1, Some(m)).err().unwrap();
        match err {
            TrainError::Model(crate::error::ModelError::HeaderMismatch(f)) => {
                assert!(f[0].starts_with("dim"))
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(ModelFamily::Distmult, LossSpec::sce());
        cfg.optim.eval_every = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = config(ModelFamily::Distmult, LossSpec::sce());
        cfg.optim.lr = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn optimal_loss_matches_entropy_and_ns_closed_form() {
        let pairs: QuerySet = [(Query::tail(0, 0), 1), (Query::tail(0, 0), 2), (Query::tail(1, 0), 2)]
            .into_iter()
            .collect();
        let h = optimal_training_loss(&pairs, &LossSpec::sce(), 3).unwrap();
        assert_abs_diff_eq!(h, 2.0 * 2f64.ln() / 3.0, epsilon = 1e-12);
        // query 1 alone: p_d = 1, ν p_n = 1/3
        let ns = optimal_training_loss(&pairs, &LossSpec::ns_uni(1), 3).unwrap();
        let q1 = (1.0 + 1.0 / 3.0f64).ln() + (1.0 / 3.0) * 4f64.ln();
        // query 0: two labels at p_d = 1/2, n = 2
        let q0 = 2.0 * 2.0 * (0.5 * (1.0 + 2.0 / 3.0f64).ln() + (1.0 / 3.0) * 2.5f64.ln());
        assert_abs_diff_eq!(ns, (q0 + q1) / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn tabular_training_approaches_optimum() {
        let pairs: QuerySet = [(Query::tail(0, 0), 1), (Query::tail(0, 0), 2), (Query::tail(1, 0), 2)]
            .into_iter()
            .collect();
        let mut cfg = config(ModelFamily::Tabular, LossSpec::sce());
        cfg.optim.max_epochs = 400;
        cfg.optim.batch_size = 3;
        let out = train(&cfg, &pairs, &pairs, None, 3, 1, None).unwrap();
        let l = exact_training_loss(&out.last, &pairs, &LossSpec::sce()).unwrap();
        let h = optimal_training_loss(&pairs, &LossSpec::sce(), 3).unwrap();
        assert!(l >= h - 1e-12 && l - h < 1e-3, "{l} vs {h}");
    }

    #[test]
    fn sans_at_zero_temperature_is_uniform_negative_sampling() {
        let data = functional_world();
        let mut a = config(ModelFamily::Distmult, LossSpec::sans(4, 0.0));
        a.optim.max_epochs = 8;
        let mut b = a.clone();
        b.loss = LossSpec::ns_uni(4);
        let ra = train(&a, &data, &data, None, 4, 1, None).unwrap();
        let rb = train(&b, &data, &data, None, 4, 1, None).unwrap();
        assert_eq!(ra.report, rb.report);
        assert_eq!(ra.last.params, rb.last.params);
    }

    #[test]
    fn rotate_relations_stay_on_the_unit_circle() {
        let data = functional_world();
        let mut cfg = config(ModelFamily::Rotate, LossSpec::ns_uni(2));
        cfg.optim.max_epochs = 10;
        let out = train(&cfg, &data, &data, None, 4, 1, None).unwrap();
        for rel in 0..2 {
            for v in out.last.relation_modulus(rel) {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let data = functional_world();
        let mut cfg = config(ModelFamily::Complex, LossSpec::sans(3, 0.5));
        cfg.optim.max_epochs = 6;
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| train(&cfg, &data, &data, None, 4, 1, None).unwrap());
        let b = four.install(|| train(&cfg, &data, &data, None, 4, 1, None).unwrap());
        assert_eq!(a.report, b.report);
        assert_eq!(a.last.params, b.last.params);
    }
}
