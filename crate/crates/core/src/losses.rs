//! Softmax cross-entropy and negative-sampling losses.
//!
//! Every loss maps a score vector to a value and `∂loss/∂score` weights, which the
//! models then push back into parameter gradients. Negative sampling comes in a
//! sampled form (ν drawn negatives) and an exact-expectation form where the noise
//! sum is replaced by `ν Σ_y p_n(y|x) log σ(-f(y))`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EntityId, FreqTable, Query};
use crate::error::LossError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossFamily {
    Sce,
    SceLs,
    SceBc,
    NsUni,
    NsFreq,
    Sans,
}

impl LossFamily {
    pub fn is_sce(self) -> bool {
        matches!(self, LossFamily::Sce | LossFamily::SceLs | LossFamily::SceBc)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Sce => "sce",
            LossFamily::SceLs => "sce-ls",
            LossFamily::SceBc => "sce-bc",
            LossFamily::NsUni => "ns-uni",
            LossFamily::NsFreq => "ns-freq",
            LossFamily::Sans => "sans",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSource {
    Uniform,
    Unigram,
    /// The model's own tempered softmax (self-adversarial).
    ModelSelf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Sampled,
    ExactExpectation,
}

/// How the SANS temperature evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AlphaSchedule {
    Constant,
    /// Ramp α linearly from 0 to its configured value over `epochs` epochs.
    LinearWarmup { epochs: usize },
}

impl AlphaSchedule {
    pub fn alpha_at(&self, alpha: f64, epoch: usize) -> f64 {
        match *self {
            AlphaSchedule::Constant => alpha,
            AlphaSchedule::LinearWarmup { epochs } if epochs > 0 => {
                alpha * (epoch as f64 / epochs as f64).min(1.0)
            }
            AlphaSchedule::LinearWarmup { .. } => alpha,
        }
    }
}

/// One loss of the family table: what to optimize and how to draw noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub family: LossFamily,
    #[serde(default = "default_nu")]
    pub nu: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_mode")]
    pub mode: LossMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_schedule: Option<AlphaSchedule>,
    /// Clamp bounds for the `#x/#y` weight of backward correction.
    #[serde(default = "default_bc_clamp")]
    pub bc_clamp: (f64, f64),
}

fn default_nu() -> usize {
    1
}

fn default_mode() -> LossMode {
    LossMode::Sampled
}

fn default_bc_clamp() -> (f64, f64) {
    (1e-3, 1e3)
}

impl LossSpec {
    pub fn new(family: LossFamily) -> Self {
        Self {
            family,
            nu: 1,
            lambda: None,
            alpha: None,
            mode: LossMode::Sampled,
            alpha_schedule: None,
            bc_clamp: default_bc_clamp(),
        }
    }

    pub fn sce() -> Self {
        Self::new(LossFamily::Sce)
    }

    pub fn sce_ls(lambda: f64) -> Self {
        Self {
            lambda: Some(lambda),
            ..Self::new(LossFamily::SceLs)
        }
    }

    pub fn sce_bc() -> Self {
        Self::new(LossFamily::SceBc)
    }

    pub fn ns_uni(nu: usize) -> Self {
        Self {
            nu,
            ..Self::new(LossFamily::NsUni)
        }
    }

    pub fn ns_freq(nu: usize) -> Self {
        Self {
            nu,
            ..Self::new(LossFamily::NsFreq)
        }
    }

    pub fn sans(nu: usize, alpha: f64) -> Self {
        Self {
            nu,
            alpha: Some(alpha),
            ..Self::new(LossFamily::Sans)
        }
    }

    pub fn with_mode(mut self, mode: LossMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn noise_source(&self) -> Option<NoiseSource> {
        match self.family {
            LossFamily::NsUni => Some(NoiseSource::Uniform),
            LossFamily::NsFreq => Some(NoiseSource::Unigram),
            LossFamily::Sans => Some(NoiseSource::ModelSelf),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let fam = self.family.name();
        match (self.family, self.lambda) {
            (LossFamily::SceLs, None) => {
                return Err(LossError::Spec("sce-ls requires lambda".into()))
            }
            (LossFamily::SceLs, Some(l)) if !(0.0..=1.0).contains(&l) => {
                return Err(LossError::Spec(format!("lambda {l} outside [0, 1]")))
            }
            (LossFamily::SceLs, _) => {}
            (_, Some(_)) => return Err(LossError::Spec(format!("lambda is not valid for {fam}"))),
            _ => {}
        }
        match (self.family, self.alpha) {
            (LossFamily::Sans, None) => return Err(LossError::Spec("sans requires alpha".into())),
            (LossFamily::Sans, Some(a)) if !(a >= 0.0 && a.is_finite()) => {
                return Err(LossError::Spec(format!("alpha {a} must be >= 0")))
            }
            (LossFamily::Sans, _) => {}
            (_, Some(_)) => return Err(LossError::Spec(format!("alpha is not valid for {fam}"))),
            _ => {}
        }
        if self.alpha_schedule.is_some() && self.family != LossFamily::Sans {
            return Err(LossError::Spec(format!(
                "alpha_schedule is not valid for {fam}"
            )));
        }
        if !self.family.is_sce() && self.nu < 1 {
            return Err(LossError::Spec("nu must be >= 1".into()));
        }
        let (lo, hi) = self.bc_clamp;
        if !(lo > 0.0 && lo <= hi) {
            return Err(LossError::Spec(format!("bad bc_clamp ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// Loss value and sparse `∂loss/∂score` over candidate entities.
///
/// Candidates may repeat (sampled negatives that collide); weights simply add.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOut {
    pub value: f64,
    pub grad: Vec<(EntityId, f64)>,
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|&s| s - lse).collect()
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-Σ_i t_i log p_θ(i)` for an arbitrary nonnegative target; gradient `(Σt) p - t`.
pub fn cross_entropy_to(scores: &[f64], target: &[f64]) -> LossOut {
    let logp = log_softmax(scores);
    let mass: f64 = target.iter().sum();
    let value = -target
        .iter()
        .zip(&logp)
        .filter(|(&t, _)| t != 0.0)
        .map(|(&t, &lp)| t * lp)
        .sum::<f64>();
    let grad = logp
        .iter()
        .zip(target)
        .enumerate()
        .map(|(i, (&lp, &t))| (i, mass * lp.exp() - t))
        .collect();
    LossOut { value, grad }
}

/// Softmax cross-entropy with label smoothing `λ` (`λ = 0` is vanilla).
pub fn sce_loss(scores: &[f64], gold: EntityId, lambda: f64) -> Result<LossOut, LossError> {
    check_gold(scores, gold)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::Spec(format!("lambda {lambda} outside [0, 1]")));
    }
    let n = scores.len() as f64;
    let logp = log_softmax(scores);
    let smooth = lambda / n;
    let value = -((1.0 - lambda) * logp[gold] + smooth * logp.iter().sum::<f64>());
    let grad = logp
        .iter()
        .enumerate()
        .map(|(i, &lp)| {
            let target = smooth + if i == gold { 1.0 - lambda } else { 0.0 };
            (i, lp.exp() - target)
        })
        .collect();
    Ok(LossOut { value, grad })
}

/// `#x / #y`, clamped.
pub fn bc_weight(
    freq: &FreqTable,
    query: &Query,
    gold: EntityId,
    clamp: (f64, f64),
) -> Result<f64, LossError> {
    let qx = freq
        .query_count(query)
        .ok_or_else(|| LossError::MissingCounts(format!("query {query:?}")))?;
    let qy = freq
        .label_count(gold)
        .ok_or_else(|| LossError::MissingCounts(format!("label {gold}")))?;
    Ok((qx as f64 / qy as f64).clamp(clamp.0, clamp.1))
}

/// Backward-corrected cross-entropy: `(#x/#y) · (-log p_θ(gold))`.
pub fn sce_bc_loss(
    scores: &[f64],
    gold: EntityId,
    freq: &FreqTable,
    query: &Query,
    clamp: (f64, f64),
) -> Result<LossOut, LossError> {
    let w = bc_weight(freq, query, gold, clamp)?;
    weighted_sce(scores, gold, w)
}

/// `w · (-log p_θ(gold))`.
pub fn weighted_sce(scores: &[f64], gold: EntityId, weight: f64) -> Result<LossOut, LossError> {
    let mut out = sce_loss(scores, gold, 0.0)?;
    out.value *= weight;
    out.grad.iter_mut().for_each(|(_, g)| *g *= weight);
    Ok(out)
}

fn check_gold(scores: &[f64], gold: EntityId) -> Result<(), LossError> {
    if gold >= scores.len() {
        return Err(LossError::Spec(format!(
            "gold label {gold} out of range {}",
            scores.len()
        )));
    }
    Ok(())
}

/// Sampled negative sampling: `-log σ(f⁺) - Σ_i w_i log σ(-f⁻_i)`.
///
/// `neg_weights = None` is plain NS (all weights 1). Returns the value together with
/// `∂/∂f⁺` and `∂/∂f⁻_i`.
pub fn ns_sampled(pos: f64, negs: &[f64], neg_weights: Option<&[f64]>) -> (f64, f64, Vec<f64>) {
    let mut value = softplus(-pos);
    let dpos = -sigmoid(-pos);
    let dnegs = negs
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let w = neg_weights.map_or(1.0, |w| w[i]);
            value += w * softplus(s);
            w * sigmoid(s)
        })
        .collect();
    (value, dpos, dnegs)
}

/// Exact-expectation NS for one observed pair:
/// `-log σ(f(gold)) - ν Σ_y p_n(y) log σ(-f(y))`.
pub fn ns_exact(
    scores: &[f64],
    gold: EntityId,
    noise: &[f64],
    nu: usize,
) -> Result<LossOut, LossError> {
    check_gold(scores, gold)?;
    let mut positive = vec![0.0; scores.len()];
    positive[gold] = 1.0;
    ns_expected(scores, &positive, noise, nu as f64)
}

/// NS with both the observed label and the noise in expectation:
/// `Σ_y p_d(y) log(1 + e^{-f(y)}) + ν Σ_y p_n(y) log(1 + e^{f(y)})`.
pub fn ns_expected(
    scores: &[f64],
    positive: &[f64],
    noise: &[f64],
    nu: f64,
) -> Result<LossOut, LossError> {
    if positive.len() != scores.len() || noise.len() != scores.len() {
        return Err(LossError::Spec(format!(
            "length mismatch: scores {}, positive {}, noise {}",
            scores.len(),
            positive.len(),
            noise.len()
        )));
    }
    let mut value = 0.0;
    let grad = scores
        .iter()
        .zip(positive.iter().zip(noise))
        .enumerate()
        .map(|(i, (&s, (&a, &b)))| {
            let b = nu * b;
            if a != 0.0 {
                value += a * softplus(-s);
            }
            if b != 0.0 {
                value += b * softplus(s);
            }
            (i, -a * sigmoid(-s) + b * sigmoid(s))
        })
        .collect();
    Ok(LossOut { value, grad })
}

/// Self-adversarial weights `softmax(α · scores)` over the drawn negatives.
///
/// The weights are constants for differentiation purposes.
pub fn sans_weights(neg_scores: &[f64], alpha: f64) -> Vec<f64> {
    if alpha.is_infinite() {
        let best = neg_scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc })
            .0;
        let mut w = vec![0.0; neg_scores.len()];
        if !w.is_empty() {
            w[best] = 1.0;
        }
        return w;
    }
    let scaled: Vec<f64> = neg_scores.iter().map(|&s| alpha * s).collect();
    softmax(&scaled)
}

/// Draws negatives for a query.
#[derive(Debug, Clone)]
pub enum NoiseSampler {
    Uniform { num_entities: usize },
    Unigram { dist: WeightedIndex<f64>, probs: Vec<f64> },
}

impl NoiseSampler {
    /// Sampler for a noise source. Self-adversarial noise draws uniform proposals
    /// which the loss then reweights with [`sans_weights`].
    pub fn new(
        source: NoiseSource,
        num_entities: usize,
        freq: Option<&FreqTable>,
    ) -> Result<Self, LossError> {
        match source {
            NoiseSource::Uniform | NoiseSource::ModelSelf => {
                if num_entities == 0 {
                    return Err(LossError::Spec("no entities to sample".into()));
                }
                Ok(NoiseSampler::Uniform { num_entities })
            }
            NoiseSource::Unigram => {
                let freq = freq.ok_or_else(|| {
                    LossError::MissingCounts("unigram noise needs label counts".into())
                })?;
                let probs = freq.unigram();
                let dist = WeightedIndex::new(&probs)
                    .map_err(|e| LossError::Spec(format!("unigram noise: {e}")))?;
                Ok(NoiseSampler::Unigram { dist, probs })
            }
        }
    }

    /// `k` i.i.d. draws.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<EntityId>, LossError> {
        if k == 0 {
            return Err(LossError::Spec("k must be >= 1".into()));
        }
        Ok(match self {
            NoiseSampler::Uniform { num_entities } => {
                (0..k).map(|_| rng.random_range(0..*num_entities)).collect()
            }
            NoiseSampler::Unigram { dist, .. } => (0..k).map(|_| dist.sample(rng)).collect(),
        })
    }

    /// The noise distribution as a dense vector (for exact-expectation mode).
    pub fn probs(&self) -> Vec<f64> {
        match self {
            NoiseSampler::Uniform { num_entities } => {
                vec![1.0 / *num_entities as f64; *num_entities]
            }
            NoiseSampler::Unigram { probs, .. } => probs.clone(),
        }
    }
}
