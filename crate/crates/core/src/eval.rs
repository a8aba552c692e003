//! Filtered ranking metrics and the train/test KL analysis.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{to_queries, Direction, EntityId, Query, QuerySet, TripleSet};
use crate::error::{DomainError, ModelError};
use crate::models::Model;

/// Known-true answers per query, pooled over every split.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    known: HashMap<Query, HashSet<EntityId>>,
}

impl FilterIndex {
    pub fn new<'a>(splits: impl IntoIterator<Item = &'a TripleSet>) -> Self {
        let mut known: HashMap<Query, HashSet<EntityId>> = HashMap::new();
        for split in splits {
            for &(q, y) in to_queries(split).pairs() {
                known.entry(q).or_default().insert(y);
            }
        }
        Self { known }
    }

    pub fn known(&self, query: &Query) -> Option<&HashSet<EntityId>> {
        self.known.get(query)
    }

    pub fn num_queries(&self) -> usize {
        self.known.len()
    }
}

/// `1 + #{higher} + #{tied}/2`, rounded half up, skipping filtered candidates.
pub fn rank_filtered(scores: &[f64], gold: EntityId, filter: Option<&HashSet<EntityId>>) -> usize {
    let s = scores[gold];
    let mut higher = 0;
    let mut tied: usize = 0;
    for (e, &v) in scores.iter().enumerate() {
        if e == gold || filter.is_some_and(|f| f.contains(&e)) {
            continue;
        }
        if v > s || s.is_nan() {
            higher += 1;
        } else if v == s {
            tied += 1;
        }
    }
    1 + higher + tied.div_ceil(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub ranks: Vec<usize>,
    pub metrics: Metrics,
}

pub fn metrics(ranks: &[usize]) -> Result<Metrics, DomainError> {
    if ranks.is_empty() {
        return Err(DomainError::Empty("ranks"));
    }
    let n = ranks.len() as f64;
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(Metrics {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits1: hits(1),
        hits3: hits(3),
        hits10: hits(10),
        n: ranks.len(),
    })
}

/// Ranks every (query, answer) pair; `filter = None` gives raw ranks.
pub fn evaluate(
    model: &Model,
    pairs: &QuerySet,
    filter: Option<&FilterIndex>,
) -> Result<RankReport, ModelError> {
    let ranks = pairs
        .pairs()
        .par_iter()
        .map(|(q, y)| {
            let scores = model.score_all(q)?;
            if *y >= scores.len() {
                return Err(ModelError::Index {
                    kind: "entity",
                    id: *y,
                    size: scores.len(),
                });
            }
            Ok(rank_filtered(&scores, *y, filter.and_then(|f| f.known(q))))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let metrics = metrics(&ranks).map_err(|e| ModelError::Shape(e.to_string()))?;
    Ok(RankReport { ranks, metrics })
}

/// Answer counts keyed by relation and by anchor entity, for one query direction.
#[derive(Debug, Default)]
struct DirectionCounts {
    by_rel: HashMap<usize, (usize, HashMap<EntityId, usize>)>,
    by_anchor: HashMap<EntityId, (usize, HashMap<EntityId, usize>)>,
}

impl DirectionCounts {
    fn new(pairs: &QuerySet, direction: Direction) -> Self {
        let mut c = Self::default();
        for &(q, y) in pairs.pairs().iter().filter(|(q, _)| q.direction == direction) {
            let r = c.by_rel.entry(q.rel).or_default();
            r.0 += 1;
            *r.1.entry(y).or_default() += 1;
            let a = c.by_anchor.entry(q.anchor).or_default();
            a.0 += 1;
            *a.1.entry(y).or_default() += 1;
        }
        c
    }

    /// Unnormalized `p(e|r) + p(e|anchor)`; missing terms contribute nothing.
    fn additive(&self, q: &Query) -> BTreeMap<EntityId, f64> {
        let mut out = BTreeMap::new();
        for (total, counts) in [self.by_rel.get(&q.rel), self.by_anchor.get(&q.anchor)]
            .into_iter()
            .flatten()
        {
            for (&e, &c) in counts {
                *out.entry(e).or_insert(0.0) += c as f64 / *total as f64;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlReport {
    pub tail: f64,
    pub head: f64,
    /// `tail + head`.
    pub kl: f64,
    pub tail_queries: usize,
    pub head_queries: usize,
    /// Test queries whose anchor and relation never occur in training.
    pub skipped: usize,
}

/// Smoothing added to every test-side probability before normalization.
pub const KL_EPS: f64 = 1e-9;

/// `D_KL(P || Q)` of answer distributions between train (`P`) and test (`Q`).
///
/// Both sides use the additive estimator `p(e|r) + p(e|e')` from frequencies,
/// renormalized per query. `Q` gets `ε` added to every entity before normalizing.
/// Each direction averages over its distinct test queries; the directions are summed.
pub fn kg_kl_divergence(
    train: &TripleSet,
    test: &TripleSet,
    num_entities: usize,
) -> Result<KlReport, DomainError> {
    if train.is_empty() {
        return Err(DomainError::Empty("train split"));
    }
    if test.is_empty() {
        return Err(DomainError::Empty("test split"));
    }
    let train_q = to_queries(train);
    let test_q = to_queries(test);
    let mut per_dir = [0.0; 2];
    let mut counts = [0usize; 2];
    let mut skipped = 0;
    for (slot, direction) in [Direction::TailPredict, Direction::HeadPredict].into_iter().enumerate() {
        let p_counts = DirectionCounts::new(&train_q, direction);
        let q_counts = DirectionCounts::new(&test_q, direction);
        let queries: BTreeMap<Query, ()> = test_q
            .pairs()
            .iter()
            .filter(|(q, _)| q.direction == direction)
            .map(|(q, _)| (*q, ()))
            .collect();
        let mut total = 0.0;
        let mut n = 0;
        for q in queries.keys() {
            let p = p_counts.additive(q);
            let p_mass: f64 = p.values().sum();
            if p_mass <= 0.0 {
                skipped += 1;
                continue;
            }
            let qd = q_counts.additive(q);
            let q_mass: f64 = qd.values().sum::<f64>() + num_entities as f64 * KL_EPS;
            let kl: f64 = p
                .iter()
                .map(|(e, &pv)| {
                    let pv = pv / p_mass;
                    let qv = (qd.get(e).copied().unwrap_or(0.0) + KL_EPS) / q_mass;
                    pv * (pv / qv).ln()
                })
                .sum();
            total += kl;
            n += 1;
        }
        per_dir[slot] = if n > 0 { total / n as f64 } else { 0.0 };
        counts[slot] = n;
    }
    Ok(KlReport {
        tail: per_dir[0],
        head: per_dir[1],
        kl: per_dir[0] + per_dir[1],
        tail_queries: counts[0],
        head_queries: counts[1],
        skipped,
    })
}
