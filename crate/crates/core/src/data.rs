//! Triple files, vocabularies, reciprocal queries and exact empirical distributions.
//!
//! Triple files are UTF-8 text with one `head<TAB>relation<TAB>tail` per line and no
//! header. Ids are assigned in first-appearance order, so reloading the same file
//! always yields the same ids.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, rel: RelationId, tail: EntityId) -> Self {
        Self { head, rel, tail }
    }
}

/// Which side of a triple is being predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// `(anchor, rel, ?)`
    TailPredict,
    /// `(?, rel, anchor)`
    HeadPredict,
}

/// A link-prediction query. `(a, r, ?)` and `(?, r, a)` are different keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Query {
    pub direction: Direction,
    pub anchor: EntityId,
    pub rel: RelationId,
}

impl Query {
    pub fn tail(anchor: EntityId, rel: RelationId) -> Self {
        Self {
            direction: Direction::TailPredict,
            anchor,
            rel,
        }
    }

    pub fn head(anchor: EntityId, rel: RelationId) -> Self {
        Self {
            direction: Direction::HeadPredict,
            anchor,
            rel,
        }
    }

    /// Relation row used by a reciprocal model: head-predict queries use the
    /// inverse relation `rel + num_relations`.
    pub fn model_relation(&self, num_relations: usize) -> usize {
        match self.direction {
            Direction::TailPredict => self.rel,
            Direction::HeadPredict => self.rel + num_relations,
        }
    }
}

/// Entity and relation dictionaries in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    entities: IndexSet<String>,
    relations: IndexSet<String>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get_index_of(name)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.get_index_of(name)
    }

    pub fn entity_name(&self, id: EntityId) -> Option<&str> {
        self.entities.get_index(id).map(String::as_str)
    }

    pub fn relation_name(&self, id: RelationId) -> Option<&str> {
        self.relations.get_index(id).map(String::as_str)
    }

    pub fn intern_entity(&mut self, name: &str) -> EntityId {
        match self.entities.get_index_of(name) {
            Some(id) => id,
            None => self.entities.insert_full(name.to_owned()).0,
        }
    }

    pub fn intern_relation(&mut self, name: &str) -> RelationId {
        match self.relations.get_index_of(name) {
            Some(id) => id,
            None => self.relations.insert_full(name.to_owned()).0,
        }
    }

    /// Writes `name<TAB>id` lines for entities.
    pub fn export_entities<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (id, name) in self.entities.iter().enumerate() {
            writeln!(out, "{name}\t{id}")?;
        }
        Ok(())
    }

    /// Writes `name<TAB>id` lines for relations.
    pub fn export_relations<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (id, name) in self.relations.iter().enumerate() {
            writeln!(out, "{name}\t{id}")?;
        }
        Ok(())
    }
}

/// De-duplicated, id-indexed triples.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripleSet {
    triples: Vec<Triple>,
    duplicates_dropped: usize,
}

impl TripleSet {
    /// Builds a set from raw triples, dropping repeats while keeping first-seen order.
    pub fn from_triples(raw: impl IntoIterator<Item = Triple>) -> Self {
        let mut seen = BTreeSet::new();
        let mut triples = Vec::new();
        let mut duplicates_dropped = 0;
        for t in raw {
            if seen.insert(t) {
                triples.push(t);
            } else {
                duplicates_dropped += 1;
            }
        }
        Self {
            triples,
            duplicates_dropped,
        }
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    /// Writes the set in the triple-file wire format.
    pub fn write<W: Write>(&self, vocab: &Vocab, mut out: W) -> std::io::Result<()> {
        for t in &self.triples {
            let name = |n: Option<&str>| n.unwrap_or("?").to_owned();
            writeln!(
                out,
                "{}\t{}\t{}",
                name(vocab.entity_name(t.head)),
                name(vocab.relation_name(t.rel)),
                name(vocab.entity_name(t.tail))
            )?;
        }
        Ok(())
    }
}

/// How to treat names that are not already in the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownNames {
    /// Assign fresh ids.
    Extend,
    /// Transductive evaluation: unknown names are an error.
    Reject,
}

/// Loads a training file, building the vocabulary on the fly.
pub fn load_triples(path: impl AsRef<Path>) -> Result<(Vocab, TripleSet), DataError> {
    let mut vocab = Vocab::new();
    let set = load_split(path, &mut vocab, UnknownNames::Extend)?;
    Ok((vocab, set))
}

/// Loads a split against an existing vocabulary.
pub fn load_split(
    path: impl AsRef<Path>,
    vocab: &mut Vocab,
    unknown: UnknownNames,
) -> Result<TripleSet, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    read_triples(BufReader::new(file), path, vocab, unknown)
}

pub fn read_triples<R: BufRead>(
    reader: R,
    path: &Path,
    vocab: &mut Vocab,
    unknown: UnknownNames,
) -> Result<TripleSet, DataError> {
    let mut raw = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_owned(),
            source,
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(DataError::Parse {
                path: path.to_owned(),
                line: line_no,
                found: fields.len(),
            });
        }
        let triple = match unknown {
            UnknownNames::Extend => Triple::new(
                vocab.intern_entity(fields[0]),
                vocab.intern_relation(fields[1]),
                vocab.intern_entity(fields[2]),
            ),
            UnknownNames::Reject => {
                let lookup = |kind: &'static str, name: &str, id: Option<usize>| {
                    id.ok_or_else(|| DataError::UnknownName {
                        path: path.to_owned(),
                        line: line_no,
                        kind,
                        name: name.to_owned(),
                    })
                };
                Triple::new(
                    lookup("entity", fields[0], vocab.entity_id(fields[0]))?,
                    lookup("relation", fields[1], vocab.relation_id(fields[1]))?,
                    lookup("entity", fields[2], vocab.entity_id(fields[2]))?,
                )
            }
        };
        raw.push(triple);
    }
    let set = TripleSet::from_triples(raw);
    if set.duplicates_dropped() > 0 {
        log::warn!(
            "{}: dropped {} duplicate triples",
            path.display(),
            set.duplicates_dropped()
        );
    }
    Ok(set)
}

/// `(query, answer)` pairs; every triple contributes one pair per direction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuerySet {
    pairs: Vec<(Query, EntityId)>,
}

impl QuerySet {
    pub fn pairs(&self) -> &[(Query, EntityId)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl FromIterator<(Query, EntityId)> for QuerySet {
    fn from_iter<I: IntoIterator<Item = (Query, EntityId)>>(iter: I) -> Self {
        Self {
            pairs: iter.into_iter().collect(),
        }
    }
}

/// Expands each triple into its tail-predict and head-predict pair.
pub fn to_queries(triples: &TripleSet) -> QuerySet {
    let mut pairs = Vec::with_capacity(2 * triples.len());
    for t in triples.triples() {
        pairs.push((Query::tail(t.head, t.rel), t.tail));
        pairs.push((Query::head(t.tail, t.rel), t.head));
    }
    QuerySet { pairs }
}

/// Sparse conditional distribution `p(y|x)` over a label set of fixed size.
///
/// Only observed support is stored; unseen queries are absent rather than zero-filled.
#[derive(Debug, Clone, PartialEq)]
pub struct CondDist {
    support_size: usize,
    rows: BTreeMap<Query, Vec<(EntityId, f64)>>,
}

impl CondDist {
    pub fn new(support_size: usize) -> Self {
        Self {
            support_size,
            rows: BTreeMap::new(),
        }
    }

    pub fn support_size(&self) -> usize {
        self.support_size
    }

    pub fn num_queries(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, query: &Query) -> Option<&[(EntityId, f64)]> {
        self.rows.get(query).map(Vec::as_slice)
    }

    pub fn prob(&self, query: &Query, label: EntityId) -> f64 {
        self.get(query)
            .and_then(|row| {
                row.binary_search_by_key(&label, |&(y, _)| y)
                    .ok()
                    .map(|i| row[i].1)
            })
            .unwrap_or(0.0)
    }

    /// Dense vector for one query (zeros off-support).
    pub fn dense(&self, query: &Query) -> Option<Vec<f64>> {
        self.get(query).map(|row| {
            let mut v = vec![0.0; self.support_size];
            for &(y, p) in row {
                v[y] = p;
            }
            v
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Query, &[(EntityId, f64)])> {
        self.rows.iter().map(|(q, r)| (q, r.as_slice()))
    }

    /// Inserts a row; entries are sorted by label.
    pub fn insert(&mut self, query: Query, mut row: Vec<(EntityId, f64)>) {
        row.sort_by_key(|&(y, _)| y);
        self.rows.insert(query, row);
    }
}

/// `p_d(y|x) = count(x, y) / count(x)` for every observed query.
pub fn empirical_conditional(pairs: &QuerySet, num_entities: usize) -> CondDist {
    let mut counts: BTreeMap<Query, BTreeMap<EntityId, usize>> = BTreeMap::new();
    for &(q, y) in pairs.pairs() {
        *counts.entry(q).or_default().entry(y).or_default() += 1;
    }
    let mut dist = CondDist::new(num_entities);
    for (q, row) in counts {
        let total: usize = row.values().sum();
        let probs = row
            .into_iter()
            .map(|(y, c)| (y, c as f64 / total as f64))
            .collect();
        dist.insert(q, probs);
    }
    dist
}

/// Exact query and label frequencies (`#x`, `#y`).
#[derive(Debug, Clone, PartialEq)]
pub struct FreqTable {
    per_query: BTreeMap<Query, usize>,
    per_label: Vec<usize>,
    total: usize,
}

impl FreqTable {
    pub fn query_count(&self, query: &Query) -> Option<usize> {
        self.per_query.get(query).copied()
    }

    pub fn label_count(&self, label: EntityId) -> Option<usize> {
        self.per_label.get(label).copied().filter(|&c| c > 0)
    }

    pub fn label_counts(&self) -> &[usize] {
        &self.per_label
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Unigram distribution `#y / Σ #y`.
    pub fn unigram(&self) -> Vec<f64> {
        let sum: usize = self.per_label.iter().sum();
        if sum == 0 {
            return vec![0.0; self.per_label.len()];
        }
        self.per_label
            .iter()
            .map(|&c| c as f64 / sum as f64)
            .collect()
    }
}

pub fn frequency_table(pairs: &QuerySet, num_entities: usize) -> FreqTable {
    let mut per_query = BTreeMap::new();
    let mut per_label = vec![0usize; num_entities];
    for &(q, y) in pairs.pairs() {
        *per_query.entry(q).or_insert(0) += 1;
        per_label[y] += 1;
    }
    FreqTable {
        per_query,
        per_label,
        total: pairs.len(),
    }
}
