//! Score functions `f_θ(x, y)` with analytic gradients.
//!
//! Every query is answered in the tail direction: a head-predict query `(?, r, e)`
//! becomes `(e, r⁻¹, ?)` where `r⁻¹ = r + |R|` has its own relation row while the
//! entity rows are shared. The relation table therefore has `2|R|` rows.
//!
//! Each embedding family first combines anchor `h` and relation `r` into a query
//! vector `q`, then scores every candidate `t` against `q`:
//!
//! | family   | entity width | relation width | score                              |
//! |----------|--------------|----------------|------------------------------------|
//! | tabular  | `2|R|·|E|`   | 0              | free parameter per (anchor, r, y)  |
//! | transe   | `d`          | `d`            | `-‖h + r - t‖₂`                    |
//! | distmult | `d`          | `d`            | `Σ h_i r_i t_i`                    |
//! | complex  | `d` (even)   | `d`            | `Re Σ h_j r_j conj(t_j)`           |
//! | rescal   | `d`          | `d²`           | `hᵀ M_r t`                         |
//! | rotate   | `d` (even)   | `d/2` phases   | `-Σ_j |h_j e^{iφ_j} - t_j|`        |
//!
//! Complex-valued families store the `d/2` real parts first, then the `d/2`
//! imaginary parts.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{EntityId, Query};
use crate::error::ModelError;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    Tabular,
    Transe,
    Distmult,
    Complex,
    Rescal,
    Rotate,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 6] = [
        ModelFamily::Tabular,
        ModelFamily::Transe,
        ModelFamily::Distmult,
        ModelFamily::Complex,
        ModelFamily::Rescal,
        ModelFamily::Rotate,
    ];

    /// Family code stored in checkpoint headers.
    pub fn code(self) -> u32 {
        match self {
            ModelFamily::Tabular => 0,
            ModelFamily::Transe => 1,
            ModelFamily::Distmult => 2,
            ModelFamily::Complex => 3,
            ModelFamily::Rescal => 4,
            ModelFamily::Rotate => 5,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Tabular => "tabular",
            ModelFamily::Transe => "transe",
            ModelFamily::Distmult => "distmult",
            ModelFamily::Complex => "complex",
            ModelFamily::Rescal => "rescal",
            ModelFamily::Rotate => "rotate",
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Initialization scheme for embedding tables.
///
/// Xavier schemes treat a table of shape `rows × cols` as `fan_out × fan_in`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Init {
    XavierNormal {
        #[serde(default = "unit")]
        gain: f64,
    },
    XavierUniform {
        #[serde(default = "unit")]
        gain: f64,
    },
    Normal { std: f64 },
    Uniform { a: f64 },
}

fn unit() -> f64 {
    1.0
}

impl Default for Init {
    fn default() -> Self {
        Init::XavierNormal { gain: 1.0 }
    }
}

impl Init {
    /// Bound of the xavier-uniform scheme: `gain · √(6 / (fan_in + fan_out))`.
    pub fn xavier_uniform_bound(gain: f64, rows: usize, cols: usize) -> f64 {
        gain * (6.0 / (rows + cols) as f64).sqrt()
    }

    fn fill<R: Rng + ?Sized>(&self, table: &mut Table, rng: &mut R) -> Result<(), ModelError> {
        let (rows, cols) = (table.rows, table.cols);
        if rows + cols == 0 {
            return Ok(());
        }
        match *self {
            Init::XavierUniform { gain } => {
                let b = Self::xavier_uniform_bound(gain, rows, cols);
                table.data.iter_mut().for_each(|v| *v = rng.random_range(-b..=b));
            }
            Init::XavierNormal { gain } => {
                let std = gain * (2.0 / (rows + cols) as f64).sqrt();
                fill_normal(table, std, rng)?;
            }
            Init::Normal { std } => fill_normal(table, std, rng)?,
            Init::Uniform { a } => {
                if !(a > 0.0) {
                    return Err(ModelError::Spec(format!("uniform init needs a > 0, got {a}")));
                }
                table.data.iter_mut().for_each(|v| *v = rng.random_range(-a..=a));
            }
        }
        Ok(())
    }
}

fn fill_normal<R: Rng + ?Sized>(table: &mut Table, std: f64, rng: &mut R) -> Result<(), ModelError> {
    let dist = Normal::new(0.0, std).map_err(|e| ModelError::Spec(format!("normal init: {e}")))?;
    table.data.iter_mut().for_each(|v| *v = dist.sample(rng));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: ModelFamily,
    /// Embedding width (total real width for complex-valued families; ignored by tabular).
    pub dim: usize,
    #[serde(default)]
    pub init: Init,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(family: ModelFamily, dim: usize, seed: u64) -> Self {
        Self {
            family,
            dim,
            init: Init::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 {
            return Err(ModelError::Spec("dim must be >= 1".into()));
        }
        if matches!(self.family, ModelFamily::Complex | ModelFamily::Rotate) && self.dim % 2 != 0 {
            return Err(ModelError::Spec(format!(
                "{} needs an even dim (real and imaginary halves), got {}",
                self.family, self.dim
            )));
        }
        Ok(())
    }

    fn entity_cols(&self, num_entities: usize, num_relations: usize) -> usize {
        match self.family {
            ModelFamily::Tabular => 2 * num_relations * num_entities,
            _ => self.dim,
        }
    }

    fn relation_cols(&self) -> usize {
        match self.family {
            ModelFamily::Tabular => 0,
            ModelFamily::Rescal => self.dim * self.dim,
            ModelFamily::Rotate => self.dim / 2,
            _ => self.dim,
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Table {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub entity: Table,
    pub relation: Table,
}

/// Builds a seed-deterministic parameter store.
pub fn init_params(
    spec: &ModelSpec,
    num_entities: usize,
    num_relations: usize,
) -> Result<ParamStore, ModelError> {
    spec.validate()?;
    let mut entity = Table::zeros(num_entities, spec.entity_cols(num_entities, num_relations));
    let mut relation = Table::zeros(2 * num_relations, spec.relation_cols());
    let mut rng = stream(spec.seed, &[0x1417]);
    spec.init.fill(&mut entity, &mut rng)?;
    if spec.family == ModelFamily::Rotate {
        let pi = std::f64::consts::PI;
        relation.data.iter_mut().for_each(|v| *v = rng.random_range(-pi..=pi));
    } else {
        spec.init.fill(&mut relation, &mut rng)?;
    }
    Ok(ParamStore { entity, relation })
}

/// Gradient accumulator with the same shape as a [`ParamStore`] and touched-row tracking.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    pub entity: Table,
    pub relation: Table,
    entity_touched: Vec<bool>,
    relation_touched: Vec<bool>,
    entity_rows: Vec<usize>,
    relation_rows: Vec<usize>,
}

impl GradBuffer {
    pub fn for_params(params: &ParamStore) -> Self {
        Self {
            entity: Table::zeros(params.entity.rows, params.entity.cols),
            relation: Table::zeros(params.relation.rows, params.relation.cols),
            entity_touched: vec![false; params.entity.rows],
            relation_touched: vec![false; params.relation.rows],
            entity_rows: Vec::new(),
            relation_rows: Vec::new(),
        }
    }

    pub fn entity_row_mut(&mut self, i: usize) -> &mut [f64] {
        if !self.entity_touched[i] {
            self.entity_touched[i] = true;
            self.entity_rows.push(i);
        }
        self.entity.row_mut(i)
    }

    pub fn relation_row_mut(&mut self, i: usize) -> &mut [f64] {
        if !self.relation_touched[i] {
            self.relation_touched[i] = true;
            self.relation_rows.push(i);
        }
        self.relation.row_mut(i)
    }

    /// Touched entity rows in ascending order.
    pub fn entity_rows(&self) -> Vec<usize> {
        let mut rows = self.entity_rows.clone();
        rows.sort_unstable();
        rows
    }

    pub fn relation_rows(&self) -> Vec<usize> {
        let mut rows = self.relation_rows.clone();
        rows.sort_unstable();
        rows
    }

    /// Zeroes touched rows and forgets them.
    pub fn clear(&mut self) {
        for &i in &self.entity_rows {
            self.entity.row_mut(i).fill(0.0);
            self.entity_touched[i] = false;
        }
        for &i in &self.relation_rows {
            self.relation.row_mut(i).fill(0.0);
            self.relation_touched[i] = false;
        }
        self.entity_rows.clear();
        self.relation_rows.clear();
    }
}

/// Entry-wise dropout masks applied to the anchor and relation rows of one query.
#[derive(Debug, Clone, Default)]
struct Masks {
    anchor: Option<Vec<f64>>,
    relation: Option<Vec<f64>>,
}

fn draw_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Option<Vec<f64>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

/// Forward state of one query: the (possibly dropped-out) anchor and relation rows
/// and the combined query vector.
#[derive(Debug, Clone)]
pub struct QueryCtx {
    anchor: EntityId,
    rel: usize,
    h: Vec<f64>,
    r: Vec<f64>,
    q: Vec<f64>,
    masks: Masks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub num_entities: usize,
    pub num_relations: usize,
    pub params: ParamStore,
}

impl Model {
    pub fn new(spec: ModelSpec, num_entities: usize, num_relations: usize) -> Result<Self, ModelError> {
        let params = init_params(&spec, num_entities, num_relations)?;
        Ok(Self {
            spec,
            num_entities,
            num_relations,
            params,
        })
    }

    pub fn family(&self) -> ModelFamily {
        self.spec.family
    }

    fn check_entity(&self, id: EntityId) -> Result<(), ModelError> {
        if id >= self.num_entities {
            return Err(ModelError::Index {
                kind: "entity",
                id,
                size: self.num_entities,
            });
        }
        Ok(())
    }

    /// Builds the forward state of a query.
    pub fn prepare(&self, query: &Query) -> Result<QueryCtx, ModelError> {
        self.prepare_inner(query, Masks::default())
    }

    /// As [`Model::prepare`] with entry-wise dropout on the anchor and relation rows.
    ///
    /// Dropped entries are zeroed and survivors scaled by `1 / (1 - rate)`. Tabular
    /// scores have no embedding rows and RotatE phases are never dropped.
    pub fn prepare_with_dropout<R: Rng + ?Sized>(
        &self,
        query: &Query,
        anchor_rate: f64,
        relation_rate: f64,
        rng: &mut R,
    ) -> Result<QueryCtx, ModelError> {
        let masks = match self.family() {
            ModelFamily::Tabular => Masks::default(),
            family => Masks {
                anchor: draw_mask(self.params.entity.cols, anchor_rate, rng),
                relation: if family == ModelFamily::Rotate {
                    None
                } else {
                    draw_mask(self.params.relation.cols, relation_rate, rng)
                },
            },
        };
        self.prepare_inner(query, masks)
    }

    fn prepare_inner(&self, query: &Query, masks: Masks) -> Result<QueryCtx, ModelError> {
        self.check_entity(query.anchor)?;
        if query.rel >= self.num_relations {
            return Err(ModelError::Index {
                kind: "relation",
                id: query.rel,
                size: self.num_relations,
            });
        }
        let rel = query.model_relation(self.num_relations);
        let ne = self.num_entities;
        let (h, r) = if self.family() == ModelFamily::Tabular {
            let row = self.params.entity.row(query.anchor);
            (row[rel * ne..(rel + 1) * ne].to_vec(), Vec::new())
        } else {
            (
                apply_mask(self.params.entity.row(query.anchor), &masks.anchor),
                apply_mask(self.params.relation.row(rel), &masks.relation),
            )
        };
        let q = self.combine(&h, &r);
        Ok(QueryCtx {
            anchor: query.anchor,
            rel,
            h,
            r,
            q,
            masks,
        })
    }

    fn combine(&self, h: &[f64], r: &[f64]) -> Vec<f64> {
        let d = self.spec.dim;
        match self.family() {
            ModelFamily::Tabular => h.to_vec(),
            ModelFamily::Transe => h.iter().zip(r).map(|(a, b)| a + b).collect(),
            ModelFamily::Distmult => h.iter().zip(r).map(|(a, b)| a * b).collect(),
            ModelFamily::Complex => {
                let k = d / 2;
                let mut q = vec![0.0; d];
                for j in 0..k {
                    let (hr, hi, rr, ri) = (h[j], h[k + j], r[j], r[k + j]);
                    q[j] = hr * rr - hi * ri;
                    q[k + j] = hr * ri + hi * rr;
                }
                q
            }
            ModelFamily::Rescal => {
                let mut q = vec![0.0; d];
                for (i, &hi) in h.iter().enumerate() {
                    let m = &r[i * d..(i + 1) * d];
                    q.iter_mut().zip(m).for_each(|(qj, &mij)| *qj += hi * mij);
                }
                q
            }
            ModelFamily::Rotate => {
                let k = d / 2;
                let mut q = vec![0.0; d];
                for j in 0..k {
                    let (c, s) = (r[j].cos(), r[j].sin());
                    q[j] = h[j] * c - h[k + j] * s;
                    q[k + j] = h[j] * s + h[k + j] * c;
                }
                q
            }
        }
    }

    fn score_one(&self, ctx: &QueryCtx, y: EntityId) -> f64 {
        if self.family() == ModelFamily::Tabular {
            return ctx.q[y];
        }
        let t = self.params.entity.row(y);
        match self.family() {
            ModelFamily::Transe => {
                -ctx.q.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            }
            ModelFamily::Rotate => {
                let k = self.spec.dim / 2;
                -(0..k)
                    .map(|j| (ctx.q[j] - t[j]).hypot(ctx.q[k + j] - t[k + j]))
                    .sum::<f64>()
            }
            _ => ctx.q.iter().zip(t).map(|(a, b)| a * b).sum(),
        }
    }

    /// Scores of every entity as the answer to the prepared query.
    pub fn score_ctx(&self, ctx: &QueryCtx) -> Vec<f64> {
        (0..self.num_entities).map(|y| self.score_one(ctx, y)).collect()
    }

    /// Scores of the given candidates.
    pub fn score_ctx_candidates(&self, ctx: &QueryCtx, candidates: &[EntityId]) -> Result<Vec<f64>, ModelError> {
        candidates
            .iter()
            .map(|&y| {
                self.check_entity(y)?;
                Ok(self.score_one(ctx, y))
            })
            .collect()
    }

    pub fn score_all(&self, query: &Query) -> Result<Vec<f64>, ModelError> {
        Ok(self.score_ctx(&self.prepare(query)?))
    }

    pub fn score_candidates(&self, query: &Query, candidates: &[EntityId]) -> Result<Vec<f64>, ModelError> {
        self.score_ctx_candidates(&self.prepare(query)?, candidates)
    }

    /// Adds the gradient of `Σ_y w_y f(x, y)` into `buf`.
    pub fn grad_accumulate(
        &self,
        query: &Query,
        weights: &[(EntityId, f64)],
        buf: &mut GradBuffer,
    ) -> Result<(), ModelError> {
        let ctx = self.prepare(query)?;
        self.grad_ctx(&ctx, weights, buf)
    }

    /// Backward pass for a prepared query.
    pub fn grad_ctx(
        &self,
        ctx: &QueryCtx,
        weights: &[(EntityId, f64)],
        buf: &mut GradBuffer,
    ) -> Result<(), ModelError> {
        if buf.entity.rows != self.params.entity.rows
            || buf.entity.cols != self.params.entity.cols
            || buf.relation.rows != self.params.relation.rows
            || buf.relation.cols != self.params.relation.cols
        {
            return Err(ModelError::Shape("gradient buffer does not match parameters".into()));
        }
        for &(y, _) in weights {
            self.check_entity(y)?;
        }
        let ne = self.num_entities;
        if self.family() == ModelFamily::Tabular {
            let row = buf.entity_row_mut(ctx.anchor);
            for &(y, w) in weights {
                row[ctx.rel * ne + y] += w;
            }
            return Ok(());
        }
        let d = self.spec.dim;
        let k = d / 2;
        let q = &ctx.q;
        let mut dq = vec![0.0; d];
        for &(y, w) in weights {
            if w == 0.0 {
                continue;
            }
            let t = self.params.entity.row(y);
            let dt = buf.entity_row_mut(y);
            match self.family() {
                ModelFamily::Transe => {
                    let n = q.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    if n > 0.0 {
                        for i in 0..d {
                            let u = (q[i] - t[i]) / n;
                            dq[i] -= w * u;
                            dt[i] += w * u;
                        }
                    }
                }
                ModelFamily::Rotate => {
                    for j in 0..k {
                        let (a, b) = (q[j] - t[j], q[k + j] - t[k + j]);
                        let m = a.hypot(b);
                        if m > 0.0 {
                            dq[j] -= w * a / m;
                            dq[k + j] -= w * b / m;
                            dt[j] += w * a / m;
                            dt[k + j] += w * b / m;
                        }
                    }
                }
                _ => {
                    for i in 0..d {
                        dq[i] += w * t[i];
                        dt[i] += w * q[i];
                    }
                }
            }
        }
        let (h, r) = (&ctx.h, &ctx.r);
        let mut dh = vec![0.0; d];
        let mut dr = vec![0.0; self.params.relation.cols];
        match self.family() {
            ModelFamily::Transe => {
                dh.copy_from_slice(&dq);
                dr.copy_from_slice(&dq);
            }
            ModelFamily::Distmult => {
                for i in 0..d {
                    dh[i] = dq[i] * r[i];
                    dr[i] = dq[i] * h[i];
                }
            }
            ModelFamily::Complex => {
                for j in 0..k {
                    let (hr, hi, rr, ri) = (h[j], h[k + j], r[j], r[k + j]);
                    let (gr, gi) = (dq[j], dq[k + j]);
                    dh[j] = gr * rr + gi * ri;
                    dh[k + j] = -gr * ri + gi * rr;
                    dr[j] = gr * hr + gi * hi;
                    dr[k + j] = -gr * hi + gi * hr;
                }
            }
            ModelFamily::Rescal => {
                for i in 0..d {
                    let m = &r[i * d..(i + 1) * d];
                    dh[i] = m.iter().zip(&dq).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[i * d + j] = h[i] * dq[j];
                    }
                }
            }
            ModelFamily::Rotate => {
                for j in 0..k {
                    let (c, s) = (r[j].cos(), r[j].sin());
                    let (gr, gi) = (dq[j], dq[k + j]);
                    dh[j] = gr * c + gi * s;
                    dh[k + j] = -gr * s + gi * c;
                    dr[j] = -gr * q[k + j] + gi * q[j];
                }
            }
            ModelFamily::Tabular => unreachable!(),
        }
        if let Some(m) = &ctx.masks.anchor {
            dh.iter_mut().zip(m).for_each(|(g, s)| *g *= s);
        }
        if let Some(m) = &ctx.masks.relation {
            dr.iter_mut().zip(m).for_each(|(g, s)| *g *= s);
        }
        buf.entity_row_mut(ctx.anchor)
            .iter_mut()
            .zip(&dh)
            .for_each(|(a, b)| *a += b);
        buf.relation_row_mut(ctx.rel)
            .iter_mut()
            .zip(&dr)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Moduli `|e^{iφ_j}|` of a RotatE relation row (always 1 by construction).
    pub fn relation_modulus(&self, rel: usize) -> Vec<f64> {
        match self.family() {
            ModelFamily::Rotate => self
                .params
                .relation
                .row(rel)
                .iter()
                .map(|p| p.cos().hypot(p.sin()))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Writes the checkpoint format described in the README.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), ModelError> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&self.spec.family.code().to_le_bytes())?;
        for v in [
            self.spec.dim,
            self.num_entities,
            self.num_relations,
        ] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        out.write_all(&self.spec.seed.to_le_bytes())?;
        for t in [&self.params.entity, &self.params.relation] {
            out.write_all(&(t.rows as u64).to_le_bytes())?;
            out.write_all(&(t.cols as u64).to_le_bytes())?;
        }
        for t in [&self.params.entity, &self.params.relation] {
            for v in &t.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut input)
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, ModelError> {
        let header = CheckpointHeader::read_from(input)?;
        let spec = ModelSpec::new(header.family, header.dim, header.seed);
        spec.validate()?;
        let expect_e = (header.num_entities, spec.entity_cols(header.num_entities, header.num_relations));
        let expect_r = (2 * header.num_relations, spec.relation_cols());
        if header.entity_shape != expect_e || header.relation_shape != expect_r {
            return Err(ModelError::Format(format!(
                "table shapes {:?}/{:?} do not fit the header (expected {expect_e:?}/{expect_r:?})",
                header.entity_shape, header.relation_shape
            )));
        }
        let mut read_table = |(rows, cols): (usize, usize)| -> Result<Table, ModelError> {
            let mut t = Table::zeros(rows, cols);
            let mut buf = [0u8; 8];
            for v in t.data.iter_mut() {
                input
                    .read_exact(&mut buf)
                    .map_err(|e| ModelError::Format(format!("truncated table data: {e}")))?;
                *v = f64::from_le_bytes(buf);
            }
            Ok(t)
        };
        let entity = read_table(expect_e)?;
        let relation = read_table(expect_r)?;
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(ModelError::Format("trailing bytes after tables".into()));
        }
        Ok(Self {
            spec,
            num_entities: header.num_entities,
            num_relations: header.num_relations,
            params: ParamStore { entity, relation },
        })
    }
}

fn apply_mask(row: &[f64], mask: &Option<Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => row.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => row.to_vec(),
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BKGECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The fixed-size prefix of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub family: ModelFamily,
    pub dim: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub seed: u64,
    pub entity_shape: (usize, usize),
    pub relation_shape: (usize, usize),
}

impl CheckpointHeader {
    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| ModelError::Format("file too short for a checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |input: &mut R| -> Result<u32, ModelError> {
            input
                .read_exact(&mut u32buf)
                .map_err(|e| ModelError::Format(format!("truncated header: {e}")))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(input)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let code = read_u32(input)?;
        let family = ModelFamily::from_code(code)
            .ok_or_else(|| ModelError::Format(format!("unknown family code {code}")))?;
        let mut read_u64 = || -> Result<u64, ModelError> {
            let mut b = [0u8; 8];
            input
                .read_exact(&mut b)
                .map_err(|e| ModelError::Format(format!("truncated header: {e}")))?;
            Ok(u64::from_le_bytes(b))
        };
        let dim = read_u64()? as usize;
        let num_entities = read_u64()? as usize;
        let num_relations = read_u64()? as usize;
        let seed = read_u64()?;
        let entity_shape = (read_u64()? as usize, read_u64()? as usize);
        let relation_shape = (read_u64()? as usize, read_u64()? as usize);
        Ok(Self {
            family,
            dim,
            num_entities,
            num_relations,
            seed,
            entity_shape,
            relation_shape,
        })
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::read_from(&mut std::fs::File::open(path)?)
    }

    /// Names of header fields that differ from what a run expects.
    pub fn mismatches(&self, spec: &ModelSpec, num_entities: usize, num_relations: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.family != spec.family {
            out.push(format!("family (checkpoint {}, config {})", self.family, spec.family));
        }
        if self.dim != spec.dim {
            out.push(format!("dim (checkpoint {}, config {})", self.dim, spec.dim));
        }
        if self.num_entities != num_entities {
            out.push(format!(
                "num_entities (checkpoint {}, data {num_entities})",
                self.num_entities
            ));
        }
        if self.num_relations != num_relations {
            out.push(format!(
                "num_relations (checkpoint {}, data {num_relations})",
                self.num_relations
            ));
        }
        out
    }
}
