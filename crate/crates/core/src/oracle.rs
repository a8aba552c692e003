//! Closed-form objective distributions and a brute-force certification oracle.
//!
//! Worlds here are small and dense: `p(x)` over a handful of queries and `p_d(y|x)`
//! as full rows. The oracle fits one free score per `(x, y)` by full-batch gradient
//! descent on the exact-expectation loss and compares the resulting distribution
//! against the closed form.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bregman::{expected_divergence_tilde, PsiKind};
use crate::error::{DomainError, OracleError};
use crate::losses::{cross_entropy_to, ns_expected, softmax, softplus, LossFamily, LossOut};
use crate::rng::stream;

/// Largest enumerable world the oracle accepts along either axis.
pub const MAX_WORLD: usize = 16;

fn check_prob(v: &[f64], name: &'static str) -> Result<(), DomainError> {
    if v.is_empty() {
        return Err(DomainError::Empty(name));
    }
    for (i, &p) in v.iter().enumerate() {
        if !(p >= 0.0 && p.is_finite()) {
            return Err(DomainError::OutOfDomain {
                index: i,
                value: p,
                expected: "a probability",
            });
        }
    }
    Ok(())
}

fn check_positive(v: &[f64]) -> Result<(), DomainError> {
    for (i, &p) in v.iter().enumerate() {
        if !(p > 0.0 && p.is_finite()) {
            return Err(DomainError::OutOfDomain {
                index: i,
                value: p,
                expected: "strictly positive noise",
            });
        }
    }
    Ok(())
}

fn same_len(a: &[f64], b: &[f64]) -> Result<(), DomainError> {
    if a.len() != b.len() {
        return Err(DomainError::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Objective distribution of negative sampling: `p_d(y) / p_n(y)` renormalized.
///
/// Labels with `p_d(y) = 0` contribute nothing to the normalizer.
pub fn objective_ns(p_d: &[f64], p_n: &[f64]) -> Result<Vec<f64>, DomainError> {
    same_len(p_d, p_n)?;
    check_prob(p_d, "p_d")?;
    check_positive(p_n)?;
    let ratios: Vec<f64> = p_d.iter().zip(p_n).map(|(&d, &n)| d / n).collect();
    let z: f64 = ratios.iter().sum();
    if z <= 0.0 {
        return Err(DomainError::Empty("p_d has no mass"));
    }
    Ok(ratios.into_iter().map(|r| r / z).collect())
}

/// `T_{x,y} = p_n(y) Σ_i p_d(i) / p_n(i)`.
pub fn transport_coeff(p_d: &[f64], p_n: &[f64], y: usize) -> Result<f64, DomainError> {
    same_len(p_d, p_n)?;
    check_prob(p_d, "p_d")?;
    check_positive(p_n)?;
    if y >= p_d.len() {
        return Err(DomainError::Shape(format!("label {y} out of range {}", p_d.len())));
    }
    let z: f64 = p_d.iter().zip(p_n).map(|(&d, &n)| d / n).sum();
    Ok(p_n[y] * z)
}

/// `(1 - λ) p_d + λ / |Y|`.
pub fn objective_sans_mixture(p_d: &[f64], lambda: f64) -> Result<Vec<f64>, DomainError> {
    check_prob(p_d, "p_d")?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DomainError::Parameter {
            name: "lambda",
            value: lambda,
            range: "[0, 1]",
        });
    }
    let u = lambda / p_d.len() as f64;
    Ok(p_d.iter().map(|&p| (1.0 - lambda) * p + u).collect())
}

/// One step of the self-adversarial fixed-point map: the NS objective with the
/// previous model distribution as noise.
pub fn sans_fixed_point_step(p_d: &[f64], p_prev: &[f64]) -> Result<Vec<f64>, DomainError> {
    objective_ns(p_d, p_prev)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointTrace {
    pub iterates: Vec<Vec<f64>>,
    /// Max-abs change between consecutive iterates.
    pub residuals: Vec<f64>,
}

impl FixedPointTrace {
    /// True when iterates alternate between two points, each within `tol`.
    pub fn is_period_two(&self, tol: f64) -> bool {
        self.iterates.len() >= 3
            && self
                .iterates
                .windows(3)
                .all(|w| max_abs_diff(&w[0], &w[2]) <= tol)
    }
}

/// Applies [`sans_fixed_point_step`] `steps` times starting from `start`.
pub fn sans_fixed_point_trace(
    p_d: &[f64],
    start: &[f64],
    steps: usize,
) -> Result<FixedPointTrace, DomainError> {
    let mut iterates = vec![start.to_vec()];
    let mut residuals = Vec::with_capacity(steps);
    for _ in 0..steps {
        let prev = iterates.last().expect("nonempty");
        let next = sans_fixed_point_step(p_d, prev)?;
        residuals.push(max_abs_diff(prev, &next));
        iterates.push(next);
    }
    Ok(FixedPointTrace { iterates, residuals })
}

/// `log(p(x, y) / (p(x) p(y)))` for a strictly positive joint.
pub fn pmi_from_optimum(joint: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, DomainError> {
    let ny = joint.first().map_or(0, Vec::len);
    if ny == 0 {
        return Err(DomainError::Empty("joint"));
    }
    let mut py = vec![0.0; ny];
    let mut px = Vec::with_capacity(joint.len());
    for (x, row) in joint.iter().enumerate() {
        if row.len() != ny {
            return Err(DomainError::Shape(format!("row {x} has {} columns", row.len())));
        }
        for (y, &p) in row.iter().enumerate() {
            if !(p > 0.0) {
                return Err(DomainError::OutOfDomain {
                    index: x * ny + y,
                    value: p,
                    expected: "a strictly positive joint cell",
                });
            }
            py[y] += p;
        }
        px.push(row.iter().sum::<f64>());
    }
    Ok(joint
        .iter()
        .zip(&px)
        .map(|(row, &a)| row.iter().zip(&py).map(|(&p, &b)| (p / (a * b)).ln()).collect())
        .collect())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs_diff_table(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| max_abs_diff(x, y)).fold(0.0, f64::max)
}

/// A dense enumerable world: `p(x)` and `p_d(y|x)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct World {
    pub p_x: Vec<f64>,
    pub p_d: Vec<Vec<f64>>,
}

impl World {
    pub fn new(p_x: Vec<f64>, p_d: Vec<Vec<f64>>) -> Result<Self, DomainError> {
        if p_x.len() != p_d.len() {
            return Err(DomainError::Shape(format!(
                "{} query weights for {} rows",
                p_x.len(),
                p_d.len()
            )));
        }
        check_prob(&p_x, "p_x")?;
        let ny = p_d.first().map_or(0, Vec::len);
        for row in &p_d {
            check_prob(row, "p_d row")?;
            if row.len() != ny {
                return Err(DomainError::Shape("ragged p_d rows".into()));
            }
        }
        Ok(Self { p_x, p_d })
    }

    /// Splits a joint table into `p(x)` and `p(y|x)`.
    pub fn from_joint(joint: &[Vec<f64>]) -> Result<Self, DomainError> {
        let p_x: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
        let p_d = joint
            .iter()
            .zip(&p_x)
            .map(|(r, &s)| r.iter().map(|&p| p / s).collect())
            .collect();
        Self::new(p_x, p_d)
    }

    /// Random strictly positive world.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, nx: usize, ny: usize) -> Self {
        let p_x = random_simplex(rng, nx);
        let p_d = (0..nx).map(|_| random_simplex(rng, ny)).collect();
        Self { p_x, p_d }
    }

    pub fn num_x(&self) -> usize {
        self.p_x.len()
    }

    pub fn num_y(&self) -> usize {
        self.p_d.first().map_or(0, Vec::len)
    }

    pub fn joint(&self) -> Vec<Vec<f64>> {
        self.p_d
            .iter()
            .zip(&self.p_x)
            .map(|(r, &a)| r.iter().map(|&p| a * p).collect())
            .collect()
    }

    /// Marginal `p_d(y)`.
    pub fn unigram(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_y()];
        for row in self.joint() {
            out.iter_mut().zip(row).for_each(|(o, p)| *o += p);
        }
        out
    }
}

/// A strictly positive probability vector with entries bounded away from zero.
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// One analytic row of the objective table, with the parameters it needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ObjectiveSpec {
    NsUni { nu: usize },
    NsFreq { nu: usize, noise: Vec<Vec<f64>> },
    Sans { nu: usize, lambda: f64 },
    Sce,
    SceBc { noise: Vec<Vec<f64>> },
    SceLs { lambda: f64 },
}

impl ObjectiveSpec {
    pub fn family(&self) -> LossFamily {
        match self {
            ObjectiveSpec::NsUni { .. } => LossFamily::NsUni,
            ObjectiveSpec::NsFreq { .. } => LossFamily::NsFreq,
            ObjectiveSpec::Sans { .. } => LossFamily::Sans,
            ObjectiveSpec::Sce => LossFamily::Sce,
            ObjectiveSpec::SceBc { .. } => LossFamily::SceBc,
            ObjectiveSpec::SceLs { .. } => LossFamily::SceLs,
        }
    }

    fn noise_row(&self, world: &World, x: usize) -> Option<Vec<f64>> {
        match self {
            ObjectiveSpec::NsFreq { noise, .. } | ObjectiveSpec::SceBc { noise } => {
                Some(noise[x].clone())
            }
            ObjectiveSpec::NsUni { .. } => Some(vec![1.0 / world.num_y() as f64; world.num_y()]),
            _ => None,
        }
    }

    fn validate(&self, world: &World) -> Result<(), OracleError> {
        if world.num_x() > MAX_WORLD || world.num_y() > MAX_WORLD {
            return Err(OracleError::TooLarge(format!(
                "{}x{} exceeds {MAX_WORLD}x{MAX_WORLD}",
                world.num_x(),
                world.num_y()
            )));
        }
        match self {
            ObjectiveSpec::NsUni { nu } | ObjectiveSpec::NsFreq { nu, .. } | ObjectiveSpec::Sans { nu, .. }
                if *nu < 1 =>
            {
                return Err(OracleError::Spec("nu must be >= 1".into()))
            }
            ObjectiveSpec::Sans { lambda, .. } | ObjectiveSpec::SceLs { lambda }
                if !(0.0..=1.0).contains(lambda) =>
            {
                return Err(OracleError::Spec(format!("lambda {lambda} outside [0, 1]")))
            }
            _ => {}
        }
        if let ObjectiveSpec::NsFreq { noise, .. } | ObjectiveSpec::SceBc { noise } = self {
            if noise.len() != world.num_x() {
                return Err(OracleError::Spec(format!(
                    "{} noise rows for {} queries",
                    noise.len(),
                    world.num_x()
                )));
            }
            for row in noise {
                same_len(row, &world.p_d[0])?;
                check_prob(row, "noise row")?;
                check_positive(row)?;
            }
        }
        Ok(())
    }
}

/// Closed-form objective distribution, or `None` where only an approximation exists.
pub fn closed_form(spec: &ObjectiveSpec, world: &World) -> Result<Option<Vec<Vec<f64>>>, OracleError> {
    spec.validate(world)?;
    let rows = match spec {
        ObjectiveSpec::Sans { .. } => return Ok(None),
        ObjectiveSpec::Sce => world.p_d.clone(),
        ObjectiveSpec::SceLs { lambda } => world
            .p_d
            .iter()
            .map(|r| objective_sans_mixture(r, *lambda))
            .collect::<Result<_, _>>()?,
        ObjectiveSpec::NsUni { .. } | ObjectiveSpec::NsFreq { .. } | ObjectiveSpec::SceBc { .. } => world
            .p_d
            .iter()
            .enumerate()
            .map(|(x, r)| objective_ns(r, &spec.noise_row(world, x).expect("noise")))
            .collect::<Result<_, _>>()?,
    };
    Ok(Some(rows))
}

/// Exact-expectation loss of one query row, already weighted by `p(x)`.
pub fn exact_row_loss(
    spec: &ObjectiveSpec,
    world: &World,
    x: usize,
    scores: &[f64],
) -> Result<LossOut, OracleError> {
    let p_d = &world.p_d[x];
    let mut out = match spec {
        ObjectiveSpec::Sce => cross_entropy_to(scores, p_d),
        ObjectiveSpec::SceLs { lambda } => {
            cross_entropy_to(scores, &objective_sans_mixture(p_d, *lambda)?)
        }
        ObjectiveSpec::SceBc { noise } => {
            let target = p_d
                .iter()
                .enumerate()
                .map(|(y, &p)| Ok(p / transport_coeff(p_d, &noise[x], y)?))
                .collect::<Result<Vec<f64>, DomainError>>()?;
            cross_entropy_to(scores, &target)
        }
        ObjectiveSpec::NsUni { nu } | ObjectiveSpec::NsFreq { nu, .. } => {
            let noise = spec.noise_row(world, x).expect("noise");
            ns_expected(scores, p_d, &noise, *nu as f64)
                .map_err(|e| OracleError::Spec(e.to_string()))?
        }
        ObjectiveSpec::Sans { .. } => {
            return Err(OracleError::Spec(
                "sans has no fixed exact-expectation loss to minimize".into(),
            ))
        }
    };
    let w = world.p_x[x];
    out.value *= w;
    out.grad.iter_mut().for_each(|(_, g)| *g *= w);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MinimizeOptions {
    /// Stop once the gradient max-norm falls below this.
    pub tol: f64,
    pub max_steps: usize,
    pub initial_lr: f64,
    /// Half-width of the uniform score initialization.
    pub init_scale: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_steps: 1_000_000,
            initial_lr: 1.0,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Minimum {
    pub scores: Vec<Vec<f64>>,
    pub loss: f64,
    pub steps: usize,
    pub grad_norm: f64,
    /// Loss after every accepted step, starting at the initial point.
    #[serde(skip)]
    pub loss_trace: Vec<f64>,
}

type RowLoss<'a> = dyn Fn(usize, &[f64]) -> Result<LossOut, OracleError> + Sync + 'a;

fn evaluate(
    scores: &[Vec<f64>],
    row_loss: &RowLoss<'_>,
) -> Result<(f64, Vec<Vec<f64>>), OracleError> {
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (x, s) in scores.iter().enumerate() {
        let out = row_loss(x, s)?;
        total += out.value;
        let mut g = vec![0.0; s.len()];
        for (y, v) in out.grad {
            g[y] += v;
        }
        grad.push(g);
    }
    Ok((total, grad))
}

fn max_norm(g: &[Vec<f64>]) -> f64 {
    g.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Full-batch gradient descent over a free score table.
///
/// A step is rejected and the rate halved whenever the loss would rise; after an
/// accepted step the rate grows by 25%. Near the optimum, loss differences sink
/// below rounding, so a step whose loss rise is within 1e-14 relative is accepted
/// only if it also shrinks the gradient.
pub fn minimize_tabular(
    rows: usize,
    cols: usize,
    seed: u64,
    opts: &MinimizeOptions,
    row_loss: &RowLoss<'_>,
) -> Result<Minimum, OracleError> {
    let mut rng = stream(seed, &[0x0a11]);
    let mut scores: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| rng.random_range(-opts.init_scale..=opts.init_scale))
                .collect()
        })
        .collect();
    let (mut loss, mut grad) = evaluate(&scores, row_loss)?;
    let mut gnorm = max_norm(&grad);
    let mut lr = opts.initial_lr;
    let mut loss_trace = vec![loss];
    let mut steps = 0;
    while gnorm >= opts.tol {
        if steps >= opts.max_steps || lr < 1e-300 {
            return Err(OracleError::NotConverged {
                steps,
                grad_norm: gnorm,
            });
        }
        steps += 1;
        let trial: Vec<Vec<f64>> = scores
            .iter()
            .zip(&grad)
            .map(|(s, g)| s.iter().zip(g).map(|(a, b)| a - lr * b).collect())
            .collect();
        let (tl, tg) = evaluate(&trial, row_loss)?;
        let tn = max_norm(&tg);
        let flat = tl - loss <= 1e-14 * loss.abs().max(1.0) && tn < gnorm;
        if tl.is_finite() && (tl <= loss || flat) {
            scores = trial;
            loss = tl;
            grad = tg;
            gnorm = tn;
            loss_trace.push(loss);
            lr *= 1.25;
        } else {
            lr *= 0.5;
        }
    }
    Ok(Minimum {
        scores,
        loss,
        steps,
        grad_norm: gnorm,
        loss_trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRun {
    /// Softmax of the converged scores, per query.
    pub dist: Vec<Vec<f64>>,
    pub minimum: Minimum,
}

/// Fits a tabular model to the exact-expectation loss of `spec` on `world`.
pub fn brute_force_optimum(
    spec: &ObjectiveSpec,
    world: &World,
    seed: u64,
) -> Result<OracleRun, OracleError> {
    brute_force_optimum_with(spec, world, seed, &MinimizeOptions::default())
}

pub fn brute_force_optimum_with(
    spec: &ObjectiveSpec,
    world: &World,
    seed: u64,
    opts: &MinimizeOptions,
) -> Result<OracleRun, OracleError> {
    spec.validate(world)?;
    let row_loss = |x: usize, s: &[f64]| exact_row_loss(spec, world, x, s);
    let minimum = minimize_tabular(world.num_x(), world.num_y(), seed, opts, &row_loss)?;
    let dist = minimum.scores.iter().map(|s| softmax(s)).collect();
    Ok(OracleRun { dist, minimum })
}

/// The exact-expectation NS loss and its Bregman reconstruction.
///
/// `B̃` uses the negative-sampling generator with `f = ν p_n / p_d` and
/// `g = exp(-score)`, weighted by the joint `p_d(x, y)`.
pub fn ns_bregman_identity(
    world: &World,
    noise: &[Vec<f64>],
    scores: &[Vec<f64>],
    nu: usize,
) -> Result<(f64, f64), OracleError> {
    if noise.len() != world.num_x() || scores.len() != world.num_x() {
        return Err(DomainError::Shape("noise and score tables must match the world".into()).into());
    }
    let nu = nu as f64;
    let mut loss = 0.0;
    let mut f = Vec::with_capacity(world.num_x());
    let mut g = Vec::with_capacity(world.num_x());
    for x in 0..world.num_x() {
        let (pd, pn, s) = (&world.p_d[x], &noise[x], &scores[x]);
        same_len(pd, pn)?;
        same_len(pd, s)?;
        loss += world.p_x[x]
            * pd.iter()
                .zip(pn)
                .zip(s)
                .map(|((&a, &b), &t)| a * softplus(-t) + nu * b * softplus(t))
                .sum::<f64>();
        f.push(pd.iter().zip(pn).map(|(&a, &b)| nu * b / a).collect::<Vec<_>>());
        g.push(s.iter().map(|&t| (-t).exp()).collect::<Vec<_>>());
    }
    let btilde = expected_divergence_tilde(PsiKind::NsBinary, &f, &g, &world.joint())?;
    Ok((loss, btilde))
}

/// Options for [`certify_row`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertifyOptions {
    pub worlds: usize,
    pub max_x: usize,
    pub max_y: usize,
    pub nu: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub minimize: MinimizeOptions,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            worlds: 20,
            max_x: 8,
            max_y: 8,
            nu: 1,
            seed: 0,
            tolerance: 1e-3,
            minimize: MinimizeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowReport {
    pub row: String,
    pub worlds: usize,
    pub max_abs_dev: f64,
    pub max_steps: usize,
    pub max_grad_norm: f64,
    /// `max |G p_d - ν p_n|` at the optimum (negative-sampling rows only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stationarity: Option<f64>,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Draws the spec parameters for one random world of a row.
pub fn random_spec<R: Rng + ?Sized>(
    family: LossFamily,
    world: &World,
    nu: usize,
    rng: &mut R,
) -> ObjectiveSpec {
    let noise = |rng: &mut R| -> Vec<Vec<f64>> {
        (0..world.num_x()).map(|_| random_simplex(rng, world.num_y())).collect()
    };
    match family {
        LossFamily::NsUni => ObjectiveSpec::NsUni { nu },
        LossFamily::NsFreq => ObjectiveSpec::NsFreq { nu, noise: noise(rng) },
        LossFamily::Sce => ObjectiveSpec::Sce,
        LossFamily::SceBc => ObjectiveSpec::SceBc { noise: noise(rng) },
        LossFamily::SceLs => ObjectiveSpec::SceLs {
            lambda: rng.random_range(0.0..1.0),
        },
        LossFamily::Sans => ObjectiveSpec::Sans {
            nu,
            lambda: rng.random_range(0.0..1.0),
        },
    }
}

/// Rows that carry an analytic objective.
pub const ANALYTIC_ROWS: [LossFamily; 5] = [
    LossFamily::NsUni,
    LossFamily::NsFreq,
    LossFamily::Sce,
    LossFamily::SceBc,
    LossFamily::SceLs,
];

/// Runs the oracle on `opts.worlds` random worlds and compares with the closed form.
pub fn certify_row(family: LossFamily, opts: &CertifyOptions) -> RowReport {
    let tag = ANALYTIC_ROWS.iter().position(|&f| f == family).unwrap_or(99) as u64;
    let results: Vec<Result<(f64, usize, f64, Option<f64>), OracleError>> = (0..opts.worlds)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(opts.seed, &[tag, i as u64]);
            let nx = rng.random_range(2..=opts.max_x.max(2));
            let ny = rng.random_range(2..=opts.max_y.max(2));
            let world = World::random(&mut rng, nx, ny);
            let spec = random_spec(family, &world, opts.nu, &mut rng);
            let expected = closed_form(&spec, &world)?
                .ok_or_else(|| OracleError::Spec(format!("{} has no closed form", family.name())))?;
            let run = brute_force_optimum_with(&spec, &world, rng.random(), &opts.minimize)?;
            let stationarity = match &spec {
                ObjectiveSpec::NsUni { nu } | ObjectiveSpec::NsFreq { nu, .. } => {
                    let mut worst = 0.0f64;
                    for x in 0..nx {
                        let pn = spec.noise_row(&world, x).expect("noise");
                        for y in 0..ny {
                            let g = (-run.minimum.scores[x][y]).exp();
                            worst = worst.max((g * world.p_d[x][y] - *nu as f64 * pn[y]).abs());
                        }
                    }
                    Some(worst)
                }
                _ => None,
            };
            Ok((
                max_abs_diff_table(&run.dist, &expected),
                run.minimum.steps,
                run.minimum.grad_norm,
                stationarity,
            ))
        })
        .collect();
    let mut report = RowReport {
        row: family.name().to_string(),
        worlds: opts.worlds,
        max_abs_dev: 0.0,
        max_steps: 0,
        max_grad_norm: 0.0,
        stationarity: None,
        passed: true,
        error: None,
    };
    for r in results {
        match r {
            Ok((dev, steps, gn, st)) => {
                report.max_abs_dev = report.max_abs_dev.max(dev);
                report.max_steps = report.max_steps.max(steps);
                report.max_grad_norm = report.max_grad_norm.max(gn);
                if let Some(st) = st {
                    report.stationarity = Some(report.stationarity.unwrap_or(0.0).max(st));
                }
            }
            Err(e) => {
                report.passed = false;
                report.error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    report.passed &= report.max_abs_dev < opts.tolerance
        && report.stationarity.is_none_or(|s| s < opts.tolerance);
    report
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SansReport {
    /// Worst `|step(p_d, uniform) - p_d|`.
    pub uniform_to_pd: f64,
    /// Worst `|step(p_d, p_d) - uniform|`.
    pub pd_to_uniform: f64,
    pub period_two: bool,
    pub cases: usize,
    pub passed: bool,
}

/// Boundary checks of the self-adversarial fixed-point map on random targets.
pub fn certify_sans(cases: usize, max_y: usize, seed: u64) -> Result<SansReport, OracleError> {
    let mut uniform_to_pd = 0.0f64;
    let mut pd_to_uniform = 0.0f64;
    let mut period_two = true;
    let mut targets = vec![vec![0.8, 0.2]];
    for i in 0..cases.saturating_sub(1) {
        let mut rng = stream(seed, &[0x5a45, i as u64]);
        let ny = rng.random_range(2..=max_y.max(2));
        targets.push(random_simplex(&mut rng, ny));
    }
    for p_d in &targets {
        let u = vec![1.0 / p_d.len() as f64; p_d.len()];
        uniform_to_pd = uniform_to_pd.max(max_abs_diff(&sans_fixed_point_step(p_d, &u)?, p_d));
        pd_to_uniform = pd_to_uniform.max(max_abs_diff(&sans_fixed_point_step(p_d, p_d)?, &u));
        let trace = sans_fixed_point_trace(p_d, &u, 10)?;
        period_two &= trace.is_period_two(1e-12) && trace.residuals.iter().all(|&r| r > 1e-12);
    }
    Ok(SansReport {
        uniform_to_pd,
        pd_to_uniform,
        period_two,
        cases: targets.len(),
        passed: uniform_to_pd < 1e-12 && pd_to_uniform < 1e-12 && period_two,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn objective_ns_examples() {
        let pd = [0.8, 0.2];
        assert_eq!(objective_ns(&pd, &[0.5, 0.5]).unwrap(), vec![0.8, 0.2]);
        let same = objective_ns(&pd, &pd).unwrap();
        assert_abs_diff_eq!(same[0], 0.5, epsilon = 1e-15);
        let skew = objective_ns(&pd, &[0.2, 0.8]).unwrap();
        // ratios 4 and 1/4
        assert_abs_diff_eq!(skew[0], 4.0 / 4.25, epsilon = 1e-15);
        assert_abs_diff_eq!(skew[0], 0.941176, epsilon = 1e-6);
        assert_abs_diff_eq!(skew[1], 0.058824, epsilon = 1e-6);
        assert!(objective_ns(&pd, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn zero_support_labels_drop_out() {
        let out = objective_ns(&[0.5, 0.0, 0.5], &[0.25, 0.5, 0.25]).unwrap();
        assert_eq!(out, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn transport_examples() {
        let t = transport_coeff(&[0.8, 0.2], &[0.2, 0.8], 0).unwrap();
        assert_abs_diff_eq!(t, 0.85, epsilon = 1e-15);
        assert_abs_diff_eq!(0.8 / t, 0.941176, epsilon = 1e-6);
        for y in 0..3 {
            assert_abs_diff_eq!(
                transport_coeff(&[0.1, 0.3, 0.6], &[1.0 / 3.0; 3], y).unwrap(),
                1.0,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn mixture_examples() {
        let pd = [1.0, 0.0, 0.0];
        assert_eq!(objective_sans_mixture(&pd, 0.0).unwrap(), pd.to_vec());
        let u = objective_sans_mixture(&pd, 1.0).unwrap();
        u.iter().for_each(|&v| assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15));
        let m = objective_sans_mixture(&pd, 0.3).unwrap();
        assert_abs_diff_eq!(m[0], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(m[1], 0.1, epsilon = 1e-15);
        assert!(objective_sans_mixture(&pd, 1.5).is_err());
    }

    #[test]
    fn sans_boundaries_and_cycle() {
        let pd = [0.8, 0.2];
        let u = [0.5, 0.5];
        assert!(max_abs_diff(&sans_fixed_point_step(&pd, &u).unwrap(), &pd) < 1e-12);
        assert!(max_abs_diff(&sans_fixed_point_step(&pd, &pd).unwrap(), &u) < 1e-12);
        let trace = sans_fixed_point_trace(&pd, &u, 10).unwrap();
        assert_eq!(trace.iterates.len(), 11);
        assert!(trace.is_period_two(1e-12));
        for (k, it) in trace.iterates.iter().enumerate() {
            let want: &[f64] = if k % 2 == 0 { &u } else { &pd };
            assert!(max_abs_diff(it, want) < 1e-12);
        }
        // the uniform target is a fixed point
        let flat = sans_fixed_point_trace(&u, &u, 4).unwrap();
        assert!(flat.residuals.iter().all(|&r| r < 1e-15));
    }

    #[test]
    fn pmi_examples() {
        let m = pmi_from_optimum(&[vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
        assert_abs_diff_eq!(m[0][0], 1.6f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(m[0][0], 0.470004, epsilon = 1e-6);
        let indep = pmi_from_optimum(&[vec![0.06, 0.14], vec![0.24, 0.56]]).unwrap();
        indep.iter().flatten().for_each(|&v| assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12));
        assert!(pmi_from_optimum(&[vec![0.5, 0.0], vec![0.25, 0.25]]).is_err());
    }

    #[test]
    fn oracle_two_label_examples() {
        let world = World::new(vec![1.0], vec![vec![0.8, 0.2]]).unwrap();
        for spec in [ObjectiveSpec::Sce, ObjectiveSpec::NsUni { nu: 1 }] {
            let run = brute_force_optimum(&spec, &world, 1).unwrap();
            assert!(max_abs_diff(&run.dist[0], &[0.8, 0.2]) < 1e-6, "{spec:?}");
        }
        let spec = ObjectiveSpec::NsFreq {
            nu: 1,
            noise: vec![vec![0.2, 0.8]],
        };
        let run = brute_force_optimum(&spec, &world, 1).unwrap();
        assert!(max_abs_diff(&run.dist[0], &[0.941176, 0.058824]) < 1e-5);
    }

    #[test]
    fn oracle_loss_never_increases() {
        let world = World::random(&mut stream(5, &[]), 4, 5);
        let run = brute_force_optimum(&ObjectiveSpec::NsUni { nu: 3 }, &world, 2).unwrap();
        for w in run.minimum.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn oracle_reports_non_convergence() {
        let world = World::random(&mut stream(5, &[]), 3, 3);
        let opts = MinimizeOptions {
            max_steps: 3,
            ..Default::default()
        };
        let err = brute_force_optimum_with(&ObjectiveSpec::Sce, &world, 0, &opts).unwrap_err();
        assert!(matches!(err, OracleError::NotConverged { steps: 3, .. }));
    }

    #[test]
    fn oracle_rejects_large_worlds_and_sans() {
        let world = World::random(&mut stream(5, &[]), 17, 2);
        assert!(matches!(
            brute_force_optimum(&ObjectiveSpec::Sce, &world, 0),
            Err(OracleError::TooLarge(_))
        ));
        let world = World::random(&mut stream(5, &[]), 2, 2);
        assert!(brute_force_optimum(&ObjectiveSpec::Sans { nu: 1, lambda: 0.5 }, &world, 0).is_err());
    }

    #[test]
    fn bregman_identity_holds_at_nu_one_and_five() {
        let mut rng = stream(9, &[]);
        for nu in [1, 5] {
            let world = World::random(&mut rng, 3, 4);
            let noise: Vec<Vec<f64>> = (0..3).map(|_| random_simplex(&mut rng, 4)).collect();
            let scores: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let (l, b) = ns_bregman_identity(&world, &noise, &scores, nu).unwrap();
            assert!((l - b).abs() < 1e-10, "nu={nu}: {l} vs {b}");
        }
    }

    #[test]
    fn bregman_identity_minimized_at_stationary_scores() {
        let mut rng = stream(10, &[]);
        let nu = 2;
        let world = World::random(&mut rng, 3, 4);
        let noise: Vec<Vec<f64>> = (0..3).map(|_| random_simplex(&mut rng, 4)).collect();
        // G = ν p_n / p_d  ⇔  score = log(p_d / (ν p_n))
        let best: Vec<Vec<f64>> = (0..3)
            .map(|x| {
                (0..4)
                    .map(|y| (world.p_d[x][y] / (nu as f64 * noise[x][y])).ln())
                    .collect()
            })
            .collect();
        let (_, b0) = ns_bregman_identity(&world, &noise, &best, nu).unwrap();
        for _ in 0..10_000 {
            let pert: Vec<Vec<f64>> = best
                .iter()
                .map(|r| r.iter().map(|&s| s + rng.random_range(-0.5..0.5)).collect())
                .collect();
            let (_, b) = ns_bregman_identity(&world, &noise, &pert, nu).unwrap();
            assert!(b >= b0 - 1e-12);
        }
    }

    #[test]
    fn world_from_joint() {
        let w = World::from_joint(&[vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
        assert_eq!(w.p_x, vec![0.5, 0.5]);
        assert_eq!(w.p_d[0], vec![0.8, 0.2]);
        assert_eq!(w.unigram(), vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn transport_matches_objective(raw_d in prop::collection::vec(0.01f64..1.0, 2..10), seed in any::<u64>()) {
            let z: f64 = raw_d.iter().sum();
            let pd: Vec<f64> = raw_d.iter().map(|v| v / z).collect();
            let pn = random_simplex(&mut stream(seed, &[]), pd.len());
            let obj = objective_ns(&pd, &pn).unwrap();
            prop_assert!((obj.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for y in 0..pd.len() {
                let t = transport_coeff(&pd, &pn, y).unwrap();
                prop_assert!((pd[y] / t - obj[y]).abs() < 1e-12);
            }
        }

        #[test]
        fn objective_is_independent_of_nu(seed in any::<u64>()) {
            // ν only rescales the noise; the normalized ratio is unchanged
            let mut rng = stream(seed, &[]);
            let pd = random_simplex(&mut rng, 5);
            let pn = random_simplex(&mut rng, 5);
            let base = objective_ns(&pd, &pn).unwrap();
            for nu in [2.0, 8.0] {
                let scaled: Vec<f64> = pn.iter().map(|v| v * nu).collect();
                prop_assert!(max_abs_diff(&objective_ns(&pd, &scaled).unwrap(), &base) < 1e-12);
            }
        }

        #[test]
        fn sans_cycle_for_any_target(seed in any::<u64>(), n in 2usize..9) {
            let pd = random_simplex(&mut stream(seed, &[]), n);
            let u = vec![1.0 / n as f64; n];
            let trace = sans_fixed_point_trace(&pd, &u, 10).unwrap();
            prop_assert!(trace.is_period_two(1e-12));
            for it in &trace.iterates {
                prop_assert!((it.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn brute_force_optimum_is_independent_of_nu() {
        for seed in 0..4 {
            let mut rng = stream(seed, &[0x7]);
            let world = World::random(&mut rng, 3, 4);
            let noise: Vec<Vec<f64>> = (0..3).map(|_| random_simplex(&mut rng, 4)).collect();
            let dists: Vec<Vec<Vec<f64>>> = [1, 2, 8]
                .iter()
                .flat_map(|&nu| {
                    [
                        ObjectiveSpec::NsUni { nu },
                        ObjectiveSpec::NsFreq {
                            nu,
                            noise: noise.clone(),
                        },
                    ]
                })
                .map(|spec| brute_force_optimum(&spec, &world, seed).unwrap().dist)
                .collect();
            for (i, d) in dists.iter().enumerate() {
                let base = &dists[i % 2];
                for (a, b) in d.iter().zip(base) {
                    assert!(max_abs_diff(a, b) < 1e-3);
                }
            }
        }
    }
}
