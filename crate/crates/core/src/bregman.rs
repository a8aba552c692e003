//! Generator functions Ψ, Bregman divergences and their expectations.
//!
//! All three generators are separable, `Ψ(z) = Σ_i φ(z_i)`, so one set of routines
//! serves both the vector form used by softmax cross-entropy and the per-(x, y)
//! scalar form used by negative sampling.

use std::io::Write;

use serde::Serialize;

use crate::error::DomainError;

/// Probabilities are clamped to at least this value before taking logs.
pub const PROB_EPS: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiKind {
    /// `Ψ(z) = Σ z_i log z_i` on probability vectors (softmax cross-entropy).
    SceEntropy,
    /// Binary expansion `z log z + (1 - z) log(1 - z)`; only used for curves.
    SceBinary,
    /// `Ψ(z) = z log z - (1 + z) log(1 + z)` on positive reals (negative sampling).
    NsBinary,
}

impl PsiKind {
    fn check(self, index: usize, z: f64) -> Result<f64, DomainError> {
        let err = |expected| DomainError::OutOfDomain {
            index,
            value: z,
            expected,
        };
        match self {
            PsiKind::SceEntropy => {
                if !(z >= 0.0 && z.is_finite()) {
                    return Err(err("z >= 0"));
                }
                Ok(z.max(PROB_EPS))
            }
            PsiKind::SceBinary => {
                if !(0.0..=1.0).contains(&z) {
                    return Err(err("0 <= z <= 1"));
                }
                Ok(z.clamp(PROB_EPS, 1.0 - PROB_EPS))
            }
            PsiKind::NsBinary => {
                if !(z > 0.0 && z.is_finite()) {
                    return Err(err("z > 0"));
                }
                Ok(z)
            }
        }
    }

    fn phi(self, z: f64) -> f64 {
        match self {
            PsiKind::SceEntropy => z * z.ln(),
            PsiKind::SceBinary => z * z.ln() + (1.0 - z) * (1.0 - z).ln(),
            PsiKind::NsBinary => z * z.ln() - (1.0 + z) * z.ln_1p(),
        }
    }

    fn dphi(self, z: f64) -> f64 {
        match self {
            PsiKind::SceEntropy => z.ln() + 1.0,
            PsiKind::SceBinary => z.ln() - (1.0 - z).ln(),
            PsiKind::NsBinary => z.ln() - z.ln_1p(),
        }
    }

    /// True when the expectation sums the bracket once per query rather than per (x, y).
    fn is_vector(self) -> bool {
        matches!(self, PsiKind::SceEntropy)
    }
}

fn checked(kind: PsiKind, z: &[f64]) -> Result<Vec<f64>, DomainError> {
    z.iter()
        .enumerate()
        .map(|(i, &v)| kind.check(i, v))
        .collect()
}

pub fn psi(kind: PsiKind, z: &[f64]) -> Result<f64, DomainError> {
    if z.is_empty() {
        return Err(DomainError::Empty("psi input"));
    }
    Ok(checked(kind, z)?.into_iter().map(|v| kind.phi(v)).sum())
}

pub fn psi_grad(kind: PsiKind, z: &[f64]) -> Result<Vec<f64>, DomainError> {
    Ok(checked(kind, z)?.into_iter().map(|v| kind.dphi(v)).collect())
}

/// `d_Ψ(f, g) = Ψ(f) - Ψ(g) - ∇Ψ(g)ᵀ(f - g)`.
pub fn pointwise_divergence(kind: PsiKind, f: &[f64], g: &[f64]) -> Result<f64, DomainError> {
    if f.len() != g.len() {
        return Err(DomainError::Shape(format!(
            "f has {} entries, g has {}",
            f.len(),
            g.len()
        )));
    }
    let fc = checked(kind, f)?;
    let gc = checked(kind, g)?;
    let d = fc
        .iter()
        .zip(&gc)
        .map(|(&a, &b)| kind.phi(a) - kind.phi(b) - kind.dphi(b) * (a - b))
        .sum::<f64>();
    // rounding can leave a tiny negative residue when f == g
    Ok(d.max(0.0))
}

fn check_tables(f: &[Vec<f64>], g: &[Vec<f64>], w: &[Vec<f64>]) -> Result<(), DomainError> {
    if f.len() != g.len() || f.len() != w.len() {
        return Err(DomainError::Shape(format!(
            "query counts differ: f {}, g {}, weights {}",
            f.len(),
            g.len(),
            w.len()
        )));
    }
    for (x, ((fr, gr), wr)) in f.iter().zip(g).zip(w).enumerate() {
        if fr.len() != gr.len() || fr.len() != wr.len() {
            return Err(DomainError::Shape(format!(
                "row {x}: f {}, g {}, weights {}",
                fr.len(),
                gr.len(),
                wr.len()
            )));
        }
    }
    Ok(())
}

/// `B̃_Ψ(f, g) = Σ_{x,y} [-Ψ(g) + ∇Ψ(g)ᵀg - ∇Ψ(g)ᵀf] p_d(x, y)`.
///
/// Tables are indexed `[x][y]`; `weights` holds the joint `p_d(x, y)`. This differs
/// from [`expected_divergence`] by the `g`-independent constant `Σ Ψ(f) p_d`.
pub fn expected_divergence_tilde(
    kind: PsiKind,
    f: &[Vec<f64>],
    g: &[Vec<f64>],
    weights: &[Vec<f64>],
) -> Result<f64, DomainError> {
    check_tables(f, g, weights)?;
    let mut total = 0.0;
    for ((fr, gr), wr) in f.iter().zip(g).zip(weights) {
        let fc = checked(kind, fr)?;
        let gc = checked(kind, gr)?;
        let terms = fc
            .iter()
            .zip(&gc)
            .map(|(&a, &b)| -kind.phi(b) + kind.dphi(b) * b - kind.dphi(b) * a);
        if kind.is_vector() {
            let row_weight: f64 = wr.iter().sum();
            total += terms.sum::<f64>() * row_weight;
        } else {
            total += terms.zip(wr).map(|(t, &w)| t * w).sum::<f64>();
        }
    }
    Ok(total)
}

/// `B_Ψ(f, g) = Σ_{x,y} d_Ψ(f, g) p_d(x, y)`.
pub fn expected_divergence(
    kind: PsiKind,
    f: &[Vec<f64>],
    g: &[Vec<f64>],
    weights: &[Vec<f64>],
) -> Result<f64, DomainError> {
    check_tables(f, g, weights)?;
    let mut total = 0.0;
    for ((fr, gr), wr) in f.iter().zip(g).zip(weights) {
        if kind.is_vector() {
            total += pointwise_divergence(kind, fr, gr)? * wr.iter().sum::<f64>();
        } else {
            for ((&a, &b), &w) in fr.iter().zip(gr).zip(wr) {
                total += pointwise_divergence(kind, &[a], &[b])? * w;
            }
        }
    }
    Ok(total)
}

/// The constant dropped by [`expected_divergence_tilde`]: `Σ Ψ(f) p_d`.
pub fn dropped_constant(
    kind: PsiKind,
    f: &[Vec<f64>],
    weights: &[Vec<f64>],
) -> Result<f64, DomainError> {
    check_tables(f, f, weights)?;
    let mut total = 0.0;
    for (fr, wr) in f.iter().zip(weights) {
        if kind.is_vector() {
            total += psi(kind, fr)? * wr.iter().sum::<f64>();
        } else {
            for (&a, &w) in fr.iter().zip(wr) {
                total += psi(kind, &[a])? * w;
            }
        }
    }
    Ok(total)
}

/// Divergence from a fixed reference probability to every grid point, for both losses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceCurve {
    pub reference: f64,
    pub grid: Vec<f64>,
    pub sce: Vec<f64>,
    pub ns: Vec<f64>,
}

/// Evaluates `d(reference, p)` on `p = k / (n + 1)`, `k = 1..=n`.
pub fn divergence_curve(reference: f64, n_points: usize) -> Result<DivergenceCurve, DomainError> {
    if !(reference > 0.0 && reference < 1.0) {
        return Err(DomainError::Parameter {
            name: "reference",
            value: reference,
            range: "(0, 1)",
        });
    }
    if n_points < 2 {
        return Err(DomainError::Parameter {
            name: "n_points",
            value: n_points as f64,
            range: ">= 2",
        });
    }
    let grid: Vec<f64> = (1..=n_points)
        .map(|k| k as f64 / (n_points + 1) as f64)
        .collect();
    let sce = grid
        .iter()
        .map(|&p| pointwise_divergence(PsiKind::SceBinary, &[reference], &[p]))
        .collect::<Result<Vec<_>, _>>()?;
    let ns = grid
        .iter()
        .map(|&p| pointwise_divergence(PsiKind::NsBinary, &[reference], &[p]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DivergenceCurve {
        reference,
        grid,
        sce,
        ns,
    })
}

impl DivergenceCurve {
    /// CSV with header `p,d_sce,d_ns` and 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "p,d_sce,d_ns")?;
        for ((p, s), n) in self.grid.iter().zip(&self.sce).zip(&self.ns) {
            writeln!(out, "{p:.16e},{s:.16e},{n:.16e}")?;
        }
        Ok(())
    }
}

/// Multi-label KL against its binary collapse onto label `j`; `multi >= binary`.
pub fn logsum_bound_check(
    p_d: &[f64],
    p_theta: &[f64],
    j: usize,
) -> Result<(f64, f64), DomainError> {
    if p_d.len() != p_theta.len() {
        return Err(DomainError::Shape(format!(
            "p_d has {} labels, p_theta {}",
            p_d.len(),
            p_theta.len()
        )));
    }
    if p_d.len() < 2 {
        return Err(DomainError::Empty("need at least two labels"));
    }
    if j >= p_d.len() {
        return Err(DomainError::Shape(format!(
            "label {j} out of range {}",
            p_d.len()
        )));
    }
    for (i, (&a, &b)) in p_d.iter().zip(p_theta).enumerate() {
        for v in [a, b] {
            if !(v > 0.0) {
                return Err(DomainError::OutOfDomain {
                    index: i,
                    value: v,
                    expected: "strictly positive probability",
                });
            }
        }
    }
    let multi = p_d
        .iter()
        .zip(p_theta)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum();
    let (a, b) = (p_d[j], p_theta[j]);
    let rest_d: f64 = p_d.iter().enumerate().filter(|&(i, _)| i != j).map(|(_, v)| v).sum();
    let rest_t: f64 = p_theta
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != j)
        .map(|(_, v)| v)
        .sum();
    let binary = a * (a / b).ln() + rest_d * (rest_d / rest_t).ln();
    Ok((multi, binary))
}

/// Per-instance negative-sampling integrand `log(1 + g) + f log(1 + 1/g)`.
pub fn ns_integrand(f: f64, g: f64) -> f64 {
    g.ln_1p() + f * (1.0 / g).ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn psi_closed_forms() {
        assert_abs_diff_eq!(
            psi(PsiKind::NsBinary, &[1.0]).unwrap(),
            -1.386294361119890,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            psi(PsiKind::SceEntropy, &[0.5, 0.5]).unwrap(),
            -0.693147180559945,
            epsilon = 1e-12
        );
        assert_eq!(psi(PsiKind::SceEntropy, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn psi_rejects_out_of_domain() {
        assert!(psi(PsiKind::NsBinary, &[0.0]).is_err());
        assert!(psi(PsiKind::NsBinary, &[-1.0]).is_err());
        assert!(psi(PsiKind::SceEntropy, &[-0.1, 1.1]).is_err());
        assert!(psi(PsiKind::SceBinary, &[1.5]).is_err());
        // zero probabilities are clamped, not rejected
        assert!(psi(PsiKind::SceEntropy, &[0.0, 1.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn pointwise_values() {
        for kind in [PsiKind::SceBinary, PsiKind::NsBinary, PsiKind::SceEntropy] {
            assert_eq!(pointwise_divergence(kind, &[0.5], &[0.5]).unwrap(), 0.0);
        }
        assert_abs_diff_eq!(
            pointwise_divergence(PsiKind::SceBinary, &[0.5], &[0.25]).unwrap(),
            0.143841036225890,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            pointwise_divergence(PsiKind::NsBinary, &[0.5], &[0.25]).unwrap(),
            0.073091255089041,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sce_binary_matches_plotted_formula() {
        for &p in &[0.01f64, 0.2, 0.25, 0.7, 0.99] {
            let plotted = 0.5f64.ln() - 0.5 * p.ln() - 0.5 * (1.0 - p).ln();
            let d = pointwise_divergence(PsiKind::SceBinary, &[0.5], &[p]).unwrap();
            assert_abs_diff_eq!(d, plotted, epsilon = 1e-12);
        }
    }

    #[test]
    fn tilde_equals_negative_constant_when_f_equals_g() {
        let f = vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.3, 0.1]];
        let w = vec![vec![0.1, 0.2, 0.1], vec![0.3, 0.2, 0.1]];
        for kind in [PsiKind::SceEntropy, PsiKind::NsBinary] {
            let t = expected_divergence_tilde(kind, &f, &f, &w).unwrap();
            let c = dropped_constant(kind, &f, &w).unwrap();
            assert_abs_diff_eq!(t, -c, epsilon = 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let f = vec![vec![0.5, 0.5]];
        let g = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert!(matches!(
            expected_divergence_tilde(PsiKind::SceEntropy, &f, &g, &f),
            Err(DomainError::Shape(_))
        ));
    }

    #[test]
    fn curve_endpoints_and_errors() {
        let c = divergence_curve(0.5, 999).unwrap();
        assert_eq!(c.grid.len(), 999);
        assert_eq!(c.grid[499], 0.5);
        assert_eq!(c.sce[499], 0.0);
        assert_eq!(c.ns[499], 0.0);
        assert!(divergence_curve(1.0, 10).is_err());
        assert!(divergence_curve(0.5, 1).is_err());
    }

    #[test]
    fn curve_csv_header_and_rows() {
        let c = divergence_curve(0.5, 3).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "p,d_sce,d_ns");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("2.5000000000000000e-1,"));
        let parsed: Vec<f64> = lines[1].split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(parsed[1], c.sce[0]);
    }

    #[test]
    fn logsum_identical_and_binary_cases() {
        let p = [0.2, 0.3, 0.5];
        let (m, b) = logsum_bound_check(&p, &p, 1).unwrap();
        assert_eq!((m, b), (0.0, 0.0));
        let (m, b) = logsum_bound_check(&[0.3, 0.7], &[0.6, 0.4], 0).unwrap();
        assert_abs_diff_eq!(m, b, epsilon = 1e-15);
        assert!(logsum_bound_check(&[0.0, 1.0], &[0.5, 0.5], 0).is_err());
    }

    #[test]
    fn ns_integrand_is_not_convex_at_witness() {
        let h = 1e-4;
        let second = (ns_integrand(0.1, 1.0 + h) - 2.0 * ns_integrand(0.1, 1.0)
            + ns_integrand(0.1, 1.0 - h))
            / (h * h);
        assert_abs_diff_eq!(second, -0.175, epsilon = 1e-5);
    }

    fn domain_point(kind: PsiKind, raw: &[f64]) -> Vec<f64> {
        match kind {
            PsiKind::SceEntropy => raw.to_vec(),
            PsiKind::SceBinary => raw.iter().map(|v| v / (1.0 + v)).collect(),
            PsiKind::NsBinary => raw.iter().map(|v| v * 10.0).collect(),
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(10_000))]
        #[test]
        fn divergence_is_nonnegative_and_separates(
            f in proptest::collection::vec(0.001f64..1.0, 1..6),
            g_seed in proptest::collection::vec(0.001f64..1.0, 6),
            k in 0usize..3,
        ) {
            let kind = [PsiKind::SceEntropy, PsiKind::SceBinary, PsiKind::NsBinary][k];
            let f = domain_point(kind, &f);
            let g = domain_point(kind, &g_seed[..f.len()]);
            let d = pointwise_divergence(kind, &f, &g).unwrap();
            proptest::prop_assert!(d >= 0.0);
            if f.iter().zip(&g).any(|(a, b)| (a - b).abs() > 1e-3) {
                proptest::prop_assert!(d > 0.0);
            }
            proptest::prop_assert_eq!(pointwise_divergence(kind, &f, &f).unwrap(), 0.0);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(1_000))]
        #[test]
        fn gradient_matches_finite_differences(
            z in proptest::collection::vec(0.05f64..0.95, 1..5),
            k in 0usize..3,
        ) {
            let kind = [PsiKind::SceEntropy, PsiKind::SceBinary, PsiKind::NsBinary][k];
            let grad = psi_grad(kind, &z).unwrap();
            let h = 1e-6;
            for i in 0..z.len() {
                let mut up = z.clone();
                up[i] += h;
                let mut down = z.clone();
                down[i] -= h;
                let num = (psi(kind, &up).unwrap() - psi(kind, &down).unwrap()) / (2.0 * h);
                let rel = (num - grad[i]).abs() / grad[i].abs().max(1.0);
                proptest::prop_assert!(rel < 1e-6, "{kind:?} {num} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn sce_logit_loss_is_convex_along_random_directions() {
        use rand::Rng;
        let mut rng = crate::rng::stream(41, &[]);
        let loss = |s: &[f64], y: usize| {
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - s[y]
        };
        for _ in 0..100 {
            let n = rng.random_range(2..8);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y = rng.random_range(0..n);
            for _ in 0..100 {
                let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let at = |t: f64| -> Vec<f64> { s.iter().zip(&d).map(|(a, b)| a + t * b).collect() };
                let h = 1e-3;
                let second = loss(&at(h), y) - 2.0 * loss(&s, y) + loss(&at(-h), y);
                assert!(second >= -1e-12, "{second}");
            }
        }
    }
}
