//! Monte Carlo check of the Stein-Haff type identity
//!
//! ```text
//! E[tr(Σ⁻¹ SS⁺G)] = K*·E*[tr(2 SS⁺ D_s{SS⁺G}ᵀ + (m − p∧m − 1) S⁺G)]
//! ```
//!
//! with the Haff operator `D_s = (d_ij)`, `d_ij = ½(1+δ_ij) ∂/∂s_ij`, applied
//! by central finite differences. For singular S the perturbed matrix is
//! mapped back to the rank stratum of S (top-`rank(S)` eigenpairs), which
//! differentiates along the tangent space of the rank-`m` matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::correction_g;
use crate::family::DistributionFamily;
use crate::matrix::{Matrix, ScatterMatrix};
use crate::risk::{mean_se, replicate, MeanSe};
use crate::sampling::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HaffOperatorConfig {
    /// Relative central-difference step; the step on `s_ij` is
    /// `step_scale · (1 + |s_ij|)`.
    pub step_scale: f64,
}

impl Default for HaffOperatorConfig {
    fn default() -> Self {
        Self {
            step_scale: f64::EPSILON.cbrt(),
        }
    }
}

impl HaffOperatorConfig {
    pub fn new(step_scale: f64) -> Result<Self> {
        let cfg = Self { step_scale };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_scale > 0.0 && self.step_scale <= 1e-2 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "step_scale must lie in (0, 1e-2], got {}",
                self.step_scale
            )))
        }
    }
}

/// `D_s{H(S)}ᵀ`, i.e. the matrix with entries `Σ_k d_ik H_jk`.
pub fn haff_divergence<H>(h: H, s: &ScatterMatrix, cfg: &HaffOperatorConfig) -> Result<Matrix>
where
    H: Fn(&ScatterMatrix) -> Result<Matrix>,
{
    cfg.validate()?;
    let p = s.dim();
    let rank = s.rank();
    let mut out = Matrix::zeros(p, p);
    for i in 0..p {
        for k in i..p {
            let step = cfg.step_scale * (1.0 + s.entries()[(i, k)].abs());
            let mut bump = Matrix::zeros(p, p);
            bump[(i, k)] = step;
            bump[(k, i)] = step;
            let plus = h(&ScatterMatrix::with_rank(s.entries() + &bump, rank)?)?;
            let minus = h(&ScatterMatrix::with_rank(s.entries() - &bump, rank)?)?;
            if plus.shape() != (p, p) || minus.shape() != (p, p) {
                return Err(Error::Dimension(format!("H must return a {p}x{p} matrix")));
            }
            let deriv = (plus - minus) / (2.0 * step);
            if deriv.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    replication: 0,
                    what: format!("finite difference of H along s_{i}{k}"),
                });
            }
            let weight = if i == k { 1.0 } else { 0.5 };
            for j in 0..p {
                out[(i, j)] += weight * deriv[(j, k)];
                if i != k {
                    out[(k, j)] += weight * deriv[(j, i)];
                }
            }
        }
    }
    Ok(out)
}

/// Both sides of the identity with their Monte Carlo errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub lhs: MeanSe,
    pub rhs: MeanSe,
    /// Paired `lhs − rhs`.
    pub difference: MeanSe,
    /// `√(se_lhs² + se_rhs²)`.
    pub combined_se: f64,
    pub reps: usize,
    pub pass: bool,
}

/// Agreement band in combined standard errors.
pub const IDENTITY_SIGMAS: f64 = 3.0;

impl IdentityReport {
    fn new(lhs: &[f64], rhs: &[f64]) -> Self {
        let l = mean_se(lhs);
        let r = mean_se(rhs);
        let diff: Vec<f64> = lhs.iter().zip(rhs).map(|(a, b)| a - b).collect();
        let combined_se = l.std_err.hypot(r.std_err);
        let gap = (l.mean - r.mean).abs();
        Self {
            lhs: l,
            rhs: r,
            difference: mean_se(&diff),
            combined_se,
            reps: lhs.len(),
            pass: gap <= IDENTITY_SIGMAS * combined_se,
        }
    }

    /// `|lhs − rhs|` in combined standard errors.
    pub fn z_score(&self) -> f64 {
        let gap = (self.lhs.mean - self.rhs.mean).abs();
        if self.combined_se > 0.0 {
            gap / self.combined_se
        } else if gap == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Estimates both sides of the identity on a common sample stream.
///
/// `g` receives `(Z, S)`; only its dependence on S is differentiated.
pub fn verify_identity<G>(
    sc: &Scenario,
    g: G,
    reps: usize,
    seed: u64,
    cfg: &HaffOperatorConfig,
) -> Result<IdentityReport>
where
    G: Fn(&Matrix, &ScatterMatrix) -> Result<Matrix> + Sync,
{
    if !matches!(sc.family(), DistributionFamily::Gaussian) {
        return Err(Error::Unsupported(
            "the identity check needs E* sampling, available only for the Gaussian family".into(),
        ));
    }
    if reps < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 replications, got {reps}")));
    }
    cfg.validate()?;
    let k_star = sc.k_star()?;
    let r = sc.p().min(sc.m()) as f64;
    let tail = sc.m() as f64 - r - 1.0;
    let sigma_inv = sc.sigma().inverse();

    let pairs = replicate(sc, reps, seed, 0, |rep, draw| {
        let z = &draw.z;
        let s = &draw.s;
        let projected = |x: &ScatterMatrix| -> Result<Matrix> { Ok(x.projector() * g(z, x)?) };
        let ssg = projected(s)?;
        let lhs = (sigma_inv * &ssg).trace();
        let div = haff_divergence(projected, s, cfg).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { replication: rep, what },
            other => other,
        })?;
        let spg = s.pinv() * g(z, s)?;
        let rhs = k_star * (2.0 * (s.projector() * div).trace() + tail * spg.trace());
        if !(lhs.is_finite() && rhs.is_finite()) {
            return Err(Error::NonFinite {
                replication: rep,
                what: format!("identity terms lhs = {lhs}, rhs = {rhs}"),
            });
        }
        Ok((lhs, rhs))
    })?;
    let (lhs, rhs): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(IdentityReport::new(&lhs, &rhs))
}

/// The correction `G(Z, S) = (t / tr S⁺)·SS⁺`.
pub fn konno_g(t: f64) -> impl Fn(&Matrix, &ScatterMatrix) -> Result<Matrix> + Sync + Copy {
    move |_z: &Matrix, s: &ScatterMatrix| correction_g(s, t)
}

/// `G(Z, S) = S`.
pub fn scatter_g(_z: &Matrix, s: &ScatterMatrix) -> Result<Matrix> {
    Ok(s.entries().clone())
}

/// `G ≡ 0`.
pub fn zero_g(_z: &Matrix, s: &ScatterMatrix) -> Result<Matrix> {
    Ok(Matrix::zeros(s.dim(), s.dim()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub step: f64,
    pub estimate: Matrix,
    /// `‖D(step) − D(previous step)‖_F`.
    pub change: Option<f64>,
    /// Ratio of the previous change to this one (≈ 4 for halved steps in
    /// the truncation-dominated regime).
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceProbe {
    pub rows: Vec<ProbeRow>,
    /// False when successive changes stop shrinking, the signature of
    /// roundoff taking over.
    pub monotone: bool,
}

/// Evaluates [`haff_divergence`] over decreasing step scales.
pub fn fd_convergence_probe<H>(h: H, s: &ScatterMatrix, steps: &[f64]) -> Result<ConvergenceProbe>
where
    H: Fn(&ScatterMatrix) -> Result<Matrix>,
{
    if steps.len() < 3 {
        return Err(Error::InvalidParameter("the probe needs at least 3 step sizes".into()));
    }
    let mut steps = steps.to_vec();
    steps.sort_by(|a, b| b.total_cmp(a));
    let mut rows: Vec<ProbeRow> = Vec::with_capacity(steps.len());
    for step in steps {
        let estimate = haff_divergence(&h, s, &HaffOperatorConfig::new(step)?)?;
        let change = rows.last().map(|prev| (&estimate - &prev.estimate).norm());
        let ratio = match (rows.last().and_then(|r| r.change), change) {
            (Some(prev), Some(cur)) if cur > 0.0 => Some(prev / cur),
            _ => None,
        };
        rows.push(ProbeRow {
            step,
            estimate,
            change,
            ratio,
        });
    }
    let changes: Vec<f64> = rows.iter().filter_map(|r| r.change).collect();
    let monotone = changes.windows(2).all(|w| w[1] <= w[0]);
    Ok(ConvergenceProbe { rows, monotone })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{rel_frobenius, symmetrize};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_scatter(p: usize, m: usize, seed: u64) -> ScatterMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Matrix::from_fn(m, p, |_, _| rng.sample(StandardNormal));
        ScatterMatrix::from_factor(&u).unwrap()
    }

    fn identity_fn(s: &ScatterMatrix) -> Result<Matrix> {
        Ok(s.entries().clone())
    }

    #[test]
    fn divergence_of_s_is_half_p_plus_one() {
        for p in [2, 3, 6] {
            let s = random_scatter(p, p + 4, p as u64);
            let d = haff_divergence(identity_fn, &s, &HaffOperatorConfig::default()).unwrap();
            let expected = Matrix::identity(p, p) * ((p as f64 + 1.0) / 2.0);
            assert!((d - expected).amax() < 1e-6);
        }
    }

    #[test]
    fn hand_computed_two_by_two() {
        // H(S) = S: (D_s Hᵀ)_ij = Σ_k ½(1+δ_ik) ∂s_jk/∂s_ik = δ_ij (1 + ½).
        let s = ScatterMatrix::new(Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let d = haff_divergence(identity_fn, &s, &HaffOperatorConfig::default()).unwrap();
        assert_relative_eq!(d, Matrix::identity(2, 2) * 1.5, epsilon = 1e-8);
    }

    #[test]
    fn divergence_of_constant_is_zero() {
        let s = random_scatter(4, 7, 1);
        let c = Matrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64);
        let d = haff_divergence(|_: &ScatterMatrix| Ok(c.clone() * 3.0), &s, &HaffOperatorConfig::default())
            .unwrap();
        assert_eq!(d, Matrix::zeros(4, 4));
    }

    #[test]
    fn divergence_of_trace_times_identity() {
        for p in [2, 3] {
            let s = random_scatter(p, 5, 10 + p as u64);
            let h = |x: &ScatterMatrix| Ok(Matrix::identity(p, p) * x.entries().trace());
            let d = haff_divergence(h, &s, &HaffOperatorConfig::default()).unwrap();
            assert!((d - Matrix::identity(p, p)).amax() < 1e-6);
        }
    }

    #[test]
    fn nonfinite_h_is_an_error() {
        let s = random_scatter(3, 5, 2);
        let h = |_: &ScatterMatrix| Ok(Matrix::from_element(3, 3, f64::NAN));
        assert!(matches!(
            haff_divergence(h, &s, &HaffOperatorConfig::default()),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(HaffOperatorConfig::new(0.0).is_err());
        assert!(HaffOperatorConfig::new(0.02).is_err());
        assert!(HaffOperatorConfig::new(1e-2).is_ok());
        assert!((HaffOperatorConfig::default().step_scale - 6.055e-6).abs() < 1e-8);
    }

    #[test]
    fn linear_h_is_step_independent() {
        let s = random_scatter(4, 9, 3);
        let probe = fd_convergence_probe(identity_fn, &s, &[1e-2, 1e-3, 1e-4]).unwrap();
        let expected = Matrix::identity(4, 4) * 2.5;
        for row in &probe.rows {
            assert!((&row.estimate - &expected).amax() <= 10.0 * row.step * row.step);
        }
        let a = &probe.rows[0].estimate;
        for row in &probe.rows[1..] {
            assert!((&row.estimate - a).amax() < 1e-8);
        }
    }

    #[test]
    fn cubic_h_shows_second_order_convergence() {
        // Central differences are exact on quadratics, so use H = S³.
        let s = random_scatter(3, 8, 4);
        let scale = 1.0 / s.entries().norm();
        let h = |x: &ScatterMatrix| {
            let y = x.entries() * scale;
            Ok(&y * &y * &y)
        };
        let steps = [8e-3, 4e-3, 2e-3, 1e-3];
        let probe = fd_convergence_probe(h, &s, &steps).unwrap();
        for row in &probe.rows[2..] {
            let ratio = row.ratio.unwrap();
            assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
        }
        assert!(probe.monotone);
    }

    #[test]
    fn tiny_steps_are_flagged() {
        let s = random_scatter(3, 8, 4);
        let h = |x: &ScatterMatrix| Ok(x.pinv().clone());
        let probe = fd_convergence_probe(h, &s, &[1e-11, 1e-12, 1e-13, 1e-14]).unwrap();
        assert!(!probe.monotone);
        assert!(fd_convergence_probe(h, &s, &[1e-3, 1e-4]).is_err());
    }

    #[test]
    fn singular_projector_derivative_stays_tangent() {
        // SS⁺ is constant along directions normal to the rank stratum, so
        // perturbing only the null block must leave it unchanged.
        let s = random_scatter(5, 2, 6);
        let null = Matrix::identity(5, 5) - s.projector();
        let bump = symmetrize(&(&null * Matrix::from_fn(5, 5, |i, j| ((i + j) % 3) as f64) * &null)) * 1e-6;
        let moved = ScatterMatrix::with_rank(s.entries() + bump, 2).unwrap();
        assert!(rel_frobenius(moved.projector(), s.projector()) < 1e-8);
    }

    #[test]
    fn zero_g_gives_exact_zeros() {
        let sc = Scenario::ar1(4, 3, 0.9, DistributionFamily::Gaussian).unwrap();
        let rep = verify_identity(&sc, zero_g, 20, 1, &HaffOperatorConfig::default()).unwrap();
        assert_eq!(rep.lhs.mean, 0.0);
        assert_eq!(rep.rhs.mean, 0.0);
        assert!(rep.pass);
    }

    #[test]
    fn student_is_unsupported() {
        let sc = Scenario::ar1(3, 5, 0.0, DistributionFamily::student(5.0).unwrap()).unwrap();
        assert!(matches!(
            verify_identity(&sc, scatter_g, 10, 1, &HaffOperatorConfig::default()),
            Err(Error::Unsupported(_))
        ));
    }
}
