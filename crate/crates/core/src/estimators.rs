//! Usual estimators `aS` and the corrected family
//! `a(S + SS⁺G)` with `G = (t / tr S⁺)·SS⁺`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Matrix, ScatterMatrix};
use crate::sampling::Scenario;

/// Optimal multiplier of `S` among the usual estimators:
/// `a_o = 1 / (K* · max(p, m))`.
pub fn a_optimal(p: usize, m: usize, k_star: f64) -> f64 {
    1.0 / (k_star * p.max(m) as f64)
}

/// Upper end of the dominance interval for `t`:
/// `2(p∧m − 1) / (p∨m − p∧m + 1)`.
pub fn t_max(p: usize, m: usize) -> f64 {
    let (lo, hi) = (p.min(m) as f64, p.max(m) as f64);
    if lo <= 1.0 {
        return 0.0;
    }
    2.0 * (lo - 1.0) / (hi - lo + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EstimatorKind {
    Usual { a: f64 },
    Corrected { a: f64, t: f64 },
}

/// A resolved estimator with its display label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub label: String,
}

fn check_a(a: f64) -> Result<()> {
    if a.is_finite() && a > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("a must be positive, got {a}")))
    }
}

fn check_t(t: f64) -> Result<()> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("t must be nonnegative, got {t}")))
    }
}

impl EstimatorSpec {
    pub fn usual(a: f64) -> Result<Self> {
        check_a(a)?;
        Ok(Self {
            kind: EstimatorKind::Usual { a },
            label: format!("usual:a={a}"),
        })
    }

    pub fn corrected(a: f64, t: f64) -> Result<Self> {
        check_a(a)?;
        check_t(t)?;
        Ok(Self {
            kind: EstimatorKind::Corrected { a, t },
            label: format!("corrected:a={a},t={t}"),
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn a(&self) -> f64 {
        match self.kind {
            EstimatorKind::Usual { a } | EstimatorKind::Corrected { a, .. } => a,
        }
    }

    pub fn is_usual(&self) -> bool {
        matches!(self.kind, EstimatorKind::Usual { .. })
    }

    /// Parses a CLI string such as `corrected:a=auto,t=auto` against a
    /// scenario.
    pub fn parse_for(s: &str, sc: &Scenario) -> Result<Self> {
        s.parse::<EstimatorTemplate>()?.resolve(sc)
    }
}

/// `(t / tr S⁺)·SS⁺`.
pub fn correction_g(s: &ScatterMatrix, t: f64) -> Result<Matrix> {
    let tr = s.trace_pinv()?;
    Ok(s.projector() * (t / tr))
}

/// Evaluates the estimator at `S`.
pub fn estimate(spec: &EstimatorSpec, s: &ScatterMatrix) -> Result<Matrix> {
    match spec.kind {
        EstimatorKind::Usual { a } => Ok(s.entries() * a),
        EstimatorKind::Corrected { a, t } => {
            // SS⁺G = G because G already lives on range(S).
            let g = correction_g(s, t)?;
            Ok((s.entries() + g) * a)
        }
    }
}

/// Parameter that may be resolved from the scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Param {
    Auto,
    Value(f64),
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Param::Auto => write!(f, "auto"),
            Param::Value(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Param {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Param::Auto);
        }
        s.parse::<f64>()
            .map(Param::Value)
            .map_err(|_| Error::Config(format!("expected a number or `auto`, got {s:?}")))
    }
}

/// Unresolved estimator description: `usual:a=<real|auto>` or
/// `corrected:a=<real|auto>,t=<real|auto>`. `auto` means `a_o` and
/// `t_max` for the scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorTemplate {
    Usual { a: Param },
    Corrected { a: Param, t: Param },
}

impl EstimatorTemplate {
    pub fn resolve(&self, sc: &Scenario) -> Result<EstimatorSpec> {
        let a_of = |a: Param| -> Result<f64> {
            Ok(match a {
                Param::Auto => a_optimal(sc.p(), sc.m(), sc.k_star()?),
                Param::Value(v) => v,
            })
        };
        let spec = match *self {
            EstimatorTemplate::Usual { a } => EstimatorSpec::usual(a_of(a)?)?,
            EstimatorTemplate::Corrected { a, t } => {
                let t = match t {
                    Param::Auto => t_max(sc.p(), sc.m()),
                    Param::Value(v) => v,
                };
                EstimatorSpec::corrected(a_of(a)?, t)?
            }
        };
        Ok(spec.with_label(self.to_string()))
    }
}

impl fmt::Display for EstimatorTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorTemplate::Usual { a } => write!(f, "usual:a={a}"),
            EstimatorTemplate::Corrected { a, t } => write!(f, "corrected:a={a},t={t}"),
        }
    }
}

impl FromStr for EstimatorTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut a = Param::Auto;
        let mut t = Param::Auto;
        for item in rest.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value in {s:?}, got {item:?}")))?;
            match (kind, key.trim()) {
                (_, "a") => a = value.trim().parse()?,
                ("corrected", "t") => t = value.trim().parse()?,
                _ => return Err(Error::Config(format!("unknown parameter {key:?} in {s:?}"))),
            }
        }
        match kind {
            "usual" => Ok(EstimatorTemplate::Usual { a }),
            "corrected" => Ok(EstimatorTemplate::Corrected { a, t }),
            other => Err(Error::Config(format!(
                "unknown estimator kind {other:?} (expected `usual` or `corrected`)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::DistributionFamily;
    use crate::matrix::rel_frobenius;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn diag(v: &[f64]) -> Matrix {
        Matrix::from_diagonal(&DVector::from_row_slice(v))
    }

    #[test]
    fn a_optimal_examples() {
        assert_relative_eq!(a_optimal(20, 4, 1.0), 0.05);
        assert_relative_eq!(a_optimal(4, 20, 1.0), 0.05);
        assert_relative_eq!(a_optimal(10, 10, 5.0 / 3.0), 0.06);
    }

    #[test]
    fn t_max_examples() {
        assert_relative_eq!(t_max(20, 4), 6.0 / 17.0, epsilon = 1e-15);
        assert_relative_eq!(t_max(7, 7), 12.0);
        assert_relative_eq!(t_max(100, 80), 158.0 / 21.0, epsilon = 1e-14);
        assert_eq!(t_max(1, 9), 0.0);
        assert_eq!(t_max(20, 16), t_max(16, 20));
    }

    #[test]
    fn corrected_with_zero_t_is_usual() {
        let s = ScatterMatrix::new(Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let u = estimate(&EstimatorSpec::usual(0.7).unwrap(), &s).unwrap();
        let c = estimate(&EstimatorSpec::corrected(0.7, 0.0).unwrap(), &s).unwrap();
        assert_eq!(u, c);
    }

    #[test]
    fn corrected_singular_diagonal() {
        let s = ScatterMatrix::new(diag(&[2.0, 0.0])).unwrap();
        let est = estimate(&EstimatorSpec::corrected(1.0, 1.0).unwrap(), &s).unwrap();
        assert_relative_eq!(est, diag(&[4.0, 0.0]), epsilon = 1e-14);
    }

    #[test]
    fn corrected_invertible_uses_identity() {
        let s = ScatterMatrix::new(Matrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]))
            .unwrap();
        let inv = s.entries().clone().try_inverse().unwrap();
        let (a, t) = (0.3, 1.7);
        let oracle = (s.entries() + Matrix::identity(3, 3) * (t / inv.trace())) * a;
        let est = estimate(&EstimatorSpec::corrected(a, t).unwrap(), &s).unwrap();
        assert!(rel_frobenius(&est, &oracle) < 1e-12);
    }

    #[test]
    fn corrected_rejects_zero_scatter() {
        let s = ScatterMatrix::new(Matrix::zeros(3, 3)).unwrap();
        assert!(matches!(
            estimate(&EstimatorSpec::corrected(1.0, 1.0).unwrap(), &s),
            Err(Error::ZeroScatter)
        ));
        assert_eq!(estimate(&EstimatorSpec::usual(1.0).unwrap(), &s).unwrap(), Matrix::zeros(3, 3));
    }

    #[test]
    fn correction_g_examples() {
        let s = ScatterMatrix::new(Matrix::identity(4, 4)).unwrap();
        assert_eq!(correction_g(&s, 0.0).unwrap(), Matrix::zeros(4, 4));
        assert_relative_eq!(correction_g(&s, 4.0).unwrap(), Matrix::identity(4, 4), epsilon = 1e-14);
    }

    #[test]
    fn spec_validation() {
        assert!(EstimatorSpec::usual(0.0).is_err());
        assert!(EstimatorSpec::corrected(1.0, -0.1).is_err());
        assert!(EstimatorSpec::corrected(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn template_parsing() {
        let sc = crate::sampling::Scenario::ar1(20, 4, 0.9, DistributionFamily::Gaussian).unwrap();
        let spec = EstimatorSpec::parse_for("corrected:a=auto,t=auto", &sc).unwrap();
        assert_eq!(spec.kind, EstimatorKind::Corrected { a: 0.05, t: 6.0 / 17.0 });
        assert_eq!(spec.label, "corrected:a=auto,t=auto");
        let spec = EstimatorSpec::parse_for("usual:a=0.125", &sc).unwrap();
        assert_eq!(spec.kind, EstimatorKind::Usual { a: 0.125 });
        assert_eq!(spec.label, "usual:a=0.125");
        assert_eq!(
            "corrected:t=2".parse::<EstimatorTemplate>().unwrap(),
            EstimatorTemplate::Corrected { a: Param::Auto, t: Param::Value(2.0) }
        );
        for bad in ["lw:a=1", "usual:t=1", "usual:a", "corrected:a=x"] {
            assert!(bad.parse::<EstimatorTemplate>().is_err(), "{bad}");
        }
    }

    #[test]
    fn student_auto_constant_uses_k_star() {
        let sc = crate::sampling::Scenario::ar1(6, 3, 0.0, DistributionFamily::student(5.0).unwrap()).unwrap();
        let spec = EstimatorSpec::parse_for("usual:a=auto", &sc).unwrap();
        assert_relative_eq!(spec.a(), 1.0 / (5.0 / 3.0 * 6.0), max_relative = 1e-8);
    }
}
