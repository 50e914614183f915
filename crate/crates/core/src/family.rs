//! Elliptical families: radial density generator `f`, its half-tail
//! integral `F*(t) = ½∫_t^∞ f`, and the normaliser `K* = ∫ F*(‖w‖²) dw`.
//!
//! Both generators are normalised so that `|Σ|^{-n/2} f(tr(...))` is a
//! probability density on `ℝ^{n×p}`; `dim` below is always `N = n·p`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::quadrature;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DistributionFamily {
    Gaussian,
    /// Matrix-variate Student law with `nu` degrees of freedom.
    Student { nu: f64 },
}

impl DistributionFamily {
    pub fn student(nu: f64) -> Result<Self> {
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Student degrees of freedom must be positive, got {nu}"
            )));
        }
        Ok(Self::Student { nu })
    }

    /// `ln f(t)` for an `dim`-dimensional argument.
    pub fn log_f(&self, t: f64, dim: usize) -> f64 {
        let n = dim as f64;
        match *self {
            Self::Gaussian => -0.5 * n * (2.0 * PI).ln() - 0.5 * t,
            Self::Student { nu } => {
                student_log_norm(nu, n) - 0.5 * (nu + n) * (t / nu).ln_1p()
            }
        }
    }

    pub fn f(&self, t: f64, dim: usize) -> f64 {
        self.log_f(t, dim).exp()
    }

    /// `ln F*(t)` with `F*(t) = ½∫_t^∞ f(v) dv`.
    pub fn log_f_star(&self, t: f64, dim: usize) -> f64 {
        let n = dim as f64;
        match *self {
            // ½∫_t^∞ c·e^{-v/2} dv = c·e^{-t/2}: F* coincides with f.
            Self::Gaussian => self.log_f(t, dim),
            Self::Student { nu } => {
                let decay = nu + n - 2.0;
                student_log_norm(nu, n) + nu.ln() - decay.ln() - 0.5 * decay * (t / nu).ln_1p()
            }
        }
    }

    pub fn f_star(&self, t: f64, dim: usize) -> f64 {
        self.log_f_star(t, dim).exp()
    }

    /// Variance inflation `E[S]/(mΣ)`, i.e. `ν/(ν−2)` for Student.
    pub fn second_moment_factor(&self) -> Option<f64> {
        match *self {
            Self::Gaussian => Some(1.0),
            Self::Student { nu } if nu > 2.0 => Some(nu / (nu - 2.0)),
            Self::Student { .. } => None,
        }
    }
}

impl fmt::Display for DistributionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gaussian => write!(f, "gaussian"),
            Self::Student { nu } => write!(f, "student(nu={nu})"),
        }
    }
}

fn student_log_norm(nu: f64, n: f64) -> f64 {
    ln_gamma(0.5 * (nu + n)) - ln_gamma(0.5 * nu) - 0.5 * n * (nu * PI).ln()
}

/// Absolute and relative tolerance of the `K*` quadrature.
pub const K_STAR_TOL: f64 = 1e-10;

/// `K*` for an `n × p` observation matrix.
///
/// The Gaussian value is exactly 1 and is returned without quadrature.
pub fn k_star(family: &DistributionFamily, n: usize, p: usize) -> Result<f64> {
    match family {
        DistributionFamily::Gaussian => Ok(1.0),
        DistributionFamily::Student { .. } => k_star_quadrature(family, n * p),
    }
}

/// `K* = Surface(N)·∫₀^∞ F*(r²) r^{N−1} dr`, integrated adaptively after the
/// substitution `r = tan(πx/2)`.
pub fn k_star_quadrature(family: &DistributionFamily, dim: usize) -> Result<f64> {
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    if let DistributionFamily::Student { nu } = *family {
        if nu <= 2.0 {
            return Err(Error::Divergent(format!(
                "K* is infinite for Student with nu = {nu} <= 2"
            )));
        }
    }
    let n = dim as f64;
    let log_surface = (2.0f64).ln() + 0.5 * n * PI.ln() - ln_gamma(0.5 * n);
    // Log of the radial integrand as a function of u = ln r.
    let log_radial = |u: f64| {
        let r2 = (2.0 * u).exp();
        log_surface + family.log_f_star(r2, dim) + n * u
    };

    // The radial integrand is unimodal in u; locate the peak and its width
    // so the initial panels resolve it even for large N.
    let u_mode = golden_max(&log_radial, -30.0, 30.0);
    let peak = log_radial(u_mode) - u_mode; // includes the r^{N-1} factor
    let h = 1e-3;
    let curvature =
        (log_radial(u_mode + h) - 2.0 * log_radial(u_mode) + log_radial(u_mode - h)) / (h * h);
    let width = if curvature < 0.0 { (-curvature).sqrt().recip() } else { 1.0 };

    let to_x = |u: f64| (2.0 / PI) * u.exp().atan();
    let mut breaks = vec![0.0, 1.0];
    for k in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
        for side in [-1.0, 1.0] {
            let x = to_x(u_mode + side * k * width);
            if x > 0.0 && x < 1.0 {
                breaks.push(x);
            }
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let scaled = |x: f64| {
        let r = (0.5 * PI * x).tan();
        if !(r > 0.0 && r.is_finite()) {
            return 0.0;
        }
        let log_val = log_surface + family.log_f_star(r * r, dim) + (n - 1.0) * r.ln() - peak;
        log_val.exp() * 0.5 * PI * (1.0 + r * r)
    };
    let abs_tol = K_STAR_TOL * (-peak).exp();
    let q = quadrature::integrate(scaled, &breaks, abs_tol, K_STAR_TOL, 20_000);
    let value = q.value * peak.exp();
    if !q.converged || !value.is_finite() {
        return Err(Error::Divergent(format!(
            "K* quadrature did not converge for {family} in dimension {dim} (estimate {value:e})"
        )));
    }
    Ok(value)
}

fn golden_max<F: Fn(f64) -> f64>(f: &F, mut lo: f64, mut hi: f64) -> f64 {
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    0.5 * (lo + hi)
}
