//! Canonical-form sampling of `(Z, U)` and the scenario description.
//!
//! The mean block `Z` (q × p) and the noise block `U` (m × p) are drawn
//! directly in canonical coordinates; `S = UᵀU` is the sufficient scatter.
//! Every replication owns a ChaCha20 stream keyed by its index, so a run is
//! reproducible bit for bit whatever the thread schedule.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{self, DistributionFamily};
use crate::matrix::{read_matrix_csv, Matrix, ScaleMatrix, ScatterMatrix};

/// Model dimensions, truth parameters and noise family.
#[derive(Debug, Clone)]
pub struct Scenario {
    p: usize,
    m: usize,
    q: usize,
    theta: Matrix,
    sigma: ScaleMatrix,
    family: DistributionFamily,
    rho: Option<f64>,
}

impl Scenario {
    pub fn new(
        p: usize,
        m: usize,
        q: usize,
        theta: Option<Matrix>,
        sigma: ScaleMatrix,
        family: DistributionFamily,
    ) -> Result<Self> {
        if p < 1 {
            return Err(Error::InvalidParameter("p must be at least 1".into()));
        }
        if m < 2 {
            return Err(Error::InvalidParameter(format!("m must be at least 2, got {m}")));
        }
        if sigma.dim() != p {
            return Err(Error::Dimension(format!(
                "scale matrix is {0}x{0} but p = {p}",
                sigma.dim()
            )));
        }
        let theta = theta.unwrap_or_else(|| Matrix::zeros(q, p));
        if theta.shape() != (q, p) {
            return Err(Error::Dimension(format!(
                "theta is {}x{} but (q, p) = ({q}, {p})",
                theta.nrows(),
                theta.ncols()
            )));
        }
        if let DistributionFamily::Student { nu } = family {
            if nu.is_nan() || nu <= 2.0 {
                return Err(Error::InvalidParameter(format!(
                    "Student scenarios need nu > 2 for a finite K*, got {nu}"
                )));
            }
        }
        Ok(Self {
            p,
            m,
            q,
            theta,
            sigma,
            family,
            rho: None,
        })
    }

    /// Zero-mean scenario with AR(1) scale `Σ_ij = ρ^{|i−j|}` and `q = 0`.
    pub fn ar1(p: usize, m: usize, rho: f64, family: DistributionFamily) -> Result<Self> {
        let mut sc = Self::new(p, m, 0, None, ScaleMatrix::ar1(p, rho)?, family)?;
        sc.rho = Some(rho);
        Ok(sc)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Number of observations `n = m + q`.
    pub fn n(&self) -> usize {
        self.m + self.q
    }

    pub fn theta(&self) -> &Matrix {
        &self.theta
    }

    pub fn sigma(&self) -> &ScaleMatrix {
        &self.sigma
    }

    pub fn family(&self) -> &DistributionFamily {
        &self.family
    }

    /// AR(1) coefficient when Σ was built from one.
    pub fn rho(&self) -> Option<f64> {
        self.rho
    }

    pub fn k_star(&self) -> Result<f64> {
        family::k_star(&self.family, self.n(), self.p)
    }
}

/// JSON description of a [`Scenario`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub p: usize,
    pub m: usize,
    #[serde(default)]
    pub q: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_path: Option<PathBuf>,
    #[serde(default)]
    pub family: FamilyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    #[default]
    Gaussian,
    Student,
}

impl ScenarioConfig {
    pub fn ar1(p: usize, m: usize, rho: f64) -> Self {
        Self {
            p,
            m,
            q: 0,
            rho: Some(rho),
            sigma_path: None,
            family: FamilyKind::Gaussian,
            nu: None,
            theta_path: None,
        }
    }

    pub fn family(&self) -> Result<DistributionFamily> {
        match (self.family, self.nu) {
            (FamilyKind::Gaussian, None) => Ok(DistributionFamily::Gaussian),
            (FamilyKind::Gaussian, Some(_)) => {
                Err(Error::Config("nu is only meaningful for the student family".into()))
            }
            (FamilyKind::Student, Some(nu)) => DistributionFamily::student(nu),
            (FamilyKind::Student, None) => {
                Err(Error::Config("the student family needs nu".into()))
            }
        }
    }

    /// Resolves matrices (reading any referenced CSV files) and validates.
    pub fn build(&self) -> Result<Scenario> {
        let family = self.family()?;
        let sigma = match (self.rho, &self.sigma_path) {
            (Some(rho), None) => ScaleMatrix::ar1(self.p, rho)?,
            (None, Some(path)) => ScaleMatrix::new(read_matrix_csv(path)?)?,
            (None, None) => ScaleMatrix::identity(self.p)?,
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either rho or sigma_path, not both".into()))
            }
        };
        let theta = self.theta_path.as_deref().map(read_matrix_csv).transpose()?;
        let mut sc = Scenario::new(self.p, self.m, self.q, theta, sigma, family)?;
        sc.rho = self.rho.or(if self.sigma_path.is_none() { Some(0.0) } else { None });
        Ok(sc)
    }
}

/// One draw of the canonical model.
#[derive(Debug, Clone)]
pub struct CanonicalSample {
    pub z: Matrix,
    pub u: Matrix,
    pub s: ScatterMatrix,
}

/// Independent random stream for replication `stream` under `seed`.
pub fn replication_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    // Row-major fill so the stream layout does not depend on storage order.
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            out[(i, j)] = rng.sample(StandardNormal);
        }
    }
    out
}

/// Draws `(Z, U)` from the scenario's joint density.
///
/// Gaussian: `Z = θ + N_z Lᵀ`, `U = N_u Lᵀ` with `LLᵀ = Σ`. Student: the
/// whole noise block is divided by one shared `√(χ²_ν/ν)`.
pub fn sample_canonical<R: Rng + ?Sized>(sc: &Scenario, rng: &mut R) -> Result<CanonicalSample> {
    let mixing = match sc.family {
        DistributionFamily::Gaussian => 1.0,
        DistributionFamily::Student { nu } => {
            let chi = ChiSquared::new(nu)
                .map_err(|e| Error::InvalidParameter(format!("chi-square({nu}): {e}")))?;
            (chi.sample(rng) / nu).sqrt().recip()
        }
    };
    let lt = sc.sigma.factor().transpose();
    let mut z = standard_normal(sc.q, sc.p, rng) * &lt;
    let mut u = standard_normal(sc.m, sc.p, rng) * &lt;
    if mixing != 1.0 {
        z *= mixing;
        u *= mixing;
    }
    z += &sc.theta;
    let s = ScatterMatrix::from_factor(&u)?;
    Ok(CanonicalSample { z, u, s })
}

/// `tr(A Σ⁻¹ Aᵀ)` for the rows of `A`.
fn mahalanobis_trace(a: &Matrix, sigma_inv: &Matrix) -> f64 {
    (a * sigma_inv).component_mul(a).sum()
}

/// Log of the joint density of `(z, u)`:
/// `−(n/2)·ln|Σ| + ln f[tr((z−θ)Σ⁻¹(z−θ)ᵀ) + tr(Σ⁻¹uᵀu)]`.
pub fn log_density(sc: &Scenario, z: &Matrix, u: &Matrix) -> Result<f64> {
    if z.shape() != (sc.q, sc.p) || u.shape() != (sc.m, sc.p) {
        return Err(Error::Dimension(format!(
            "expected z {}x{} and u {}x{}, got {:?} and {:?}",
            sc.q,
            sc.p,
            sc.m,
            sc.p,
            z.shape(),
            u.shape()
        )));
    }
    let inv = sc.sigma.inverse();
    let t = mahalanobis_trace(&(z - &sc.theta), inv) + mahalanobis_trace(u, inv);
    let dim = sc.n() * sc.p;
    Ok(-0.5 * sc.n() as f64 * sc.sigma.log_det() + sc.family.log_f(t, dim))
}
