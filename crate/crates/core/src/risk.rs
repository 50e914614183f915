//! Losses, Monte Carlo risk and PRIAL.
//!
//! The replication loop is data-parallel: replication `r` draws from its own
//! stream and yields one value; values are collected in index order and
//! reduced by pairwise summation, so reports do not depend on the number of
//! worker threads.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{a_optimal, estimate, EstimatorSpec};
use crate::matrix::{Matrix, ScaleMatrix, ScatterMatrix};
use crate::sampling::{replication_rng, sample_canonical, CanonicalSample, Scenario};

/// Negative values above this are roundoff and are reported as zero.
pub const ROUNDOFF_CLAMP: f64 = -1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    /// `tr(S⁺ Σ (Σ⁻¹Σ̂ − I)²) = tr(S⁺ (Σ̂−Σ) Σ⁻¹ (Σ̂−Σ))`.
    #[serde(rename = "data-based")]
    DataBased,
    /// `tr(S⁺ Σ (Σ̂Σ⁻¹ − I)²)`, which is not sign-definite unless Σ and S⁺
    /// commute. Kept for comparison runs.
    #[serde(rename = "data-based-literal")]
    DataBasedLiteral,
    /// `tr((Σ̂Σ⁻¹ − I)²)`.
    #[serde(rename = "quadratic")]
    Quadratic,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::DataBased => "data-based",
            LossKind::DataBasedLiteral => "data-based-literal",
            LossKind::Quadratic => "quadratic",
        }
    }

    pub fn evaluate(&self, sigma: &ScaleMatrix, s: &ScatterMatrix, sigma_hat: &Matrix) -> Result<f64> {
        match self {
            LossKind::DataBased => loss_data_based(sigma, s, sigma_hat),
            LossKind::DataBasedLiteral => loss_data_based_literal(sigma, s, sigma_hat),
            LossKind::Quadratic => loss_quadratic(sigma, sigma_hat),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data-based" => Ok(LossKind::DataBased),
            "data-based-literal" => Ok(LossKind::DataBasedLiteral),
            "quadratic" => Ok(LossKind::Quadratic),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

fn check_dims(sigma: &ScaleMatrix, others: &[&Matrix]) -> Result<()> {
    let p = sigma.dim();
    for m in others {
        if m.shape() != (p, p) {
            return Err(Error::Dimension(format!(
                "expected {p}x{p}, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    Ok(())
}

/// `tr(A B)` without forming the product.
fn trace_of_product(a: &Matrix, b: &Matrix) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

fn clamp_roundoff(v: f64) -> f64 {
    if (ROUNDOFF_CLAMP..0.0).contains(&v) {
        0.0
    } else {
        v
    }
}

/// Data-based loss `tr(S⁺ (Σ̂−Σ) Σ⁻¹ (Σ̂−Σ))`.
///
/// Equal to `tr(S⁺Σ(Σ⁻¹Σ̂ − I)²)`, and to `tr(S⁺Σ(Σ̂Σ⁻¹ − I)²)` whenever
/// Σ commutes with S⁺. It is nonnegative since `Σ^{-1/2}` sandwiches a PSD
/// weight. Negative roundoff down to [`ROUNDOFF_CLAMP`] is reported as 0.
pub fn loss_data_based(sigma: &ScaleMatrix, s: &ScatterMatrix, sigma_hat: &Matrix) -> Result<f64> {
    check_dims(sigma, &[s.entries(), sigma_hat])?;
    let d = sigma_hat - sigma.entries();
    let left = s.pinv() * &d;
    let right = sigma.inverse() * &d;
    Ok(clamp_roundoff(trace_of_product(&left, &right)))
}

/// `tr(S⁺ Σ M²)` with `M = Σ̂Σ⁻¹ − I`, evaluated as written.
pub fn loss_data_based_literal(sigma: &ScaleMatrix, s: &ScatterMatrix, sigma_hat: &Matrix) -> Result<f64> {
    check_dims(sigma, &[s.entries(), sigma_hat])?;
    let p = sigma.dim();
    let a = s.pinv() * sigma.entries();
    let mm = sigma_hat * sigma.inverse() - Matrix::identity(p, p);
    Ok(clamp_roundoff(trace_of_product(&(a * &mm), &mm)))
}

/// Invariant quadratic loss `tr((Σ̂Σ⁻¹ − I)²)`.
pub fn loss_quadratic(sigma: &ScaleMatrix, sigma_hat: &Matrix) -> Result<f64> {
    check_dims(sigma, &[sigma_hat])?;
    let p = sigma.dim();
    let mm = sigma_hat * sigma.inverse() - Matrix::identity(p, p);
    Ok(clamp_roundoff(trace_of_product(&mm, &mm)))
}

/// Sum in a fixed binary tree over index order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and its standard error `sd/√n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub std_err: f64,
}

pub fn mean_se(xs: &[f64]) -> MeanSe {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return MeanSe { mean, std_err: 0.0 };
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    MeanSe {
        mean,
        std_err: (var / n).sqrt(),
    }
}

/// Runs `f` on `reps` independent canonical samples in parallel and returns
/// the results in replication order. Replication `r` uses stream
/// `stream_offset + r`. The first failing replication (by index) is reported.
pub fn replicate<T, F>(sc: &Scenario, reps: usize, seed: u64, stream_offset: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &CanonicalSample) -> Result<T> + Sync,
{
    let results: Vec<Result<T>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = replication_rng(seed, stream_offset + r as u64);
            let draw = sample_canonical(sc, &mut rng)?;
            f(r, &draw)
        })
        .collect();
    results.into_iter().collect()
}

/// Whether competing estimators share samples (common random numbers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    #[default]
    Paired,
    Unpaired,
}

/// Per-replication losses, indexed `[replication][estimator][loss]`.
#[derive(Debug, Clone)]
pub struct LossTable {
    pub reps: usize,
    pub estimators: usize,
    pub losses: Vec<LossKind>,
    values: Vec<f64>,
}

impl LossTable {
    pub fn get(&self, rep: usize, estimator: usize, loss: usize) -> f64 {
        self.values[(rep * self.estimators + estimator) * self.losses.len() + loss]
    }

    /// Loss values of one (estimator, loss) cell across replications.
    pub fn column(&self, estimator: usize, loss: usize) -> Vec<f64> {
        (0..self.reps).map(|r| self.get(r, estimator, loss)).collect()
    }

    pub fn summary(&self, estimator: usize, loss: usize) -> MeanSe {
        mean_se(&self.column(estimator, loss))
    }

    /// Paired differences `candidate − baseline`.
    pub fn differences(&self, baseline: usize, candidate: usize, loss: usize) -> Vec<f64> {
        (0..self.reps)
            .map(|r| self.get(r, candidate, loss) - self.get(r, baseline, loss))
            .collect()
    }

    /// PRIAL of `candidate` over `baseline` with a delta-method standard
    /// error (meaningful for paired tables).
    pub fn prial(&self, baseline: usize, candidate: usize, loss: usize) -> Result<PrialEstimate> {
        let base = self.column(baseline, loss);
        let cand = self.column(candidate, loss);
        let base_mean = pairwise_sum(&base) / self.reps as f64;
        if base_mean.is_nan() || base_mean <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "baseline average loss must be positive, got {base_mean}"
            )));
        }
        let ratio = pairwise_sum(&cand) / self.reps as f64 / base_mean;
        let resid: Vec<f64> = cand.iter().zip(&base).map(|(c, b)| c - ratio * b).collect();
        let se = mean_se(&resid).std_err / base_mean;
        Ok(PrialEstimate {
            prial: 100.0 * (1.0 - ratio),
            std_err: 100.0 * se,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrialEstimate {
    pub prial: f64,
    pub std_err: f64,
}

fn evaluate_all(
    sc: &Scenario,
    draw: &CanonicalSample,
    rep: usize,
    specs: &[EstimatorSpec],
    losses: &[LossKind],
    out: &mut Vec<f64>,
) -> Result<()> {
    for spec in specs {
        let est = estimate(spec, &draw.s)?;
        for loss in losses {
            let v = loss.evaluate(sc.sigma(), &draw.s, &est)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    replication: rep,
                    what: format!("{loss} loss of {} is {v}", spec.label),
                });
            }
            out.push(v);
        }
    }
    Ok(())
}

/// Evaluates every estimator under every loss on `reps` replications.
///
/// Paired: all estimators see the sample of stream `r`. Unpaired: estimator
/// `j` sees stream `(j << 32) + r`.
pub fn simulate_losses(
    sc: &Scenario,
    specs: &[EstimatorSpec],
    losses: &[LossKind],
    reps: usize,
    seed: u64,
    pairing: Pairing,
) -> Result<LossTable> {
    if reps < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 replications, got {reps}")));
    }
    if specs.is_empty() || losses.is_empty() {
        return Err(Error::InvalidParameter("no estimators or losses to evaluate".into()));
    }
    let per_rep: Vec<Vec<f64>> = match pairing {
        Pairing::Paired => replicate(sc, reps, seed, 0, |r, draw| {
            let mut row = Vec::with_capacity(specs.len() * losses.len());
            evaluate_all(sc, draw, r, specs, losses, &mut row)?;
            Ok(row)
        })?,
        Pairing::Unpaired => {
            let mut by_est = Vec::with_capacity(specs.len());
            for (j, spec) in specs.iter().enumerate() {
                let spec = std::slice::from_ref(spec);
                by_est.push(replicate(sc, reps, seed, (j as u64) << 32, |r, draw| {
                    let mut row = Vec::with_capacity(losses.len());
                    evaluate_all(sc, draw, r, spec, losses, &mut row)?;
                    Ok(row)
                })?);
            }
            (0..reps)
                .map(|r| by_est.iter().flat_map(|cols| cols[r].iter().copied()).collect())
                .collect()
        }
    };
    Ok(LossTable {
        reps,
        estimators: specs.len(),
        losses: losses.to_vec(),
        values: per_rep.into_iter().flatten().collect(),
    })
}

/// Scenario metadata carried by every report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub p: usize,
    pub m: usize,
    pub q: usize,
    pub family: String,
    pub rho: Option<f64>,
}

impl From<&Scenario> for ScenarioSummary {
    fn from(sc: &Scenario) -> Self {
        Self {
            p: sc.p(),
            m: sc.m(),
            q: sc.q(),
            family: sc.family().to_string(),
            rho: sc.rho(),
        }
    }
}

/// Monte Carlo risk of one estimator under one loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub scenario: ScenarioSummary,
    pub estimator: EstimatorSpec,
    pub loss: LossKind,
    pub reps: usize,
    pub seed: u64,
    pub avg_loss: f64,
    pub std_err: f64,
    /// PRIAL (%) over the run's baseline estimator, when there is one.
    pub prial: Option<f64>,
}

impl RiskReport {
    pub fn from_table(
        sc: &Scenario,
        table: &LossTable,
        specs: &[EstimatorSpec],
        estimator: usize,
        loss: usize,
        seed: u64,
    ) -> Self {
        let summary = table.summary(estimator, loss);
        Self {
            scenario: sc.into(),
            estimator: specs[estimator].clone(),
            loss: table.losses[loss],
            reps: table.reps,
            seed,
            avg_loss: summary.mean,
            std_err: summary.std_err,
            prial: None,
        }
    }
}

/// Monte Carlo estimate of `E[L(Σ̂, Σ)]`.
pub fn mc_risk(sc: &Scenario, spec: &EstimatorSpec, loss: LossKind, reps: usize, seed: u64) -> Result<RiskReport> {
    let specs = std::slice::from_ref(spec);
    let table = simulate_losses(sc, specs, &[loss], reps, seed, Pairing::Paired)?;
    Ok(RiskReport::from_table(sc, &table, specs, 0, 0, seed))
}

/// `100·(baseline − candidate)/baseline` on average losses.
pub fn prial(baseline: &RiskReport, candidate: &RiskReport) -> Result<f64> {
    if baseline.scenario != candidate.scenario
        || baseline.loss != candidate.loss
        || baseline.reps != candidate.reps
        || baseline.seed != candidate.seed
    {
        return Err(Error::InvalidParameter(
            "PRIAL needs reports from the same scenario, loss, replications and seed".into(),
        ));
    }
    if baseline.avg_loss.is_nan() || baseline.avg_loss <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "baseline average loss must be positive, got {}",
            baseline.avg_loss
        )));
    }
    Ok(100.0 * (baseline.avg_loss - candidate.avg_loss) / baseline.avg_loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskDifference {
    pub delta: f64,
    pub std_err: f64,
}

/// Paired estimate of `R(a_o(S + SS⁺G)) − R(a_o S)` under the data-based
/// loss, `G = (t/tr S⁺)·SS⁺`.
pub fn risk_difference_sign(sc: &Scenario, t: f64, reps: usize, seed: u64) -> Result<RiskDifference> {
    risk_difference_with(sc, t, LossKind::DataBased, reps, seed)
}

pub fn risk_difference_with(
    sc: &Scenario,
    t: f64,
    loss: LossKind,
    reps: usize,
    seed: u64,
) -> Result<RiskDifference> {
    let a = a_optimal(sc.p(), sc.m(), sc.k_star()?);
    let specs = [EstimatorSpec::usual(a)?, EstimatorSpec::corrected(a, t)?];
    let table = simulate_losses(sc, &specs, &[loss], reps, seed, Pairing::Paired)?;
    let d = mean_se(&table.differences(0, 1, 0));
    Ok(RiskDifference {
        delta: d.mean,
        std_err: d.std_err,
    })
}
