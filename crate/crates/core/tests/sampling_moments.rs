use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use scale_shrink::experiment::{with_workers, Workers};
use scale_shrink::family::k_star;
use scale_shrink::risk::{mean_se, replicate};
use scale_shrink::{DistributionFamily, Scenario};

/// Entrywise check of `E[S]/m = c·Σ` within 3 Monte Carlo standard errors.
fn check_first_moment(sc: &Scenario, factor: f64, reps: usize, seed: u64) {
    let p = sc.p();
    let m = sc.m() as f64;
    let draws = replicate(sc, reps, seed, 0, |_, d| Ok(d.s.entries() / m)).unwrap();
    for i in 0..p {
        for j in i..p {
            let xs: Vec<f64> = draws.iter().map(|s| s[(i, j)]).collect();
            let est = mean_se(&xs);
            let target = factor * sc.sigma().entries()[(i, j)];
            assert!(
                (est.mean - target).abs() <= 3.0 * est.std_err,
                "entry ({i},{j}): {} ± {} vs {target}",
                est.mean,
                est.std_err
            );
        }
    }
}

#[test]
fn gaussian_identity_first_moment() {
    let sc = Scenario::ar1(4, 6, 0.0, DistributionFamily::Gaussian).unwrap();
    check_first_moment(&sc, 1.0, 10_000, 101);
}

#[test]
fn gaussian_ar1_first_moment() {
    let sc = Scenario::ar1(4, 6, 0.9, DistributionFamily::Gaussian).unwrap();
    check_first_moment(&sc, 1.0, 10_000, 102);
}

#[test]
fn student_first_moment() {
    let nu = 5.0;
    let sc = Scenario::ar1(3, 5, 0.0, DistributionFamily::student(nu).unwrap()).unwrap();
    check_first_moment(&sc, nu / (nu - 2.0), 10_000, 103);
}

#[test]
fn wishart_trace_moment() {
    for (p, m) in [(5, 8), (3, 10)] {
        let sc = Scenario::ar1(p, m, 0.9, DistributionFamily::Gaussian).unwrap();
        let sinv = sc.sigma().inverse().clone();
        let xs = replicate(&sc, 10_000, 104, 0, |_, d| Ok((&sinv * d.s.entries()).trace())).unwrap();
        let est = mean_se(&xs);
        let target = (m * p) as f64;
        assert!((est.mean - target).abs() <= 3.0 * est.std_err, "{est:?} vs {target}");
    }
}

#[test]
fn singular_scatter_has_rank_m() {
    for (p, m, reps) in [(20, 4, 500), (100, 80, 40), (7, 6, 500)] {
        let sc = Scenario::ar1(p, m, 0.9, DistributionFamily::Gaussian).unwrap();
        let ranks = replicate(&sc, reps, 105, 0, |_, d| Ok(d.s.rank())).unwrap();
        assert!(ranks.iter().all(|&r| r == m), "({p},{m})");
    }
}

#[test]
fn sample_stream_ignores_worker_count() {
    let sc = Scenario::ar1(6, 4, 0.5, DistributionFamily::student(7.0).unwrap()).unwrap();
    let draw = |w| {
        with_workers(Workers::Count(w), || {
            replicate(&sc, 64, 106, 0, |_, d| Ok((d.z.clone(), d.u.clone()))).unwrap()
        })
        .unwrap()
    };
    let one = draw(1);
    let many = draw(4);
    assert_eq!(one, many);
}

/// Importance-sampling estimate of `∫ F*(‖w‖²) dw` over `R^dim` with a
/// multivariate Student proposal of `dof` degrees of freedom.
fn k_star_importance(family: &DistributionFamily, dim: usize, dof: f64, scale2: f64, draws: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let chi = ChiSquared::new(dof).unwrap();
    let d = dim as f64;
    let log_norm = ln_gamma((dof + d) / 2.0) - ln_gamma(dof / 2.0) - 0.5 * d * (dof * std::f64::consts::PI * scale2).ln();
    let weights: Vec<f64> = (0..draws)
        .map(|_| {
            let mix = (chi.sample(&mut rng) / dof).sqrt();
            let r2: f64 = (0..dim)
                .map(|_| {
                    let g: f64 = rng.sample(StandardNormal);
                    let w = scale2.sqrt() * g / mix;
                    w * w
                })
                .sum();
            let log_q = log_norm - 0.5 * (dof + d) * (1.0 + r2 / (dof * scale2)).ln();
            (family.log_f_star(r2, dim) - log_q).exp()
        })
        .collect();
    let est = mean_se(&weights);
    (est.mean, est.std_err)
}

#[test]
fn k_star_matches_importance_sampling() {
    let nu = 5.0;
    let family = DistributionFamily::student(nu).unwrap();
    let (n, p) = (6, 3);
    let quad = k_star(&family, n, p).unwrap();
    let (mc, se) = k_star_importance(&family, n * p, 2.0, nu / 3.0, 400_000);
    assert!((quad - mc).abs() <= 3.0 * se, "quadrature {quad} vs MC {mc} ± {se}");
    assert!(se < 0.01 * mc);
}
