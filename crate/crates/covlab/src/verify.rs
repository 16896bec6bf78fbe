//! Numerical self-checks of the estimator library.

use dpm_covlab_core::elbo::{self, Target};
use dpm_covlab_core::estimator::{self, Covariance, CovarianceRule, ReverseKernel, ReverseModel};
use dpm_covlab_core::net::{self, AuxKind, LossKind, NetConfig, PredictorBundle, TimeDomain, TrainingDomain};
use dpm_covlab_core::rng::stream;
use dpm_covlab_core::sampler::{self, SampleConfig};
use dpm_covlab_core::trajectory::{self, Trajectory};
use dpm_covlab_core::{GmmSpec, Jump, Oracle, ProcessKind, Schedule, VpSde};
use rand::Rng;
use serde::Serialize;

use crate::oracles;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

/// `measured <= threshold` passes; errors count as failures.
fn check(name: &str, threshold: f64, detail: &str, measured: anyhow::Result<f64>) -> Check {
    match measured {
        Ok(m) => Check {
            name: name.into(),
            passed: m <= threshold,
            measured: m,
            threshold,
            detail: detail.into(),
        },
        Err(e) => Check {
            name: name.into(),
            passed: false,
            measured: f64::NAN,
            threshold,
            detail: format!("{detail}; error: {e:#}"),
        },
    }
}

/// A random `(jump, state)` pair on a 100-step DDPM schedule.
fn random_point<R: Rng>(rng: &mut R, schedule: &Schedule, spec: &GmmSpec) -> anyhow::Result<(Jump, Vec<f64>)> {
    let n = rng.random_range(1..=schedule.steps());
    let jump = schedule.jump(&ProcessKind::Ddpm, n)?;
    let x0 = spec.sample_one(rng);
    let eps = dpm_covlab_core::rng::standard_normal(rng, spec.dim());
    Ok((jump, jump.from.noised(&x0, &eps)))
}

/// Target moments built from the quadrature-free posterior and the
/// linearity form of γ, so they do not depend on `Jump::gamma`.
fn independent_target(spec: &GmmSpec, jump: &Jump, x: &[f64]) -> anyhow::Result<Target> {
    let m = spec.x0_moments(jump.from.alpha_bar, jump.from.beta_bar, x)?;
    let g = oracles::gamma_by_linearity(jump);
    let mut cov = m.cov * (g * g);
    for i in 0..x.len() {
        cov[(i, i)] += jump.lambda_sq;
    }
    Ok(Target { mean: jump.tilde_mu(x, &m.mean), cov })
}

fn with_scaled_variance(kernel: &ReverseKernel, k: f64) -> ReverseKernel {
    let cov = match &kernel.cov {
        Covariance::Isotropic(v) => Covariance::Isotropic(v * k),
        Covariance::Diagonal(v) => Covariance::Diagonal(v.iter().map(|v| v * k).collect()),
        Covariance::Full(m) => Covariance::Full(m * k),
    };
    ReverseKernel { mean: kernel.mean.clone(), cov }
}

fn quadrature(seed: u64) -> anyhow::Result<f64> {
    let mut rng = stream(seed, 0x7e01);
    let schedule = Schedule::linear(100)?;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let spec = oracles::random_spec(&mut rng, 1);
        for _ in 0..10 {
            let (jump, x) = random_point(&mut rng, &schedule, &spec)?;
            let (a, b) = (jump.from.alpha_bar, jump.from.beta_bar);
            let q = oracles::quadrature(&spec, a, b, x[0]);
            let m = spec.x0_moments(a, b, &x)?;
            let e = spec.eps_moments(a, b, &x)?;
            let e_sq = e.cov[(0, 0)] + e.mean[0] * e.mean[0];
            for d in [m.mean[0] - q.x0_mean, m.cov[(0, 0)] - q.x0_var, e.mean[0] - q.eps_mean, e_sq - q.eps_sq] {
                worst = worst.max(d.abs());
            }
        }
    }
    Ok(worst)
}

fn gamma_identity() -> anyhow::Result<f64> {
    let schedule = Schedule::linear(50)?;
    let mut worst: f64 = 0.0;
    for kind in [ProcessKind::Ddpm, ProcessKind::Ddim] {
        for jump in schedule.jumps(&kind)? {
            worst = worst.max((jump.gamma() - oracles::gamma_by_linearity(&jump)).abs());
        }
        for t in [10, 50] {
            for s in [0, 3, t - 1] {
                let jump = trajectory::restricted_jump(&schedule, &kind, s, t)?;
                worst = worst.max((jump.gamma() - oracles::gamma_by_linearity(&jump)).abs());
            }
        }
    }
    Ok(worst)
}

/// Returns the negated smallest KL increase under ±5% variance changes of
/// the SN oracle kernel, so a positive margin reads as a negative value.
fn optimality(seed: u64) -> anyhow::Result<f64> {
    let mut rng = stream(seed, 0x7e02);
    let schedule = Schedule::linear(100)?;
    let mut margin = f64::INFINITY;
    for i in 0..40 {
        let spec = oracles::random_spec(&mut rng, 1 + i % 2);
        let oracle = Oracle::exact(spec.clone());
        let model = ReverseModel::new(&oracle, CovarianceRule::Sn);
        let (jump, x) = random_point(&mut rng, &schedule, &spec)?;
        let target = independent_target(&spec, &jump, &x)?;
        let kernel = model.kernel(&jump, &x)?;
        let base = elbo::reduced_kl_state(&kernel, &target)?;
        for k in [0.95, 1.05] {
            margin = margin.min(elbo::reduced_kl_state(&with_scaled_variance(&kernel, k), &target)? - base);
        }
    }
    Ok(-margin)
}

fn correction(seed: u64) -> anyhow::Result<f64> {
    let mut rng = stream(seed, 0x7e03);
    let schedule = Schedule::linear(100)?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let spec = oracles::random_spec(&mut rng, 1);
        let (jump, x) = random_point(&mut rng, &schedule, &spec)?;
        let exact = Oracle::exact(spec.clone());
        let sn = ReverseModel::new(&exact, CovarianceRule::Sn).kernel(&jump, &x)?.cov.diagonal(1)[0];
        for delta in [0.1, 0.5, 1.0] {
            let biased = Oracle::biased(spec.clone(), delta);
            let npr = ReverseModel::new(&biased, CovarianceRule::Npr).kernel(&jump, &x)?.cov.diagonal(1)[0];
            let g = oracles::gamma_by_linearity(&jump);
            let expect = sn + g * g * jump.from.beta_bar / jump.from.alpha_bar * delta * delta;
            worst = worst.max((npr - expect).abs());
        }
    }
    Ok(worst)
}

fn full_vs_diagonal(seed: u64) -> anyhow::Result<f64> {
    let mut rng = stream(seed, 0x7e04);
    let schedule = Schedule::linear(100)?;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..40 {
        let spec = oracles::random_spec(&mut rng, 2);
        let oracle = Oracle::exact(spec.clone());
        let (jump, x) = random_point(&mut rng, &schedule, &spec)?;
        let target = independent_target(&spec, &jump, &x)?;
        let full = ReverseModel::new(&oracle, CovarianceRule::FullOracle(spec.clone())).kernel(&jump, &x)?;
        let diag = ReverseModel::new(&oracle, CovarianceRule::Sn).kernel(&jump, &x)?;
        worst = worst.max(elbo::reduced_kl_state(&full, &target)? - elbo::reduced_kl_state(&diag, &target)?);
    }
    Ok(worst)
}

fn continuous_discrete(seed: u64) -> anyhow::Result<f64> {
    let mut rng = stream(seed, 0x7e05);
    let sde = VpSde::default();
    let steps = 200;
    let schedule = sde.discretize(steps)?;
    let spec = oracles::random_spec(&mut rng, 2);
    let mut worst: f64 = 0.0;
    for n in [1, 2, 10, 50, 100, 199, 200] {
        let (s, t) = ((n - 1) as f64 / steps as f64, n as f64 / steps as f64);
        let jump = schedule.jump(&ProcessKind::Ddpm, n)?;
        let x0 = spec.sample_one(&mut rng);
        let x = jump.from.noised(&x0, &dpm_covlab_core::rng::standard_normal(&mut rng, 2));
        let eps = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let u = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let mut diffs: Vec<f64> = Vec::new();
        let dm = estimator::continuous_mean(&sde, s, t, &x, &eps)?;
        diffs.extend(dm.iter().zip(estimator::optimal_mean(&jump, &x, &eps)).map(|(a, b)| a - b));
        let dv = estimator::continuous_variance(&sde, s, t, &u)?;
        diffs.extend(dv.iter().zip(estimator::npr_variance(&jump, &u)).map(|(a, b)| a - b));
        if n > 1 {
            let ct = elbo::continuous_target_moments(&spec, &sde, s, t, &x)?;
            let dt = elbo::target_moments(&spec, &jump, &x)?;
            diffs.extend(ct.mean.iter().zip(&dt.mean).map(|(a, b)| a - b));
            diffs.extend((&ct.cov - &dt.cov).iter().copied());
        }
        worst = diffs.iter().fold(worst, |w, d| w.max(d.abs()));
    }
    Ok(worst)
}

fn semigroup() -> anyhow::Result<f64> {
    let sde = VpSde::default();
    let mut worst: f64 = 0.0;
    for (s, u, t) in [(0.0, 0.3, 1.0), (0.1, 0.2, 0.25), (0.5, 0.7, 0.9), (1e-3, 0.5, 1.0)] {
        let (su, ut, st) = (sde.coeffs(s, u)?, sde.coeffs(u, t)?, sde.coeffs(s, t)?);
        worst = worst.max((su.alpha * ut.alpha - st.alpha).abs());
        worst = worst.max((ut.alpha * su.beta + ut.beta - st.beta).abs());
    }
    Ok(worst)
}

fn dp_brute_force(seed: u64) -> anyhow::Result<f64> {
    let mut rng = stream(seed, 0x7e06);
    let mut worst: f64 = 0.0;
    for steps in 1..=8 {
        let cost = oracles::random_costs(&mut rng, steps);
        for k in 1..=steps {
            let (tau, value) = trajectory::optimal_trajectory_dp(&cost, k)?;
            let (_, brute) = oracles::brute_force_trajectory(&cost, k);
            worst = worst.max((value - brute).abs());
            worst = worst.max((trajectory::trajectory_cost(&cost, &tau) - value).abs());
        }
    }
    Ok(worst)
}

/// Largest relative gradient error; any non-zero frozen gradient fails.
fn grad_checks(seed: u64) -> anyhow::Result<f64> {
    let schedule = Schedule::linear(30)?;
    let spec = GmmSpec::new(vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![-1.0, 0.5]], 0.2)?;
    let config = NetConfig { dim: 2, embed_dim: 8, hidden: 12, depth: 2, head_hidden: 6, head_skip: true, cross: true };
    let domain = TrainingDomain::Discrete(&schedule);
    let batch = net::sample_batch(&spec, &domain, 16, None, seed)?;
    let mut worst: f64 = 0.0;
    for (kind, aux) in [(LossKind::Eps, AuxKind::None), (LossKind::Sn, AuxKind::Sn), (LossKind::Npr, AuxKind::Npr)] {
        let bundle = PredictorBundle::random(config, TimeDomain::Discrete { steps: 30 }, aux, seed)?;
        let g = net::grad_check(&bundle, &batch, kind, 60, seed)?;
        if g.frozen_max_abs != 0.0 {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(g.max_rel_error);
    }
    Ok(worst)
}

fn amplification(seed: u64) -> anyhow::Result<f64> {
    let mut rng = stream(seed, 0x7e07);
    let hat: Vec<f64> = (0..200).map(|_| rng.random_range(-3.0..3.0)).collect();
    let truth: Vec<f64> = (0..200).map(|_| rng.random_range(-3.0..3.0)).collect();
    Ok(estimator::error_amplification(&hat, &truth).iter().map(|(l, r)| (l - r).abs() / l.max(1.0)).fold(0.0, f64::max))
}

/// 0 when repeated runs agree bit for bit, 1 otherwise.
fn determinism(seed: u64) -> anyhow::Result<f64> {
    let schedule = Schedule::linear(40)?;
    let spec = GmmSpec::new(vec![0.3, 0.7], vec![vec![-1.0], vec![2.0]], 0.1)?;
    let oracle = Oracle::exact(spec.clone());
    let model = ReverseModel::new(&oracle, CovarianceRule::Npr);
    let kernel = |j: &Jump, x: &[f64]| model.kernel(j, x);
    let jumps = trajectory::restrict(&schedule, &ProcessKind::Ddpm, &Trajectory::new(vec![10, 25, 40], 40)?)?;
    let run = || -> anyhow::Result<(Vec<u64>, Vec<u64>)> {
        let r = elbo::elbo_reduced_absolute(&jumps, &kernel, &spec, 50, seed)?;
        let d = elbo::elbo_direct(&jumps, &kernel, &spec, 50, seed)?;
        let s = sampler::ancestral_sample(&kernel, &jumps, 1, &SampleConfig::new(20), seed, "check")?;
        let a = r.samples.iter().chain(&d.samples).map(|v| v.to_bits()).collect();
        let b = s.samples.iter().flatten().map(|v| v.to_bits()).collect();
        Ok((a, b))
    };
    Ok(if run()? == run()? { 0.0 } else { 1.0 })
}

pub fn run(seed: u64) -> Report {
    let checks = vec![
        check("quadrature", 1e-7, "mixture posterior moments against trapezoid quadrature", quadrature(seed)),
        check("gamma_identity", 1e-12, "gamma against the x0 coefficient of the posterior mean", gamma_identity()),
        check(
            "variance_optimality",
            -1e-6,
            "negated smallest reduced KL increase when the oracle variance is scaled by 0.95 or 1.05",
            optimality(seed),
        ),
        check("mean_correction", 1e-10, "corrected variance against sn variance plus the squared-bias term", correction(seed)),
        check("full_dominates_diagonal", 1e-10, "full minus diagonal oracle reduced KL", full_vs_diagonal(seed)),
        check("continuous_discrete", 1e-8, "continuous formulas against the discretized schedule", continuous_discrete(seed)),
        check("semigroup", 1e-10, "transition coefficient composition", semigroup()),
        check("dp_brute_force", 1e-12, "dynamic programme against exhaustive enumeration", dp_brute_force(seed)),
        check("grad_check", 1e-4, "relative error of analytic against finite-difference gradients", grad_checks(seed)),
        check("error_amplification", 1e-12, "squared-error identity", amplification(seed)),
        check("determinism", 0.0, "repeat runs with one seed are bit-identical", determinism(seed)),
    ];
    Report { passed: checks.iter().all(|c| c.passed), checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let report = run(7);
        for c in &report.checks {
            assert!(c.passed, "{}: measured {} threshold {} ({})", c.name, c.measured, c.threshold, c.detail);
        }
    }
}
