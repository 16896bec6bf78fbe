//! ELBO evaluation.
//!
//! Two estimators are provided. The direct estimator averages
//! `log p(x_{0:K}) − log q(x_{1:K} | x₀)` over sampled forward chains. The
//! reduced estimator uses the fact that, per reverse jump, the only
//! model-dependent part of the KL is the Gaussian cross-entropy against the
//! first two moments of `q(x_s | x_t)`, which the mixture oracle gives
//! exactly. Reduced values drop model-independent constants, so only their
//! differences across models are meaningful; direct values are absolute.
//!
//! Both report the negative ELBO (an upper bound on the negative
//! log-likelihood), so lower is better in every mode.

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{Covariance, ReverseKernel};
use crate::gmm::GmmSpec;
use crate::rng::{family, standard_normal, stream};
use crate::schedule::{Jump, Timepoint, VpSde};
use crate::stats::Accumulator;
#[allow(unused_imports)]
use crate::math::Float;

const LN_2PI: f64 = 1.8378770664093453;

/// A reverse kernel as a function of the jump and the current state.
pub type KernelFn<'a> = dyn Fn(&Jump, &[f64]) -> Result<ReverseKernel> + Sync + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Direct,
    Reduced,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Direct => "direct",
            Mode::Reduced => "reduced",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    pub total: f64,
    pub stderr: f64,
    /// Direct: jumps `1..=K` (jump `k` lands on `τ_{k-1}`), then the prior
    /// term. Reduced: jumps `1..=K`.
    pub per_step: Vec<f64>,
    pub mode: Mode,
    /// Per chain (direct) or per state index summed over jumps (reduced).
    /// Samples with the same index share randomness across models.
    pub samples: Vec<f64>,
}

impl ElboReport {
    fn from_columns(columns: Vec<Vec<f64>>, mode: Mode) -> Self {
        let m = columns[0].len();
        let samples: Vec<f64> = (0..m).map(|i| columns.iter().map(|c| c[i]).sum()).collect();
        let per_step = columns.iter().map(|c| c.iter().sum::<f64>() / m as f64).collect();
        let acc: Accumulator = samples.iter().copied().collect();
        Self { total: acc.mean(), stderr: acc.stderr(), per_step, mode, samples }
    }
}

/// Mean and standard error of `a − b` over paired samples.
pub fn paired_gap(a: &ElboReport, b: &ElboReport) -> (f64, f64) {
    paired_difference(&a.samples, &b.samples)
}

pub fn paired_difference(a: &[f64], b: &[f64]) -> (f64, f64) {
    let acc: Accumulator = a.iter().zip(b).map(|(x, y)| x - y).collect();
    (acc.mean(), acc.stderr())
}

/// First two moments of `q(x_s | x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

/// `μ = μ̃(x, E[x₀|x])` and `M = λ² I + γ² Cov[x₀|x]`.
pub fn target_moments(spec: &GmmSpec, jump: &Jump, x: &[f64]) -> Result<Target> {
    let m = spec.x0_moments(jump.from.alpha_bar, jump.from.beta_bar, x)?;
    let g = jump.gamma();
    let mut cov = m.cov * (g * g);
    for i in 0..x.len() {
        cov[(i, i)] += jump.lambda_sq;
    }
    Ok(Target { mean: jump.tilde_mu(x, &m.mean), cov })
}

/// The same moments written with the continuous transition coefficients:
/// mean `√α_{t|s} β_{s|0}/β_{t|0} x + √α_{s|0} β_{t|s}/β_{t|0} E[x₀|x]`,
/// covariance `β̃_{s|t} I + α_{s|0} β_{t|s}²/β_{t|0}² Cov[x₀|x]`.
pub fn continuous_target_moments(spec: &GmmSpec, sde: &VpSde, s: f64, t: f64, x: &[f64]) -> Result<Target> {
    let c = sde.coeffs(s, t)?;
    let (bs, bt) = (sde.beta_from_origin(s), sde.beta_from_origin(t));
    let as0 = sde.alpha_from_origin(s);
    let m = spec.x0_moments(sde.alpha_from_origin(t), bt, x)?;
    let wx = c.alpha.sqrt() * bs / bt;
    let w0 = as0.sqrt() * c.beta / bt;
    let mean = x.iter().zip(&m.mean).map(|(x, m0)| wx * x + w0 * m0).collect();
    let mut cov = m.cov * (as0 * c.beta * c.beta / (bt * bt));
    for i in 0..x.len() {
        cov[(i, i)] += c.beta_tilde;
    }
    Ok(Target { mean, cov })
}

/// `½ E_{q(x_s|x_t)}[−log p(x_s|x_t)]` minus `(d/2) log 2π`:
/// diagonal `½ Σᵢ [(Mᵢᵢ + (μᵢ − μqᵢ)²)/σᵢ² + ln σᵢ²]`, full
/// `½ [tr(Σ⁻¹M) + δᵀΣ⁻¹δ + ln|Σ|]`.
pub fn reduced_kl_state(kernel: &ReverseKernel, target: &Target) -> Result<f64> {
    let d = kernel.dim();
    if target.mean.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: target.mean.len() });
    }
    match &kernel.cov {
        Covariance::Full(sigma) => {
            let chol = Cholesky::new(sigma.clone()).ok_or(Error::NotPositiveDefinite)?;
            let delta = DVector::from_iterator(d, kernel.mean.iter().zip(&target.mean).map(|(a, b)| a - b));
            let trace = chol.solve(&target.cov).trace();
            let quad = delta.dot(&chol.solve(&delta));
            let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            Ok(0.5 * (trace + quad + log_det))
        }
        cov => {
            let var = cov.diagonal(d);
            let mut total = 0.0;
            for i in 0..d {
                let v = var[i];
                if !(v > 0.0) {
                    return Err(Error::NonPositiveVariance(v));
                }
                let delta = kernel.mean[i] - target.mean[i];
                total += (target.cov[(i, i)] + delta * delta) / v + v.ln();
            }
            Ok(0.5 * total)
        }
    }
}

/// The minimum of [`reduced_kl_state`] over all Gaussians: `½(d + ln|M|)`.
pub fn reduced_kl_floor(target: &Target) -> Result<f64> {
    let d = target.mean.len();
    let chol = Cholesky::new(target.cov.clone()).ok_or(Error::NotPositiveDefinite)?;
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    Ok(0.5 * (d as f64 + log_det))
}

/// The minimum of [`reduced_kl_state`] over diagonal Gaussians:
/// `½ Σᵢ (1 + ln Mᵢᵢ)`.
pub fn reduced_kl_diag_floor(target: &Target) -> f64 {
    0.5 * target.cov.diagonal().iter().map(|m| 1.0 + m.ln()).sum::<f64>()
}

/// `KL(N(a, v I) ‖ kernel)`.
pub fn kl_isotropic_to_kernel(a: &[f64], v: f64, kernel: &ReverseKernel) -> Result<f64> {
    let d = kernel.dim();
    if a.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: a.len() });
    }
    if !(v > 0.0) {
        return Err(Error::NonPositiveVariance(v));
    }
    let target = Target { mean: a.to_vec(), cov: DMatrix::identity(d, d) * v };
    Ok(reduced_kl_state(kernel, &target)? - 0.5 * d as f64 * (1.0 + v.ln()))
}

fn level_stream(base: u64, at: &Timepoint) -> u64 {
    let bits = at.alpha_bar.to_bits();
    base | ((bits ^ (bits >> 32)) & 0xffff_ffff)
}

/// States `x ~ q(x_t)`, drawn from a stream that depends only on the noise
/// level, so different models and different trajectories through the same
/// level see the same states.
pub fn level_states(spec: &GmmSpec, at: &Timepoint, count: usize, seed: u64, family: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, level_stream(family, at));
    (0..count)
        .map(|_| {
            let x0 = spec.sample_one(&mut rng);
            let eps = standard_normal(&mut rng, spec.dim());
            at.noised(&x0, &eps)
        })
        .collect()
}

/// Per-state reduced values for one jump.
pub fn reduced_step_samples(jump: &Jump, kernel: &KernelFn, spec: &GmmSpec, m: usize, seed: u64) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::ZeroBudget);
    }
    level_states(spec, &jump.from, m, seed, family::REDUCED_KL)
        .iter()
        .map(|x| reduced_kl_state(&kernel(jump, x)?, &target_moments(spec, jump, x)?))
        .collect()
}

/// Reduced per-jump KL `(value, stderr)` over `m` states from `q(x_t)`.
pub fn kl_reduced_step(jump: &Jump, kernel: &KernelFn, spec: &GmmSpec, m: usize, seed: u64) -> Result<(f64, f64)> {
    let acc: Accumulator = reduced_step_samples(jump, kernel, spec, m, seed)?.into_iter().collect();
    Ok((acc.mean(), acc.stderr()))
}

/// Continuous-time counterpart of [`kl_reduced_step`] for the jump `t -> s`.
pub fn kl_continuous(sde: &VpSde, s: f64, t: f64, kernel: &KernelFn, spec: &GmmSpec, m: usize, seed: u64) -> Result<(f64, f64)> {
    if m == 0 {
        return Err(Error::ZeroBudget);
    }
    let jump = sde.jump(s, t)?;
    let mut acc = Accumulator::new();
    for x in level_states(spec, &jump.from, m, seed, family::CONTINUOUS_KL) {
        let target = continuous_target_moments(spec, sde, s, t, &x)?;
        acc.push(reduced_kl_state(&kernel(&jump, &x)?, &target)?);
    }
    Ok((acc.mean(), acc.stderr()))
}

/// Reduced total over a chain of jumps (`jumps[k-1]` lands on `τ_{k-1}`).
pub fn elbo_reduced(jumps: &[Jump], kernel: &KernelFn, spec: &GmmSpec, m: usize, seed: u64) -> Result<ElboReport> {
    if jumps.is_empty() {
        return Err(Error::InvalidTrajectory("no jumps".into()));
    }
    let columns = jumps
        .iter()
        .map(|j| reduced_step_samples(j, kernel, spec, m, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(ElboReport::from_columns(columns, Mode::Reduced))
}

/// `E KL(q(x_t|x₀) ‖ N(0, I)) = ½[d(β̄ − 1 − ln β̄) + ᾱ E‖x₀‖²]`, exact.
pub fn prior_kl(at: &Timepoint, spec: &GmmSpec) -> f64 {
    let d = spec.dim() as f64;
    let second: f64 = spec
        .weights()
        .iter()
        .zip(spec.means())
        .map(|(w, mu)| w * (mu.iter().map(|m| m * m).sum::<f64>() + d * spec.var()))
        .sum();
    let b = at.beta_bar;
    0.5 * (d * (b - 1.0 - b.ln()) + at.alpha_bar * second)
}

/// Per-jump constants the reduced estimator leaves out, followed by the
/// prior term. A latent jump loses the entropy `(d/2)(1 + ln 2πλ²)` of
/// `q(x_s|x_t,x₀)` and the `(d/2) ln 2π` of the cross-entropy; the last
/// jump only the latter.
pub fn reduced_offsets(jumps: &[Jump], spec: &GmmSpec) -> Result<Vec<f64>> {
    if jumps.is_empty() {
        return Err(Error::InvalidTrajectory("no jumps".into()));
    }
    if jumps[1..].iter().any(|j| !(j.lambda_sq > 0.0)) {
        return Err(Error::DegenerateProcess);
    }
    let half_d = 0.5 * spec.dim() as f64;
    let mut out: Vec<f64> = jumps
        .iter()
        .enumerate()
        .map(|(k, j)| if k == 0 { half_d * LN_2PI } else { -half_d * (1.0 + j.lambda_sq.ln()) })
        .collect();
    out.push(prior_kl(&jumps[jumps.len() - 1].from, spec));
    Ok(out)
}

/// The reduced estimator with its constants restored: an estimate of the
/// same negative ELBO as [`elbo_direct`], laid out the same way.
pub fn elbo_reduced_absolute(jumps: &[Jump], kernel: &KernelFn, spec: &GmmSpec, m: usize, seed: u64) -> Result<ElboReport> {
    let offsets = reduced_offsets(jumps, spec)?;
    let mut report = elbo_reduced(jumps, kernel, spec, m, seed)?;
    let shift: f64 = offsets.iter().sum();
    report.total += shift;
    report.samples.iter_mut().for_each(|v| *v += shift);
    for (step, c) in report.per_step.iter_mut().zip(&offsets) {
        *step += c;
    }
    report.per_step.push(offsets[offsets.len() - 1]);
    Ok(report)
}

fn standard_normal_logpdf(x: &[f64]) -> f64 {
    -0.5 * x.iter().map(|v| LN_2PI + v * v).sum::<f64>()
}

fn isotropic_logpdf(x: &[f64], mean: &[f64], var: f64) -> f64 {
    -0.5 * x
        .iter()
        .zip(mean)
        .map(|(x, m)| LN_2PI + var.ln() + (x - m) * (x - m) / var)
        .sum::<f64>()
}

/// Per-chain, per-jump negative log-ratio terms. `out[k][i]` for chain `i`;
/// the last row holds the prior term.
fn direct_columns(jumps: &[Jump], kernels: &[&KernelFn], spec: &GmmSpec, m: usize, seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    if m == 0 {
        return Err(Error::ZeroBudget);
    }
    if jumps.is_empty() {
        return Err(Error::InvalidTrajectory("no jumps".into()));
    }
    if jumps[1..].iter().any(|j| !(j.lambda_sq > 0.0)) {
        return Err(Error::DegenerateProcess);
    }
    let k = jumps.len();
    let mut out = alloc::vec![alloc::vec![alloc::vec![0.0; m]; k + 1]; kernels.len()];
    let top = jumps[k - 1].from;
    for i in 0..m {
        let mut rng = stream(seed, family::DIRECT_ELBO | i as u64);
        let x0 = spec.sample_one(&mut rng);
        let eps = standard_normal(&mut rng, spec.dim());
        // states[k] = x_{τ_k}
        let mut states = alloc::vec![Vec::new(); k + 1];
        states[k] = top.noised(&x0, &eps);
        let prior = standard_normal_logpdf(&states[k]) - isotropic_logpdf(&states[k], &top.noised(&x0, &alloc::vec![0.0; x0.len()]), top.beta_bar);
        let mut forward = alloc::vec![0.0; k + 1];
        for step in (2..=k).rev() {
            let jump = &jumps[step - 1];
            let mean = jump.tilde_mu(&states[step], &x0);
            let sd = jump.lambda_sq.sqrt();
            let z = standard_normal(&mut rng, x0.len());
            let next: Vec<f64> = mean.iter().zip(&z).map(|(m, z)| m + sd * z).collect();
            forward[step] = isotropic_logpdf(&next, &mean, jump.lambda_sq);
            states[step - 1] = next;
        }
        states[0] = x0;
        for (model, kernel) in kernels.iter().enumerate() {
            for step in 1..=k {
                let p = kernel(&jumps[step - 1], &states[step])?.log_density(&states[step - 1])?;
                out[model][step - 1][i] = forward[step] - p;
            }
            out[model][k][i] = -prior;
        }
    }
    Ok(out)
}

/// Direct Monte Carlo negative ELBO over `m` forward chains.
pub fn elbo_direct(jumps: &[Jump], kernel: &KernelFn, spec: &GmmSpec, m: usize, seed: u64) -> Result<ElboReport> {
    let columns = direct_columns(jumps, &[kernel], spec, m, seed)?.pop().expect("one model");
    Ok(ElboReport::from_columns(columns, Mode::Direct))
}

/// Evaluates several models on shared randomness.
pub fn compare(
    models: &[(String, &KernelFn)],
    jumps: &[Jump],
    spec: &GmmSpec,
    mode: Mode,
    m: usize,
    seed: u64,
) -> Result<Vec<(String, ElboReport)>> {
    if models.is_empty() {
        return Err(Error::InvalidConfig("no models to compare".into()));
    }
    match mode {
        Mode::Reduced => models
            .iter()
            .map(|(name, k)| Ok((name.clone(), elbo_reduced(jumps, *k, spec, m, seed)?)))
            .collect(),
        Mode::Direct => {
            let kernels: Vec<&KernelFn> = models.iter().map(|(_, k)| *k).collect();
            let columns = direct_columns(jumps, &kernels, spec, m, seed)?;
            Ok(models
                .iter()
                .zip(columns)
                .map(|((name, _), c)| (name.clone(), ElboReport::from_columns(c, Mode::Direct)))
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{CovarianceRule, Oracle, ReverseModel};
    use crate::schedule::{ProcessKind, Schedule};
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mean_offset_adds_quadratic_term() {
        let target = Target { mean: vec![0.0, 1.0], cov: DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.2])) };
        let base = ReverseKernel { mean: vec![0.0, 1.0], cov: Covariance::Diagonal(vec![0.4, 0.3]) };
        let shifted = ReverseKernel { mean: vec![0.3, 0.8], cov: base.cov.clone() };
        let gap = reduced_kl_state(&shifted, &target).unwrap() - reduced_kl_state(&base, &target).unwrap();
        assert_abs_diff_eq!(gap, 0.5 * (0.09 / 0.4 + 0.04 / 0.3), epsilon = 1e-14);
    }

    #[test]
    fn full_formula_reduces_to_diagonal() {
        let target = Target { mean: vec![0.2, -0.1], cov: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]) };
        let diag = ReverseKernel { mean: vec![0.0, 0.0], cov: Covariance::Diagonal(vec![0.4, 0.7]) };
        let full = ReverseKernel { mean: vec![0.0, 0.0], cov: Covariance::Full(diag.cov.to_matrix(2)) };
        assert_abs_diff_eq!(
            reduced_kl_state(&diag, &target).unwrap(),
            reduced_kl_state(&full, &target).unwrap(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn moment_matched_kernel_attains_floor() {
        let target = Target { mean: vec![0.3], cov: DMatrix::from_element(1, 1, 0.25) };
        let k = ReverseKernel { mean: vec![0.3], cov: Covariance::Isotropic(0.25) };
        assert_abs_diff_eq!(reduced_kl_state(&k, &target).unwrap(), reduced_kl_diag_floor(&target), epsilon = 1e-15);
        assert_abs_diff_eq!(reduced_kl_floor(&target).unwrap(), 0.5 * (1.0 + 0.25f64.ln()), epsilon = 1e-15);
    }

    #[test]
    fn rejects_degenerate_and_empty() {
        let s = Schedule::from_betas(vec![0.1, 0.2]).unwrap();
        let oracle = Oracle::exact(GmmSpec::standard_normal(1));
        let model = ReverseModel::new(&oracle, CovarianceRule::Sn);
        let k = |j: &Jump, x: &[f64]| model.kernel(j, x);
        let ddim = s.jumps(&ProcessKind::Ddim).unwrap();
        assert_eq!(elbo_direct(&ddim, &k, &oracle.spec, 10, 0).unwrap_err(), Error::DegenerateProcess);
        let ddpm = s.jumps(&ProcessKind::Ddpm).unwrap();
        assert_eq!(elbo_direct(&ddpm, &k, &oracle.spec, 0, 0).unwrap_err(), Error::ZeroBudget);
        assert!(compare(&[], &ddpm, &oracle.spec, Mode::Reduced, 5, 0).is_err());
    }

    #[test]
    fn single_step_telescopes() {
        let s = Schedule::from_betas(vec![0.3]).unwrap();
        let spec = GmmSpec::standard_normal(1);
        let oracle = Oracle::exact(spec.clone());
        let model = ReverseModel::new(&oracle, CovarianceRule::Sn);
        let k = |j: &Jump, x: &[f64]| model.kernel(j, x);
        let jumps = s.jumps(&ProcessKind::Ddpm).unwrap();
        let r = elbo_direct(&jumps, &k, &spec, 50, 3).unwrap();
        assert_eq!(r.per_step.len(), 2);
        assert_abs_diff_eq!(r.per_step.iter().sum::<f64>(), r.total, epsilon = 1e-10);
    }
}
