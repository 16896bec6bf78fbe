//! Reverse-process sampling.
//!
//! Every chain draws from its own stream `(seed, chain index)`, so a batch
//! gives the same samples however it is sharded.

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::elbo::KernelFn;
use crate::error::{Error, Result};
use crate::estimator::{clip_variance, MomentProvider};
use crate::gmm::GmmSpec;
use crate::rng::{family, standard_normal, stream, StreamRng};
use crate::schedule::{Jump, VpSde};
use crate::stats::Accumulator;
#[allow(unused_imports)]
use crate::math::Float;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub y: f64,
    #[serde(default = "one")]
    pub data_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub batch: usize,
    /// Clamp on the standard deviation of the jump landing on `τ₁`.
    #[serde(default)]
    pub clip: Option<ClipConfig>,
    /// Emit the mean of the last jump instead of a draw.
    #[serde(default = "yes")]
    pub noiseless_final: bool,
    /// Keep every intermediate state.
    #[serde(default)]
    pub record: bool,
}

impl SampleConfig {
    pub fn new(batch: usize) -> Self {
        Self { batch, clip: None, noiseless_final: true, record: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub samples: Vec<Vec<f64>>,
    pub seed: u64,
    pub label: String,
    /// `trace[i][k]` is chain `i` after `k` jumps, when recording.
    pub trace: Option<Vec<Vec<Vec<f64>>>>,
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { step })
    }
}

fn chain_rng(seed: u64, chain: usize) -> StreamRng {
    stream(seed, family::SAMPLER_CHAIN | chain as u64)
}

/// One ancestral chain. `jumps[k-1]` lands on `τ_{k-1}`; the chain runs
/// from `k = K` down to `1`. Returns the final state and, when recording,
/// the visited states.
pub fn sample_chain(
    kernel: &KernelFn,
    jumps: &[Jump],
    dim: usize,
    config: &SampleConfig,
    seed: u64,
    chain: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut rng = chain_rng(seed, chain);
    let mut x = standard_normal(&mut rng, dim);
    let mut trace = Vec::new();
    if config.record {
        trace.push(x.clone());
    }
    for k in (1..=jumps.len()).rev() {
        let mut p = kernel(&jumps[k - 1], &x)?;
        if k == 2 {
            if let Some(clip) = config.clip {
                p = clip_variance(p, clip.y, clip.data_scale)?;
            }
        }
        x = if k == 1 && config.noiseless_final { p.mean } else { p.sample(&mut rng)? };
        check_finite(&x, k)?;
        if config.record {
            trace.push(x.clone());
        }
    }
    Ok((x, trace))
}

/// Ancestral sampling along precomputed jumps (from a discrete trajectory
/// or a continuous grid).
pub fn ancestral_sample(
    kernel: &KernelFn,
    jumps: &[Jump],
    dim: usize,
    config: &SampleConfig,
    seed: u64,
    label: &str,
) -> Result<SampleRun> {
    if jumps.is_empty() {
        return Err(Error::InvalidTrajectory("no jumps".into()));
    }
    if config.batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut samples = Vec::with_capacity(config.batch);
    let mut traces = Vec::new();
    for i in 0..config.batch {
        let (x, trace) = sample_chain(kernel, jumps, dim, config, seed, i)?;
        samples.push(x);
        if config.record {
            traces.push(trace);
        }
    }
    Ok(SampleRun { samples, seed, label: label.into(), trace: config.record.then_some(traces) })
}

/// Uniform grid `0 = t₀ < t_min = t₁ < … < t_K = T` for `K` jumps: the last
/// jump goes from `t_min` to clean data.
pub fn uniform_grid(sde: &VpSde, jumps: usize, t_min: f64) -> Result<Vec<f64>> {
    if jumps == 0 {
        return Err(Error::ZeroBudget);
    }
    if !(t_min > 0.0 && t_min < sde.horizon) {
        return Err(Error::InvalidTimes { s: 0.0, t: t_min });
    }
    if jumps == 1 {
        return Ok(alloc::vec![0.0, sde.horizon]);
    }
    let mut grid = alloc::vec![0.0];
    for k in 0..jumps {
        grid.push(t_min + (sde.horizon - t_min) * k as f64 / (jumps - 1) as f64);
    }
    Ok(grid)
}

/// Reverse jumps `times[k] -> times[k-1]` of the VP SDE.
pub fn continuous_jumps(sde: &VpSde, times: &[f64]) -> Result<Vec<Jump>> {
    if times.len() < 2 {
        return Err(Error::InvalidTrajectory("need at least two times".into()));
    }
    times.windows(2).map(|w| sde.jump(w[0], w[1])).collect()
}

/// Ancestral sampling on a continuous time grid.
pub fn continuous_sample(
    kernel: &KernelFn,
    sde: &VpSde,
    times: &[f64],
    dim: usize,
    config: &SampleConfig,
    seed: u64,
    label: &str,
) -> Result<SampleRun> {
    let jumps = continuous_jumps(sde, times)?;
    ancestral_sample(kernel, &jumps, dim, config, seed, label)
}

/// Euler–Maruyama on the reverse SDE
/// `dx = [f(t) x − g(t)² ∇log q_t(x)] dt + g(t) dw̄` from `T` to `t_min`,
/// with the score `−e(x, t)/√β_{t|0}` and `g` multiplied by `g_scale`
/// (0 leaves the drift `f(t) x` alone, a deterministic flow). The last step
/// adds no noise.
pub fn euler_maruyama(
    provider: &dyn MomentProvider,
    sde: &VpSde,
    steps: usize,
    t_min: f64,
    g_scale: f64,
    batch: usize,
    seed: u64,
) -> Result<SampleRun> {
    if steps == 0 {
        return Err(Error::ZeroBudget);
    }
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    if !(t_min > 0.0 && t_min < sde.horizon) {
        return Err(Error::InvalidTimes { s: t_min, t: sde.horizon });
    }
    let dim = provider.dim();
    let h = (sde.horizon - t_min) / steps as f64;
    let mut samples = Vec::with_capacity(batch);
    for i in 0..batch {
        let mut rng = chain_rng(seed, i);
        let mut x = standard_normal(&mut rng, dim);
        for k in 0..steps {
            let t = sde.horizon - k as f64 * h;
            let at = sde.timepoint(t);
            let e = provider.moments(&x, &at)?.eps;
            let g2 = sde.diffusion_sq(t) * g_scale * g_scale;
            let f = sde.drift(t);
            let sb = at.beta_bar.sqrt();
            let z = if k + 1 < steps { standard_normal(&mut rng, dim) } else { alloc::vec![0.0; dim] };
            let noise = (g2 * h).sqrt();
            x = x
                .iter()
                .zip(&e)
                .zip(&z)
                .map(|((x, e), z)| x - (f * x + g2 * e / sb) * h + noise * z)
                .collect();
            check_finite(&x, steps - k)?;
        }
        samples.push(x);
    }
    Ok(SampleRun { samples, seed, label: "euler-maruyama".into(), trace: None })
}

/// Desk-scale sample quality against the true mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub count: usize,
    /// ‖empirical mean − true mean‖₂
    pub mean_error: f64,
    /// Frobenius norm of empirical minus true covariance.
    pub cov_error: f64,
    /// Total variation between hard-assignment frequencies and the weights.
    pub weight_error: f64,
    /// Average data log-density of the samples.
    pub loglik: f64,
    pub loglik_stderr: f64,
}

pub fn sample_metrics(samples: &[Vec<f64>], spec: &GmmSpec) -> Result<SampleMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = spec.dim();
    let n = samples.len() as f64;
    let mut mean = alloc::vec![0.0; d];
    for x in samples {
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.len() });
        }
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for x in samples {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]) / n;
            }
        }
    }
    let truth = spec.mean();
    let mean_error = mean.iter().zip(&truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let cov_error = (cov - spec.covariance()).norm();
    let mut counts = alloc::vec![0.0; spec.components()];
    let mut loglik = Accumulator::new();
    for x in samples {
        counts[spec.assign(x)] += 1.0;
        loglik.push(spec.logpdf(x)?);
    }
    let weight_error = 0.5 * counts.iter().zip(spec.weights()).map(|(c, w)| (c / n - w).abs()).sum::<f64>();
    Ok(SampleMetrics {
        count: samples.len(),
        mean_error,
        cov_error,
        weight_error,
        loglik: loglik.mean(),
        loglik_stderr: loglik.stderr(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{CovarianceRule, Oracle, ReverseModel};
    use crate::schedule::{ProcessKind, Schedule};
    use crate::trajectory::{even_trajectory, restrict};
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_jump_emits_mean_of_prior_draw() {
        let s = Schedule::linear(100).unwrap();
        let spec = GmmSpec::standard_normal(2);
        let oracle = Oracle::exact(spec.clone());
        let model = ReverseModel::new(&oracle, CovarianceRule::Sn);
        let k = |j: &Jump, x: &[f64]| model.kernel(j, x);
        let jumps = restrict(&s, &ProcessKind::Ddpm, &even_trajectory(100, 1).unwrap()).unwrap();
        let mut cfg = SampleConfig::new(3);
        cfg.record = true;
        let run = ancestral_sample(&k, &jumps, 2, &cfg, 9, "t").unwrap();
        for (x, trace) in run.samples.iter().zip(run.trace.unwrap()) {
            let expect = model.kernel(&jumps[0], &trace[0]).unwrap().mean;
            assert_eq!(x, &expect);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let s = Schedule::linear(50).unwrap();
        let spec = GmmSpec::new(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], 0.1).unwrap();
        let oracle = Oracle::exact(spec);
        let model = ReverseModel::new(&oracle, CovarianceRule::Npr);
        let k = |j: &Jump, x: &[f64]| model.kernel(j, x);
        let jumps = s.jumps(&ProcessKind::Ddpm).unwrap();
        let a = ancestral_sample(&k, &jumps, 1, &SampleConfig::new(20), 4, "a").unwrap();
        let b = ancestral_sample(&k, &jumps, 1, &SampleConfig::new(20), 4, "a").unwrap();
        assert_eq!(a, b);
        let c = ancestral_sample(&k, &jumps, 1, &SampleConfig::new(20), 5, "a").unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn grid_shape() {
        let sde = VpSde::default();
        let g = uniform_grid(&sde, 4, 1e-3).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 1e-3);
        assert_abs_diff_eq!(g[4], 1.0, epsilon = 1e-15);
        assert!(uniform_grid(&sde, 0, 1e-3).is_err());
    }

    #[test]
    fn metrics_reject_empty_and_flag_collapse() {
        let spec = GmmSpec::new(vec![0.5, 0.5], vec![vec![-2.0], vec![2.0]], 0.1).unwrap();
        assert_eq!(sample_metrics(&[], &spec).unwrap_err(), Error::EmptyBatch);
        let zeros = vec![vec![0.0]; 100];
        let m = sample_metrics(&zeros, &spec).unwrap();
        assert_eq!(m.mean_error, 0.0);
        assert!(m.loglik < -10.0);
    }
}
