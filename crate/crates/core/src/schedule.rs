//! Forward-process quantities.
//!
//! Discrete schedules are indexed `1..=N`; index `0` denotes clean data with
//! `alpha_bar(0) = 1` and `beta_bar(0) = 0`. The λ-indexed family of forward
//! processes is described by [`ProcessKind`], and every reverse transition
//! (a single step or a longer jump on a trajectory) is captured by a [`Jump`].

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;
#[allow(unused_imports)]
use crate::math::Float;

/// Reference length the linear schedule endpoints are defined for.
const LINEAR_REFERENCE_STEPS: f64 = 1000.0;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Explicit,
}

/// Serialized form: `{"kind": "linear" | "explicit", "beta": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleRepr {
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
}

/// A discrete noise schedule with cumulative products precomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct Schedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    /// Linearly spaced betas. The endpoints `1e-4` and `0.02` refer to 1000
    /// steps and are multiplied by `1000 / steps` for other lengths, which
    /// rejects `steps <= 20` (the last beta would reach 1).
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::EmptySchedule);
        }
        let scale = LINEAR_REFERENCE_STEPS / steps as f64;
        let (start, end) = (LINEAR_BETA_START * scale, LINEAR_BETA_END * scale);
        let beta = if steps == 1 {
            alloc::vec![start]
        } else {
            (0..steps)
                .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::build(ScheduleKind::Linear, beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        Self::build(ScheduleKind::Explicit, beta)
    }

    fn build(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::EmptySchedule);
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut running = 1.0;
        for (i, &b) in beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::BetaOutOfRange { index: i + 1, value: b });
            }
            let next = running * (1.0 - b);
            if !(next > 0.0 && next < running) {
                return Err(Error::NonMonotoneSchedule { step: i + 1 });
            }
            alpha_bar.push(next);
            running = next;
        }
        Ok(Self { kind, beta, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    fn check(&self, n: usize) {
        assert!(
            n <= self.steps(),
            "step {n} outside 0..={} of the schedule",
            self.steps()
        );
    }

    pub fn check_step(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps() {
            return Err(Error::StepOutOfRange { step: n, steps: self.steps() });
        }
        Ok(())
    }

    /// βₙ for `1 <= n <= N`.
    pub fn beta(&self, n: usize) -> f64 {
        assert!(n >= 1, "beta is defined for n >= 1");
        self.check(n);
        self.beta[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        1.0 - self.beta(n)
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.check(n);
        if n == 0 {
            1.0
        } else {
            self.alpha_bar[n - 1]
        }
    }

    pub fn beta_bar(&self, n: usize) -> f64 {
        1.0 - self.alpha_bar(n)
    }

    /// β̃ₙ = (β̄ₙ₋₁ / β̄ₙ) βₙ, zero at `n = 1`.
    pub fn beta_tilde(&self, n: usize) -> f64 {
        self.beta_bar(n - 1) / self.beta_bar(n) * self.beta(n)
    }

    pub fn timepoint(&self, n: usize) -> Timepoint {
        Timepoint {
            alpha_bar: self.alpha_bar(n),
            beta_bar: self.beta_bar(n),
            time: n as f64 / self.steps() as f64,
        }
    }

    /// The single-step reverse transition `n -> n - 1`.
    pub fn jump(&self, process: &ProcessKind, n: usize) -> Result<Jump> {
        self.check_step(n)?;
        let lambda_sq = process.lambda_sq(self, n);
        Jump::new(
            self.timepoint(n),
            self.alpha_bar(n - 1),
            self.beta_bar(n - 1),
            lambda_sq,
        )
    }

    /// All single-step jumps, index `n - 1` holding `n -> n - 1`.
    pub fn jumps(&self, process: &ProcessKind) -> Result<Vec<Jump>> {
        (1..=self.steps()).map(|n| self.jump(process, n)).collect()
    }

    /// Draws `x_n = sqrt(alpha_bar_n) x_0 + sqrt(beta_bar_n) eps` and returns
    /// `(x_n, eps)`.
    pub fn forward_sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        x0: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_step(n)?;
        let eps = standard_normal(rng, x0.len());
        Ok((self.timepoint(n).noised(x0, &eps), eps))
    }

    /// FNV-1a over the beta bit patterns; stored in checkpoints so a network
    /// can be matched to the schedule it was trained on.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_f64s(&self.beta)
    }
}

pub(crate) fn fingerprint_f64s(values: &[f64]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

impl TryFrom<ScheduleRepr> for Schedule {
    type Error = Error;

    fn try_from(repr: ScheduleRepr) -> Result<Self> {
        Self::build(repr.kind, repr.beta)
    }
}

impl From<Schedule> for ScheduleRepr {
    fn from(s: Schedule) -> Self {
        ScheduleRepr { kind: s.kind, beta: s.beta }
    }
}

/// Marginal noise level of a point of the forward process together with its
/// normalized time in `(0, 1]` (used by network time embeddings).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timepoint {
    pub alpha_bar: f64,
    pub beta_bar: f64,
    pub time: f64,
}

impl Timepoint {
    pub fn noised(&self, x0: &[f64], eps: &[f64]) -> Vec<f64> {
        let (a, b) = (self.alpha_bar.sqrt(), self.beta_bar.sqrt());
        x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
    }

    /// Recovers `x_0` from `x_t` and a noise estimate.
    pub fn denoised(&self, x: &[f64], eps: &[f64]) -> Vec<f64> {
        let (a, b) = (self.alpha_bar.sqrt(), self.beta_bar.sqrt());
        x.iter().zip(eps).map(|(x, e)| (x - b * e) / a).collect()
    }
}

/// Member of the λ-indexed forward-process family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    /// λₙ² = β̃ₙ (Markovian forward process).
    Ddpm,
    /// λₙ² = 0.
    Ddim,
    /// Explicit λₙ² per step, index `n - 1`.
    Custom(Vec<f64>),
}

impl ProcessKind {
    pub fn custom(schedule: &Schedule, lambda_sq: Vec<f64>) -> Result<Self> {
        if lambda_sq.len() != schedule.steps() {
            return Err(Error::DimensionMismatch {
                expected: schedule.steps(),
                got: lambda_sq.len(),
            });
        }
        let kind = ProcessKind::Custom(lambda_sq);
        kind.validate(schedule)?;
        Ok(kind)
    }

    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        if let ProcessKind::Custom(values) = self {
            if values.len() != schedule.steps() {
                return Err(Error::DimensionMismatch {
                    expected: schedule.steps(),
                    got: values.len(),
                });
            }
            for (i, &v) in values.iter().enumerate() {
                let max = schedule.beta_tilde(i + 1);
                if !(v >= 0.0 && v <= max) {
                    return Err(Error::LambdaOutOfRange { step: i + 1, value: v, max });
                }
            }
        }
        Ok(())
    }

    /// λₙ² for `1 <= n <= N`.
    pub fn lambda_sq(&self, schedule: &Schedule, n: usize) -> f64 {
        match self {
            ProcessKind::Ddpm => schedule.beta_tilde(n),
            ProcessKind::Ddim => 0.0,
            ProcessKind::Custom(values) => values[n - 1],
        }
    }
}

pub fn lambda_sq(schedule: &Schedule, kind: &ProcessKind, n: usize) -> f64 {
    kind.lambda_sq(schedule, n)
}

/// γₙ for step `n` and a given λₙ².
pub fn gamma(schedule: &Schedule, n: usize, lambda_sq: f64) -> Result<f64> {
    schedule.check_step(n)?;
    let jump = Jump::new(
        schedule.timepoint(n),
        schedule.alpha_bar(n - 1),
        schedule.beta_bar(n - 1),
        lambda_sq,
    )?;
    Ok(jump.gamma())
}

/// Forward posterior mean μ̃ₙ(xₙ, x₀).
pub fn tilde_mu(
    schedule: &Schedule,
    n: usize,
    lambda_sq: f64,
    x_n: &[f64],
    x0: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_step(n)?;
    if x_n.len() != x0.len() {
        return Err(Error::DimensionMismatch { expected: x_n.len(), got: x0.len() });
    }
    let jump = Jump::new(
        schedule.timepoint(n),
        schedule.alpha_bar(n - 1),
        schedule.beta_bar(n - 1),
        lambda_sq,
    )?;
    Ok(jump.tilde_mu(x_n, x0))
}

/// Reverse transition from a noisier point `from` to a cleaner point with
/// cumulative coefficients `(to_alpha_bar, to_beta_bar)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    pub from: Timepoint,
    pub to_alpha_bar: f64,
    pub to_beta_bar: f64,
    pub lambda_sq: f64,
}

/// Radicands this far below zero are rounding noise and treated as zero.
const RADICAND_SLACK: f64 = 1e-14;

impl Jump {
    pub fn new(from: Timepoint, to_alpha_bar: f64, to_beta_bar: f64, lambda_sq: f64) -> Result<Self> {
        if !(lambda_sq >= 0.0) {
            return Err(Error::NegativeRadicand(lambda_sq));
        }
        let radicand = to_beta_bar - lambda_sq;
        if radicand < -RADICAND_SLACK {
            return Err(Error::NegativeRadicand(radicand));
        }
        Ok(Self { from, to_alpha_bar, to_beta_bar, lambda_sq })
    }

    /// DDPM choice of λ² for this jump: (β̄_s / β̄_t)(1 - ᾱ_t / ᾱ_s).
    pub fn ddpm_lambda_sq(from: &Timepoint, to_alpha_bar: f64, to_beta_bar: f64) -> f64 {
        to_beta_bar / from.beta_bar * (1.0 - from.alpha_bar / to_alpha_bar)
    }

    /// sqrt(β̄_s - λ²), the weight of the rescaled noise in μ̃.
    pub fn noise_weight(&self) -> f64 {
        (self.to_beta_bar - self.lambda_sq).max(0.0).sqrt()
    }

    pub fn gamma(&self) -> f64 {
        let clean = self.to_alpha_bar.sqrt();
        let leak = self.noise_weight() * (self.from.alpha_bar / self.from.beta_bar).sqrt();
        #[cfg(feature = "fault-hooks")]
        if crate::fault::gamma_sign_flipped() {
            return clean + leak;
        }
        clean - leak
    }

    /// γ² β̄_t / ᾱ_t: maps a noise-space covariance to the covariance it
    /// induces on the target state.
    pub fn eps_covariance_scale(&self) -> f64 {
        let g = self.gamma();
        g * g * self.from.beta_bar / self.from.alpha_bar
    }

    /// Derivative of the optimal mean with respect to the noise prediction:
    /// -γ sqrt(β̄_t / ᾱ_t).
    pub fn eps_mean_sensitivity(&self) -> f64 {
        -self.gamma() * (self.from.beta_bar / self.from.alpha_bar).sqrt()
    }

    pub fn tilde_mu(&self, x_t: &[f64], x0: &[f64]) -> Vec<f64> {
        let clean = self.to_alpha_bar.sqrt();
        let w = self.noise_weight() / self.from.beta_bar.sqrt();
        let a_t = self.from.alpha_bar.sqrt();
        x_t.iter()
            .zip(x0)
            .map(|(xt, x0)| clean * x0 + w * (xt - a_t * x0))
            .collect()
    }
}

/// Closed-form transition coefficients of the VP SDE between times `s < t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionCoeffs {
    /// α_{t|s}
    pub alpha: f64,
    /// β_{t|s}
    pub beta: f64,
    /// β̃_{s|t} = (β_{s|0} / β_{t|0}) β_{t|s}
    pub beta_tilde: f64,
}

/// Variance-preserving SDE `dx = -β(t)/2 x dt + sqrt(β(t)) dw` with
/// `β(t)` linear from `beta_min` at 0 to `beta_max` at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpSde {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
}

impl Default for VpSde {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0, horizon: 1.0 }
    }
}

impl VpSde {
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon
    }

    /// f(t)
    pub fn drift(&self, t: f64) -> f64 {
        -0.5 * self.beta(t)
    }

    /// g(t)²
    pub fn diffusion_sq(&self, t: f64) -> f64 {
        self.beta(t)
    }

    /// ∫ₛᵗ β(τ) dτ
    pub fn integrated_beta(&self, s: f64, t: f64) -> f64 {
        self.beta_min * (t - s) + 0.5 * (self.beta_max - self.beta_min) * (t * t - s * s) / self.horizon
    }

    /// α_{t|0}; equals 1 at `t = 0`.
    pub fn alpha_from_origin(&self, t: f64) -> f64 {
        (-self.integrated_beta(0.0, t)).exp()
    }

    /// β_{t|0}, computed without cancellation.
    pub fn beta_from_origin(&self, t: f64) -> f64 {
        -(-self.integrated_beta(0.0, t)).exp_m1()
    }

    fn check_times(&self, s: f64, t: f64) -> Result<()> {
        if !(s >= 0.0 && s < t && t <= self.horizon) {
            return Err(Error::InvalidTimes { s, t });
        }
        Ok(())
    }

    pub fn coeffs(&self, s: f64, t: f64) -> Result<TransitionCoeffs> {
        self.check_times(s, t)?;
        let integral = self.integrated_beta(s, t);
        let beta = -(-integral).exp_m1();
        Ok(TransitionCoeffs {
            alpha: (-integral).exp(),
            beta,
            beta_tilde: self.beta_from_origin(s) / self.beta_from_origin(t) * beta,
        })
    }

    pub fn timepoint(&self, t: f64) -> Timepoint {
        Timepoint {
            alpha_bar: self.alpha_from_origin(t),
            beta_bar: self.beta_from_origin(t),
            time: t / self.horizon,
        }
    }

    /// Reverse jump `t -> s` with the Markovian choice λ² = β̃_{s|t}.
    pub fn jump(&self, s: f64, t: f64) -> Result<Jump> {
        let c = self.coeffs(s, t)?;
        let to = self.timepoint(s);
        Jump::new(self.timepoint(t), to.alpha_bar, to.beta_bar, c.beta_tilde)
    }

    /// Discrete schedule on the uniform grid `t_n = n T / steps`, with
    /// `β_n = β_{t_n | t_{n-1}}`.
    pub fn discretize(&self, steps: usize) -> Result<Schedule> {
        if steps == 0 {
            return Err(Error::EmptySchedule);
        }
        let grid = |n: usize| self.horizon * n as f64 / steps as f64;
        let beta = (1..=steps)
            .map(|n| -(-self.integrated_beta(grid(n - 1), grid(n))).exp_m1())
            .collect();
        Schedule::from_betas(beta)
    }
}
