//! Reverse-transition kernels `p(x_s | x_t) = N(μ, Σ)`.
//!
//! A kernel is assembled from the moments of the noise supplied by a
//! [`MomentProvider`] (an exact oracle or a trained network) and a
//! [`CovarianceRule`]. Every rule shares the same structure
//! `Σ = λ² + κ·(noise-space uncertainty)` with `κ = γ² β̄_t / ᾱ_t`.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gmm::GmmSpec;
use crate::rng::{family, standard_normal, stream};
use crate::schedule::{Jump, Timepoint, VpSde};
#[allow(unused_imports)]
use crate::math::Float;

/// Lower bound applied to every variance after the estimator formulas.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.8378770664093453;

/// Noise moments at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    /// e(x) ≈ E[ε|x]
    pub eps: Vec<f64>,
    /// s(x) ≈ E[ε²|x]
    pub eps_sq: Option<Vec<f64>>,
    /// r(x) ≈ E[(ε − e(x))²|x]
    pub residual_sq: Option<Vec<f64>>,
}

/// Supplies noise moments at a state and noise level.
pub trait MomentProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn moments(&self, x: &[f64], at: &Timepoint) -> Result<Moments>;

    fn name(&self) -> String {
        String::from("provider")
    }
}

/// Controlled corruption of the oracle noise mean.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum MeanError {
    #[default]
    None,
    /// e = E[ε|x] + δ
    Offset(Vec<f64>),
    /// e = k·E[ε|x]
    Scale(f64),
}

impl MeanError {
    pub fn apply(&self, mean: &[f64]) -> Vec<f64> {
        match self {
            MeanError::None => mean.to_vec(),
            MeanError::Offset(delta) => mean.iter().zip(delta).map(|(m, d)| m + d).collect(),
            MeanError::Scale(k) => mean.iter().map(|m| k * m).collect(),
        }
    }
}

/// Exact mixture moments, optionally with a corrupted mean. The second
/// moments are always the true ones: `s = E[ε²|x]` and
/// `r = Var[ε|x] + (e − E[ε|x])²` for the (possibly corrupted) mean `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub spec: GmmSpec,
    pub error: MeanError,
}

impl Oracle {
    pub fn exact(spec: GmmSpec) -> Self {
        Self { spec, error: MeanError::None }
    }

    pub fn biased(spec: GmmSpec, delta: f64) -> Self {
        let d = spec.dim();
        Self { spec, error: MeanError::Offset(alloc::vec![delta; d]) }
    }
}

impl MomentProvider for Oracle {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn moments(&self, x: &[f64], at: &Timepoint) -> Result<Moments> {
        let (mean, var) = self.spec.eps_mean_var(at.alpha_bar, at.beta_bar, x)?;
        let eps = self.error.apply(&mean);
        let eps_sq = var.iter().zip(&mean).map(|(v, m)| v + m * m).collect();
        let residual_sq = var.iter().zip(&mean).zip(&eps).map(|((v, m), e)| v + (e - m) * (e - m)).collect();
        Ok(Moments { eps, eps_sq: Some(eps_sq), residual_sq: Some(residual_sq) })
    }

    fn name(&self) -> String {
        match self.error {
            MeanError::None => String::from("oracle"),
            _ => String::from("oracle-biased"),
        }
    }
}

/// Mean from an arbitrary provider, second moments from the exact mixture.
pub struct ExactSecondMoments<'a> {
    pub mean: &'a dyn MomentProvider,
    pub spec: GmmSpec,
}

impl MomentProvider for ExactSecondMoments<'_> {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn moments(&self, x: &[f64], at: &Timepoint) -> Result<Moments> {
        let eps = self.mean.moments(x, at)?.eps;
        let (mean, var) = self.spec.eps_mean_var(at.alpha_bar, at.beta_bar, x)?;
        let eps_sq = var.iter().zip(&mean).map(|(v, m)| v + m * m).collect();
        let residual_sq = var.iter().zip(&mean).zip(&eps).map(|((v, m), e)| v + (e - m) * (e - m)).collect();
        Ok(Moments { eps, eps_sq: Some(eps_sq), residual_sq: Some(residual_sq) })
    }

    fn name(&self) -> String {
        self.mean.name()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Isotropic(f64),
    Diagonal(Vec<f64>),
    Full(DMatrix<f64>),
}

impl Covariance {
    /// Per-coordinate variances.
    pub fn diagonal(&self, dim: usize) -> Vec<f64> {
        match self {
            Covariance::Isotropic(v) => alloc::vec![*v; dim],
            Covariance::Diagonal(v) => v.clone(),
            Covariance::Full(m) => m.diagonal().iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Covariance::Full(m) => m.clone(),
            other => DMatrix::from_diagonal(&DVector::from_vec(other.diagonal(dim))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReverseKernel {
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

impl ReverseKernel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: y.len() });
        }
        let d = self.dim() as f64;
        match &self.cov {
            Covariance::Full(m) => {
                let chol = Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite)?;
                let diff = DVector::from_iterator(self.dim(), y.iter().zip(&self.mean).map(|(a, b)| a - b));
                let z = chol.l().solve_lower_triangular(&diff).ok_or(Error::NotPositiveDefinite)?;
                let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
                Ok(-0.5 * (d * LN_2PI + log_det + z.norm_squared()))
            }
            cov => {
                let var = cov.diagonal(self.dim());
                let mut total = 0.0;
                for ((yi, mi), v) in y.iter().zip(&self.mean).zip(&var) {
                    if !(*v > 0.0) {
                        return Err(Error::NonPositiveVariance(*v));
                    }
                    total += (yi - mi) * (yi - mi) / v + v.ln();
                }
                Ok(-0.5 * (d * LN_2PI + total))
            }
        }
    }

    /// Draws `mean + Σ^{1/2} z` with `z` from the generator.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let z = standard_normal(rng, self.dim());
        self.transform(&z)
    }

    /// `mean + L z` for a caller-supplied standard normal vector.
    pub fn transform(&self, z: &[f64]) -> Result<Vec<f64>> {
        match &self.cov {
            Covariance::Full(m) => {
                let chol = Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite)?;
                let l = chol.l();
                Ok((0..self.dim())
                    .map(|i| self.mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>())
                    .collect())
            }
            cov => {
                let var = cov.diagonal(self.dim());
                Ok(self.mean.iter().zip(&var).zip(z).map(|((m, v), z)| m + v.sqrt() * z).collect())
            }
        }
    }
}

/// μ = μ̃(x_t, x̂₀) with x̂₀ = (x_t − √β̄_t e) / √ᾱ_t.
pub fn optimal_mean(jump: &Jump, x: &[f64], eps: &[f64]) -> Vec<f64> {
    let x0 = jump.from.denoised(x, eps);
    jump.tilde_mu(x, &x0)
}

fn floor(v: f64) -> f64 {
    if v.is_nan() {
        v
    } else {
        v.max(VARIANCE_FLOOR)
    }
}

/// λ² + κ·max(s − e², 0), floored.
pub fn sn_variance(jump: &Jump, eps: &[f64], eps_sq: &[f64]) -> Vec<f64> {
    let k = jump.eps_covariance_scale();
    eps.iter()
        .zip(eps_sq)
        .map(|(e, s)| floor(jump.lambda_sq + k * (s - e * e).max(0.0)))
        .collect()
}

/// λ² + κ·r, floored.
pub fn npr_variance(jump: &Jump, residual_sq: &[f64]) -> Vec<f64> {
    let k = jump.eps_covariance_scale();
    residual_sq.iter().map(|r| floor(jump.lambda_sq + k * r)).collect()
}

/// λ² + κ(1 − E‖e‖²/d), clamped to `[floor, λ² + κ]`.
pub fn analytic_iso_variance(jump: &Jump, mean_sq_norm_per_dim: f64) -> f64 {
    let k = jump.eps_covariance_scale();
    let upper = jump.lambda_sq + k;
    (jump.lambda_sq + k * (1.0 - mean_sq_norm_per_dim)).clamp(VARIANCE_FLOOR, upper.max(VARIANCE_FLOOR))
}

/// λ² I + κ [Cov[ε|x] + (e − E[ε|x])(e − E[ε|x])ᵀ] from the exact mixture.
pub fn full_covariance(jump: &Jump, spec: &GmmSpec, x: &[f64], eps: &[f64]) -> Result<DMatrix<f64>> {
    let m = spec.eps_moments(jump.from.alpha_bar, jump.from.beta_bar, x)?;
    let d = x.len();
    let k = jump.eps_covariance_scale();
    let mut cov = m.cov;
    for i in 0..d {
        for j in 0..d {
            cov[(i, j)] += (eps[i] - m.mean[i]) * (eps[j] - m.mean[j]);
        }
    }
    let mut out = cov * k;
    for i in 0..d {
        out[(i, i)] = floor(out[(i, i)] + jump.lambda_sq);
    }
    Ok(out)
}

/// Reverse mean of the VP SDE jump `t -> s` written with the continuous
/// coefficients: (x − β_{t|s}/√β_{t|0} · e) / √α_{t|s}.
pub fn continuous_mean(sde: &VpSde, s: f64, t: f64, x: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    let c = sde.coeffs(s, t)?;
    let w = c.beta / sde.beta_from_origin(t).sqrt();
    let sa = c.alpha.sqrt();
    Ok(x.iter().zip(eps).map(|(x, e)| (x - w * e) / sa).collect())
}

/// β̃_{s|t} + β_{t|s}² / (β_{t|0} α_{t|s}) · u, where `u` is `s − e²`
/// (uncorrected) or `r` (corrected), floored.
pub fn continuous_variance(sde: &VpSde, s: f64, t: f64, uncertainty: &[f64]) -> Result<Vec<f64>> {
    let c = sde.coeffs(s, t)?;
    let k = c.beta * c.beta / (sde.beta_from_origin(t) * c.alpha);
    Ok(uncertainty.iter().map(|u| floor(c.beta_tilde + k * u.max(0.0))).collect())
}

/// Clamps every standard deviation to `(2/255)·y·data_scale / E|z|` with
/// `E|z| = √(2/π)`. Full covariances are rescaled as a whole so the largest
/// standard deviation meets the bound.
pub fn clip_variance(kernel: ReverseKernel, y: f64, data_scale: f64) -> Result<ReverseKernel> {
    if !(y > 0.0) {
        return Err(Error::BadParameter { name: "y".into(), reason: "must be positive".into() });
    }
    if !(data_scale > 0.0) {
        return Err(Error::BadParameter { name: "data_scale".into(), reason: "must be positive".into() });
    }
    let bound = clip_bound(y, data_scale);
    let cap = bound * bound;
    let cov = match kernel.cov {
        Covariance::Isotropic(v) => Covariance::Isotropic(v.min(cap)),
        Covariance::Diagonal(v) => Covariance::Diagonal(v.into_iter().map(|v| v.min(cap)).collect()),
        Covariance::Full(m) => {
            let max = m.diagonal().iter().copied().fold(0.0, f64::max);
            if max > cap {
                Covariance::Full(m * (cap / max))
            } else {
                Covariance::Full(m)
            }
        }
    };
    Ok(ReverseKernel { mean: kernel.mean, cov })
}

/// Largest standard deviation allowed by [`clip_variance`].
pub fn clip_bound(y: f64, data_scale: f64) -> f64 {
    2.0 / 255.0 * y * data_scale / (2.0 / core::f64::consts::PI).sqrt()
}

/// Both sides of |ê² − e²| = |ê + e|·|ê − e|, elementwise.
pub fn error_amplification(eps_hat: &[f64], eps_true: &[f64]) -> Vec<(f64, f64)> {
    eps_hat
        .iter()
        .zip(eps_true)
        .map(|(h, e)| ((h * h - e * e).abs(), (h + e).abs() * (h - e).abs()))
        .collect()
}

fn level_key(at: &Timepoint) -> u64 {
    at.alpha_bar.to_bits()
}

/// Per-noise-level Monte Carlo estimates of `E_{q(x)}‖e(x)‖²/d`, the only
/// data-dependent quantity in the isotropic variance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalyticTable {
    entries: BTreeMap<u64, f64>,
}

impl AnalyticTable {
    pub fn build<'t>(
        provider: &dyn MomentProvider,
        spec: &GmmSpec,
        levels: impl IntoIterator<Item = &'t Timepoint>,
        budget: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for at in levels {
            let key = level_key(at);
            if entries.contains_key(&key) {
                continue;
            }
            entries.insert(key, mean_sq_norm(provider, spec, at, budget, seed)?);
        }
        Ok(Self { entries })
    }

    pub fn get(&self, at: &Timepoint) -> Option<f64> {
        self.entries.get(&level_key(at)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `(1/M) Σᵢ ‖e(xᵢ)‖²/d` over `xᵢ ~ q(x_t)`.
pub fn mean_sq_norm(provider: &dyn MomentProvider, spec: &GmmSpec, at: &Timepoint, budget: usize, seed: u64) -> Result<f64> {
    if budget == 0 {
        return Err(Error::ZeroBudget);
    }
    let bits = at.alpha_bar.to_bits();
    let mut rng = stream(seed, family::ANALYTIC_VARIANCE | ((bits ^ (bits >> 32)) & 0xffff_ffff));
    let d = spec.dim() as f64;
    let mut total = 0.0;
    for _ in 0..budget {
        let x0 = spec.sample_one(&mut rng);
        let eps = standard_normal(&mut rng, spec.dim());
        let x = at.noised(&x0, &eps);
        let e = provider.moments(&x, at)?.eps;
        total += e.iter().map(|v| v * v).sum::<f64>() / d;
    }
    Ok(total / budget as f64)
}

/// How the reverse covariance is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceRule {
    /// State-independent λ² + κ(1 − E‖e‖²/d).
    AnalyticIsotropic(AnalyticTable),
    /// λ² + κ·max(s − e², 0).
    Sn,
    /// λ² + κ·r.
    Npr,
    /// Full matrix from the exact mixture, corrected for the provider's mean.
    FullOracle(GmmSpec),
    /// σ² = λ², the forward posterior variance.
    ForwardPosterior,
    /// A fixed isotropic variance for every jump.
    Constant(f64),
    /// Another rule with every variance multiplied by a factor.
    Scaled(Box<CovarianceRule>, f64),
}

impl CovarianceRule {
    pub fn label(&self) -> String {
        match self {
            CovarianceRule::AnalyticIsotropic(_) => "analytic".into(),
            CovarianceRule::Sn => "sn".into(),
            CovarianceRule::Npr => "npr".into(),
            CovarianceRule::FullOracle(_) => "full".into(),
            CovarianceRule::ForwardPosterior => "forward".into(),
            CovarianceRule::Constant(_) => "constant".into(),
            CovarianceRule::Scaled(base, k) => alloc::format!("{}x{k}", base.label()),
        }
    }

    fn covariance(&self, jump: &Jump, x: &[f64], m: &Moments) -> Result<Covariance> {
        Ok(match self {
            CovarianceRule::AnalyticIsotropic(table) => {
                let avg = table.get(&jump.from).ok_or(Error::MissingMoment("analytic variance table entry"))?;
                Covariance::Isotropic(analytic_iso_variance(jump, avg))
            }
            CovarianceRule::Sn => {
                let s = m.eps_sq.as_ref().ok_or(Error::MissingMoment("E[eps^2]"))?;
                Covariance::Diagonal(sn_variance(jump, &m.eps, s))
            }
            CovarianceRule::Npr => {
                let r = m.residual_sq.as_ref().ok_or(Error::MissingMoment("E[(eps - e)^2]"))?;
                Covariance::Diagonal(npr_variance(jump, r))
            }
            CovarianceRule::FullOracle(spec) => Covariance::Full(full_covariance(jump, spec, x, &m.eps)?),
            CovarianceRule::ForwardPosterior => Covariance::Isotropic(floor(jump.lambda_sq)),
            CovarianceRule::Constant(v) => Covariance::Isotropic(floor(*v)),
            CovarianceRule::Scaled(base, k) => match base.covariance(jump, x, m)? {
                Covariance::Isotropic(v) => Covariance::Isotropic(v * k),
                Covariance::Diagonal(v) => Covariance::Diagonal(v.into_iter().map(|v| v * k).collect()),
                Covariance::Full(c) => Covariance::Full(c * *k),
            },
        })
    }
}

/// A provider paired with a covariance rule.
pub struct ReverseModel<'a> {
    pub provider: &'a dyn MomentProvider,
    pub rule: CovarianceRule,
}

impl<'a> ReverseModel<'a> {
    pub fn new(provider: &'a dyn MomentProvider, rule: CovarianceRule) -> Self {
        Self { provider, rule }
    }

    pub fn kernel(&self, jump: &Jump, x: &[f64]) -> Result<ReverseKernel> {
        let m = self.provider.moments(x, &jump.from)?;
        self.kernel_with(jump, x, &m)
    }

    pub fn kernel_with(&self, jump: &Jump, x: &[f64], m: &Moments) -> Result<ReverseKernel> {
        if x.len() != self.provider.dim() {
            return Err(Error::DimensionMismatch { expected: self.provider.dim(), got: x.len() });
        }
        Ok(ReverseKernel { mean: optimal_mean(jump, x, &m.eps), cov: self.rule.covariance(jump, x, m)? })
    }

    pub fn label(&self) -> String {
        alloc::format!("{}-{}", self.provider.name(), self.rule.label())
    }
}
