//! Gaussian-mixture data distributions with a shared isotropic component
//! variance, and their exact posteriors under Gaussian noising.
//!
//! Throughout, a noised state is `x = √a·x₀ + √b·ε` with `a` the signal scale
//! (ᾱₙ or α_{t|0}) and `b` the noise variance (β̄ₙ or β_{t|0}).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;
#[allow(unused_imports)]
use crate::math::Float;

const LN_2PI: f64 = 1.8378770664093453;

/// Tolerance on the weight sum.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmRepr {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub var: f64,
}

/// `Σⱼ wⱼ N(μⱼ, c I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmRepr", into = "GmmRepr")]
pub struct GmmSpec {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    var: f64,
}

impl TryFrom<GmmRepr> for GmmSpec {
    type Error = Error;

    fn try_from(r: GmmRepr) -> Result<Self> {
        GmmSpec::new(r.weights, r.means, r.var)
    }
}

impl From<GmmSpec> for GmmRepr {
    fn from(s: GmmSpec) -> Self {
        GmmRepr { weights: s.weights, means: s.means, var: s.var }
    }
}

/// Exact posterior over the clean sample given one noised state.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPosterior {
    /// Component responsibilities ηⱼ(x).
    pub eta: Vec<f64>,
    /// Per-component posterior means νⱼ(x).
    pub nu: Vec<Vec<f64>>,
    /// Shared per-component posterior variance c·b / (c·a + b).
    pub pvar: f64,
}

impl GmmPosterior {
    pub fn mean(&self) -> Vec<f64> {
        let d = self.nu[0].len();
        let mut m = alloc::vec![0.0; d];
        for (w, nu) in self.eta.iter().zip(&self.nu) {
            for (mi, v) in m.iter_mut().zip(nu) {
                *mi += w * v;
            }
        }
        m
    }

    /// pvar·I + Σ ηⱼ (νⱼ − m)(νⱼ − m)ᵀ
    pub fn covariance(&self, mean: &[f64]) -> DMatrix<f64> {
        let d = mean.len();
        let mut cov = DMatrix::identity(d, d) * self.pvar;
        for (w, nu) in self.eta.iter().zip(&self.nu) {
            if *w == 0.0 {
                continue;
            }
            for i in 0..d {
                let di = nu[i] - mean[i];
                for j in 0..d {
                    cov[(i, j)] += w * di * (nu[j] - mean[j]);
                }
            }
        }
        cov
    }

    /// Diagonal of [`covariance`](Self::covariance) without forming the matrix.
    pub fn variance_diag(&self, mean: &[f64]) -> Vec<f64> {
        let mut var = alloc::vec![self.pvar; mean.len()];
        for (w, nu) in self.eta.iter().zip(&self.nu) {
            for i in 0..mean.len() {
                let di = nu[i] - mean[i];
                var[i] += w * di * di;
            }
        }
        var
    }
}

/// Moments of the clean sample given a noised state.
#[derive(Debug, Clone, PartialEq)]
pub struct X0Moments {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

impl X0Moments {
    pub fn cov_diag(&self) -> Vec<f64> {
        self.cov.diagonal().iter().copied().collect()
    }
}

/// Moments of the injected noise given a noised state.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsMoments {
    pub mean: Vec<f64>,
    /// E[ε²] elementwise.
    pub sq: Vec<f64>,
    pub cov: DMatrix<f64>,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, var: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidMixture("at least one component is required".into()));
        }
        if weights.len() != means.len() {
            return Err(Error::InvalidMixture(format!(
                "{} weights but {} means",
                weights.len(),
                means.len()
            )));
        }
        if let Some((j, w)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidMixture(format!("weight {j} = {w} is not a finite non-negative number")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::InvalidMixture("means must have dimension at least 1".into()));
        }
        for (j, m) in means.iter().enumerate() {
            if m.len() != d {
                return Err(Error::InvalidMixture(format!(
                    "mean {j} has dimension {}, expected {d}",
                    m.len()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture(format!("mean {j} is not finite")));
            }
        }
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::InvalidMixture(format!("component variance {var} must be positive")));
        }
        Ok(Self { weights, means, var })
    }

    /// `N(0, I)` in `d` dimensions.
    pub fn standard_normal(d: usize) -> Self {
        Self::new(alloc::vec![1.0], alloc::vec![alloc::vec![0.0; d]], 1.0)
            .expect("unit Gaussian is a valid mixture")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    fn check_levels(a: f64, b: f64) -> Result<()> {
        if !(a >= 0.0 && a.is_finite() && b >= 0.0 && b.is_finite() && a + b > 0.0) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    pub fn posterior(&self, a: f64, b: f64, x: &[f64]) -> Result<GmmPosterior> {
        self.check_state(x)?;
        Self::check_levels(a, b)?;
        if !(b > 0.0) {
            return Err(Error::NonPositiveVariance(b));
        }
        let c = self.var;
        let denom = c * a + b;
        let sa = a.sqrt();
        let phi: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, mu)| {
                if *w == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let norm_sq: f64 = mu.iter().map(|m| m * m).sum();
                let dot: f64 = mu.iter().zip(x).map(|(m, xi)| m * xi).sum();
                w.ln() - a / denom * norm_sq / 2.0 + sa / denom * dot
            })
            .collect();
        let eta = softmax(&phi);
        let nu = self
            .means
            .iter()
            .map(|mu| mu.iter().zip(x).map(|(m, xi)| (b * m + c * sa * xi) / denom).collect())
            .collect();
        Ok(GmmPosterior { eta, nu, pvar: c * b / denom })
    }

    pub fn x0_moments(&self, a: f64, b: f64, x: &[f64]) -> Result<X0Moments> {
        let post = self.posterior(a, b, x)?;
        let mean = post.mean();
        let cov = post.covariance(&mean);
        Ok(X0Moments { mean, cov })
    }

    /// Noise moments from `E[ε|x] = (x − √a E[x₀|x]) / √b` and
    /// `Cov[ε|x] = (a/b) Cov[x₀|x]`.
    pub fn eps_moments(&self, a: f64, b: f64, x: &[f64]) -> Result<EpsMoments> {
        let m = self.x0_moments(a, b, x)?;
        let (sa, sb) = (a.sqrt(), b.sqrt());
        let mean: Vec<f64> = x.iter().zip(&m.mean).map(|(xi, mi)| (xi - sa * mi) / sb).collect();
        let cov = m.cov * (a / b);
        let sq = mean.iter().enumerate().map(|(i, e)| cov[(i, i)] + e * e).collect();
        Ok(EpsMoments { mean, sq, cov })
    }

    /// `E[ε|x]` only; skips the covariance.
    pub fn eps_mean(&self, a: f64, b: f64, x: &[f64]) -> Result<Vec<f64>> {
        let post = self.posterior(a, b, x)?;
        let m = post.mean();
        let (sa, sb) = (a.sqrt(), b.sqrt());
        Ok(x.iter().zip(&m).map(|(xi, mi)| (xi - sa * mi) / sb).collect())
    }

    /// `E[ε|x]` and `Var[ε|x]` elementwise, skipping off-diagonals.
    pub fn eps_mean_var(&self, a: f64, b: f64, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let post = self.posterior(a, b, x)?;
        let m = post.mean();
        let var = post.variance_diag(&m);
        let (sa, sb) = (a.sqrt(), b.sqrt());
        let mean = x.iter().zip(&m).map(|(xi, mi)| (xi - sa * mi) / sb).collect();
        Ok((mean, var.into_iter().map(|v| v * a / b).collect()))
    }

    /// Log density of the noised marginal `Σⱼ wⱼ N(√a μⱼ, (c a + b) I)`.
    /// With `a = 1, b = 0` this is the data density.
    pub fn marginal_logpdf(&self, a: f64, b: f64, x: &[f64]) -> Result<f64> {
        self.check_state(x)?;
        Self::check_levels(a, b)?;
        let s2 = self.var * a + b;
        let sa = a.sqrt();
        let d = self.dim() as f64;
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, mu)| {
                let dist: f64 = mu.iter().zip(x).map(|(m, xi)| (xi - sa * m).powi(2)).sum();
                w.ln() - 0.5 * (d * (LN_2PI + s2.ln()) + dist / s2)
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        self.marginal_logpdf(1.0, 0.0, x)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = alloc::vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (mi, v) in m.iter_mut().zip(mu) {
                *mi += w * v;
            }
        }
        m
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        GmmPosterior { eta: self.weights.clone(), nu: self.means.clone(), pvar: self.var }.covariance(&self.mean())
    }

    /// Hard assignment of a point to its most responsible component under
    /// the clean data density.
    pub fn assign(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (j, (w, mu)) in self.weights.iter().zip(&self.means).enumerate() {
            let dist: f64 = mu.iter().zip(x).map(|(m, xi)| (xi - m).powi(2)).sum();
            let score = w.ln() - dist / (2.0 * self.var);
            if score > best.1 {
                best = (j, score);
            }
        }
        best.0
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let j = if self.components() == 1 {
            0
        } else {
            WeightedIndex::new(&self.weights).expect("validated weights").sample(rng)
        };
        let sd = self.var.sqrt();
        standard_normal(rng, self.dim())
            .into_iter()
            .zip(&self.means[j])
            .map(|(z, m)| m + sd * z)
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Vec<Vec<f64>> {
        let index = WeightedIndex::new(&self.weights).expect("validated weights");
        let sd = self.var.sqrt();
        (0..batch)
            .map(|_| {
                let j = index.sample(rng);
                standard_normal(rng, self.dim())
                    .into_iter()
                    .zip(&self.means[j])
                    .map(|(z, m)| m + sd * z)
                    .collect()
            })
            .collect()
    }

    pub fn describe(&self) -> String {
        format!("{}-component mixture in {} dims, c = {}", self.components(), self.dim(), self.var)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn symmetric(m: f64, c: f64) -> GmmSpec {
        GmmSpec::new(vec![0.5, 0.5], vec![vec![-m], vec![m]], c).unwrap()
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(GmmSpec::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], 1.0).is_err());
        assert!(GmmSpec::new(vec![1.0], vec![vec![0.0]], 0.0).is_err());
        assert!(GmmSpec::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0, 2.0]], 1.0).is_err());
        assert!(GmmSpec::new(vec![], vec![], 1.0).is_err());
        assert!(GmmSpec::new(vec![1.5, -0.5], vec![vec![0.0], vec![1.0]], 1.0).is_err());
    }

    #[test]
    fn single_component_posterior() {
        let spec = GmmSpec::new(vec![1.0], vec![vec![1.0, -2.0]], 0.5).unwrap();
        let (a, b) = (0.6, 0.4);
        let x = [0.3, 0.9];
        let post = spec.posterior(a, b, &x).unwrap();
        assert_eq!(post.eta, vec![1.0]);
        let denom = 0.5 * a + b;
        for i in 0..2 {
            let expect = (b * spec.means()[0][i] + 0.5 * a.sqrt() * x[i]) / denom;
            assert_abs_diff_eq!(post.nu[0][i], expect, epsilon = 1e-15);
        }
        let m = spec.x0_moments(a, b, &x).unwrap();
        assert_eq!(m.cov, DMatrix::identity(2, 2) * (0.5 * b / denom));
    }

    #[test]
    fn symmetric_spec_at_origin() {
        let spec = symmetric(1.5, 0.3);
        let post = spec.posterior(0.5, 0.5, &[0.0]).unwrap();
        assert_abs_diff_eq!(post.eta[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(post.nu[0][0], -post.nu[1][0], epsilon = 1e-15);
        assert_abs_diff_eq!(spec.eps_moments(0.5, 0.5, &[0.0]).unwrap().mean[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn responsibilities_concentrate_far_out() {
        let spec = symmetric(1.0, 0.2);
        let mut last = 0.0;
        for t in [1.0, 5.0, 20.0, 50.0] {
            let eta = spec.posterior(0.7, 0.3, &[t]).unwrap().eta[1];
            assert!(eta >= last);
            last = eta;
        }
        assert_abs_diff_eq!(last, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_gaussian_conjugacy() {
        let spec = GmmSpec::standard_normal(1);
        let x = [1.3];
        let m = spec.x0_moments(0.72, 0.28, &x).unwrap();
        assert_abs_diff_eq!(m.mean[0], 0.72f64.sqrt() * 1.3, epsilon = 1e-15);
        assert_abs_diff_eq!(m.cov[(0, 0)], 0.28, epsilon = 1e-15);
        let e = spec.eps_moments(0.72, 0.28, &x).unwrap();
        assert_abs_diff_eq!(e.mean[0], 0.28f64.sqrt() * 1.3, epsilon = 1e-14);
        assert_abs_diff_eq!(e.cov[(0, 0)], 0.72, epsilon = 1e-14);
    }

    #[test]
    fn zero_weight_component_is_inert() {
        let spec = GmmSpec::new(vec![1.0, 0.0], vec![vec![2.0], vec![-2.0]], 0.1).unwrap();
        let post = spec.posterior(0.5, 0.5, &[-3.0]).unwrap();
        assert_eq!(post.eta, vec![1.0, 0.0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert!(spec.sample(&mut rng, 200).iter().all(|x| x[0] > 0.5));
        assert!(spec.marginal_logpdf(0.5, 0.5, &[-3.0]).unwrap().is_finite());
    }

    #[test]
    fn standard_normal_logpdf() {
        let spec = GmmSpec::standard_normal(2);
        let x = [0.4, -1.1];
        let expect = -LN_2PI - 0.5 * (0.16 + 1.21);
        assert_abs_diff_eq!(spec.marginal_logpdf(0.3, 0.7, &x).unwrap(), expect, epsilon = 1e-14);
    }

    #[test]
    fn rejects_bad_states() {
        let spec = GmmSpec::standard_normal(2);
        assert!(matches!(spec.posterior(0.5, 0.5, &[1.0]), Err(Error::DimensionMismatch { .. })));
        assert_eq!(spec.posterior(0.5, 0.5, &[f64::NAN, 0.0]), Err(Error::NonFinite));
    }

    #[test]
    fn mixture_moments() {
        let spec = GmmSpec::new(vec![0.25, 0.75], vec![vec![1.0, 0.0], vec![-1.0, 2.0]], 0.5).unwrap();
        let m = spec.mean();
        assert_abs_diff_eq!(m[0], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m[1], 1.5, epsilon = 1e-15);
        let cov = spec.covariance();
        assert_abs_diff_eq!(cov[(0, 0)], 0.5 + 0.75, epsilon = 1e-14);
        assert_abs_diff_eq!(cov[(0, 1)], -0.75, epsilon = 1e-14);
    }
}
