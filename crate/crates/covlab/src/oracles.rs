//! Slow reference computations that share no code with the closed forms
//! they are used to check.

use dpm_covlab_core::trajectory::CostMatrix;
use dpm_covlab_core::{GmmSpec, Jump};
use rand::Rng;

/// Posterior moments of a 1-d mixture by trapezoid quadrature over `x₀`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub x0_mean: f64,
    pub x0_var: f64,
    pub eps_mean: f64,
    pub eps_sq: f64,
}

fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean) * (x - mean) / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
}

/// Quadrature for `x = √a x₀ + √b ε`. The step is an eighth of the narrowest
/// scale in the integrand; for Gaussian-shaped integrands on the whole line
/// the trapezoid rule then converges far below double precision.
pub fn quadrature(spec: &GmmSpec, a: f64, b: f64, x: f64) -> Quadrature {
    assert_eq!(spec.dim(), 1, "quadrature oracle is one-dimensional");
    let c = spec.var();
    let lik_sd = (b / a).sqrt();
    let centre = x / a.sqrt();
    let post_sd = 1.0 / (1.0 / c + a / b).sqrt();
    let h = post_sd / 8.0;
    let reach = 14.0 * c.sqrt().max(lik_sd);
    let means: Vec<f64> = spec.means().iter().map(|m| m[0]).collect();
    let lo = means.iter().fold(centre, |acc, m| acc.min(*m)) - reach;
    let hi = means.iter().fold(centre, |acc, m| acc.max(*m)) + reach;
    let count = ((hi - lo) / h).ceil() as usize + 1;
    let log_f = |x0: f64| {
        let prior = spec
            .weights()
            .iter()
            .zip(&means)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, m)| w.ln() + ln_normal(x0, *m, c))
            .fold(f64::NEG_INFINITY, |acc, v| {
                let hi = acc.max(v);
                if hi == f64::NEG_INFINITY {
                    hi
                } else {
                    hi + ((acc - hi).exp() + (v - hi).exp()).ln()
                }
            });
        prior + ln_normal(x, a.sqrt() * x0, b)
    };
    let values: Vec<(f64, f64)> = (0..count).map(|i| lo + i as f64 * h).map(|x0| (x0, log_f(x0))).collect();
    let top = values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (x0, lf) in values {
        let w = (lf - top).exp();
        z += w;
        m1 += w * x0;
        m2 += w * x0 * x0;
    }
    let mean = m1 / z;
    let second = m2 / z;
    Quadrature {
        x0_mean: mean,
        x0_var: second - mean * mean,
        eps_mean: (x - a.sqrt() * mean) / b.sqrt(),
        eps_sq: (x * x - 2.0 * x * a.sqrt() * mean + a * second) / b,
    }
}

/// γ read off as the coefficient of `x₀` in the forward posterior mean.
pub fn gamma_by_linearity(jump: &Jump) -> f64 {
    jump.tilde_mu(&[0.0], &[1.0])[0] - jump.tilde_mu(&[0.0], &[0.0])[0]
}

/// Minimum trajectory cost with `jumps` jumps ending at `N`, by enumerating
/// every subset of `{1, …, N−1}` of size `jumps − 1`.
pub fn brute_force_trajectory(cost: &CostMatrix, jumps: usize) -> (Vec<usize>, f64) {
    let n = cost.steps();
    let mut best = (Vec::new(), f64::INFINITY);
    for mask in 0u64..(1u64 << (n - 1)) {
        if mask.count_ones() as usize != jumps - 1 {
            continue;
        }
        let mut tau = vec![0];
        tau.extend((1..n).filter(|i| mask & (1 << (i - 1)) != 0));
        tau.push(n);
        let total: f64 = tau.windows(2).map(|w| cost.get(w[0], w[1])).sum();
        if total < best.1 {
            best = (tau, total);
        }
    }
    best
}

/// Mixture with 1–3 components, means in `[−3, 3]`, variance in `[0.05, 1]`.
pub fn random_spec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> GmmSpec {
    let k = rng.random_range(1..=3);
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let means = (0..k).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let var = rng.random_range(0.05..1.0);
    GmmSpec::new(raw.iter().map(|w| w / sum).collect(), means, var).expect("valid random mixture")
}

/// Random cost matrix with positive upper-triangular entries.
pub fn random_costs<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> CostMatrix {
    let columns = (1..=steps)
        .map(|t| ((0..t).map(|_| rng.random_range(0.0..1.0)).collect(), vec![0.0; t]))
        .collect();
    CostMatrix::from_columns(columns).expect("well-formed columns")
}
