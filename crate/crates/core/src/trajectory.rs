//! Timestep subsets for accelerated inference.
//!
//! A trajectory `1 <= τ₁ < … < τ_K = N` defines a shorter forward process
//! over the retained steps. Its reverse jumps reuse the same moment
//! providers; only the coefficients change.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::elbo::kl_isotropic_to_kernel;
use crate::error::{Error, Result};
use crate::estimator::ReverseModel;
use crate::gmm::GmmSpec;
use crate::rng::{family, standard_normal, stream};
use crate::schedule::{Jump, ProcessKind, Schedule};
use crate::stats::Accumulator;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory(Vec<usize>);

impl Trajectory {
    pub fn new(tau: Vec<usize>, steps: usize) -> Result<Self> {
        if tau.is_empty() {
            return Err(Error::InvalidTrajectory("empty".into()));
        }
        if tau[0] == 0 {
            return Err(Error::InvalidTrajectory("timesteps start at 1".into()));
        }
        if tau.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidTrajectory("timesteps must be strictly increasing".into()));
        }
        if *tau.last().expect("non-empty") != steps {
            return Err(Error::InvalidTrajectory(format!("last timestep must be {steps}")));
        }
        Ok(Self(tau))
    }

    pub fn identity(steps: usize) -> Self {
        Self((1..=steps).collect())
    }

    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    /// Jump endpoints `(τ_{k-1}, τ_k)` for `k = 1..=K`, with `τ₀ = 0`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        core::iter::once(0).chain(self.0.iter().copied()).zip(self.0.iter().copied())
    }
}

/// `τ_k = ⌊kN/K⌋`. Spacing is at least one when `K <= N`, so no
/// de-duplication is ever needed.
pub fn even_trajectory(steps: usize, jumps: usize) -> Result<Trajectory> {
    if jumps == 0 || jumps > steps {
        return Err(Error::InfeasibleLength { jumps, steps });
    }
    Trajectory::new((1..=jumps).map(|k| k * steps / jumps).collect(), steps)
}

/// Reverse jumps on a trajectory, `out[k-1]` for `τ_k -> τ_{k-1}`.
///
/// DDPM uses `λ² = (β̄_s/β̄_t)(1 − ᾱ_t/ᾱ_s)`, which vanishes for the final
/// jump to clean data. Per-step custom values only define single steps, so
/// they are accepted on the identity trajectory alone.
pub fn restrict(schedule: &Schedule, kind: &ProcessKind, trajectory: &Trajectory) -> Result<Vec<Jump>> {
    if trajectory.last() != schedule.steps() {
        return Err(Error::InvalidTrajectory(format!(
            "ends at {} but the schedule has {} steps",
            trajectory.last(),
            schedule.steps()
        )));
    }
    if let ProcessKind::Custom(_) = kind {
        kind.validate(schedule)?;
        if trajectory.len() != schedule.steps() {
            return Err(Error::Unsupported("custom lambda on a shortened trajectory".into()));
        }
        return schedule.jumps(kind);
    }
    trajectory.pairs().map(|(s, t)| restricted_jump(schedule, kind, s, t)).collect()
}

/// The jump `t -> s` of the shortened process.
pub fn restricted_jump(schedule: &Schedule, kind: &ProcessKind, s: usize, t: usize) -> Result<Jump> {
    if !(s < t && t <= schedule.steps()) {
        return Err(Error::InvalidTrajectory(format!("jump {t} -> {s}")));
    }
    let from = schedule.timepoint(t);
    let (to_a, to_b) = (schedule.alpha_bar(s), schedule.beta_bar(s));
    let lambda_sq = match kind {
        ProcessKind::Ddpm => Jump::ddpm_lambda_sq(&from, to_a, to_b),
        ProcessKind::Ddim => 0.0,
        ProcessKind::Custom(_) if t == s + 1 => kind.lambda_sq(schedule, t),
        ProcessKind::Custom(_) => return Err(Error::Unsupported("custom lambda on a shortened trajectory".into())),
    };
    Jump::new(from, to_a, to_b, lambda_sq)
}

/// `L[s][t]`: expected negative-ELBO contribution of the jump `t -> s`.
/// Entries with `s >= t` are infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    steps: usize,
    entries: Vec<f64>,
    stderr: Vec<f64>,
}

impl CostMatrix {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn get(&self, s: usize, t: usize) -> f64 {
        if s >= t {
            f64::INFINITY
        } else {
            self.entries[s * (self.steps + 1) + t]
        }
    }

    pub fn stderr(&self, s: usize, t: usize) -> f64 {
        if s >= t {
            f64::INFINITY
        } else {
            self.stderr[s * (self.steps + 1) + t]
        }
    }

    /// Assembles a matrix from columns as returned by [`cost_column`].
    pub fn from_columns(columns: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let steps = columns.len();
        let width = steps + 1;
        let mut entries = alloc::vec![f64::INFINITY; width * width];
        let mut stderr = alloc::vec![f64::INFINITY; width * width];
        for (t0, (values, errs)) in columns.into_iter().enumerate() {
            let t = t0 + 1;
            if values.len() != t || errs.len() != t {
                return Err(Error::DimensionMismatch { expected: t, got: values.len() });
            }
            for s in 0..t {
                entries[s * width + t] = values[s];
                stderr[s * width + t] = errs[s];
            }
        }
        Ok(Self { steps, entries, stderr })
    }

    /// Dense `(N+1) x (N+1)` rows.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..=self.steps).map(|s| (0..=self.steps).map(|t| self.get(s, t)).collect()).collect()
    }
}

/// Column `t` of the cost matrix with standard errors. All entries in a
/// column share the same sampled pairs `(x₀, x_t)`, so comparisons between
/// landing points are paired.
///
/// For `s >= 1` the entry is `E KL(q(x_s|x_t,x₀) ‖ p(x_s|x_t))`; for `s = 0`
/// it is `E[−log p(x₀|x_t)]`.
pub fn cost_column(
    model: &ReverseModel<'_>,
    schedule: &Schedule,
    kind: &ProcessKind,
    spec: &GmmSpec,
    t: usize,
    budget: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if budget == 0 {
        return Err(Error::ZeroBudget);
    }
    let jumps: Vec<Jump> = (0..t).map(|s| restricted_jump(schedule, kind, s, t)).collect::<Result<_>>()?;
    if jumps[1..].iter().any(|j| !(j.lambda_sq > 0.0)) {
        return Err(Error::DegenerateProcess);
    }
    let from = schedule.timepoint(t);
    let mut accs = alloc::vec![Accumulator::new(); t];
    let mut rng = stream(seed, family::COST_COLUMN | t as u64);
    for _ in 0..budget {
        let x0 = spec.sample_one(&mut rng);
        let eps = standard_normal(&mut rng, spec.dim());
        let x = from.noised(&x0, &eps);
        let moments = model.provider.moments(&x, &from)?;
        for (s, jump) in jumps.iter().enumerate() {
            let kernel = model.kernel_with(jump, &x, &moments)?;
            let value = if s == 0 {
                -kernel.log_density(&x0)?
            } else {
                kl_isotropic_to_kernel(&jump.tilde_mu(&x, &x0), jump.lambda_sq, &kernel)?
            };
            accs[s].push(value);
        }
    }
    Ok((accs.iter().map(|a| a.mean()).collect(), accs.iter().map(|a| a.stderr()).collect()))
}

/// Full cost matrix, one column at a time. Columns are independent; callers
/// wanting parallelism can call [`cost_column`] directly.
pub fn cost_matrix(
    model: &ReverseModel<'_>,
    schedule: &Schedule,
    kind: &ProcessKind,
    spec: &GmmSpec,
    budget: usize,
    seed: u64,
) -> Result<CostMatrix> {
    let columns = (1..=schedule.steps())
        .map(|t| cost_column(model, schedule, kind, spec, t, budget, seed))
        .collect::<Result<Vec<_>>>()?;
    CostMatrix::from_columns(columns)
}

/// Prior term of the full schedule; see [`crate::elbo::prior_kl`].
pub fn prior_term(schedule: &Schedule, spec: &GmmSpec) -> f64 {
    crate::elbo::prior_kl(&schedule.timepoint(schedule.steps()), spec)
}

/// Sum of jump costs along a trajectory (prior excluded).
pub fn trajectory_cost(cost: &CostMatrix, trajectory: &Trajectory) -> f64 {
    trajectory.pairs().map(|(s, t)| cost.get(s, t)).sum()
}

/// Exact minimizer of [`trajectory_cost`] over trajectories with `jumps`
/// jumps ending at `N`. Ties go to the smaller predecessor.
pub fn optimal_trajectory_dp(cost: &CostMatrix, jumps: usize) -> Result<(Trajectory, f64)> {
    let n = cost.steps();
    if jumps == 0 || jumps > n {
        return Err(Error::InfeasibleLength { jumps, steps: n });
    }
    let width = n + 1;
    let mut best = alloc::vec![f64::INFINITY; (jumps + 1) * width];
    let mut parent = alloc::vec![usize::MAX; (jumps + 1) * width];
    best[0] = 0.0;
    for k in 1..=jumps {
        for t in k..=n {
            let mut value = f64::INFINITY;
            let mut arg = usize::MAX;
            for s in (k - 1)..t {
                let prev = best[(k - 1) * width + s];
                if prev == f64::INFINITY {
                    continue;
                }
                let candidate = prev + cost.get(s, t);
                if candidate < value {
                    value = candidate;
                    arg = s;
                }
            }
            best[k * width + t] = value;
            parent[k * width + t] = arg;
        }
    }
    let total = best[jumps * width + n];
    if !total.is_finite() {
        return Err(Error::InfeasibleLength { jumps, steps: n });
    }
    let mut tau = alloc::vec![0; jumps];
    let mut t = n;
    for k in (1..=jumps).rev() {
        tau[k - 1] = t;
        t = parent[k * width + t];
    }
    Ok((Trajectory::new(tau, n)?, total))
}
