//! Off-policy inner-loop machinery: truncated importance weights, n-step
//! V-trace value targets, value fitting, and the importance-sampled policy
//! gradient used to adapt the policy to a past task without new data.
//!
//! For a trajectory sampled by an older policy `π′`, with `r_t = π(a_t|s_t) /
//! π′(a_t|s_t)`, `ρ_t = min(ρ̄, r_t)` and `c_t = min(c̄, r_t)`:
//!
//! ```text
//! v_m = V(s_m) + Σ_{t=m}^{m+n−1} γ^{t−m} (Π_{i=m}^{t−1} c_i) ρ_t (r_t + γV(s_{t+1}) − V(s_t))
//! Â_m = r_m + v_{m+1} − V(s_m)
//! ∇J ≈ (1/N) Σ_m ρ_m Â_m ∇log π(a_m|s_m)
//! ```
//!
//! The sum stops at the end of the trajectory and `V` past the end is zero.
//! Weights and advantages are constants for the gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{adam_step, AdamConfig, AdamState, GaussianPolicy, Mlp, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VtraceConfig {
    pub rho_bar: f64,
    pub c_bar: f64,
    /// n-step horizon of the correction sum.
    pub n_steps: usize,
    pub gamma: f64,
    /// Raw ratios above this (or overflowing) are saturated here.
    pub ratio_cap: f64,
    /// Multiply `v_{m+1}` by `γ` in the advantage. Off reproduces the
    /// undiscounted form above.
    pub discount_vnext: bool,
}

impl Default for VtraceConfig {
    fn default() -> Self {
        VtraceConfig {
            rho_bar: 1.0,
            c_bar: 1.0,
            n_steps: 10,
            gamma: 0.99,
            ratio_cap: 1e6,
            discount_vnext: false,
        }
    }
}

impl VtraceConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("vtrace.rho_bar", self.rho_bar), ("vtrace.c_bar", self.c_bar)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(key, v, "> 0"));
            }
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("vtrace.n_steps", 0, ">= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid("vtrace.gamma", self.gamma, "(0, 1]"));
        }
        if self.ratio_cap.is_nan() || self.ratio_cap < 1.0 {
            return Err(Error::invalid("vtrace.ratio_cap", self.ratio_cap, ">= 1"));
        }
        Ok(())
    }

    /// `ρ̄ < c̄` is legal but unusual: traces are cut less than the
    /// per-step correction.
    pub fn is_unusual(&self) -> bool {
        self.rho_bar < self.c_bar
    }
}

/// Which off-policy estimator drives the inner policy-gradient step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerEstimator {
    /// Truncated weights with the V-trace baseline.
    Vtrace,
    /// Ratio clipped to `[1−ε, 1+ε]` and a one-step advantage
    /// `r + γV(s′) − V(s)`; no trace correction.
    ClippedIs { clip_eps: f64 },
}

impl InnerEstimator {
    /// Value targets that go with the estimator's baseline.
    pub fn value_targets(self) -> ValueTargets {
        match self {
            InnerEstimator::Vtrace => ValueTargets::Vtrace,
            InnerEstimator::ClippedIs { .. } => ValueTargets::Uncorrected,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsWeights {
    pub raw: Vec<f64>,
    pub rho: Vec<f64>,
    pub c: Vec<f64>,
    /// Ratios that overflowed or exceeded the cap.
    pub saturated: usize,
}

fn raw_ratios(policy: &GaussianPolicy, trajectory: &Trajectory, cap: f64) -> Result<(Vec<f64>, usize)> {
    let mut saturated = 0;
    let raw = trajectory
        .steps
        .iter()
        .map(|s| {
            let lp = policy.log_prob(&s.state, &s.action)?;
            let r = math::exp(lp - s.behavior_log_prob);
            Ok(if r.is_finite() && r <= cap {
                r
            } else {
                saturated += 1;
                cap
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((raw, saturated))
}

pub fn is_ratios(policy: &GaussianPolicy, trajectory: &Trajectory, cfg: &VtraceConfig) -> Result<IsWeights> {
    let (raw, saturated) = raw_ratios(policy, trajectory, cfg.ratio_cap)?;
    Ok(IsWeights {
        rho: raw.iter().map(|r| r.min(cfg.rho_bar)).collect(),
        c: raw.iter().map(|r| r.min(cfg.c_bar)).collect(),
        raw,
        saturated,
    })
}

/// V-trace targets from precomputed pieces. `values` holds `V(s_t)` for every
/// step plus the value after the last step.
pub fn vtrace_from_parts(
    rewards: &[f64],
    values: &[f64],
    rho: &[f64],
    c: &[f64],
    gamma: f64,
    n_steps: usize,
) -> Vec<f64> {
    let len = rewards.len();
    debug_assert_eq!(values.len(), len + 1);
    let td: Vec<f64> = (0..len)
        .map(|t| rho[t] * (rewards[t] + gamma * values[t + 1] - values[t]))
        .collect();
    (0..len)
        .map(|m| {
            let end = (m + n_steps).min(len);
            let mut acc = 0.0;
            let mut weight = 1.0;
            for t in m..end {
                acc += weight * td[t];
                weight *= gamma * c[t];
            }
            values[m] + acc
        })
        .collect()
}

fn values_with_bootstrap(value: &Mlp, trajectory: &Trajectory) -> Result<Vec<f64>> {
    let mut v = trajectory
        .steps
        .iter()
        .map(|s| value.forward_scalar(&s.state))
        .collect::<Result<Vec<_>>>()?;
    v.push(0.0);
    Ok(v)
}

fn rewards(trajectory: &Trajectory) -> Vec<f64> {
    trajectory.steps.iter().map(|s| s.reward).collect()
}

pub fn vtrace_targets(
    trajectory: &Trajectory,
    value: &Mlp,
    policy: &GaussianPolicy,
    cfg: &VtraceConfig,
) -> Result<Vec<f64>> {
    let w = is_ratios(policy, trajectory, cfg)?;
    let v = values_with_bootstrap(value, trajectory)?;
    Ok(vtrace_from_parts(&rewards(trajectory), &v, &w.rho, &w.c, cfg.gamma, cfg.n_steps))
}

/// n-step targets with every weight set to one (the behavior policy's own
/// bootstrapped returns).
pub fn uncorrected_targets(trajectory: &Trajectory, value: &Mlp, cfg: &VtraceConfig) -> Result<Vec<f64>> {
    let v = values_with_bootstrap(value, trajectory)?;
    let ones = vec![1.0; trajectory.len()];
    Ok(vtrace_from_parts(&rewards(trajectory), &v, &ones, &ones, cfg.gamma, cfg.n_steps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueTargets {
    #[default]
    Vtrace,
    Uncorrected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub value: Mlp,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// The loss grew tenfold; `value` is the unchanged input.
    pub diverged: bool,
}

fn mse_and_grad(value: &Mlp, data: &[(&[f64], f64)]) -> Result<(f64, ParamVector)> {
    let n = data.len() as f64;
    let mut grad = ParamVector::zeros(value.param_count());
    let mut loss = 0.0;
    for (s, target) in data {
        let err = value.forward_scalar(s)? - target;
        loss += err * err / n;
        value.accumulate_gradient(s, &[2.0 * err / n], 1.0, grad.as_mut_slice())?;
    }
    Ok((loss, grad))
}

/// Full-batch Adam on `mean (V(s_m) − v_m)²`. Targets are computed once from
/// the incoming `value` and held fixed.
pub fn fit_value(
    value: &Mlp,
    trajectories: &[&Trajectory],
    policy: &GaussianPolicy,
    cfg: &VtraceConfig,
    targets: ValueTargets,
    steps: usize,
    lr: f64,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut data: Vec<(&[f64], f64)> = Vec::new();
    for t in trajectories {
        let v = match targets {
            ValueTargets::Vtrace => vtrace_targets(t, value, policy, cfg)?,
            ValueTargets::Uncorrected => uncorrected_targets(t, value, cfg)?,
        };
        data.extend(t.steps.iter().zip(v).map(|(s, v)| (s.state.as_slice(), v)));
    }
    if data.is_empty() {
        return Err(Error::EmptyData("no steps to fit the value function on".into()));
    }
    let (initial_loss, mut grad) = mse_and_grad(value, &data)?;
    let mut fitted = value.clone();
    let mut params = value.params().clone();
    let mut adam = AdamState::new(params.len());
    let opt = AdamConfig::with_lr(lr);
    let mut loss = initial_loss;
    for _ in 0..steps {
        adam_step(params.as_mut_slice(), &grad, &mut adam, &opt)?;
        fitted.set_params(params.clone())?;
        let (l, g) = mse_and_grad(&fitted, &data)?;
        loss = l;
        grad = g;
        if loss > 10.0 * initial_loss.max(1e-12) {
            return Ok(FitOutcome {
                value: value.clone(),
                initial_loss,
                final_loss: loss,
                diverged: true,
            });
        }
    }
    Ok(FitOutcome {
        value: fitted,
        initial_loss,
        final_loss: loss,
        diverged: false,
    })
}

/// Per-step importance weight and advantage of the off-policy estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgTerm {
    pub weight: f64,
    pub advantage: f64,
}

/// Weights and advantages for every step of every trajectory, in order.
pub fn offpolicy_terms(
    policy: &GaussianPolicy,
    value: &Mlp,
    trajectories: &[&Trajectory],
    cfg: &VtraceConfig,
    estimator: InnerEstimator,
) -> Result<(Vec<PgTerm>, usize)> {
    let mut terms = Vec::new();
    let mut saturated = 0;
    for t in trajectories {
        let (raw, sat) = raw_ratios(policy, t, cfg.ratio_cap)?;
        saturated += sat;
        let v = values_with_bootstrap(value, t)?;
        let r = rewards(t);
        match estimator {
            InnerEstimator::Vtrace => {
                let rho: Vec<f64> = raw.iter().map(|x| x.min(cfg.rho_bar)).collect();
                let c: Vec<f64> = raw.iter().map(|x| x.min(cfg.c_bar)).collect();
                let targets = vtrace_from_parts(&r, &v, &rho, &c, cfg.gamma, cfg.n_steps);
                let next_scale = if cfg.discount_vnext { cfg.gamma } else { 1.0 };
                for m in 0..t.len() {
                    let v_next = targets.get(m + 1).copied().unwrap_or(0.0);
                    terms.push(PgTerm {
                        weight: rho[m],
                        advantage: r[m] + next_scale * v_next - v[m],
                    });
                }
            }
            InnerEstimator::ClippedIs { clip_eps } => {
                for m in 0..t.len() {
                    terms.push(PgTerm {
                        weight: raw[m].clamp(1.0 - clip_eps, 1.0 + clip_eps),
                        advantage: r[m] + cfg.gamma * v[m + 1] - v[m],
                    });
                }
            }
        }
    }
    Ok((terms, saturated))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgEstimate {
    /// Ascent direction on expected return, in the policy's flat layout.
    pub grad: ParamVector,
    pub steps: usize,
    pub saturated: usize,
}

/// `(1/N) Σ w_m Â_m ∇log π(a_m|s_m)` over all steps of all trajectories.
pub fn offpolicy_pg(
    policy: &GaussianPolicy,
    value: &Mlp,
    trajectories: &[&Trajectory],
    cfg: &VtraceConfig,
    estimator: InnerEstimator,
) -> Result<PgEstimate> {
    let (terms, saturated) = offpolicy_terms(policy, value, trajectories, cfg, estimator)?;
    if terms.is_empty() {
        return Err(Error::EmptyData("no off-policy steps for the inner gradient".into()));
    }
    let n = terms.len() as f64;
    let mut grad = ParamVector::zeros(policy.param_count());
    let steps = trajectories.iter().flat_map(|t| t.steps.iter());
    for (s, term) in steps.zip(&terms) {
        let scale = term.weight * term.advantage / n;
        if scale != 0.0 {
            policy.accumulate_log_prob_grad(&s.state, &s.action, scale, grad.as_mut_slice())?;
        }
    }
    Ok(PgEstimate {
        grad,
        steps: terms.len(),
        saturated,
    })
}

/// One ascent step `φ = θ + α·∇J(θ)`; `policy` itself is not modified.
pub fn inner_adapt(
    policy: &GaussianPolicy,
    value: &Mlp,
    trajectories: &[&Trajectory],
    alpha: f64,
    cfg: &VtraceConfig,
    estimator: InnerEstimator,
) -> Result<GaussianPolicy> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("inner_lr", alpha, ">= 0"));
    }
    let g = offpolicy_pg(policy, value, trajectories, cfg, estimator)?;
    let mut flat = policy.flat();
    flat.add_scaled(alpha, &g.grad)?;
    policy.with_flat(&flat)
}
