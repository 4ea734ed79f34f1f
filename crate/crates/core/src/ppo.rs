//! On-policy adaptation to the current task with the clipped PPO surrogate
//! and a learned state-value baseline.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::buffer::ExperienceStore;
use crate::env::{rollout, SuccessMode, TaskSpec, Trajectory};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{adam_step, AdamConfig, AdamState, GaussianPolicy, Mlp, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdvantageEstimator {
    /// `r_t + γV(s_{t+1}) − V(s_t)`
    OneStep,
    Gae { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub trajectories_per_episode: usize,
    pub updates_per_episode: usize,
    pub minibatch_size: usize,
    pub gamma: f64,
    pub episode_budget: usize,
    pub advantage: AdvantageEstimator,
    pub normalize_advantages: bool,
    /// Stop as soon as the batch success rate reaches the task threshold.
    /// When off the full budget is always spent.
    pub stop_on_success: bool,
    pub success_mode: SuccessMode,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            policy_lr: 1e-3,
            value_lr: 1e-3,
            trajectories_per_episode: 10,
            updates_per_episode: 8,
            minibatch_size: 64,
            gamma: 0.99,
            episode_budget: 150,
            advantage: AdvantageEstimator::OneStep,
            normalize_advantages: true,
            stop_on_success: true,
            success_mode: SuccessMode::PerSample,
        }
    }
}

impl PpoConfig {
    /// The full-size rollout schedule: 20 trajectories, 16 updates of 256.
    pub fn full_scale() -> Self {
        PpoConfig {
            trajectories_per_episode: 20,
            updates_per_episode: 16,
            minibatch_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::invalid("ppo.clip_eps", self.clip_eps, "(0, 1)"));
        }
        for (key, v) in [("ppo.policy_lr", self.policy_lr), ("ppo.value_lr", self.value_lr)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(key, v, "finite, >= 0"));
            }
        }
        for (key, v) in [
            ("ppo.trajectories_per_episode", self.trajectories_per_episode),
            ("ppo.updates_per_episode", self.updates_per_episode),
            ("ppo.minibatch_size", self.minibatch_size),
        ] {
            if v == 0 {
                return Err(Error::invalid(key, v, ">= 1"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid("ppo.gamma", self.gamma, "(0, 1]"));
        }
        if let AdvantageEstimator::Gae { lambda } = self.advantage {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::invalid("ppo.gae_lambda", lambda, "[0, 1]"));
            }
        }
        Ok(())
    }
}

/// `V(s_t)` for every step plus the bootstrap value after the last step
/// (zero once the episode is done).
fn state_values(trajectory: &Trajectory, value: &Mlp) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(trajectory.len() + 1);
    for step in &trajectory.steps {
        values.push(value.forward_scalar(&step.state)?);
    }
    values.push(0.0);
    Ok(values)
}

/// One-step advantages `Â_t = r_t + γ·V(s_{t+1}) − V(s_t)` with
/// `V = 0` past the end. Not normalized.
pub fn compute_advantages(trajectory: &Trajectory, value: &Mlp, gamma: f64) -> Result<Vec<f64>> {
    let v = state_values(trajectory, value)?;
    Ok(trajectory
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| s.reward + gamma * v[t + 1] - v[t])
        .collect())
}

fn gae_advantages(trajectory: &Trajectory, value: &Mlp, gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let deltas = compute_advantages(trajectory, value, gamma)?;
    let mut out = vec![0.0; deltas.len()];
    let mut acc = 0.0;
    for t in (0..deltas.len()).rev() {
        acc = deltas[t] + gamma * lambda * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// One-step bootstrapped value targets `r_t + γ·V(s_{t+1})`.
pub fn td_targets(trajectory: &Trajectory, value: &Mlp, gamma: f64) -> Result<Vec<f64>> {
    let v = state_values(trajectory, value)?;
    Ok(trajectory
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| s.reward + gamma * v[t + 1])
        .collect())
}

/// Mean 0, standard deviation 1. Left untouched when the spread is tiny.
pub fn normalize(values: &mut [f64]) {
    if values.len() < 2 {
        return;
    }
    let m = math::mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    let sd = math::sqrt(var);
    if sd < 1e-8 {
        return;
    }
    for v in values {
        *v = (*v - m) / sd;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PpoSample<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub advantage: f64,
    pub behavior_log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: ParamVector,
    /// Samples dropped because their probability ratio was not finite.
    pub skipped: usize,
}

/// `−mean min(r·Â, clip(r, 1−ε, 1+ε)·Â)` with `r = exp(log π − log π′)`.
/// The gradient flows only through samples where the unclipped term is the
/// minimum.
pub fn ppo_loss(policy: &GaussianPolicy, batch: &[PpoSample<'_>], clip_eps: f64) -> Result<LossAndGrad> {
    if batch.is_empty() {
        return Err(Error::EmptyData("empty PPO batch".into()));
    }
    let n = batch.len() as f64;
    let mut grad = ParamVector::zeros(policy.param_count());
    let mut loss = 0.0;
    let mut skipped = 0;
    for s in batch {
        let mut term = 0.0;
        let mut finite = true;
        policy.accumulate_log_prob_grad_with(s.state, s.action, grad.as_mut_slice(), |lp| {
            let ratio = math::exp(lp - s.behavior_log_prob);
            if !ratio.is_finite() {
                finite = false;
                return 0.0;
            }
            let unclipped = ratio * s.advantage;
            let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * s.advantage;
            if unclipped <= clipped {
                term = unclipped;
                // d(−r·Â/N)/dθ = −(Â·r/N)·∇log π
                -s.advantage * ratio / n
            } else {
                term = clipped;
                0.0
            }
        })?;
        if finite {
            loss -= term / n;
        } else {
            skipped += 1;
        }
    }
    Ok(LossAndGrad { loss, grad, skipped })
}

/// Mean squared error `mean (V(s) − target)²` and its gradient.
pub fn value_loss(value: &Mlp, batch: &[(&[f64], f64)]) -> Result<LossAndGrad> {
    if batch.is_empty() {
        return Err(Error::EmptyData("empty value batch".into()));
    }
    let n = batch.len() as f64;
    let mut grad = ParamVector::zeros(value.param_count());
    let mut loss = 0.0;
    for (state, target) in batch {
        let v = value.forward_scalar(state)?;
        let err = v - target;
        loss += err * err / n;
        value.accumulate_gradient(state, &[2.0 * err / n], 1.0, grad.as_mut_slice())?;
    }
    Ok(LossAndGrad {
        loss,
        grad,
        skipped: 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStats {
    /// Zero-based episode index within the task.
    pub episode: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub skipped_ratios: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlOutcome {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    /// Episodes run before stopping (`M`).
    pub episodes_used: usize,
    /// Episode count at which the success threshold was first reached.
    pub solved_at: Option<usize>,
    pub episodes: Vec<EpisodeStats>,
}

impl RlOutcome {
    pub fn solved(&self) -> bool {
        self.solved_at.is_some()
    }
}

/// Trains on one task until the batch success rate reaches the task's
/// threshold or the episode budget runs out. Every batch of rollouts is
/// recorded into `store` under `task_id`.
pub fn run_rl<R: Rng + ?Sized>(
    task: &TaskSpec,
    task_id: usize,
    policy: GaussianPolicy,
    value: Mlp,
    cfg: &PpoConfig,
    store: &mut ExperienceStore,
    rng: &mut R,
) -> Result<RlOutcome> {
    cfg.validate()?;
    if store.is_finalized(task_id) {
        return Err(Error::Protocol(alloc::format!(
            "task {task_id} is finished and cannot be trained on again"
        )));
    }
    let mut policy = policy;
    let mut value = value;
    let mut policy_adam = AdamState::new(policy.param_count());
    let mut value_adam = AdamState::new(value.param_count());
    let policy_opt = AdamConfig::with_lr(cfg.policy_lr);
    let value_opt = AdamConfig::with_lr(cfg.value_lr);
    let mut episodes = Vec::new();
    let mut solved_at = None;
    let mut used = 0;

    for episode in 0..cfg.episode_budget {
        let batch = (0..cfg.trajectories_per_episode)
            .map(|_| rollout(task, task_id, &policy, rng))
            .collect::<Result<Vec<_>>>()?;
        used = episode + 1;
        let success_rate = task.batch_success(&batch, cfg.success_mode);
        let mean_return =
            batch.iter().map(Trajectory::return_).sum::<f64>() / batch.len() as f64;
        let reached = success_rate >= task.success_threshold;
        if reached && solved_at.is_none() {
            solved_at = Some(used);
        }
        if reached && cfg.stop_on_success {
            episodes.push(EpisodeStats {
                episode,
                mean_return,
                success_rate,
                skipped_ratios: 0,
            });
            store.record_batch(task_id, batch)?;
            break;
        }
        let skipped = update(
            &batch,
            &mut policy,
            &mut value,
            cfg,
            (&mut policy_adam, &policy_opt),
            (&mut value_adam, &value_opt),
            rng,
        )?;
        episodes.push(EpisodeStats {
            episode,
            mean_return,
            success_rate,
            skipped_ratios: skipped,
        });
        store.record_batch(task_id, batch)?;
    }

    Ok(RlOutcome {
        policy,
        value,
        episodes_used: used,
        solved_at,
        episodes,
    })
}

fn update<R: Rng + ?Sized>(
    batch: &[Trajectory],
    policy: &mut GaussianPolicy,
    value: &mut Mlp,
    cfg: &PpoConfig,
    (policy_adam, policy_opt): (&mut AdamState, &AdamConfig),
    (value_adam, value_opt): (&mut AdamState, &AdamConfig),
    rng: &mut R,
) -> Result<usize> {
    let mut advantages = Vec::new();
    let mut targets = Vec::new();
    for t in batch {
        match cfg.advantage {
            AdvantageEstimator::OneStep => advantages.extend(compute_advantages(t, value, cfg.gamma)?),
            AdvantageEstimator::Gae { lambda } => {
                advantages.extend(gae_advantages(t, value, cfg.gamma, lambda)?)
            }
        }
        targets.extend(td_targets(t, value, cfg.gamma)?);
    }
    if cfg.normalize_advantages {
        normalize(&mut advantages);
    }
    let samples: Vec<PpoSample<'_>> = batch
        .iter()
        .flat_map(|t| t.steps.iter())
        .zip(&advantages)
        .map(|(s, &advantage)| PpoSample {
            state: &s.state,
            action: &s.action,
            advantage,
            behavior_log_prob: s.behavior_log_prob,
        })
        .collect();
    if samples.is_empty() {
        return Ok(0);
    }
    let value_samples: Vec<(&[f64], f64)> =
        samples.iter().zip(&targets).map(|(s, &t)| (s.state, t)).collect();

    let mut skipped = 0;
    let mb = cfg.minibatch_size.min(samples.len());
    let mut flat = policy.flat();
    let mut value_params = value.params().clone();
    for _ in 0..cfg.updates_per_episode {
        let picks = index::sample(rng, samples.len(), mb);
        let policy_batch: Vec<PpoSample<'_>> = picks.iter().map(|i| samples[i]).collect();
        let value_batch: Vec<(&[f64], f64)> = picks.iter().map(|i| value_samples[i]).collect();

        let out = ppo_loss(policy, &policy_batch, cfg.clip_eps)?;
        skipped += out.skipped;
        adam_step(flat.as_mut_slice(), &out.grad, policy_adam, policy_opt)?;
        policy.set_flat(&flat)?;

        let vout = value_loss(value, &value_batch)?;
        adam_step(value_params.as_mut_slice(), &vout.grad, value_adam, value_opt)?;
        value.set_params(value_params.clone())?;
    }
    Ok(skipped)
}
