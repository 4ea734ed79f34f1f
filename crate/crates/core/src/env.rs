//! Toy task families: a point mass that must reach a goal on a circle, a
//! point mass that must run in a heading, and a 1-D velocity tracker.
//!
//! Point states are `(x, y, vx, vy)`, velocity-tracker states are `(v)`.
//! Dynamics are deterministic; randomness enters only through
//! [`TaskSpec::reset`] and the policy's action noise.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::math;
use crate::nn::GaussianPolicy;
use crate::rng::standard_normal;

pub const DT: f64 = 0.1;
pub const VELOCITY_DECAY: f64 = 0.9;
pub const ACTION_GAIN: f64 = 0.1;
pub const GOAL_RADIUS: f64 = 1.0;
pub const CONTROL_COST: f64 = 0.01;
pub const VELOCITY_CAP: f64 = 1.0;
pub const RESET_NOISE_STD: f64 = 0.01;
pub const DEFAULT_HORIZON: usize = 50;
pub const DEFAULT_DISCOUNT: f64 = 0.99;
pub const MAX_SEQUENCE_LEN: usize = 40;

pub const GOAL_TOLERANCE: f64 = 0.15;
pub const HEADING_TOLERANCE: f64 = 0.4;
pub const MIN_SPEED: f64 = 0.1;
pub const VELOCITY_TOLERANCE: f64 = 0.3;

/// Goal and heading angles in degrees, in the order tasks are presented
/// when the sequence drifts.
pub const ANGLE_SCHEDULE_DEG: [f64; 40] = [
    -171.0, 9.0, -162.0, 18.0, -153.0, 27.0, -144.0, 36.0, -135.0, 45.0, -126.0, 54.0, -117.0,
    63.0, -108.0, 72.0, -99.0, 81.0, -90.0, 90.0, -81.0, 99.0, -72.0, 108.0, -63.0, 117.0, -54.0,
    126.0, -45.0, 135.0, -36.0, 144.0, -27.0, 153.0, -18.0, 162.0, -9.0, 171.0, 0.0, 180.0,
];

/// Target velocities on a `[-3, 3]` scale; rescaled to `[-VELOCITY_CAP,
/// VELOCITY_CAP]` when tasks are built.
pub const VELOCITY_SCHEDULE: [f64; 40] = [
    -2.66, 0.14, -2.52, 0.28, -2.38, 0.42, -2.24, 0.56, -2.1, 0.7, -1.96, 0.84, -1.82, 0.98, -1.68,
    1.12, -1.54, 1.26, -1.4, 1.4, -1.26, 1.54, -1.12, 1.68, -0.98, 1.82, -0.84, 1.96, -0.7, 2.1,
    -0.56, 2.24, -0.42, 2.38, -0.28, 2.52, -0.14, 2.66, 0.0, 2.8,
];
const VELOCITY_SCHEDULE_SCALE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    PointGoal,
    PointDirection,
    ChainVelocity,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::PointGoal, Family::PointDirection, Family::ChainVelocity];

    pub fn name(self) -> &'static str {
        match self {
            Family::PointGoal => "point_goal",
            Family::PointDirection => "point_direction",
            Family::ChainVelocity => "chain_velocity",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            Family::PointGoal | Family::PointDirection => 4,
            Family::ChainVelocity => 1,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Family::PointGoal | Family::PointDirection => 2,
            Family::ChainVelocity => 1,
        }
    }

    pub fn default_threshold(self) -> f64 {
        match self {
            Family::PointGoal => 0.3,
            Family::PointDirection => 0.5,
            Family::ChainVelocity => 0.45,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid("family", s, "point_goal|point_direction|chain_velocity"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceMode {
    Stationary,
    Nonstationary,
}

impl SequenceMode {
    pub fn name(self) -> &'static str {
        match self {
            SequenceMode::Stationary => "stationary",
            SequenceMode::Nonstationary => "nonstationary",
        }
    }
}

impl fmt::Display for SequenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SequenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(SequenceMode::Stationary),
            "nonstationary" => Ok(SequenceMode::Nonstationary),
            _ => Err(Error::invalid("mode", s, "stationary|nonstationary")),
        }
    }
}

/// How per-step success indicators become a batch success rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SuccessMode {
    /// Fraction of all steps, pooled over the batch.
    #[default]
    PerSample,
    /// Fraction of trajectories with at least one successful step.
    PerTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub family: Family,
    /// Goal angle, heading angle (radians) or target velocity.
    pub param: f64,
    pub horizon: usize,
    pub success_threshold: f64,
    pub discount: f64,
}

impl TaskSpec {
    pub fn new(
        family: Family,
        param: f64,
        horizon: usize,
        success_threshold: f64,
        discount: f64,
    ) -> Result<Self> {
        let task = TaskSpec {
            family,
            param,
            horizon,
            success_threshold,
            discount,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn with_defaults(family: Family, param: f64) -> Result<Self> {
        Self::new(
            family,
            param,
            DEFAULT_HORIZON,
            family.default_threshold(),
            DEFAULT_DISCOUNT,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let pi = core::f64::consts::PI;
        let in_range = match self.family {
            Family::PointGoal | Family::PointDirection => (-pi..=pi).contains(&self.param),
            Family::ChainVelocity => math::abs(self.param) <= VELOCITY_CAP,
        };
        if !in_range {
            let allowed = match self.family {
                Family::ChainVelocity => "[-1, 1]",
                _ => "[-pi, pi]",
            };
            return Err(Error::invalid("param", self.param, allowed));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon", 0, ">= 1"));
        }
        // A threshold of 0 is accepted so that "solved immediately" can be
        // expressed.
        if !(0.0..1.0).contains(&self.success_threshold) {
            return Err(Error::invalid(
                "success_threshold",
                self.success_threshold,
                "[0, 1)",
            ));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::invalid("discount", self.discount, "(0, 1]"));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.family.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.family.action_dim()
    }

    /// Goal position (PointGoal) or unit heading (PointDirection).
    pub fn goal_vector(&self) -> (f64, f64) {
        let scale = match self.family {
            Family::PointGoal => GOAL_RADIUS,
            _ => 1.0,
        };
        (scale * math::cos(self.param), scale * math::sin(self.param))
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.reset_with_noise(rng, RESET_NOISE_STD)
    }

    /// Reset with a custom initial-position noise; `0.0` gives the origin.
    pub fn reset_with_noise<R: Rng + ?Sized>(&self, rng: &mut R, noise_std: f64) -> Vec<f64> {
        match self.family {
            Family::PointGoal | Family::PointDirection => {
                let x = noise_std * standard_normal(rng);
                let y = noise_std * standard_normal(rng);
                vec![x, y, 0.0, 0.0]
            }
            Family::ChainVelocity => vec![noise_std * standard_normal(rng)],
        }
    }

    /// Advances one step from time index `t`. Actions are clipped to
    /// `[-1, 1]` per component before use, and point-mass actions are then
    /// scaled into the unit disc so that no heading is favored by the box
    /// corners. `done` is set on the last step of the horizon.
    pub fn step(&self, state: &[f64], action: &[f64], t: usize) -> Result<(Vec<f64>, f64, bool)> {
        check_len("state", self.state_dim(), state.len())?;
        check_len("action", self.action_dim(), action.len())?;
        if let Some(index) = state.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                task: 0,
                step: t,
                detail: alloc::format!("non-finite state component {index}"),
            });
        }
        let mut a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        if self.family != Family::ChainVelocity {
            let n = math::norm(&a);
            if n > 1.0 {
                a.iter_mut().for_each(|v| *v /= n);
            }
        }
        let control = CONTROL_COST * math::dot(&a, &a);
        let done = t + 1 >= self.horizon;
        match self.family {
            Family::PointGoal | Family::PointDirection => {
                let vx = VELOCITY_DECAY * state[2] + ACTION_GAIN * a[0];
                let vy = VELOCITY_DECAY * state[3] + ACTION_GAIN * a[1];
                let x = state[0] + DT * vx;
                let y = state[1] + DT * vy;
                let (gx, gy) = self.goal_vector();
                let reward = match self.family {
                    Family::PointGoal => {
                        -math::sqrt((x - gx) * (x - gx) + (y - gy) * (y - gy)) - control
                    }
                    _ => vx * gx + vy * gy - control,
                };
                Ok((vec![x, y, vx, vy], reward, done))
            }
            Family::ChainVelocity => {
                let v = state[0] + ACTION_GAIN * a[0];
                let reward = -math::abs(v - self.param) - control;
                Ok((vec![v], reward, done))
            }
        }
    }

    /// Largest reward magnitude reachable within the horizon from a reset
    /// state.
    pub fn reward_bound(&self) -> f64 {
        let reach = 1.0 + DT * self.horizon as f64 * core::f64::consts::SQRT_2;
        let max_control = CONTROL_COST * self.action_dim() as f64;
        match self.family {
            Family::PointGoal => reach + GOAL_RADIUS + max_control,
            Family::PointDirection => core::f64::consts::SQRT_2 + max_control,
            Family::ChainVelocity => {
                1.0 + ACTION_GAIN * self.horizon as f64 + VELOCITY_CAP + max_control
            }
        }
    }

    pub fn is_success_state(&self, state: &[f64]) -> bool {
        match self.family {
            Family::PointGoal => {
                let (gx, gy) = self.goal_vector();
                let (dx, dy) = (state[0] - gx, state[1] - gy);
                math::sqrt(dx * dx + dy * dy) < GOAL_TOLERANCE
            }
            Family::PointDirection => {
                let (gx, gy) = self.goal_vector();
                let speed = math::sqrt(state[2] * state[2] + state[3] * state[3]);
                if speed <= MIN_SPEED {
                    return false;
                }
                let (ux, uy) = (state[2] / speed - gx, state[3] / speed - gy);
                math::sqrt(ux * ux + uy * uy) < HEADING_TOLERANCE
            }
            Family::ChainVelocity => {
                math::abs(state[0] - self.param) < VELOCITY_TOLERANCE * math::abs(self.param)
            }
        }
    }

    fn success_count(&self, trajectory: &Trajectory) -> usize {
        trajectory
            .steps
            .iter()
            .filter(|s| self.is_success_state(&s.state))
            .count()
    }

    /// Fraction of the trajectory's steps spent in the success region.
    pub fn success(&self, trajectory: &Trajectory) -> f64 {
        if trajectory.steps.is_empty() {
            return 0.0;
        }
        self.success_count(trajectory) as f64 / trajectory.steps.len() as f64
    }

    pub fn batch_success(&self, trajectories: &[Trajectory], mode: SuccessMode) -> f64 {
        match mode {
            SuccessMode::PerSample => {
                let steps: usize = trajectories.iter().map(|t| t.steps.len()).sum();
                if steps == 0 {
                    return 0.0;
                }
                let hits: usize = trajectories.iter().map(|t| self.success_count(t)).sum();
                hits as f64 / steps as f64
            }
            SuccessMode::PerTrajectory => {
                if trajectories.is_empty() {
                    return 0.0;
                }
                let hits = trajectories
                    .iter()
                    .filter(|t| self.success_count(t) > 0)
                    .count();
                hits as f64 / trajectories.len() as f64
            }
        }
    }

    pub fn describe(&self) -> String {
        alloc::format!("{}({:.4})", self.family, self.param)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    /// The sampled action before clipping; the log-density refers to it.
    pub action: Vec<f64>,
    pub reward: f64,
    /// Log-density of `action` under the policy that sampled it.
    pub behavior_log_prob: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task_id: usize,
    pub steps: Vec<Step>,
    return_: f64,
}

impl Trajectory {
    pub fn new(task_id: usize, steps: Vec<Step>) -> Self {
        let return_ = steps.iter().map(|s| s.reward).sum();
        Trajectory {
            task_id,
            steps,
            return_,
        }
    }

    /// Undiscounted sum of rewards.
    pub fn return_(&self) -> f64 {
        self.return_
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs one episode of `task` under `policy`, recording behavior log-probs.
pub fn rollout<R: Rng + ?Sized>(
    task: &TaskSpec,
    task_id: usize,
    policy: &GaussianPolicy,
    rng: &mut R,
) -> Result<Trajectory> {
    check_len("policy input", task.state_dim(), policy.state_dim())?;
    check_len("policy output", task.action_dim(), policy.action_dim())?;
    let bound = task.reward_bound();
    let mut state = task.reset(rng);
    let mut steps = Vec::with_capacity(task.horizon);
    for t in 0..task.horizon {
        let (action, log_prob) = policy.sample_action(&state, rng)?;
        let (next, reward, done) = task.step(&state, &action, t).map_err(|e| match e {
            Error::Numerical { step, detail, .. } => Error::Numerical {
                task: task_id,
                step,
                detail,
            },
            other => other,
        })?;
        if !reward.is_finite() || math::abs(reward) > bound {
            return Err(Error::Numerical {
                task: task_id,
                step: t,
                detail: alloc::format!("reward {reward} outside bound {bound}"),
            });
        }
        if !log_prob.is_finite() {
            return Err(Error::Numerical {
                task: task_id,
                step: t,
                detail: String::from("non-finite behavior log-prob"),
            });
        }
        steps.push(Step {
            state,
            action,
            reward,
            behavior_log_prob: log_prob,
            done,
        });
        state = next;
        if done {
            break;
        }
    }
    Ok(Trajectory::new(task_id, steps))
}

/// Builds the first `n_tasks` tasks of a family's schedule. Stationary mode
/// shuffles those same tasks with `rng`.
pub fn make_sequence<R: Rng + ?Sized>(
    family: Family,
    mode: SequenceMode,
    n_tasks: usize,
    rng: &mut R,
) -> Result<Vec<TaskSpec>> {
    if n_tasks > MAX_SEQUENCE_LEN {
        return Err(Error::invalid("n_tasks", n_tasks, "<= 40"));
    }
    let mut params: Vec<f64> = match family {
        Family::PointGoal | Family::PointDirection => ANGLE_SCHEDULE_DEG[..n_tasks]
            .iter()
            .map(|d| d.to_radians())
            .collect(),
        Family::ChainVelocity => VELOCITY_SCHEDULE[..n_tasks]
            .iter()
            .map(|v| v / VELOCITY_SCHEDULE_SCALE * VELOCITY_CAP)
            .collect(),
    };
    if mode == SequenceMode::Stationary {
        params.shuffle(rng);
    }
    params
        .into_iter()
        .map(|p| TaskSpec::with_defaults(family, p))
        .collect()
}
