//! The continual protocol: tasks arrive one at a time, each is trained with
//! PPO from the learner's current initialization, its experience is
//! finalized, and the meta-learners then meta-train over every finished
//! task before the next one starts. Also the metrics computed from a run.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::buffer::{ExperienceStore, Retention, StoreEvent};
use crate::env::{rollout, Trajectory, TaskSpec};
use crate::error::{Error, Result};
use crate::math;
use crate::meta::{meta_init_for_task, meta_train, MetaConfig, MetaIterationStats};
use crate::nn::{GaussianPolicy, Mlp, MlpSpec};
use crate::ppo::{run_rl, PpoConfig};
use crate::rng::{derive, Purpose};
use crate::vtrace::{fit_value, InnerEstimator, VtraceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LearnerKind {
    Comps,
    PpoTl,
    CompsNoVtrace,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 3] = [LearnerKind::Comps, LearnerKind::PpoTl, LearnerKind::CompsNoVtrace];

    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Comps => "comps",
            LearnerKind::PpoTl => "ppotl",
            LearnerKind::CompsNoVtrace => "novtrace",
        }
    }

    pub fn is_meta(self) -> bool {
        !matches!(self, LearnerKind::PpoTl)
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LearnerKind::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::invalid("learner", s, "comps, ppotl, novtrace"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BudgetMode {
    /// Move on as soon as the success threshold is reached.
    #[default]
    UntilSuccess,
    /// Always spend the full episode budget.
    FixedBudget,
}

impl BudgetMode {
    pub fn name(self) -> &'static str {
        match self {
            BudgetMode::UntilSuccess => "until_success",
            BudgetMode::FixedBudget => "fixed_budget",
        }
    }
}

impl FromStr for BudgetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "until_success" => Ok(BudgetMode::UntilSuccess),
            "fixed_budget" => Ok(BudgetMode::FixedBudget),
            _ => Err(Error::invalid("mode", s, "until_success, fixed_budget")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinualConfig {
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub init_std: f64,
    pub ppo: PpoConfig,
    pub vtrace: VtraceConfig,
    pub meta: MetaConfig,
    pub budget: BudgetMode,
    pub retention: Retention,
    /// Rollouts per task when evaluating a policy on earlier tasks.
    pub eval_trajectories: usize,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        ContinualConfig {
            policy_hidden: alloc::vec![128, 64],
            value_hidden: alloc::vec![128, 64],
            init_std: 0.5,
            ppo: PpoConfig::default(),
            vtrace: VtraceConfig::default(),
            meta: MetaConfig::default(),
            budget: BudgetMode::default(),
            retention: Retention::default(),
            eval_trajectories: 10,
        }
    }
}

impl ContinualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::invalid("network.init_std", self.init_std, "> 0"));
        }
        if self.policy_hidden.contains(&0) {
            return Err(Error::invalid("network.policy_hidden", "0", "positive layer widths"));
        }
        if self.value_hidden.contains(&0) {
            return Err(Error::invalid("network.value_hidden", "0", "positive layer widths"));
        }
        if self.eval_trajectories == 0 {
            return Err(Error::invalid("experiment.eval_trajectories", 0, ">= 1"));
        }
        self.ppo.validate()?;
        self.vtrace.validate()?;
        self.meta.validate()
    }

    /// Meta settings for a learner: the ablation swaps in the clipped
    /// importance-sampling estimator with the PPO clip range.
    pub fn meta_for(&self, learner: LearnerKind) -> MetaConfig {
        let mut meta = self.meta.clone();
        meta.estimator = match learner {
            LearnerKind::CompsNoVtrace => InnerEstimator::ClippedIs { clip_eps: self.ppo.clip_eps },
            _ => InnerEstimator::Vtrace,
        };
        meta
    }
}

/// One PPO episode of one task in one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub learner: LearnerKind,
    pub seed: u64,
    pub task_index: usize,
    /// Zero-based within the task.
    pub episode: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    /// Set on the row where the threshold was first reached: the number of
    /// episodes it took.
    pub solved_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskCheckpoint {
    pub task_index: usize,
    /// Policy the task's RL started from.
    pub start: GaussianPolicy,
    /// Policy at the end of the task's RL.
    pub trained: GaussianPolicy,
    /// Value function after the task (and its meta step, if any).
    pub value: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinualRun {
    pub learner: LearnerKind,
    pub seed: u64,
    pub records: Vec<RunRecord>,
    pub checkpoints: Vec<TaskCheckpoint>,
    pub meta_stats: Vec<(usize, Vec<MetaIterationStats>)>,
    pub value_fit_diverged: usize,
    /// The policy the learner would start the next task from.
    pub final_policy: GaussianPolicy,
    pub store: ExperienceStore,
}

/// Trains `learner` on `sequence` in order. Every source of randomness is a
/// stream derived from `seed`, so all learners see identical first-task
/// rollouts.
pub fn run_continual(
    learner: LearnerKind,
    sequence: &[TaskSpec],
    cfg: &ContinualConfig,
    seed: u64,
) -> Result<ContinualRun> {
    cfg.validate()?;
    let first = sequence
        .first()
        .ok_or_else(|| Error::EmptyData("task sequence is empty".into()))?;
    for t in sequence {
        t.validate()?;
        if t.family != first.family {
            return Err(Error::invalid("sequence", t.family, "a single task family"));
        }
    }
    let policy_spec = MlpSpec::new(first.state_dim(), &cfg.policy_hidden, first.action_dim())?;
    let value_spec = MlpSpec::new(first.state_dim(), &cfg.value_hidden, 1)?;
    let fresh = GaussianPolicy::init(policy_spec, cfg.init_std, &mut derive(seed, Purpose::Init, 0))?;
    let mut value = Mlp::init(value_spec, &mut derive(seed, Purpose::Init, 1))?;

    let mut ppo = cfg.ppo;
    ppo.stop_on_success = cfg.budget == BudgetMode::UntilSuccess;
    let meta_cfg = cfg.meta_for(learner);

    let mut store = ExperienceStore::new(cfg.retention);
    let mut start = fresh.clone();
    let mut meta_policy = fresh;
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut meta_stats = Vec::new();
    let mut value_fit_diverged = 0;

    for (i, task) in sequence.iter().enumerate() {
        let mut rng = derive(seed, Purpose::Rollout, i as u64);
        let out = run_rl(task, i, start.clone(), value, &ppo, &mut store, &mut rng)?;
        for e in &out.episodes {
            records.push(RunRecord {
                learner,
                seed,
                task_index: i,
                episode: e.episode,
                mean_return: e.mean_return,
                success_rate: e.success_rate,
                solved_at: out.solved_at.filter(|&m| m == e.episode + 1),
            });
        }
        store.finalize_task(i, ppo.episode_budget, &mut derive(seed, Purpose::Finalize, i as u64))?;
        value = out.value;

        if learner.is_meta() {
            let init = meta_init_for_task(&out.policy, &meta_policy, &meta_cfg);
            let data: Vec<&Trajectory> = store.offpolicy(i).iter().collect();
            if !data.is_empty() {
                let fit = fit_value(
                    &value,
                    &data,
                    &init,
                    &cfg.vtrace,
                    meta_cfg.estimator.value_targets(),
                    meta_cfg.value_fit_steps,
                    meta_cfg.value_fit_lr,
                )?;
                value_fit_diverged += usize::from(fit.diverged);
                value = fit.value;
            }
            let tasks: Vec<usize> = (0..=i).collect();
            let mut meta_rng = derive(seed, Purpose::Meta, i as u64);
            let meta = meta_train(&init, &value, &store, &tasks, &cfg.vtrace, &meta_cfg, &mut meta_rng)?;
            meta_stats.push((i, meta.stats));
            value = meta.value;
            meta_policy = meta.policy;
            checkpoints.push(TaskCheckpoint {
                task_index: i,
                start: core::mem::replace(&mut start, meta_policy.clone()),
                trained: out.policy,
                value: value.clone(),
            });
        } else {
            checkpoints.push(TaskCheckpoint {
                task_index: i,
                start: core::mem::replace(&mut start, out.policy.clone()),
                trained: out.policy,
                value: value.clone(),
            });
        }
    }
    check_forward_only(store.events())?;

    Ok(ContinualRun {
        learner,
        seed,
        records,
        checkpoints,
        meta_stats,
        value_fit_diverged,
        final_policy: start,
        store,
    })
}

/// Checks an event log against the no-revisit rule: tasks are recorded in
/// index order starting at zero, and task `i` receives data only after task
/// `i − 1` is finalized and before task `i` is.
pub fn check_forward_only(events: &[StoreEvent]) -> Result<()> {
    let mut current = 0;
    for e in events {
        match *e {
            StoreEvent::Record { task_id, .. } if task_id != current => {
                return Err(Error::Protocol(alloc::format!(
                    "data recorded for task {task_id} while task {current} was open"
                )));
            }
            StoreEvent::Finalize { task_id } => {
                if task_id != current {
                    return Err(Error::Protocol(alloc::format!(
                        "task {task_id} finalized while task {current} was open"
                    )));
                }
                current += 1;
            }
            StoreEvent::Record { .. } => {}
        }
    }
    Ok(())
}

/// Per-task summary metric, one value per (seed, task).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Episodes until the threshold was reached; unsolved tasks count as the
    /// episode budget.
    EpisodesToSuccess,
    /// Return averaged over the task's episodes.
    MeanReturn,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::EpisodesToSuccess => "episodes_to_success",
            Metric::MeanReturn => "mean_return",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "episodes_to_success" => Ok(Metric::EpisodesToSuccess),
            "mean_return" => Ok(Metric::MeanReturn),
            _ => Err(Error::invalid("metric", s, "episodes_to_success, mean_return")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub task_index: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds divided by √seeds.
    pub std_err: f64,
    pub seeds: usize,
}

/// Value of `metric` for every (seed, task) present in `records`.
pub fn per_seed_task_values(records: &[RunRecord], metric: Metric, episode_cap: usize) -> BTreeMap<(usize, u64), f64> {
    let mut grouped: BTreeMap<(usize, u64), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry((r.task_index, r.seed)).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(key, rows)| {
            let v = match metric {
                Metric::EpisodesToSuccess => rows
                    .iter()
                    .find_map(|r| r.solved_at)
                    .unwrap_or(episode_cap) as f64,
                Metric::MeanReturn => rows.iter().map(|r| r.mean_return).sum::<f64>() / rows.len() as f64,
            };
            (key, v)
        })
        .collect()
}

/// Mean and standard error over seeds of `metric`, per task index.
pub fn metric_curve(records: &[RunRecord], metric: Metric, episode_cap: usize) -> Vec<CurvePoint> {
    let mut by_task: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for ((task, _), v) in per_seed_task_values(records, metric, episode_cap) {
        by_task.entry(task).or_default().push(v);
    }
    by_task
        .into_iter()
        .map(|(task_index, values)| {
            let (mean, std_err) = math::mean_and_std_err(&values);
            CurvePoint {
                task_index,
                mean,
                std_err,
                seeds: values.len(),
            }
        })
        .collect()
}

pub fn episodes_to_success_curve(records: &[RunRecord], episode_cap: usize) -> Vec<CurvePoint> {
    metric_curve(records, Metric::EpisodesToSuccess, episode_cap)
}

/// `(c − a)/(b − a)`; `None` when `b = a` or any input is not finite.
pub fn normalized_reward(a: f64, b: f64, c: f64) -> Option<f64> {
    let v = (c - a) / (b - a);
    (b != a && v.is_finite()).then_some(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardTransfer {
    pub k: usize,
    /// Mean first-episode return over the first `k` tasks.
    pub first: f64,
    /// Mean last-episode return over the same tasks.
    pub last: f64,
    /// Mean evaluation return of the policy on them.
    pub current: f64,
    pub normalized: Option<f64>,
}

/// Evaluates `policy` on the first `k` tasks of `sequence` and compares with
/// the first and last training episodes recorded for them. Evaluation
/// rollouts are discarded, never stored.
pub fn backward_transfer(
    policy: &GaussianPolicy,
    sequence: &[TaskSpec],
    records: &[RunRecord],
    k: usize,
    eval_trajectories: usize,
    seed: u64,
) -> Result<BackwardTransfer> {
    if k == 0 || k > sequence.len() {
        return Err(Error::invalid("k", k, alloc::format!("1..={}", sequence.len())));
    }
    if eval_trajectories == 0 {
        return Err(Error::invalid("eval_trajectories", 0, ">= 1"));
    }
    let mut first = 0.0;
    let mut last = 0.0;
    let mut current = 0.0;
    for (i, task) in sequence.iter().enumerate().take(k) {
        let rows: Vec<&RunRecord> = records.iter().filter(|r| r.task_index == i).collect();
        let lo = rows.iter().min_by_key(|r| r.episode);
        let hi = rows.iter().max_by_key(|r| r.episode);
        let (Some(lo), Some(hi)) = (lo, hi) else {
            return Err(Error::EmptyData(alloc::format!("no records for task {i}")));
        };
        first += lo.mean_return;
        last += hi.mean_return;
        let mut rng = derive(seed, Purpose::Evaluation, i as u64);
        let mut total = 0.0;
        for _ in 0..eval_trajectories {
            total += rollout(task, i, policy, &mut rng)?.return_();
        }
        current += total / eval_trajectories as f64;
    }
    let n = k as f64;
    let (first, last, current) = (first / n, last / n, current / n);
    Ok(BackwardTransfer {
        k,
        first,
        last,
        current,
        normalized: normalized_reward(first, last, current),
    })
}

pub fn learner_names(learners: &[LearnerKind]) -> String {
    let names: Vec<&str> = learners.iter().map(|l| l.name()).collect();
    names.join(",")
}
