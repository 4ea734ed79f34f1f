//! Experiment configuration in a small sectioned `key = value` format.
//!
//! ```text
//! # comment
//! [experiment]
//! family = point_direction
//! seeds = 0,1,2
//!
//! [meta]
//! inner_lr = 0.005
//!
//! ppo.clip_eps = 0.2      # dotted keys work anywhere
//! ```
//!
//! Every key is optional and unknown or repeated keys are errors. The full
//! key table with defaults is in `docs/config.md`.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use comps_core::buffer::Retention;
use comps_core::driver::{ContinualConfig, LearnerKind};
use comps_core::env::{Family, SequenceMode, SuccessMode};
use comps_core::meta::OuterOptimizer;
use comps_core::ppo::{AdvantageEstimator, PpoConfig};

use crate::error::{Error, Result};

const DEFAULT_GAE_LAMBDA: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub family: Family,
    pub mode: SequenceMode,
    pub n_tasks: usize,
    pub learners: Vec<LearnerKind>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub run: ContinualConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            family: Family::PointDirection,
            mode: SequenceMode::Stationary,
            n_tasks: 10,
            learners: LearnerKind::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("out"),
            run: ContinualConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small networks and rollouts tuned so a 10-task sequence finishes in
    /// minutes on one core. Same values as `configs/desk.conf`.
    pub fn desk() -> Self {
        let mut cfg = ExperimentConfig {
            seeds: (0..6).collect(),
            ..Self::default()
        };
        let run = &mut cfg.run;
        run.policy_hidden = vec![32, 32];
        run.value_hidden = vec![32, 32];
        run.init_std = 0.3;
        run.ppo = PpoConfig {
            policy_lr: 0.003,
            value_lr: 0.02,
            updates_per_episode: 32,
            minibatch_size: 128,
            advantage: AdvantageEstimator::Gae {
                lambda: DEFAULT_GAE_LAMBDA,
            },
            ..PpoConfig::default()
        };
        run.meta.inner_lr = 0.2;
        run.meta.skilled_per_visit = Some(5);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.learners.is_empty() {
            return Err(invalid("experiment.learners", "", "at least one learner"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("experiment.seeds", "", "at least one seed"));
        }
        if self.n_tasks == 0 {
            return Err(invalid("experiment.n_tasks", 0, ">= 1"));
        }
        self.run.validate()?;
        Ok(())
    }

    /// Renders every key, so `parse_config(&cfg.serialize())` gives `cfg` back.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for &key in KEYS {
            let (sec, name) = key.split_once('.').expect("keys are dotted");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {}", self.get(key));
        }
        out
    }

    fn get(&self, key: &str) -> String {
        let run = &self.run;
        let (ppo, vt, meta) = (&run.ppo, &run.vtrace, &run.meta);
        match key {
            "experiment.family" => self.family.name().into(),
            "experiment.mode" => self.mode.name().into(),
            "experiment.n_tasks" => self.n_tasks.to_string(),
            "experiment.learners" => join(self.learners.iter().map(|l| l.name())),
            "experiment.seeds" => join(self.seeds.iter()),
            "experiment.output_dir" => self.output_dir.display().to_string(),
            "experiment.budget" => run.budget.name().into(),
            "experiment.eval_trajectories" => run.eval_trajectories.to_string(),
            "network.policy_hidden" => join(run.policy_hidden.iter()),
            "network.value_hidden" => join(run.value_hidden.iter()),
            "network.init_std" => run.init_std.to_string(),
            "ppo.clip_eps" => ppo.clip_eps.to_string(),
            "ppo.policy_lr" => ppo.policy_lr.to_string(),
            "ppo.value_lr" => ppo.value_lr.to_string(),
            "ppo.trajectories_per_episode" => ppo.trajectories_per_episode.to_string(),
            "ppo.updates_per_episode" => ppo.updates_per_episode.to_string(),
            "ppo.minibatch_size" => ppo.minibatch_size.to_string(),
            "ppo.gamma" => ppo.gamma.to_string(),
            "ppo.episode_budget" => ppo.episode_budget.to_string(),
            "ppo.advantage" => match ppo.advantage {
                AdvantageEstimator::OneStep => "one_step".into(),
                AdvantageEstimator::Gae { .. } => "gae".into(),
            },
            "ppo.gae_lambda" => match ppo.advantage {
                AdvantageEstimator::Gae { lambda } => lambda.to_string(),
                AdvantageEstimator::OneStep => DEFAULT_GAE_LAMBDA.to_string(),
            },
            "ppo.normalize_advantages" => ppo.normalize_advantages.to_string(),
            "ppo.success_mode" => match ppo.success_mode {
                SuccessMode::PerSample => "per_sample".into(),
                SuccessMode::PerTrajectory => "per_trajectory".into(),
            },
            "vtrace.rho_bar" => vt.rho_bar.to_string(),
            "vtrace.c_bar" => vt.c_bar.to_string(),
            "vtrace.n_steps" => vt.n_steps.to_string(),
            "vtrace.gamma" => vt.gamma.to_string(),
            "vtrace.ratio_cap" => vt.ratio_cap.to_string(),
            "vtrace.discount_vnext" => vt.discount_vnext.to_string(),
            "meta.n_meta" => meta.n_meta.to_string(),
            "meta.inner_lr" => meta.inner_lr.to_string(),
            "meta.outer_lr" => meta.outer_lr.to_string(),
            "meta.m_inner" => meta.m_inner.to_string(),
            "meta.bc_steps_per_task" => meta.bc_steps_per_task.to_string(),
            "meta.skilled_per_visit" => match meta.skilled_per_visit {
                Some(n) => n.to_string(),
                None => "all".into(),
            },
            "meta.warm_start" => meta.warm_start.to_string(),
            "meta.optimizer" => match meta.optimizer {
                OuterOptimizer::Adam => "adam".into(),
                OuterOptimizer::Sgd => "sgd".into(),
            },
            "meta.adapt_log_std" => meta.adapt_log_std.to_string(),
            "meta.refit_per_iteration" => meta.refit_per_iteration.to_string(),
            "meta.value_fit_steps" => meta.value_fit_steps.to_string(),
            "meta.value_fit_lr" => meta.value_fit_lr.to_string(),
            "buffer.retention" => match run.retention {
                Retention::LastEpisodes => "last".into(),
                Retention::UniformEpisodes => "uniform".into(),
            },
            _ => unreachable!("unknown key {key}"),
        }
    }

    fn set(&mut self, key: &str, value: &str, lambda: &mut Option<f64>) -> Result<()> {
        let run = &mut self.run;
        match key {
            "experiment.family" => self.family = value.parse()?,
            "experiment.mode" => self.mode = value.parse()?,
            "experiment.n_tasks" => self.n_tasks = num(key, value)?,
            "experiment.learners" => self.learners = list(key, value)?,
            "experiment.seeds" => self.seeds = list(key, value)?,
            "experiment.output_dir" => self.output_dir = PathBuf::from(value),
            "experiment.budget" => run.budget = value.parse()?,
            "experiment.eval_trajectories" => run.eval_trajectories = num(key, value)?,
            "network.policy_hidden" => run.policy_hidden = list(key, value)?,
            "network.value_hidden" => run.value_hidden = list(key, value)?,
            "network.init_std" => run.init_std = num(key, value)?,
            "ppo.clip_eps" => run.ppo.clip_eps = num(key, value)?,
            "ppo.policy_lr" => run.ppo.policy_lr = num(key, value)?,
            "ppo.value_lr" => run.ppo.value_lr = num(key, value)?,
            "ppo.trajectories_per_episode" => run.ppo.trajectories_per_episode = num(key, value)?,
            "ppo.updates_per_episode" => run.ppo.updates_per_episode = num(key, value)?,
            "ppo.minibatch_size" => run.ppo.minibatch_size = num(key, value)?,
            "ppo.gamma" => run.ppo.gamma = num(key, value)?,
            "ppo.episode_budget" => run.ppo.episode_budget = num(key, value)?,
            "ppo.advantage" => {
                run.ppo.advantage = match value {
                    "one_step" => AdvantageEstimator::OneStep,
                    "gae" => AdvantageEstimator::Gae {
                        lambda: DEFAULT_GAE_LAMBDA,
                    },
                    _ => return Err(invalid(key, value, "one_step, gae")),
                }
            }
            "ppo.gae_lambda" => *lambda = Some(num(key, value)?),
            "ppo.normalize_advantages" => run.ppo.normalize_advantages = flag(key, value)?,
            "ppo.success_mode" => {
                run.ppo.success_mode = match value {
                    "per_sample" => SuccessMode::PerSample,
                    "per_trajectory" => SuccessMode::PerTrajectory,
                    _ => return Err(invalid(key, value, "per_sample, per_trajectory")),
                }
            }
            "vtrace.rho_bar" => run.vtrace.rho_bar = num(key, value)?,
            "vtrace.c_bar" => run.vtrace.c_bar = num(key, value)?,
            "vtrace.n_steps" => run.vtrace.n_steps = num(key, value)?,
            "vtrace.gamma" => run.vtrace.gamma = num(key, value)?,
            "vtrace.ratio_cap" => run.vtrace.ratio_cap = num(key, value)?,
            "vtrace.discount_vnext" => run.vtrace.discount_vnext = flag(key, value)?,
            "meta.n_meta" => run.meta.n_meta = num(key, value)?,
            "meta.inner_lr" => run.meta.inner_lr = num(key, value)?,
            "meta.outer_lr" => run.meta.outer_lr = num(key, value)?,
            "meta.m_inner" => run.meta.m_inner = num(key, value)?,
            "meta.bc_steps_per_task" => run.meta.bc_steps_per_task = num(key, value)?,
            "meta.skilled_per_visit" => {
                run.meta.skilled_per_visit = match value {
                    "all" => None,
                    _ => Some(num(key, value)?),
                }
            }
            "meta.warm_start" => run.meta.warm_start = flag(key, value)?,
            "meta.optimizer" => {
                run.meta.optimizer = match value {
                    "adam" => OuterOptimizer::Adam,
                    "sgd" => OuterOptimizer::Sgd,
                    _ => return Err(invalid(key, value, "adam, sgd")),
                }
            }
            "meta.adapt_log_std" => run.meta.adapt_log_std = flag(key, value)?,
            "meta.refit_per_iteration" => run.meta.refit_per_iteration = flag(key, value)?,
            "meta.value_fit_steps" => run.meta.value_fit_steps = num(key, value)?,
            "meta.value_fit_lr" => run.meta.value_fit_lr = num(key, value)?,
            "buffer.retention" => {
                run.retention = match value {
                    "last" => Retention::LastEpisodes,
                    "uniform" => Retention::UniformEpisodes,
                    _ => return Err(invalid(key, value, "last, uniform")),
                }
            }
            _ => unreachable!("unknown key {key}"),
        }
        Ok(())
    }
}

/// Every accepted key, grouped by section in serialization order.
pub const KEYS: &[&str] = &[
    "experiment.family",
    "experiment.mode",
    "experiment.n_tasks",
    "experiment.learners",
    "experiment.seeds",
    "experiment.output_dir",
    "experiment.budget",
    "experiment.eval_trajectories",
    "network.policy_hidden",
    "network.value_hidden",
    "network.init_std",
    "ppo.clip_eps",
    "ppo.policy_lr",
    "ppo.value_lr",
    "ppo.trajectories_per_episode",
    "ppo.updates_per_episode",
    "ppo.minibatch_size",
    "ppo.gamma",
    "ppo.episode_budget",
    "ppo.advantage",
    "ppo.gae_lambda",
    "ppo.normalize_advantages",
    "ppo.success_mode",
    "vtrace.rho_bar",
    "vtrace.c_bar",
    "vtrace.n_steps",
    "vtrace.gamma",
    "vtrace.ratio_cap",
    "vtrace.discount_vnext",
    "meta.n_meta",
    "meta.inner_lr",
    "meta.outer_lr",
    "meta.m_inner",
    "meta.bc_steps_per_task",
    "meta.skilled_per_visit",
    "meta.warm_start",
    "meta.optimizer",
    "meta.adapt_log_std",
    "meta.refit_per_iteration",
    "meta.value_fit_steps",
    "meta.value_fit_lr",
    "buffer.retention",
];

/// Parses a config, filling defaults for omitted keys, and validates it.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen: Vec<&'static str> = Vec::new();
    let mut section: Option<String> = None;
    let mut lambda = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| line_error(line_no, format!("malformed section header `{line}`")))?;
            if !KEYS.iter().any(|k| k.split_once('.').map(|p| p.0) == Some(name)) {
                return Err(line_error(line_no, format!("unknown section `{name}`")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| line_error(line_no, format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        let full = match (&section, k.contains('.')) {
            (_, true) => k.to_string(),
            (Some(s), false) => format!("{s}.{k}"),
            (None, false) => {
                return Err(line_error(line_no, format!("key `{k}` outside a section")));
            }
        };
        let key = *KEYS
            .iter()
            .find(|&&known| known == full)
            .ok_or_else(|| line_error(line_no, format!("unknown key `{full}`")))?;
        if seen.contains(&key) {
            return Err(line_error(line_no, format!("duplicate key `{key}`")));
        }
        seen.push(key);
        cfg.set(key, v, &mut lambda).map_err(|e| match e {
            Error::Core(core) => line_error(line_no, core.to_string()),
            other => other,
        })?;
    }
    if let Some(lambda) = lambda {
        if let AdvantageEstimator::Gae { .. } = cfg.run.ppo.advantage {
            cfg.run.ppo.advantage = AdvantageEstimator::Gae { lambda };
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn line_error(line: usize, message: String) -> Error {
    Error::ConfigLine { line, message }
}

fn invalid(key: &str, value: impl ToString, allowed: &str) -> Error {
    Error::Core(comps_core::Error::InvalidConfig {
        key: key.into(),
        value: value.to_string(),
        allowed: allowed.into(),
    })
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(key, value, std::any::type_name::<T>()))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    value.parse().map_err(|_| invalid(key, value, "true, false"))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|item| {
            let item = item.trim();
            item.parse()
                .map_err(|_| invalid(key, item, "a comma-separated list"))
        })
        .collect()
}

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}
