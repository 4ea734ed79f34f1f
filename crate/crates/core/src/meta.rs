//! Meta-training over finished tasks: an off-policy inner policy-gradient
//! step from stored experience, followed by behavioral cloning of the
//! task's skilled trajectories under the adapted parameters.

use alloc::vec::Vec;

use rand::Rng;

use crate::buffer::ExperienceStore;
use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, AdamState, GaussianPolicy, Mlp, ParamVector};
use crate::vtrace::{fit_value, offpolicy_pg, InnerEstimator, VtraceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OuterOptimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub n_meta: usize,
    /// α, the inner ascent step.
    pub inner_lr: f64,
    /// β, the outer descent step.
    pub outer_lr: f64,
    /// Off-policy trajectories drawn per inner step.
    pub m_inner: usize,
    /// Outer imitation steps per task visit.
    pub bc_steps_per_task: usize,
    /// Skilled trajectories per visit; `None` uses the whole skilled set.
    pub skilled_per_visit: Option<usize>,
    /// Start meta-training from the latest RL policy instead of the previous
    /// meta solution.
    pub warm_start: bool,
    pub optimizer: OuterOptimizer,
    pub estimator: InnerEstimator,
    /// Let the inner step move the policy's log standard deviations too.
    pub adapt_log_std: bool,
    /// Refit the value function at the start of every meta iteration.
    pub refit_per_iteration: bool,
    pub value_fit_steps: usize,
    pub value_fit_lr: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            n_meta: 25,
            inner_lr: 0.005,
            outer_lr: 0.005,
            m_inner: 10,
            bc_steps_per_task: 5,
            skilled_per_visit: None,
            warm_start: true,
            optimizer: OuterOptimizer::Adam,
            estimator: InnerEstimator::Vtrace,
            adapt_log_std: true,
            refit_per_iteration: false,
            value_fit_steps: 50,
            value_fit_lr: 1e-3,
        }
    }
}

impl MetaConfig {
    /// The smaller inner step used for the harder task suites.
    pub fn hard() -> Self {
        MetaConfig {
            inner_lr: 0.0025,
            ..MetaConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("meta.inner_lr", self.inner_lr),
            ("meta.outer_lr", self.outer_lr),
            ("meta.value_fit_lr", self.value_fit_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(key, v, ">= 0"));
            }
        }
        if self.m_inner == 0 {
            return Err(Error::invalid("meta.m_inner", 0, ">= 1"));
        }
        if self.skilled_per_visit == Some(0) {
            return Err(Error::invalid("meta.skilled_per_visit", 0, ">= 1"));
        }
        if let InnerEstimator::ClippedIs { clip_eps } = self.estimator {
            if !(clip_eps > 0.0 && clip_eps < 1.0) {
                return Err(Error::invalid("meta.clip_eps", clip_eps, "(0, 1)"));
            }
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of the pairs and its gradient (flat layout).
pub fn bc_loss(policy: &GaussianPolicy, pairs: &[(&[f64], &[f64])]) -> Result<(f64, ParamVector)> {
    if pairs.is_empty() {
        return Err(Error::EmptyData("behavioral cloning needs at least one pair".into()));
    }
    let n = pairs.len() as f64;
    let mut grad = ParamVector::zeros(policy.param_count());
    let mut loss = 0.0;
    for (s, a) in pairs {
        loss -= policy.accumulate_log_prob_grad(s, a, -1.0 / n, grad.as_mut_slice())? / n;
    }
    Ok((loss, grad))
}

pub fn trajectory_pairs<'a>(trajectories: &[&'a Trajectory]) -> Vec<(&'a [f64], &'a [f64])> {
    trajectories
        .iter()
        .flat_map(|t| t.steps.iter())
        .map(|s| (s.state.as_slice(), s.action.as_slice()))
        .collect()
}

/// Where meta-training for the next task starts.
pub fn meta_init_for_task(prev_final: &GaussianPolicy, prev_meta: &GaussianPolicy, cfg: &MetaConfig) -> GaussianPolicy {
    if cfg.warm_start {
        prev_final.clone()
    } else {
        prev_meta.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaIterationStats {
    pub iteration: usize,
    pub mean_bc_loss: f64,
    pub mean_inner_grad_norm: f64,
    pub skipped_tasks: usize,
    /// Visits or outer steps dropped because the adapted policy overflowed.
    pub nonfinite_skips: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaOutcome {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub stats: Vec<MetaIterationStats>,
}

struct Outer {
    flat: ParamVector,
    adam: AdamState,
    cfg: AdamConfig,
    kind: OuterOptimizer,
}

impl Outer {
    fn step(&mut self, grad: &[f64]) -> Result<()> {
        match self.kind {
            OuterOptimizer::Adam => adam_step(self.flat.as_mut_slice(), grad, &mut self.adam, &self.cfg),
            OuterOptimizer::Sgd => self.flat.add_scaled(-self.cfg.lr, grad),
        }
    }
}

/// `Ok(None)` for a gradient that overflowed; other errors pass through.
fn finite(grad: Result<ParamVector>) -> Result<Option<ParamVector>> {
    match grad {
        Ok(g) if g.iter().all(|v| v.is_finite()) => Ok(Some(g)),
        Ok(_) | Err(Error::NonFinite { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs `n_meta` passes over `tasks` in order. Each visit draws `m_inner`
/// off-policy trajectories, computes the inner gradient `g` once, then takes
/// `bc_steps_per_task` outer steps, each using the imitation gradient at
/// `φ = θ + α·g` as a first-order stand-in for the gradient through the
/// inner step. A visit whose adapted policy overflows is dropped and
/// counted rather than aborting the run.
pub fn meta_train<R: Rng + ?Sized>(
    theta: &GaussianPolicy,
    value: &Mlp,
    store: &ExperienceStore,
    tasks: &[usize],
    vtrace: &VtraceConfig,
    cfg: &MetaConfig,
    rng: &mut R,
) -> Result<MetaOutcome> {
    cfg.validate()?;
    vtrace.validate()?;
    for &j in tasks {
        if !store.is_finalized(j) {
            return Err(Error::Protocol(alloc::format!(
                "meta-training needs task {j} to be finalized"
            )));
        }
    }
    let mut policy = theta.clone();
    let mut value = value.clone();
    let mut outer = Outer {
        flat: theta.flat(),
        adam: AdamState::new(theta.param_count()),
        cfg: AdamConfig::with_lr(cfg.outer_lr),
        kind: cfg.optimizer,
    };
    let mut stats = Vec::with_capacity(cfg.n_meta);

    for iteration in 0..cfg.n_meta {
        if cfg.refit_per_iteration {
            for &j in tasks {
                let data: Vec<&Trajectory> = store.offpolicy(j).iter().collect();
                if data.is_empty() {
                    continue;
                }
                let fit = fit_value(
                    &value,
                    &data,
                    &policy,
                    vtrace,
                    cfg.estimator.value_targets(),
                    cfg.value_fit_steps,
                    cfg.value_fit_lr,
                )?;
                value = fit.value;
            }
        }
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut visited = 0;
        let mut skipped = 0;
        let mut nonfinite = 0;
        for &j in tasks {
            if store.skilled(j).is_empty() || store.offpolicy(j).is_empty() {
                skipped += 1;
                continue;
            }
            let train = store.sample_offpolicy(j, cfg.m_inner, rng)?;
            let val = store.sample_skilled(j, cfg.skilled_per_visit, rng)?;
            let g = finite(offpolicy_pg(&policy, &value, &train, vtrace, cfg.estimator).map(|e| e.grad))?;
            let Some(mut g) = g else {
                nonfinite += 1;
                continue;
            };
            if !cfg.adapt_log_std {
                let split = policy.mean_net().param_count();
                g.as_mut_slice()[split..].fill(0.0);
            }
            let pairs = trajectory_pairs(&val);
            let mut visit_loss = 0.0;
            let mut steps = 0;
            for _ in 0..cfg.bc_steps_per_task {
                let mut phi = outer.flat.clone();
                phi.add_scaled(cfg.inner_lr, &g)?;
                let adapted = finite(policy.with_flat(&phi).and_then(|p| bc_loss(&p, &pairs)).map(|(l, grad)| {
                    visit_loss += l;
                    grad
                }))?;
                let Some(grad) = adapted else {
                    nonfinite += 1;
                    break;
                };
                outer.step(&grad)?;
                policy.set_flat(&outer.flat)?;
                steps += 1;
            }
            if steps > 0 {
                loss_sum += visit_loss / steps as f64;
            }
            norm_sum += g.norm();
            visited += 1;
        }
        let per = |x: f64| if visited > 0 { x / visited as f64 } else { 0.0 };
        stats.push(MetaIterationStats {
            iteration,
            mean_bc_loss: per(loss_sum),
            mean_inner_grad_norm: per(norm_sum),
            skipped_tasks: skipped,
            nonfinite_skips: nonfinite,
        });
    }
    Ok(MetaOutcome { policy, value, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{rollout, Family, TaskSpec};
    use crate::math::HALF_LN_2PI;
    use crate::nn::MlpSpec;
    use crate::rng::seeded;
    use alloc::vec;
    use alloc::vec::Vec;

    fn small_policy(seed: u64) -> GaussianPolicy {
        GaussianPolicy::init(MlpSpec::new(4, &[6], 2).unwrap(), 0.5, &mut seeded(seed)).unwrap()
    }

    fn small_value(seed: u64) -> Mlp {
        Mlp::init(MlpSpec::new(4, &[6], 1).unwrap(), &mut seeded(seed)).unwrap()
    }

    /// One finalized task whose skilled set comes from `expert` and whose
    /// off-policy data comes from `behavior`.
    fn store_with_task(task_id: usize, behavior: &GaussianPolicy, expert: &GaussianPolicy) -> ExperienceStore {
        let task = TaskSpec::new(Family::PointDirection, 0.7, 8, 0.5, 0.99).unwrap();
        let mut rng = seeded(100 + task_id as u64);
        let off: Vec<Trajectory> = (0..12).map(|_| rollout(&task, task_id, behavior, &mut rng).unwrap()).collect();
        let skilled: Vec<Trajectory> = (0..6).map(|_| rollout(&task, task_id, expert, &mut rng).unwrap()).collect();
        ExperienceStore::from_finalized(vec![(task_id, 1, skilled, off)]).unwrap()
    }

    #[test]
    fn bc_loss_at_exact_mean_with_unit_std() {
        let spec = MlpSpec::linear(1, 1).unwrap();
        let mean = Mlp::new(spec, ParamVector::from_vec(vec![0.0, 0.7]).unwrap()).unwrap();
        let p = GaussianPolicy::new(mean, vec![0.0]).unwrap();
        let s = [0.3];
        let a = [0.7];
        let (loss, _) = bc_loss(&p, &[(&s, &a), (&s, &a)]).unwrap();
        assert!((loss - HALF_LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn bc_loss_two_pair_hand_case() {
        let spec = MlpSpec::linear(1, 1).unwrap();
        let mean = Mlp::new(spec, ParamVector::from_vec(vec![2.0, 0.0]).unwrap()).unwrap();
        let p = GaussianPolicy::new(mean, vec![0.5f64.ln()]).unwrap();
        let (s1, a1, s2, a2) = ([1.0], [2.5], [-1.0], [-1.0]);
        let (loss, _) = bc_loss(&p, &[(&s1, &a1), (&s2, &a2)]).unwrap();
        // σ = 0.5, residuals 0.5 and 1.0.
        let nll = |r: f64| 0.5 * (2.0 * core::f64::consts::PI).ln() + 0.5f64.ln() + r * r / (2.0 * 0.25);
        assert!((loss - (nll(0.5) + nll(1.0)) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bc_loss_is_mean_form_and_matches_finite_differences() {
        let p = small_policy(1);
        let expert = small_policy(2);
        let store = store_with_task(0, &p, &expert);
        let skilled = store.skilled(0);
        let pairs = trajectory_pairs(&skilled);
        let mut doubled = pairs.clone();
        doubled.extend(pairs.iter().copied());
        let (l1, g) = bc_loss(&p, &pairs).unwrap();
        let (l2, _) = bc_loss(&p, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);

        let flat = p.flat().to_vec();
        let h = 1e-6;
        for k in 0..flat.len() {
            let mut plus = flat.clone();
            plus[k] += h;
            let mut minus = flat.clone();
            minus[k] -= h;
            let fd = (bc_loss(&p.with_flat(&plus).unwrap(), &pairs).unwrap().0
                - bc_loss(&p.with_flat(&minus).unwrap(), &pairs).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}");
        }
        assert!(bc_loss(&p, &[]).is_err());
    }

    #[test]
    fn degenerate_configs_leave_theta_unchanged() {
        let p = small_policy(1);
        let v = small_value(3);
        let store = store_with_task(0, &p, &small_policy(2));
        for cfg in [
            MetaConfig { n_meta: 0, ..MetaConfig::default() },
            MetaConfig { outer_lr: 0.0, ..MetaConfig::default() },
            MetaConfig { outer_lr: 0.0, optimizer: OuterOptimizer::Sgd, ..MetaConfig::default() },
        ] {
            let out = meta_train(&p, &v, &store, &[0], &VtraceConfig::default(), &cfg, &mut seeded(5)).unwrap();
            assert_eq!(out.policy, p);
        }
    }

    #[test]
    fn zero_inner_step_is_plain_cloning() {
        let p = small_policy(1);
        let v = small_value(3);
        let store = store_with_task(0, &p, &small_policy(2));
        let cfg = MetaConfig { inner_lr: 0.0, n_meta: 3, ..MetaConfig::default() };
        let out = meta_train(&p, &v, &store, &[0], &VtraceConfig::default(), &cfg, &mut seeded(5)).unwrap();

        let skilled = store.skilled(0);
        let pairs = trajectory_pairs(&skilled);
        let mut flat = p.flat();
        let mut adam = AdamState::new(flat.len());
        let opt = AdamConfig::with_lr(cfg.outer_lr);
        let mut q = p.clone();
        let mut losses = Vec::new();
        for _ in 0..cfg.n_meta * cfg.bc_steps_per_task {
            let (loss, grad) = bc_loss(&q, &pairs).unwrap();
            losses.push(loss);
            adam_step(flat.as_mut_slice(), &grad, &mut adam, &opt).unwrap();
            q.set_flat(&flat).unwrap();
        }
        assert_eq!(out.policy, q);
        for w in losses[..11].windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn unfinalized_task_is_rejected_and_empty_skilled_is_skipped() {
        let p = small_policy(1);
        let v = small_value(3);
        let store = ExperienceStore::default();
        assert!(matches!(
            meta_train(&p, &v, &store, &[0], &VtraceConfig::default(), &MetaConfig::default(), &mut seeded(1)),
            Err(Error::Protocol(_))
        ));
        let empty = ExperienceStore::from_finalized(vec![(0, 1, vec![], vec![])]).unwrap();
        let cfg = MetaConfig { n_meta: 2, ..MetaConfig::default() };
        let out = meta_train(&p, &v, &empty, &[0], &VtraceConfig::default(), &cfg, &mut seeded(1)).unwrap();
        assert_eq!(out.policy, p);
        assert!(out.stats.iter().all(|s| s.skipped_tasks == 1));
    }

    #[test]
    fn meta_train_is_deterministic_and_leaves_store_alone() {
        let p = small_policy(1);
        let v = small_value(3);
        let store = store_with_task(0, &p, &small_policy(2));
        let before = store.clone();
        let cfg = MetaConfig { n_meta: 2, inner_lr: 0.05, refit_per_iteration: true, value_fit_steps: 3, ..MetaConfig::default() };
        let a = meta_train(&p, &v, &store, &[0], &VtraceConfig::default(), &cfg, &mut seeded(9)).unwrap();
        let b = meta_train(&p, &v, &store, &[0], &VtraceConfig::default(), &cfg, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(store, before);
        assert_ne!(a.policy, p);
        assert_eq!(a.stats.len(), 2);
        assert!(a.stats[0].mean_inner_grad_norm > 0.0);
    }

    #[test]
    fn overflowing_inner_step_is_skipped() {
        let p = small_policy(1);
        let v = small_value(3);
        let store = store_with_task(0, &p, &small_policy(2));
        let cfg = MetaConfig { n_meta: 2, inner_lr: 1e305, ..MetaConfig::default() };
        let out = meta_train(&p, &v, &store, &[0], &VtraceConfig::default(), &cfg, &mut seeded(5)).unwrap();
        assert_eq!(out.policy, p);
        assert!(out.stats.iter().all(|s| s.nonfinite_skips == 1));
    }

    #[test]
    fn one_visit_matches_a_hand_assembled_step() {
        let p = small_policy(1);
        let v = small_value(3);
        let store = store_with_task(0, &p, &small_policy(2));
        let vt = VtraceConfig::default();
        for adapt_log_std in [true, false] {
            let cfg = MetaConfig {
                n_meta: 1,
                bc_steps_per_task: 1,
                inner_lr: 0.3,
                outer_lr: 0.01,
                optimizer: OuterOptimizer::Sgd,
                adapt_log_std,
                ..MetaConfig::default()
            };
            let out = meta_train(&p, &v, &store, &[0], &vt, &cfg, &mut seeded(5)).unwrap();

            let mut rng = seeded(5);
            let train = store.sample_offpolicy(0, cfg.m_inner, &mut rng).unwrap();
            let val = store.sample_skilled(0, None, &mut rng).unwrap();
            let mut g = offpolicy_pg(&p, &v, &train, &vt, InnerEstimator::Vtrace).unwrap().grad;
            let split = p.mean_net().param_count();
            if !adapt_log_std {
                g.as_mut_slice()[split..].fill(0.0);
            }
            let mut phi = p.flat();
            phi.add_scaled(cfg.inner_lr, &g).unwrap();
            if !adapt_log_std {
                assert_eq!(phi[split..], p.flat()[split..]);
            }
            let (_, grad) = bc_loss(&p.with_flat(&phi).unwrap(), &trajectory_pairs(&val)).unwrap();
            let mut want = p.flat();
            want.add_scaled(-cfg.outer_lr, &grad).unwrap();
            assert_eq!(out.policy.flat(), want);
        }
    }

    #[test]
    fn init_choice_follows_warm_start() {
        let prev = small_policy(1);
        let meta = small_policy(2);
        let on = MetaConfig::default();
        let off = MetaConfig { warm_start: false, ..MetaConfig::default() };
        assert_eq!(meta_init_for_task(&prev, &meta, &on), prev);
        assert_eq!(meta_init_for_task(&prev, &meta, &off), meta);
    }

    #[test]
    fn config_validation() {
        assert!(MetaConfig::default().validate().is_ok());
        assert_eq!(MetaConfig::hard().inner_lr, 0.0025);
        assert!(MetaConfig { m_inner: 0, ..MetaConfig::default() }.validate().is_err());
        assert!(MetaConfig { inner_lr: -1.0, ..MetaConfig::default() }.validate().is_err());
        let bad = MetaConfig { estimator: InnerEstimator::ClippedIs { clip_eps: 1.5 }, ..MetaConfig::default() };
        assert!(bad.validate().is_err());
    }
}
