//! Per-task experience: the skilled set (best trajectories by return) and a
//! retained, subsampled off-policy set.
//!
//! Tasks are strictly forward-only. Once a task is finalized nothing can be
//! recorded to it again, and only one task may be staging at a time.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::env::Trajectory;
use crate::math;

pub const SKILLED_CAPACITY: usize = 20;
pub const OFFPOLICY_CAPACITY: usize = 100;
pub const RETENTION_FRACTION: f64 = 0.05;

/// Which episodes survive finalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Retention {
    /// The most recent `k` episodes.
    #[default]
    LastEpisodes,
    /// `k` episodes drawn uniformly from all staged episodes.
    UniformEpisodes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreEvent {
    Record { task_id: usize, episode: usize },
    Finalize { task_id: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Ranked {
    arrival: u64,
    trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceStore {
    skilled: BTreeMap<usize, Vec<Ranked>>,
    offpolicy: BTreeMap<usize, Vec<Trajectory>>,
    episode_counts: BTreeMap<usize, usize>,
    staging: Vec<Vec<Trajectory>>,
    active: Option<usize>,
    finalized: BTreeSet<usize>,
    events: Vec<StoreEvent>,
    arrivals: u64,
    retention: Retention,
}

impl Default for ExperienceStore {
    fn default() -> Self {
        Self::new(Retention::default())
    }
}

impl ExperienceStore {
    pub fn new(retention: Retention) -> Self {
        ExperienceStore {
            skilled: BTreeMap::new(),
            offpolicy: BTreeMap::new(),
            episode_counts: BTreeMap::new(),
            staging: Vec::new(),
            active: None,
            finalized: BTreeSet::new(),
            events: Vec::new(),
            arrivals: 0,
            retention,
        }
    }

    /// Rebuilds a store of finalized tasks, e.g. from an experience file.
    /// Skilled lists are taken to be in rank order.
    pub fn from_finalized(
        tasks: Vec<(usize, usize, Vec<Trajectory>, Vec<Trajectory>)>,
    ) -> Result<Self> {
        let mut store = Self::default();
        for (task_id, episodes, skilled, offpolicy) in tasks {
            if !store.finalized.insert(task_id) {
                return Err(Error::Protocol(format!("task {task_id} listed twice")));
            }
            let ranked = skilled
                .into_iter()
                .map(|trajectory| {
                    store.arrivals += 1;
                    Ranked {
                        arrival: store.arrivals,
                        trajectory,
                    }
                })
                .collect();
            store.skilled.insert(task_id, ranked);
            store.offpolicy.insert(task_id, offpolicy);
            store.episode_counts.insert(task_id, episodes);
        }
        Ok(store)
    }

    pub fn retention(&self) -> Retention {
        self.retention
    }

    pub fn active_task(&self) -> Option<usize> {
        self.active
    }

    pub fn is_finalized(&self, task_id: usize) -> bool {
        self.finalized.contains(&task_id)
    }

    pub fn finalized_tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.finalized.iter().copied()
    }

    pub fn events(&self) -> &[StoreEvent] {
        &self.events
    }

    pub fn episode_count(&self, task_id: usize) -> usize {
        self.episode_counts.get(&task_id).copied().unwrap_or(0)
    }

    /// Skilled trajectories of a task, best first.
    pub fn skilled(&self, task_id: usize) -> Vec<&Trajectory> {
        self.skilled
            .get(&task_id)
            .map(|v| v.iter().map(|r| &r.trajectory).collect())
            .unwrap_or_default()
    }

    pub fn offpolicy(&self, task_id: usize) -> &[Trajectory] {
        self.offpolicy.get(&task_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn staged_episodes(&self) -> usize {
        self.staging.len()
    }

    /// Records one episode's batch of trajectories for `task_id`.
    pub fn record_batch(&mut self, task_id: usize, trajectories: Vec<Trajectory>) -> Result<()> {
        if self.finalized.contains(&task_id) {
            return Err(Error::Protocol(format!(
                "task {task_id} is finished and cannot receive new experience"
            )));
        }
        if let Some(active) = self.active {
            if active != task_id {
                return Err(Error::Protocol(format!(
                    "task {active} is still open; finalize it before recording task {task_id}"
                )));
            }
        }
        if let Some(t) = trajectories.iter().find(|t| t.task_id != task_id) {
            return Err(Error::Protocol(format!(
                "trajectory of task {} recorded under task {task_id}",
                t.task_id
            )));
        }
        for t in &trajectories {
            if !t.return_().is_finite() {
                return Err(Error::NonFinite {
                    what: "trajectory return",
                    index: 0,
                });
            }
            if let Some(i) = t.steps.iter().position(|s| !s.behavior_log_prob.is_finite()) {
                return Err(Error::NonFinite {
                    what: "behavior log-prob",
                    index: i,
                });
            }
        }
        self.active = Some(task_id);
        let skilled = self.skilled.entry(task_id).or_default();
        for t in &trajectories {
            self.arrivals += 1;
            skilled.push(Ranked {
                arrival: self.arrivals,
                trajectory: t.clone(),
            });
        }
        // Stable sort keeps earlier arrivals ahead on equal returns.
        skilled.sort_by(|a, b| b.trajectory.return_().total_cmp(&a.trajectory.return_()));
        skilled.truncate(SKILLED_CAPACITY);
        let episode = self.staging.len();
        self.staging.push(trajectories);
        *self.episode_counts.entry(task_id).or_default() += 1;
        self.events.push(StoreEvent::Record { task_id, episode });
        Ok(())
    }

    /// Number of episodes kept at finalization: `min(M, ⌈0.05·N_cap⌉)`.
    pub fn retained_episodes(episodes_used: usize, episode_budget: usize) -> usize {
        let cap = math::ceil(RETENTION_FRACTION * episode_budget as f64) as usize;
        episodes_used.min(cap)
    }

    /// Closes the active task: keeps `retained_episodes(M, N_cap)` staged
    /// episodes, then a seeded uniform subsample of at most 100 of their
    /// trajectories becomes the task's off-policy set.
    pub fn finalize_task<R: Rng + ?Sized>(
        &mut self,
        task_id: usize,
        episode_budget: usize,
        rng: &mut R,
    ) -> Result<()> {
        if self.finalized.contains(&task_id) {
            return Err(Error::Protocol(format!("task {task_id} finalized twice")));
        }
        if self.active != Some(task_id) || self.staging.is_empty() {
            return Err(Error::EmptyData(format!(
                "nothing staged for task {task_id}"
            )));
        }
        let episodes = self.staging.len();
        let k = Self::retained_episodes(episodes, episode_budget).max(1);
        let staging = core::mem::take(&mut self.staging);
        let kept: Vec<Trajectory> = match self.retention {
            Retention::LastEpisodes => staging.into_iter().skip(episodes - k).flatten().collect(),
            Retention::UniformEpisodes => {
                let mut picks = index::sample(rng, episodes, k).into_vec();
                picks.sort_unstable();
                let mut staging: Vec<Option<Vec<Trajectory>>> =
                    staging.into_iter().map(Some).collect();
                picks
                    .into_iter()
                    .flat_map(|i| staging[i].take().unwrap_or_default())
                    .collect()
            }
        };
        let offpolicy = if kept.len() <= OFFPOLICY_CAPACITY {
            kept
        } else {
            let mut picks = index::sample(rng, kept.len(), OFFPOLICY_CAPACITY).into_vec();
            picks.sort_unstable();
            let mut kept: Vec<Option<Trajectory>> = kept.into_iter().map(Some).collect();
            picks.into_iter().filter_map(|i| kept[i].take()).collect()
        };
        self.offpolicy.insert(task_id, offpolicy);
        self.finalized.insert(task_id);
        self.active = None;
        self.events.push(StoreEvent::Finalize { task_id });
        Ok(())
    }

    /// `m` draws with replacement from the task's off-policy set.
    pub fn sample_offpolicy<R: Rng + ?Sized>(
        &self,
        task_id: usize,
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<&Trajectory>> {
        let pool = self.offpolicy(task_id);
        if pool.is_empty() {
            return Err(Error::EmptyData(format!(
                "off-policy buffer of task {task_id} is empty"
            )));
        }
        Ok((0..m).map(|_| &pool[rng.random_range(0..pool.len())]).collect())
    }

    /// The full skilled set by default, or a seeded subset of `m` (without
    /// replacement, capped at the set size).
    pub fn sample_skilled<R: Rng + ?Sized>(
        &self,
        task_id: usize,
        m: Option<usize>,
        rng: &mut R,
    ) -> Result<Vec<&Trajectory>> {
        let pool = self.skilled(task_id);
        if pool.is_empty() {
            return Err(Error::EmptyData(format!(
                "skilled buffer of task {task_id} is empty"
            )));
        }
        match m {
            None => Ok(pool),
            Some(m) => {
                let mut picks = index::sample(rng, pool.len(), m.min(pool.len())).into_vec();
                picks.sort_unstable();
                Ok(picks.into_iter().map(|i| pool[i]).collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Step;
    use crate::rng::seeded;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    /// One-step trajectory whose return is `ret`; `tag` is stored in the
    /// state so individual trajectories can be told apart.
    fn traj(task_id: usize, ret: f64, tag: f64) -> Trajectory {
        Trajectory::new(
            task_id,
            vec![Step {
                state: vec![tag],
                action: vec![0.0],
                reward: ret,
                behavior_log_prob: -1.0,
                done: true,
            }],
        )
    }

    fn tag(t: &Trajectory) -> f64 {
        t.steps[0].state[0]
    }

    /// Brute-force oracle: sort everything by (return desc, arrival asc).
    fn brute_top(log: &[(f64, f64)]) -> Vec<f64> {
        let mut indexed: Vec<(usize, f64, f64)> =
            log.iter().enumerate().map(|(i, &(r, t))| (i, r, t)).collect();
        indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        indexed.into_iter().take(SKILLED_CAPACITY).map(|x| x.2).collect()
    }

    #[test]
    fn skilled_keeps_top_twenty_across_batches() {
        let mut store = ExperienceStore::default();
        store
            .record_batch(0, (0..5).map(|i| traj(0, i as f64 * 10.0, i as f64)).collect())
            .unwrap();
        store
            .record_batch(0, (5..35).map(|i| traj(0, i as f64, i as f64)).collect())
            .unwrap();
        let mut all: Vec<f64> = (0..5).map(|i| i as f64 * 10.0).chain((5..35).map(|i| i as f64)).collect();
        all.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let got: Vec<f64> = store.skilled(0).iter().map(|t| t.return_()).collect();
        assert_eq!(got, all[..20].to_vec());
    }

    #[test]
    fn equal_returns_keep_first_recorded() {
        let mut store = ExperienceStore::default();
        store.record_batch(0, (0..30).map(|i| traj(0, 1.0, i as f64)).collect()).unwrap();
        let tags: Vec<f64> = store.skilled(0).iter().map(|t| tag(t)).collect();
        assert_eq!(tags, (0..20).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn shuffled_returns_select_upper_range() {
        let mut returns: Vec<f64> = (1..=35).map(|i| i as f64).collect();
        returns.shuffle(&mut seeded(4));
        let mut store = ExperienceStore::default();
        for chunk in returns.chunks(7) {
            store.record_batch(0, chunk.iter().map(|&r| traj(0, r, r)).collect()).unwrap();
        }
        let mut got: Vec<f64> = store.skilled(0).iter().map(|t| t.return_()).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, (16..=35).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn finished_tasks_reject_new_records() {
        let mut store = ExperienceStore::default();
        store.record_batch(0, vec![traj(0, 1.0, 0.0)]).unwrap();
        assert!(matches!(store.record_batch(1, vec![traj(1, 1.0, 0.0)]), Err(Error::Protocol(_))));
        store.finalize_task(0, 400, &mut seeded(0)).unwrap();
        assert!(matches!(store.record_batch(0, vec![traj(0, 1.0, 0.0)]), Err(Error::Protocol(_))));
        assert!(matches!(store.finalize_task(0, 400, &mut seeded(0)), Err(Error::Protocol(_))));
        store.record_batch(1, vec![traj(1, 1.0, 0.0)]).unwrap();
        assert!(matches!(store.record_batch(1, vec![traj(2, 1.0, 0.0)]), Err(Error::Protocol(_))));
    }

    #[test]
    fn finalize_without_staging_is_rejected() {
        let mut store = ExperienceStore::default();
        assert!(matches!(store.finalize_task(0, 10, &mut seeded(0)), Err(Error::EmptyData(_))));
    }

    #[test]
    fn retention_formula() {
        assert_eq!(ExperienceStore::retained_episodes(10, 400), 10);
        assert_eq!(ExperienceStore::retained_episodes(50, 400), 20);
        assert_eq!(ExperienceStore::retained_episodes(50, 150), 8);
        assert_eq!(ExperienceStore::retained_episodes(3, 1), 1);
    }

    #[test]
    fn finalize_keeps_last_episodes() {
        let mut store = ExperienceStore::default();
        for ep in 0..10 {
            store
                .record_batch(0, (0..6).map(|i| traj(0, 0.0, (ep * 100 + i) as f64)).collect())
                .unwrap();
        }
        // k = min(10, ceil(0.05·400)) = 10 episodes, 60 trajectories, no subsample.
        store.finalize_task(0, 400, &mut seeded(0)).unwrap();
        assert_eq!(store.offpolicy(0).len(), 60);
        let mut store = ExperienceStore::default();
        for ep in 0..10 {
            store
                .record_batch(0, (0..6).map(|i| traj(0, 0.0, (ep * 100 + i) as f64)).collect())
                .unwrap();
        }
        // k = ceil(0.05·60) = 3: episodes 7, 8, 9.
        store.finalize_task(0, 60, &mut seeded(0)).unwrap();
        let tags: Vec<f64> = store.offpolicy(0).iter().map(tag).collect();
        assert_eq!(tags.len(), 18);
        assert!(tags.iter().all(|&t| t >= 700.0));
    }

    fn big_store(seed: u64) -> ExperienceStore {
        let mut store = ExperienceStore::default();
        for ep in 0..5 {
            store
                .record_batch(0, (0..100).map(|i| traj(0, 0.0, (ep * 100 + i) as f64)).collect())
                .unwrap();
        }
        store.finalize_task(0, 1000, &mut seeded(seed)).unwrap();
        store
    }

    #[test]
    fn subsample_is_seed_reproducible() {
        let a = big_store(42);
        let b = big_store(42);
        let c = big_store(43);
        assert_eq!(a.offpolicy(0).len(), 100);
        assert_eq!(a.offpolicy(0), b.offpolicy(0));
        assert_ne!(a.offpolicy(0), c.offpolicy(0));
        let mut tags: Vec<f64> = a.offpolicy(0).iter().map(tag).collect();
        tags.dedup();
        assert_eq!(tags.len(), 100, "subsample draws without replacement");
    }

    #[test]
    fn uniform_retention_draws_from_all_episodes() {
        let mut store = ExperienceStore::new(Retention::UniformEpisodes);
        for ep in 0..40 {
            store.record_batch(0, vec![traj(0, 0.0, ep as f64)]).unwrap();
        }
        store.finalize_task(0, 100, &mut seeded(1)).unwrap();
        assert_eq!(store.offpolicy(0).len(), 5);
    }

    #[test]
    fn offpolicy_sampling() {
        let mut store = ExperienceStore::default();
        store.record_batch(0, vec![traj(0, 3.0, 7.0)]).unwrap();
        store.finalize_task(0, 10, &mut seeded(0)).unwrap();
        let s = store.sample_offpolicy(0, 3, &mut seeded(1)).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|t| tag(t) == 7.0));
        assert!(matches!(store.sample_offpolicy(5, 3, &mut seeded(1)), Err(Error::EmptyData(_))));

        let mut store = ExperienceStore::default();
        store.record_batch(0, (0..5).map(|i| traj(0, 0.0, i as f64)).collect()).unwrap();
        store.finalize_task(0, 100, &mut seeded(0)).unwrap();
        let a: Vec<f64> = store.sample_offpolicy(0, 20, &mut seeded(9)).unwrap().into_iter().map(tag).collect();
        let b: Vec<f64> = store.sample_offpolicy(0, 20, &mut seeded(9)).unwrap().into_iter().map(tag).collect();
        assert_eq!(a, b);
        let mut counts = [0usize; 5];
        let mut rng = seeded(10);
        for t in store.sample_offpolicy(0, 10_000, &mut rng).unwrap() {
            counts[tag(t) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 2000.0 - 1.0).abs() < 0.05, "{counts:?}");
        }
    }

    #[test]
    fn skilled_sampling() {
        let mut store = ExperienceStore::default();
        store.record_batch(0, (0..25).map(|i| traj(0, i as f64, i as f64)).collect()).unwrap();
        store.record_batch(1, vec![]).unwrap_err();
        store.finalize_task(0, 100, &mut seeded(0)).unwrap();
        assert_eq!(store.sample_skilled(0, None, &mut seeded(0)).unwrap().len(), 20);
        let a: Vec<f64> = store.sample_skilled(0, Some(5), &mut seeded(3)).unwrap().into_iter().map(tag).collect();
        let b: Vec<f64> = store.sample_skilled(0, Some(5), &mut seeded(3)).unwrap().into_iter().map(tag).collect();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        let mut small = ExperienceStore::default();
        small.record_batch(2, (0..3).map(|i| traj(2, 0.0, i as f64)).collect()).unwrap();
        assert_eq!(small.sample_skilled(2, None, &mut seeded(0)).unwrap().len(), 3);
        assert!(small.sample_skilled(0, None, &mut seeded(0)).is_err());
    }

    #[test]
    fn event_log_tracks_protocol() {
        let mut store = ExperienceStore::default();
        store.record_batch(0, vec![traj(0, 0.0, 0.0)]).unwrap();
        store.record_batch(0, vec![traj(0, 0.0, 0.0)]).unwrap();
        store.finalize_task(0, 10, &mut seeded(0)).unwrap();
        assert_eq!(
            store.events(),
            &[
                StoreEvent::Record { task_id: 0, episode: 0 },
                StoreEvent::Record { task_id: 0, episode: 1 },
                StoreEvent::Finalize { task_id: 0 },
            ]
        );
        assert_eq!(store.episode_count(0), 2);
    }

    proptest! {
        #[test]
        fn skilled_matches_brute_force_top_twenty(
            batches in proptest::collection::vec(
                proptest::collection::vec(-5i32..5, 0..12), 1..8)
        ) {
            let mut store = ExperienceStore::default();
            let mut log = Vec::new();
            let mut next_tag = 0.0;
            for batch in batches {
                let trajs: Vec<Trajectory> = batch.iter().map(|&r| {
                    next_tag += 1.0;
                    log.push((r as f64, next_tag));
                    traj(0, r as f64, next_tag)
                }).collect();
                store.record_batch(0, trajs).unwrap();
            }
            let got: Vec<f64> = store.skilled(0).iter().map(|t| tag(t)).collect();
            prop_assert_eq!(got, brute_top(&log));
        }
    }
}
