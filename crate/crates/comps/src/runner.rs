//! Runs a whole experiment and writes its artifacts to a directory.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use comps_core::driver::{
    backward_transfer, per_seed_task_values, run_continual, BackwardTransfer, ContinualRun, LearnerKind, Metric,
    RunRecord,
};
use comps_core::env::{make_sequence, Family, SequenceMode, TaskSpec};
use comps_core::math;
use comps_core::rng::{derive, Purpose};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::formats;
use crate::plot;
use crate::records::{sig9, write_csv};

/// The task sequence a seed trains on. Stationary shuffles depend on the seed.
pub fn sequence_for(family: Family, mode: SequenceMode, n_tasks: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    Ok(make_sequence(family, mode, n_tasks, &mut derive(seed, Purpose::Sequence, 0))?)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub backward: Vec<(LearnerKind, u64, BackwardTransfer)>,
    pub summary: String,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_checkpoints(dir: &Path, run: &ContinualRun, header: &str) -> Result<()> {
    create_dir(dir)?;
    for c in &run.checkpoints {
        let i = c.task_index;
        formats::save_policy(&dir.join(format!("task{i}_start.pol")), &c.start)?;
        formats::save_policy(&dir.join(format!("task{i}_trained.pol")), &c.trained)?;
        formats::save_value(&dir.join(format!("task{i}_value.val")), &c.value)?;
    }
    formats::save_policy(&dir.join("final.pol"), &run.final_policy)?;
    formats::save_experience(&dir.join("experience.bin"), header, &run.store)
}

/// Trains every learner on every seed, in seed-major order, and writes
/// records, manifests, checkpoints, meta statistics, backward transfer,
/// plots and a summary under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutput> {
    cfg.validate()?;
    create_dir(out)?;
    write_text(&out.join("config.conf"), &cfg.serialize())?;
    let runs_dir = out.join("runs");
    create_dir(&runs_dir)?;

    let mut records = Vec::new();
    let mut backward = Vec::new();
    let mut meta_csv = String::from(
        "learner,seed,task_index,iteration,mean_bc_loss,mean_inner_grad_norm,skipped_tasks,nonfinite_skips\n",
    );
    let mut bt_csv = String::from("learner,seed,k,first,last,current,normalized\n");

    for &seed in &cfg.seeds {
        let sequence = sequence_for(cfg.family, cfg.mode, cfg.n_tasks, seed)?;
        let manifest = format!("manifest_seed{seed}.csv");
        let path = out.join(&manifest);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        formats::write_manifest(BufWriter::new(file), cfg.mode, &sequence)?;

        for &learner in &cfg.learners {
            let run = run_continual(learner, &sequence, &cfg.run, seed)?;
            let tag = format!("{learner}_seed{seed}");
            write_csv(&run.records, &runs_dir.join(format!("{tag}.csv")))?;
            save_checkpoints(
                &out.join("checkpoints").join(&tag),
                &run,
                &format!("manifest={manifest} seed={seed} learner={learner}"),
            )?;
            for (task, stats) in &run.meta_stats {
                for s in stats {
                    let _ = writeln!(
                        meta_csv,
                        "{learner},{seed},{task},{},{},{},{},{}",
                        s.iteration,
                        sig9(s.mean_bc_loss),
                        sig9(s.mean_inner_grad_norm),
                        s.skipped_tasks,
                        s.nonfinite_skips
                    );
                }
            }
            for k in 1..=sequence.len() {
                let bt = backward_transfer(
                    &run.final_policy,
                    &sequence,
                    &run.records,
                    k,
                    cfg.run.eval_trajectories,
                    seed,
                )?;
                let _ = writeln!(
                    bt_csv,
                    "{learner},{seed},{k},{},{},{},{}",
                    sig9(bt.first),
                    sig9(bt.last),
                    sig9(bt.current),
                    bt.normalized.map(sig9).unwrap_or_default()
                );
                backward.push((learner, seed, bt));
            }
            let solved = run.records.iter().filter(|r| r.solved_at.is_some()).count();
            eprintln!(
                "{learner} seed {seed}: {} episodes, {solved}/{} tasks solved",
                run.records.len(),
                sequence.len()
            );
            records.extend(run.records);
        }
    }

    write_csv(&records, &out.join("records.csv"))?;
    write_text(&out.join("meta_stats.csv"), &meta_csv)?;
    write_text(&out.join("backward_transfer.csv"), &bt_csv)?;
    let cap = cfg.run.ppo.episode_budget;
    for metric in [Metric::EpisodesToSuccess, Metric::MeanReturn] {
        plot::render_curves(&records, metric, cap, &out.join(format!("{}.svg", metric.name())))?;
    }
    let summary = summarize(&records, &cfg.learners, cap);
    write_text(&out.join("summary.txt"), &summary)?;
    Ok(ExperimentOutput {
        records,
        backward,
        summary,
    })
}

/// Per-learner episodes-to-success by task, with first-half, second-half and
/// overall means over seeds.
pub fn summarize(records: &[RunRecord], learners: &[LearnerKind], episode_cap: usize) -> String {
    let mut s = String::new();
    for &learner in learners {
        let rows: Vec<RunRecord> = records.iter().filter(|r| r.learner == learner).cloned().collect();
        if rows.is_empty() {
            continue;
        }
        let curve = plot::curves_by_learner(&rows, Metric::EpisodesToSuccess, episode_cap);
        let points = &curve[0].1;
        let means: Vec<f64> = points.iter().map(|p| p.mean).collect();
        let half = means.len() / 2;
        let _ = writeln!(s, "{learner}: episodes to success per task (mean ± se over seeds)");
        for p in points {
            let _ = writeln!(s, "  task {:>2}: {:>8.2} ± {:.2}", p.task_index + 1, p.mean, p.std_err);
        }
        let values = per_seed_task_values(&rows, Metric::EpisodesToSuccess, episode_cap);
        let all: Vec<f64> = values.values().copied().collect();
        let _ = writeln!(
            s,
            "  first half {:.2}, second half {:.2}, all {:.2}",
            math::mean(&means[..half]),
            math::mean(&means[half..]),
            math::mean(&all)
        );
    }
    s
}
