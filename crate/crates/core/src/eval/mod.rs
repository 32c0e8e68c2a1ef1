//! Navigation metrics, evaluation rollouts, trajectory logs and the
//! ablation runner.

mod gradcheck;
mod metrics;

pub use gradcheck::{check_composed, FixtureResult, MIN_DECISION_MARGIN};

pub use metrics::{
    ne, osr, rgspl, spl, sr, tl, EpisodeMetrics, MetricReport, Target, Trajectory,
};

use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cgip::Mode;
use crate::engine::{Ablation, Model};
use crate::envsim::World;
use crate::error::Result;
use crate::numerics::Graph;
use crate::rollout::{run_episode, Driver, StepRecord};
use crate::trainer::{train, Task, TaskEpisode, TrainConfig};

const EVAL_NOISE_SALT: u64 = 0x5eed_e7a1;

/// One evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRun {
    pub world_seed: u64,
    pub episode_seed: u64,
    pub trajectory: Trajectory,
    pub records: Vec<StepRecord>,
    pub metrics: EpisodeMetrics,
}

impl EpisodeRun {
    /// One JSON line per step, then a final line carrying the metrics.
    pub fn write_log<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        let last = json!({
            "world_seed": self.world_seed,
            "episode_seed": self.episode_seed,
            "nodes": self.trajectory.nodes,
            "stopped": self.trajectory.stopped,
            "timed_out": self.trajectory.timed_out,
            "metrics": self.metrics,
        });
        writeln!(w, "{last}")?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub runs: Vec<EpisodeRun>,
}

/// Greedy rollouts in infer mode. Observation noise is seeded from the
/// episode, so repeated evaluations are identical.
pub fn evaluate_episode(
    model: &Model,
    task: &Task,
    world: &World,
    ep: &TaskEpisode,
    cfg: &TrainConfig,
    flags: Ablation,
) -> Result<EpisodeRun> {
    let scene = task.scene(world, cfg);
    let mut noise = ChaCha8Rng::seed_from_u64(ep.spec.episode_seed ^ world.seed.rotate_left(17) ^ EVAL_NOISE_SALT);
    let mut g = Graph::new(&model.store);
    let ro = run_episode(&mut g, model, &scene, &ep.spec, flags, Mode::Infer, Driver::Greedy, false, &mut noise)?;
    let metrics = EpisodeMetrics::compute(&ro.trajectory, &ro.target);
    Ok(EpisodeRun {
        world_seed: world.seed,
        episode_seed: ep.spec.episode_seed,
        records: ro.steps.iter().map(|s| s.record()).collect(),
        trajectory: ro.trajectory,
        metrics,
    })
}

pub fn evaluate(
    model: &Model,
    task: &Task,
    worlds: &[World],
    episodes: &[TaskEpisode],
    cfg: &TrainConfig,
    flags: Ablation,
) -> Result<EvalOutcome> {
    let runs = episodes
        .iter()
        .map(|ep| evaluate_episode(model, task, &worlds[ep.world], ep, cfg, flags))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::from_episodes(runs.iter().map(|r| r.metrics).collect());
    Ok(EvalOutcome { report, runs })
}

/// Per-step CSV: episode, step, node, position and the clause distribution
/// (`;`-separated, empty when the picker is disabled).
pub fn plot_data(runs: &[EpisodeRun]) -> String {
    let mut out = String::from("episode,t,node,x,y,k_star,alpha\n");
    for run in runs {
        for (i, &node) in run.trajectory.nodes.iter().enumerate() {
            let [x, y] = run.trajectory.positions[i];
            let rec = run.records.get(i);
            let k = rec.and_then(|r| r.k_star).map(|k| k.to_string()).unwrap_or_default();
            let alpha = rec
                .and_then(|r| r.alpha.as_ref())
                .map(|a| a.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            let _ = writeln!(out, "{},{i},{node},{x:.6},{y:.6},{k},{alpha}", run.episode_seed);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub ablation: Ablation,
    pub report: MetricReport,
}

/// Evaluates already trained models on the unseen test split.
pub fn compare(
    task: &Task,
    cfg: &TrainConfig,
    models: &[(Ablation, &Model)],
) -> Result<Vec<AblationResult>> {
    models
        .iter()
        .map(|&(ablation, model)| {
            Ok(AblationResult {
                ablation,
                report: evaluate(model, task, &task.unseen, &task.test, cfg, ablation)?.report,
            })
        })
        .collect()
}

/// Trains one model per variant (full, cgip-only, fgip-only, neither) and
/// scores each on the same unseen episodes.
pub fn run_ablation(cfg: &TrainConfig, task: &Task) -> Result<Vec<AblationResult>> {
    let mut models = Vec::with_capacity(4);
    for ablation in Ablation::ALL {
        let variant = TrainConfig {
            ablation,
            ..cfg.clone()
        };
        models.push((ablation, train(&variant, task)?.model));
    }
    let refs: Vec<(Ablation, &Model)> = models.iter().map(|(a, m)| (*a, m)).collect();
    compare(task, cfg, &refs)
}

pub fn ablation_table(results: &[AblationResult]) -> String {
    let mut out = format!(
        "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "variant", "TL", "NE", "SR", "OSR", "SPL", "RGSPL"
    );
    for r in results {
        let m = &r.report.mean;
        let _ = writeln!(
            out,
            "{:<10} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
            r.ablation.name(),
            m.tl,
            m.ne,
            m.sr,
            m.osr,
            m.spl,
            m.rgspl
        );
    }
    out
}
