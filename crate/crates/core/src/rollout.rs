//! Runs one episode of the agent in a synthetic world, optionally keeping the
//! graph handles needed for imitation or actor-critic losses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgip::Mode;
use crate::encoder::{tokenize, Vocabulary};
use crate::engine::{Ablation, Model};
use crate::envsim::{observe, Action, Appearance, EpisodeSpec, Walker, World};
use crate::error::{Error, Result};
use crate::eval::{Target, Trajectory};
use crate::numerics::{Graph, Var};

pub const SUCCESS_REWARD: f64 = 2.0;
pub const FAILURE_REWARD: f64 = -2.0;

/// How actions are chosen.
pub enum Driver<'r> {
    /// Executes the oracle action at every step.
    Teacher,
    /// Highest-probability action.
    Greedy,
    Sample(&'r mut ChaCha8Rng),
}

/// What the agent needs to know about its surroundings.
#[derive(Clone, Copy, Debug)]
pub struct Scene<'a> {
    pub world: &'a World,
    pub appearance: &'a Appearance,
    pub vocab: &'a Vocabulary,
    pub noise_sigma: f64,
    pub max_steps: usize,
}

/// One decision.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub t: usize,
    pub node: usize,
    pub action: Action,
    /// Log-probability of the executed action (scalar node).
    pub log_prob: Var,
    /// Policy entropy, present when the rollout keeps critic terms.
    pub entropy: Option<Var>,
    pub value: Option<Var>,
    pub reward: f64,
    /// Action distribution (STOP last) and the executed action's index.
    pub probs: Vec<f64>,
    pub choice: usize,
    pub k_star: Option<usize>,
    pub alpha: Option<Vec<f64>>,
    pub gate_mean: Option<f64>,
}

impl StepTrace {
    pub fn record(&self) -> StepRecord {
        StepRecord {
            t: self.t,
            node: self.node,
            action: self.action,
            k_star: self.k_star,
            alpha: self.alpha.clone(),
            gate_mean: self.gate_mean,
        }
    }
}

/// Serialisable per-step log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub node: usize,
    pub action: Action,
    pub k_star: Option<usize>,
    pub alpha: Option<Vec<f64>>,
    pub gate_mean: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub steps: Vec<StepTrace>,
    pub trajectory: Trajectory,
    pub target: Target,
}

#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    g: &mut Graph,
    model: &Model,
    scene: &Scene,
    spec: &EpisodeSpec,
    flags: Ablation,
    mode: Mode,
    mut driver: Driver,
    critic: bool,
    noise: &mut ChaCha8Rng,
) -> Result<Rollout> {
    let world = scene.world;
    if spec.world_seed != world.seed {
        return Err(Error::Input(format!(
            "episode for world {} run in world {}",
            spec.world_seed, world.seed
        )));
    }
    let inst = tokenize(&spec.instruction, scene.vocab)?;
    let mut agent = model.begin(g, &inst, flags)?;
    let to_goal = world.distances_from(spec.goal);
    let target = Target::of(world, spec);
    let mut walker = Walker::new(world, spec);
    let mut steps = Vec::new();
    for t in 0..scene.max_steps.max(1) {
        let here = walker.node;
        let percept = observe(world, scene.appearance, here, walker.heading, scene.noise_sigma, t, noise)?;
        let out = model.step(g, &mut agent, &percept.observation, mode)?;
        let cands = percept.candidate_features();
        let scores = model.act(g, out.pooled, cands.as_ref(), &percept.mask)?;
        let stop = scores.stop_index();
        let index = match &mut driver {
            Driver::Teacher => match spec.oracle_path.get(t + 1) {
                Some(next) => percept
                    .candidates
                    .iter()
                    .position(|c| c == next)
                    .ok_or_else(|| Error::Contract("teacher left the oracle path".into()))?,
                None => stop,
            },
            Driver::Greedy => scores.greedy(),
            Driver::Sample(rng) => sample(&scores.probs, rng),
        };
        let column = scores
            .column(index)
            .ok_or_else(|| Error::Contract(format!("action {index} is masked")))?;
        let log_prob = g.pick(scores.log_probs, 0, column)?;
        let (entropy, value) = if critic {
            let p = g.exp(scores.log_probs);
            let plogp = g.mul(p, scores.log_probs)?;
            let s = g.sum_all(plogp);
            let h = g.scale(s, -1.0);
            (Some(h), Some(model.value(g, out.pooled, out.obs)?))
        } else {
            (None, None)
        };
        let action = if index == stop {
            Action::Stop
        } else {
            Action::Move(percept.candidates[index])
        };
        walker.apply(action)?;
        let mut reward = match action {
            Action::Move(next) => to_goal[here] - to_goal[next],
            Action::Stop => 0.0,
        };
        if matches!(action, Action::Move(_)) && t + 1 == scene.max_steps.max(1) {
            walker.time_out();
        }
        if walker.stopped {
            let dx = world.nodes[walker.node].pos[0] - target.goal[0];
            let dy = world.nodes[walker.node].pos[1] - target.goal[1];
            reward += if (dx * dx + dy * dy).sqrt() <= target.radius {
                SUCCESS_REWARD
            } else {
                FAILURE_REWARD
            };
        }
        steps.push(StepTrace {
            t,
            node: here,
            action,
            log_prob,
            entropy,
            value,
            reward,
            choice: index,
            probs: scores.probs,
            k_star: out.relevance.as_ref().map(|r| r.k_star),
            alpha: out.relevance.map(|r| r.alpha),
            gate_mean: out.gate_mean,
        });
        if walker.stopped {
            break;
        }
    }
    let trajectory = Trajectory::from_nodes(world, walker.visited.clone(), walker.stopped, walker.timed_out)?;
    Ok(Rollout {
        steps,
        trajectory,
        target,
    })
}

fn sample(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}
