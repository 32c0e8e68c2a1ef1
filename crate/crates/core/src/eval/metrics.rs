use serde::{Deserialize, Serialize};

use crate::envsim::{EpisodeSpec, World};
use crate::error::{Error, Result};

/// Agent path through a world. Positions are node positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub nodes: Vec<usize>,
    pub positions: Vec<[f64; 2]>,
    pub length: f64,
    pub stopped: bool,
    pub timed_out: bool,
}

impl Trajectory {
    /// Checks adjacency and sums edge lengths.
    pub fn from_nodes(world: &World, nodes: Vec<usize>, stopped: bool, timed_out: bool) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Contract("trajectory has no nodes".into()));
        }
        let mut length = 0.0;
        for w in nodes.windows(2) {
            if !world.neighbors(w[0]).contains(&w[1]) {
                return Err(Error::Contract(format!("nodes {} and {} are not adjacent", w[0], w[1])));
            }
            length += world.distance(w[0], w[1]);
        }
        let positions = nodes.iter().map(|&n| world.nodes[n].pos).collect();
        Ok(Self {
            nodes,
            positions,
            length,
            stopped,
            timed_out,
        })
    }

    pub fn final_position(&self) -> [f64; 2] {
        *self.positions.last().expect("non-empty trajectory")
    }
}

/// What a trajectory is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub goal: [f64; 2],
    pub radius: f64,
    /// Oracle shortest-path length `ℓ*`.
    pub shortest: f64,
}

impl Target {
    pub fn of(world: &World, spec: &EpisodeSpec) -> Self {
        Self {
            goal: world.nodes[spec.goal].pos,
            radius: spec.success_radius,
            shortest: spec.oracle_length,
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn tl(traj: &Trajectory) -> f64 {
    traj.length
}

pub fn ne(traj: &Trajectory, target: &Target) -> f64 {
    dist(traj.final_position(), target.goal)
}

/// Stopped within the (inclusive) success radius.
pub fn sr(traj: &Trajectory, target: &Target) -> f64 {
    if traj.stopped && ne(traj, target) <= target.radius {
        1.0
    } else {
        0.0
    }
}

pub fn osr(traj: &Trajectory, target: &Target) -> f64 {
    if traj.positions.iter().any(|&p| dist(p, target.goal) <= target.radius) {
        1.0
    } else {
        0.0
    }
}

pub fn spl(traj: &Trajectory, target: &Target) -> f64 {
    let s = sr(traj, target);
    if target.shortest == 0.0 {
        return s;
    }
    s * target.shortest / target.shortest.max(traj.length)
}

/// Goal-progress ratio times path efficiency.
pub fn rgspl(traj: &Trajectory, target: &Target) -> f64 {
    if target.shortest == 0.0 {
        return sr(traj, target);
    }
    let progress = (1.0 - ne(traj, target) / target.shortest).max(0.0);
    progress * target.shortest / target.shortest.max(traj.length)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub rgspl: f64,
}

impl EpisodeMetrics {
    pub fn compute(traj: &Trajectory, target: &Target) -> Self {
        Self {
            tl: tl(traj),
            ne: ne(traj, target),
            sr: sr(traj, target),
            osr: osr(traj, target),
            spl: spl(traj, target),
            rgspl: rgspl(traj, target),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub episodes: Vec<EpisodeMetrics>,
    pub mean: EpisodeMetrics,
}

impl MetricReport {
    pub fn from_episodes(episodes: Vec<EpisodeMetrics>) -> Self {
        let n = episodes.len().max(1) as f64;
        let mut mean = EpisodeMetrics::default();
        for e in &episodes {
            mean.tl += e.tl / n;
            mean.ne += e.ne / n;
            mean.sr += e.sr / n;
            mean.osr += e.osr / n;
            mean.spl += e.spl / n;
            mean.rgspl += e.rgspl / n;
        }
        Self { episodes, mean }
    }
}
