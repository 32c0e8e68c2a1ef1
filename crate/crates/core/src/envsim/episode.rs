use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::world::World;
use super::{Appearance, GEOMETRY_DIMS};
use crate::cgip::Observation;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_SUCCESS_RADIUS: f64 = 1.0;
pub const DEFAULT_MAX_LEGS: usize = 3;

/// One navigation task over a world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub world_seed: u64,
    pub episode_seed: u64,
    pub start: usize,
    pub goal: usize,
    pub success_radius: f64,
    pub initial_heading: f64,
    pub instruction: String,
    pub oracle_path: Vec<usize>,
    pub oracle_length: f64,
    /// Clause `k` describes the leg `oracle_path[k] → oracle_path[k + 1]`;
    /// the final clause is the stop clause.
    pub clause_legs: Vec<Option<usize>>,
    /// Ground-truth token gaps between clauses.
    pub clause_boundaries: Vec<usize>,
}

impl EpisodeSpec {
    pub fn legs(&self) -> usize {
        self.oracle_path.len().saturating_sub(1)
    }

    pub fn clause_count(&self) -> usize {
        self.clause_legs.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Samples start and goal (preferring oracle paths of `2..=max_legs`
/// edges, then any positive length) and writes the instruction.
pub fn make_episode(world: &World, seed: u64, max_legs: usize) -> Result<EpisodeSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ world.seed.rotate_left(32));
    let start = rng.random_range(0..world.len());
    let initial_heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    if world.len() == 1 {
        return Ok(EpisodeSpec {
            world_seed: world.seed,
            episode_seed: seed,
            start,
            goal: start,
            success_radius: DEFAULT_SUCCESS_RADIUS,
            initial_heading,
            instruction: "stop".into(),
            oracle_path: vec![start],
            oracle_length: 0.0,
            clause_legs: vec![None],
            clause_boundaries: vec![],
        });
    }
    let paths: Vec<(Vec<usize>, f64)> = (0..world.len())
        .filter(|&g| g != start)
        .map(|g| world.shortest_path(start, g).expect("connected world"))
        .collect();
    let edges = |p: &(Vec<usize>, f64)| p.0.len() - 1;
    let mut pool: Vec<&(Vec<usize>, f64)> = paths
        .iter()
        .filter(|p| (2..=max_legs.max(2)).contains(&edges(p)))
        .collect();
    if pool.is_empty() {
        pool = paths.iter().filter(|p| edges(p) <= max_legs.max(1)).collect();
    }
    if pool.is_empty() {
        pool = paths.iter().collect();
    }
    let (path, length) = pool[rng.random_range(0..pool.len())].clone();
    let goal = *path.last().expect("non-empty path");

    let mut words: Vec<String> = Vec::new();
    let mut boundaries = Vec::new();
    let mut clause_legs = Vec::new();
    for (leg, &target) in path.iter().skip(1).enumerate() {
        if leg > 0 {
            boundaries.push(words.len());
            words.push("then".into());
        }
        let lm = world.nodes[target].landmarks[0];
        words.extend(["walk", "to", "the"].map(String::from));
        words.push(world.landmark_words[lm].clone());
        clause_legs.push(Some(leg));
    }
    boundaries.push(words.len());
    words.extend(["and", "stop"].map(String::from));
    clause_legs.push(None);

    Ok(EpisodeSpec {
        world_seed: world.seed,
        episode_seed: seed,
        start,
        goal,
        success_radius: DEFAULT_SUCCESS_RADIUS,
        initial_heading,
        instruction: words.join(" "),
        oracle_path: path,
        oracle_length: length,
        clause_legs,
        clause_boundaries: boundaries,
    })
}

/// Synthesised view from one node.
#[derive(Clone, Debug, PartialEq)]
pub struct Percept {
    /// Candidate rows first (one per neighbour, in neighbour order), then
    /// one row per local landmark.
    pub observation: Observation,
    pub candidates: Vec<usize>,
    /// One entry per candidate plus a trailing STOP entry.
    pub mask: Vec<bool>,
}

impl Percept {
    /// Candidate rows, `None` at an isolated node.
    pub fn candidate_features(&self) -> Option<Tensor> {
        let idx: Vec<usize> = (0..self.candidates.len()).collect();
        (!idx.is_empty()).then(|| self.observation.features.select_rows(&idx))
    }

    pub fn num_actions(&self) -> usize {
        self.candidates.len() + 1
    }
}

/// Candidate feature: neighbour landmark appearance plus the egocentric
/// bearing `(cos, sin)` in the first two dimensions plus Gaussian noise.
/// When `dim` leaves room, column 2 is `+1` on candidate rows and `-1` on
/// the current node's landmark rows.
pub fn observe<R: Rng + ?Sized>(
    world: &World,
    appearance: &Appearance,
    node: usize,
    heading: f64,
    noise_sigma: f64,
    step: usize,
    rng: &mut R,
) -> Result<Percept> {
    let dim = appearance.dim();
    if dim < 2 {
        return Err(Error::Config("feature dimension must be at least 2".into()));
    }
    let neighbors = world.neighbors(node);
    let local = &world.nodes[node].landmarks;
    let mut features = Tensor::zeros(neighbors.len() + local.len(), dim);
    let noise = (noise_sigma > 0.0)
        .then(|| Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string())))
        .transpose()?;
    for (row, &u) in neighbors.iter().enumerate() {
        let lm = world.nodes[u].landmarks[0];
        features.row_mut(row).copy_from_slice(appearance.feature(lm));
        let rel = world.bearing(node, u) - heading;
        let r = features.row_mut(row);
        r[0] += rel.cos();
        r[1] += rel.sin();
        if dim > GEOMETRY_DIMS {
            r[2] += 1.0;
        }
    }
    for (k, &lm) in local.iter().enumerate() {
        let r = features.row_mut(neighbors.len() + k);
        r.copy_from_slice(appearance.feature(lm));
        if dim > GEOMETRY_DIMS {
            r[2] -= 1.0;
        }
    }
    if let Some(noise) = noise {
        for v in features.data_mut() {
            *v += noise.sample(rng);
        }
    }
    let mut mask = vec![true; neighbors.len()];
    mask.push(true);
    Ok(Percept {
        observation: Observation::new(features, step)?,
        candidates: neighbors.to_vec(),
        mask,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "node")]
pub enum Action {
    Move(usize),
    Stop,
}

/// Agent pose and visit history inside an episode.
#[derive(Clone, Debug)]
pub struct Walker<'w> {
    pub world: &'w World,
    pub node: usize,
    pub heading: f64,
    pub visited: Vec<usize>,
    pub length: f64,
    pub stopped: bool,
    pub timed_out: bool,
}

impl<'w> Walker<'w> {
    pub fn new(world: &'w World, spec: &EpisodeSpec) -> Self {
        Self {
            world,
            node: spec.start,
            heading: spec.initial_heading,
            visited: vec![spec.start],
            length: 0.0,
            stopped: false,
            timed_out: false,
        }
    }

    pub fn done(&self) -> bool {
        self.stopped
    }

    pub fn apply(&mut self, action: Action) -> Result<()> {
        if self.stopped {
            return Err(Error::Contract("episode already stopped".into()));
        }
        match action {
            Action::Stop => self.stopped = true,
            Action::Move(u) => {
                if !self.world.neighbors(self.node).contains(&u) {
                    return Err(Error::Contract(format!(
                        "node {u} is not adjacent to {}",
                        self.node
                    )));
                }
                self.length += self.world.distance(self.node, u);
                self.heading = self.world.bearing(self.node, u);
                self.node = u;
                self.visited.push(u);
            }
        }
        Ok(())
    }

    /// Ends the episode on the step limit with an implicit STOP.
    pub fn time_out(&mut self) {
        self.stopped = true;
        self.timed_out = true;
    }
}
