use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target mean degree of the geometric graph before the connectivity pass.
const TARGET_DEGREE: f64 = 3.0;
/// Minimum spacing between viewpoints; keeps only the goal inside a unit
/// success radius in most worlds.
pub const MIN_SPACING: f64 = 1.05;
const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub pos: [f64; 2],
    /// Indices into [`World::landmark_words`].
    pub landmarks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub nodes: Vec<Node>,
    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub landmark_words: Vec<String>,
    #[serde(skip)]
    adjacency: Vec<Vec<usize>>,
}

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    cost: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl World {
    /// Builds a world from explicit parts, validating the invariants.
    pub fn from_parts(
        seed: u64,
        nodes: Vec<Node>,
        edges: Vec<(usize, usize)>,
        landmark_words: Vec<String>,
    ) -> Result<Self> {
        let mut w = Self {
            seed,
            nodes,
            edges,
            landmark_words,
            adjacency: vec![],
        };
        w.rebuild()?;
        Ok(w)
    }

    /// Recomputes adjacency after deserialisation and checks invariants.
    pub fn rebuild(&mut self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::Input("world has no nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::Input(format!("node {i} has id {}", node.id)));
            }
            if node.landmarks.is_empty() {
                return Err(Error::Input(format!("node {i} has no landmark")));
            }
            if let Some(&l) = node.landmarks.iter().find(|&&l| l >= self.landmark_words.len()) {
                return Err(Error::Input(format!("node {i} has unknown landmark {l}")));
            }
        }
        for e in self.edges.iter_mut() {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        self.edges.sort_unstable();
        self.edges.dedup();
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            if b >= n || a == b {
                return Err(Error::Input(format!("bad edge ({a}, {b})")));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        adjacency.iter_mut().for_each(|v| v.sort_unstable());
        self.adjacency = adjacency;
        if !self.is_connected() {
            return Err(Error::Input("world graph is not connected".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sorted neighbour ids.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.nodes[a].pos, self.nodes[b].pos);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    }

    pub fn bearing(&self, from: usize, to: usize) -> f64 {
        let (p, q) = (self.nodes[from].pos, self.nodes[to].pos);
        (q[1] - p[1]).atan2(q[0] - p[0])
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &u in &self.adjacency[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    queue.push_back(u);
                }
            }
        }
        count == self.len()
    }

    /// Uniform-cost search; ties resolve towards lower node ids.
    pub fn shortest_path(&self, start: usize, goal: usize) -> Option<(Vec<usize>, f64)> {
        let n = self.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut heap = BinaryHeap::new();
        dist[start] = 0.0;
        heap.push(Frontier {
            cost: 0.0,
            node: start,
        });
        while let Some(Frontier { cost, node }) = heap.pop() {
            if node == goal {
                let mut path = vec![goal];
                let mut cur = goal;
                while cur != start {
                    cur = prev[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some((path, cost));
            }
            if cost > dist[node] {
                continue;
            }
            for &u in &self.adjacency[node] {
                let c = cost + self.distance(node, u);
                if c < dist[u] {
                    dist[u] = c;
                    prev[u] = node;
                    heap.push(Frontier { cost: c, node: u });
                }
            }
        }
        None
    }

    /// Geodesic distances from `source` to every node.
    pub fn distances_from(&self, source: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.len()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Frontier {
            cost: 0.0,
            node: source,
        });
        while let Some(Frontier { cost, node }) = heap.pop() {
            if cost > dist[node] {
                continue;
            }
            for &u in &self.adjacency[node] {
                let c = cost + self.distance(node, u);
                if c < dist[u] {
                    dist[u] = c;
                    heap.push(Frontier { cost: c, node: u });
                }
            }
        }
        dist
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut w: World = serde_json::from_str(text)?;
        w.rebuild()?;
        Ok(w)
    }
}

/// Random geometric world: nodes scattered in a square with a minimum
/// spacing, joined within a radius sized for a mean degree near three, then
/// bridged by shortest gaps until connected. Each node gets one landmark,
/// avoiding its neighbours' landmarks where the vocabulary allows.
pub fn generate_world(seed: u64, n_nodes: usize, landmark_words: &[String]) -> Result<World> {
    if n_nodes == 0 {
        return Err(Error::Input("n_nodes must be at least 1".into()));
    }
    if landmark_words.is_empty() {
        return Err(Error::Input("landmark vocabulary is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (n_nodes as f64).sqrt() * 1.6;
    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let mut p = [rng.random_range(0.0..side), rng.random_range(0.0..side)];
        for _ in 0..PLACEMENT_TRIES {
            let clear = positions
                .iter()
                .all(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= MIN_SPACING);
            if clear {
                break;
            }
            p = [rng.random_range(0.0..side), rng.random_range(0.0..side)];
        }
        positions.push(p);
    }
    let dist = |a: usize, b: usize| {
        let (p, q) = (positions[a], positions[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    };
    // the radius admitting TARGET_DEGREE·n/2 closest pairs
    let mut pairs: Vec<(f64, usize, usize)> = (0..n_nodes)
        .flat_map(|a| (a + 1..n_nodes).map(move |b| (a, b)))
        .map(|(a, b)| (dist(a, b), a, b))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let wanted = ((TARGET_DEGREE * n_nodes as f64 / 2.0).round() as usize).min(pairs.len());
    let mut edges: Vec<(usize, usize)> = pairs[..wanted].iter().map(|&(_, a, b)| (a, b)).collect();
    edges.sort_unstable();
    let mut component = vec![usize::MAX; n_nodes];
    loop {
        component.iter_mut().for_each(|c| *c = usize::MAX);
        let mut adjacency = vec![Vec::new(); n_nodes];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        let mut queue = VecDeque::from([0]);
        component[0] = 0;
        while let Some(v) = queue.pop_front() {
            for &u in &adjacency[v] {
                if component[u] == usize::MAX {
                    component[u] = 0;
                    queue.push_back(u);
                }
            }
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for a in (0..n_nodes).filter(|&a| component[a] == 0) {
            for b in (0..n_nodes).filter(|&b| component[b] != 0) {
                let d = dist(a, b);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a.min(b), a.max(b)));
                }
            }
        }
        match best {
            Some((_, a, b)) => edges.push((a, b)),
            None => break,
        }
    }
    edges.sort_unstable();
    let mut adjacency = vec![Vec::new(); n_nodes];
    for &(a, b) in &edges {
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    let mut assigned: Vec<Option<usize>> = vec![None; n_nodes];
    for v in 0..n_nodes {
        // distinct within two hops, so the candidates seen from any node differ
        let taken: Vec<usize> = adjacency[v]
            .iter()
            .flat_map(|&u| std::iter::once(u).chain(adjacency[u].iter().copied()))
            .filter(|&u| u != v)
            .filter_map(|u| assigned[u])
            .collect();
        let free: Vec<usize> = (0..landmark_words.len()).filter(|l| !taken.contains(l)).collect();
        let pick = if free.is_empty() {
            rng.random_range(0..landmark_words.len())
        } else {
            *free.choose(&mut rng).expect("non-empty")
        };
        assigned[v] = Some(pick);
    }
    let nodes = positions
        .into_iter()
        .enumerate()
        .map(|(id, pos)| Node {
            id,
            pos,
            landmarks: vec![assigned[id].expect("assigned")],
        })
        .collect();
    World::from_parts(seed, nodes, edges, landmark_words.to_vec())
}
