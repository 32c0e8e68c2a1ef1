//! Finite-difference check of the full step loss on random small models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cgip::{Mode, Observation};
use crate::encoder::{tokenize, Instruction, Vocabulary};
use crate::engine::{Ablation, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{finite_difference_check, Graph, Tensor, Var, DEFAULT_EPS};

const LANDMARKS: [&str; 4] = ["lamp", "sofa", "door", "sink"];
/// Fixtures whose boundary or clause decisions sit this close to a flip are
/// redrawn: finite differences straddling a flip measure the jump.
pub const MIN_DECISION_MARGIN: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct FixtureResult {
    pub seed: u64,
    pub tokens: usize,
    pub clauses: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

struct Fixture {
    model: Model,
    inst: Instruction,
    /// Observation, candidate count, target action.
    views: Vec<(Tensor, usize, usize)>,
}

fn fixture(seed: u64, dim: usize) -> Result<Fixture> {
    let vocab = Vocabulary::new(["walk", "to", "the", "then", "and", "stop"].into_iter().chain(LANDMARKS));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let legs = rng.random_range(1..=2);
    let clauses: Vec<String> = (0..legs)
        .map(|_| format!("walk to the {}", LANDMARKS[rng.random_range(0..LANDMARKS.len())]))
        .collect();
    let inst = tokenize(&format!("{} and stop", clauses.join(" then ")), &vocab)?;
    let mut cfg = ModelConfig::new(vocab.len(), dim);
    cfg.seed = seed;
    let mut model = Model::new(cfg, None)?;
    // everything but the boundary scorer is redrawn, which keeps m̂ ≤ 3
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| !p.name.starts_with("segmenter"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let t = model.store.value_mut(id);
        let (r, c) = (t.rows(), t.cols());
        *t = Tensor::uniform(r, c, 0.5, &mut rng);
    }
    let views = (0..2)
        .map(|_| {
            let n = rng.random_range(2..=6);
            let cands = rng.random_range(1..n);
            (Tensor::uniform(n, dim, 1.0, &mut rng), cands, rng.random_range(0..=cands))
        })
        .collect();
    Ok(Fixture { model, inst, views })
}

/// Summed cross-entropy of two consecutive steps.
fn loss(g: &mut Graph, f: &Fixture) -> Result<Var> {
    let mut agent = f.model.begin(g, &f.inst, Ablation::FULL)?;
    let mut total: Option<Var> = None;
    for (t, (v, cands, target)) in f.views.iter().enumerate() {
        let obs = Observation::new(v.clone(), t)?;
        let out = f.model.step(g, &mut agent, &obs, Mode::Train)?;
        let idx: Vec<usize> = (0..*cands).collect();
        let feats = v.select_rows(&idx);
        let s = f.model.act(g, out.pooled, Some(&feats), &vec![true; cands + 1])?;
        let lp = g.pick(s.log_probs, 0, *target)?;
        let nll = g.scale(lp, -1.0);
        total = Some(match total {
            Some(acc) => g.add(acc, nll)?,
            None => nll,
        });
    }
    total.ok_or_else(|| Error::Contract("fixture has no steps".into()))
}

fn margin(f: &Fixture) -> Result<(f64, usize)> {
    let mut g = Graph::relaxed(&f.model.store);
    let mut agent = f.model.begin(&mut g, &f.inst, Ablation::FULL)?;
    let mut m = agent
        .boundaries
        .b_hat
        .iter()
        .map(|b| (b - f.model.config.delta_b).abs())
        .fold(f64::INFINITY, f64::min);
    for (t, (v, _, _)) in f.views.iter().enumerate() {
        let out = f.model.step(&mut g, &mut agent, &Observation::new(v.clone(), t)?, Mode::Train)?;
        let mut phi = out.relevance.map(|r| r.phi).unwrap_or_default();
        phi.sort_by(|a, b| b.total_cmp(a));
        if phi.len() > 1 {
            m = m.min(phi[0] - phi[1]);
        }
    }
    Ok((m, agent.segs.count()))
}

/// Checks `fixtures` models of width `dim`, starting from `seed`.
pub fn check_composed(fixtures: usize, dim: usize, seed: u64) -> Result<Vec<FixtureResult>> {
    let mut out = Vec::with_capacity(fixtures);
    let mut s = seed;
    while out.len() < fixtures {
        let f = fixture(s, dim)?;
        let (m, clauses) = margin(&f)?;
        if m >= MIN_DECISION_MARGIN {
            let report = finite_difference_check(&f.model.store, DEFAULT_EPS, |g| loss(g, &f))?;
            out.push(FixtureResult {
                seed: s,
                tokens: f.inst.len(),
                clauses,
                max_rel_error: report.max_rel_error,
                worst_param: report.worst_param,
                checked: report.checked,
            });
        }
        s += 1;
    }
    Ok(out)
}
