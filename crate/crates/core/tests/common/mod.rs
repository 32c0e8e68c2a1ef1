#![allow(clippy::single_range_in_vec_init)]
//! Fixtures shared by the oracle tests and the acceptance target.

#![allow(dead_code)]

pub mod contracts;

use std::ops::Range;

use instate::cgip::{clause_scores, normalize_within_clauses, route, Cgip, Mode, Observation};
use instate::encoder::{tokenize, Vocabulary};
use instate::engine::{Ablation, Model, ModelConfig};
use instate::envsim::{generate_world, make_episode, Node, World};
use instate::eval::{ne, osr, rgspl, spl, sr, tl, Target, Trajectory};
use instate::fgip::{gated_fuse, scatter, Fgip};
use instate::numerics::layers::{MultiHeadAttention, TransformerBlock};
use instate::numerics::{finite_difference_check, Graph, ParamStore, Tensor, DEFAULT_EPS};
use instate::rollout::{Rollout, StepTrace};
use instate::segmenter::{refine, segment_rules, BoundaryScore, SegmentRules, SegmentSet};
use instate::trainer::{il_loss, rl_loss};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reference as oracle;
use reference::M;

pub type Check = fn() -> Result<(), String>;

/// Pure formula tolerance.
pub const FORMULA_TOL: f64 = 1e-9;
/// Tolerance for cases composed of attention layers.
pub const COMPOSED_TOL: f64 = 1e-6;

pub fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, want {want} (tol {tol})"))
    }
}

pub fn close_all(what: &str, got: &[f64], want: &[f64], tol: f64) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{what}: length {} vs {}", got.len(), want.len()));
    }
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        close(&format!("{what}[{i}]"), *g, *w, tol)?;
    }
    Ok(())
}

fn ensure(cond: bool, what: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.to_string())
    }
}

fn err<E: std::fmt::Debug>(e: E) -> String {
    format!("{e:?}")
}

fn segs(clauses: Vec<Range<usize>>) -> SegmentSet {
    let len = clauses.last().map_or(0, |c| c.end);
    SegmentSet { clauses, len }
}

fn rows(t: &Tensor) -> M {
    oracle::of(t)
}

/// Every oracle, in a stable order.
pub fn derived_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("matmul by hand", matmul_by_hand),
        ("softmax of [1,2,3]", softmax_hand),
        ("sigmoid(1)", sigmoid_hand),
        ("d(w-3)^2 at 5", square_derivative),
        ("quadratic bowl gradcheck", quadratic_bowl),
        ("rules: and/then", rules_conjunctions),
        ("forced boundary logits", forced_boundary_logits),
        ("refine [0.9,0.1,0.7]", refine_hand),
        ("attention d=2 by hand", attention_by_hand),
        ("token relevance sigma(1)", relevance_hand),
        ("clause weights [0, ln 2]", clause_weights_hand),
        ("clause score 0.5", clause_score_hand),
        ("route [1,2,3]", route_hand),
        ("picker step L=3 N=2 m=2", picker_step),
        ("refiner attention 2x2", refiner_attention),
        ("refiner block 2 tokens", refiner_block),
        ("scatter sentinels", scatter_sentinels),
        ("convex combination 0,2,0.5", convex_hand),
        ("refiner step L=3 d=2 N=2", refiner_step),
        ("refiner bounded 100 steps", refiner_bounded),
        ("engine composed fixture", engine_composed),
        ("aligned candidate wins", aligned_candidate),
        ("world connectivity", world_connectivity),
        ("line graph oracle path", line_graph_path),
        ("imitation loss ln 2", il_uniform),
        ("imitation loss gradcheck", il_gradcheck),
        ("actor-critic one transition", a2c_single_step),
        ("success boundary inclusive", sr_boundary),
        ("SPL with TL = 2l*", spl_half),
        ("RGSPL 0.5", rgspl_half),
    ]
}

pub fn matmul_by_hand() -> Result<(), String> {
    let a = Tensor::from_rows(&[vec![1.0, 2.0]]);
    let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]);
    close("matmul", a.matmul(&b).map_err(err)?.item(), 11.0, FORMULA_TOL)
}

pub fn softmax_hand() -> Result<(), String> {
    let p = instate::numerics::softmax(&[1.0, 2.0, 3.0], 1.0).map_err(err)?;
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    close_all("softmax", &p, &[1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z], FORMULA_TOL)?;
    close_all("softmax digits", &p, &[0.09003, 0.24473, 0.66524], 1e-5)
}

pub fn sigmoid_hand() -> Result<(), String> {
    close("sigmoid", instate::numerics::sigmoid(1.0), 1.0 / (1.0 + (-1f64).exp()), FORMULA_TOL)?;
    close("sigmoid digits", instate::numerics::sigmoid(1.0), 0.73106, 1e-5)
}

pub fn square_derivative() -> Result<(), String> {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(5.0));
    let mut g = Graph::new(&store);
    let p = g.param(w);
    let d = g.add_scalar(p, -3.0);
    let sq = g.mul(d, d).map_err(err)?;
    let grads = g.backward(sq).map_err(err)?;
    close("dw", grads.param(w).ok_or("no gradient")?.item(), 4.0, FORMULA_TOL)
}

pub fn quadratic_bowl() -> Result<(), String> {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row_vector(&[0.3, -1.2, 2.0]));
    let centre = Tensor::row_vector(&[1.0, 0.5, -0.25]);
    let report = finite_difference_check(&store, DEFAULT_EPS, |g| {
        let p = g.param(w);
        let c = g.constant(centre.clone());
        let d = g.sub(p, c)?;
        let sq = g.mul(d, d)?;
        Ok(g.sum_all(sq))
    })
    .map_err(err)?;
    ensure(report.max_rel_error < 1e-6, &format!("bowl error {}", report.max_rel_error))
}

pub fn rules_conjunctions() -> Result<(), String> {
    let vocab = Vocabulary::new(["turn", "left", "and", "walk", "then", "stop"]);
    let inst = tokenize("turn left and walk then stop", &vocab).map_err(err)?;
    let b = segment_rules(&inst, &SegmentRules::default());
    // gaps are 1-based: "and" is token 3, "then" token 5
    ensure(b.positions == vec![2, 4], &format!("boundaries {:?}", b.positions))?;
    ensure(SegmentSet::split(&b).count() == 3, "three clauses")
}

pub fn forced_boundary_logits() -> Result<(), String> {
    let s = BoundaryScore::from_logits(&[2.0, -2.0, 1.0], vec![0.0; 3], vec![0.0; 3]);
    let want: Vec<f64> = [2.0f64, -2.0, 1.0].iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
    close_all("b_hat", &s.b_hat, &want, FORMULA_TOL)?;
    close_all("b_hat digits", &s.b_hat, &[0.8808, 0.1192, 0.7311], 1e-4)
}

pub fn refine_hand() -> Result<(), String> {
    let mut s = BoundaryScore::from_logits(&[0.0; 3], vec![0.0; 3], vec![0.0; 3]);
    s.b_hat = vec![0.9, 0.1, 0.7];
    let (b, segs) = refine(&s, 0.5);
    ensure(b.positions == vec![1, 3], &format!("survivors {:?}", b.positions))?;
    ensure(segs.clauses == vec![0..1, 1..3, 3..4], &format!("clauses {:?}", segs.clauses))
}

/// One head, `d = 2`, one query, two keys. With the projections below the
/// value rows are `[2, 1]` and `[2, 0]` and the scores differ by
/// `0.5/√2`, so the output is `[2, 1/(1 + e^{0.5/√2})]`.
pub fn attention_by_hand() -> Result<(), String> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = MultiHeadAttention::new(&mut store, "a", 2, 1, &mut rng).map_err(err)?;
    *store.value_mut(a.query.weight) = Tensor::identity(2);
    *store.value_mut(a.key.weight) = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
    *store.value_mut(a.value.weight) = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]);
    *store.value_mut(a.out.weight) = Tensor::identity(2);
    let mut g = Graph::new(&store);
    let q = g.constant(Tensor::row_vector(&[1.0, -1.0]));
    let kv = g.constant(Tensor::from_rows(&[vec![0.5, 1.0], vec![1.0, 0.0]]));
    let out = a.forward(&mut g, q, kv).map_err(err)?;
    let w1 = 1.0 / (1.0 + (0.5 / 2f64.sqrt()).exp());
    close_all("attention", g.value(out.output).data(), &[2.0, w1], COMPOSED_TOL)?;
    close_all("weights", g.value(out.weights[0]).data(), &[w1, 1.0 - w1], COMPOSED_TOL)
}

pub fn relevance_hand() -> Result<(), String> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = Cgip::new(&mut store, 2, 1, &mut rng).map_err(err)?;
    *store.value_mut(c.score.weight) = Tensor::col_vector(&[2.0, 1.0]);
    store.value_mut(c.score.bias.ok_or("bias")?).fill(0.0);
    let mut g = Graph::new(&store);
    let u = g.constant(Tensor::row_vector(&[1.0, -1.0]));
    let r = c.token_relevance(&mut g, u).map_err(err)?;
    close("r", g.value(r).item(), 1.0 / (1.0 + (-1f64).exp()), FORMULA_TOL)
}

pub fn clause_weights_hand() -> Result<(), String> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let raw = g.constant(Tensor::col_vector(&[0f64.exp(), 2f64.ln().exp()]));
    let w = normalize_within_clauses(&mut g, raw, &segs(vec![0..2])).map_err(err)?;
    close_all("w", g.value(w).data(), &[1.0 / 3.0, 2.0 / 3.0], FORMULA_TOL)
}

pub fn clause_score_hand() -> Result<(), String> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let r = g.constant(Tensor::col_vector(&[0.2, 0.8]));
    let w = g.constant(Tensor::col_vector(&[0.5, 0.5]));
    let phi = clause_scores(&mut g, r, w, &segs(vec![0..2])).map_err(err)?;
    close("phi", g.value(phi).item(), 0.5, FORMULA_TOL)
}

pub fn route_hand() -> Result<(), String> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let phi = g.constant(Tensor::row_vector(&[1.0, 2.0, 3.0]));
    let r = route(&mut g, phi, Mode::Train).map_err(err)?;
    close_all("alpha", g.value(r.alpha).data(), &oracle::softmax(&[1.0, 2.0, 3.0]), FORMULA_TOL)?;
    close_all("alpha digits", g.value(r.alpha).data(), &[0.09003, 0.24473, 0.66524], 1e-5)?;
    ensure(r.k_star == 2, "third clause selected")?;
    close_all("selection", g.value(r.selection).data(), &[0.0, 0.0, 1.0], 0.0)
}

pub fn picker_step() -> Result<(), String> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = Cgip::new(&mut store, 2, 1, &mut rng).map_err(err)?;
    oracle::hand_set(&mut store);
    let s0 = vec![vec![0.4, -0.3], vec![1.1, 0.2], vec![-0.6, 0.9]];
    let v = vec![vec![0.5, 1.0], vec![-1.0, 0.25]];
    let sg = segs(vec![0..1, 1..3]);
    let want = oracle::picker(&store, &c, &s0, &v, &sg.clauses);
    let mut g = Graph::new(&store);
    let s0v = g.constant(Tensor::from_rows(&s0));
    let vv = g.constant(Tensor::from_rows(&v));
    let members = g.constant(Tensor::ones(3, 1));
    let out = c.step(&mut g, s0v, &sg, members, vv, Mode::Train).map_err(err)?;
    let rel = &out.relevance;
    close_all("r", &rel.r, &want.r, COMPOSED_TOL)?;
    close_all("w", &rel.w, &want.w, COMPOSED_TOL)?;
    close_all("phi", &rel.phi, &want.phi, COMPOSED_TOL)?;
    close_all("alpha", &rel.alpha, &want.alpha, COMPOSED_TOL)?;
    ensure(rel.k_star == want.k_star, "k_star")?;
    ensure(out.tokens == sg.tokens(want.k_star), "selected tokens")?;
    let mask: Vec<f64> = (0..3).map(|i| f64::from(sg.clause_of(i) == want.k_star)).collect();
    close_all("token mask", g.value(out.token_mask).data(), &mask, 0.0)
}

fn refiner_fixture(dim: usize) -> Result<(ParamStore, Fgip), String> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = Fgip::new(&mut store, dim, 1, &mut rng).map_err(err)?;
    oracle::hand_set(&mut store);
    Ok((store, f))
}

pub fn refiner_attention() -> Result<(), String> {
    let (store, f) = refiner_fixture(2)?;
    let s = vec![vec![0.3, -0.8], vec![1.0, 0.5]];
    let v = vec![vec![-0.2, 0.7], vec![0.9, 0.1]];
    let want = oracle::attention(&store, &f.attention, &s, &v);
    let mut g = Graph::new(&store);
    let sv = g.constant(Tensor::from_rows(&s));
    let vv = g.constant(Tensor::from_rows(&v));
    let got = f.ground_tokens(&mut g, sv, &[0, 1], vv).map_err(err)?;
    let d = oracle::max_diff(&rows(g.value(got)), &want);
    ensure(d < COMPOSED_TOL, &format!("attention differs by {d}"))
}

pub fn refiner_block() -> Result<(), String> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = TransformerBlock::new(&mut store, "b", 2, 1, &mut rng).map_err(err)?;
    oracle::hand_set(&mut store);
    let x = vec![vec![0.6, -0.1], vec![-0.4, 1.2]];
    let want = oracle::block(&store, &b, &x);
    let mut g = Graph::new(&store);
    let xv = g.constant(Tensor::from_rows(&x));
    let got = b.forward(&mut g, xv).map_err(err)?.output;
    let d = oracle::max_diff(&rows(g.value(got)), &want);
    ensure(d < COMPOSED_TOL, &format!("block differs by {d}"))
}

pub fn scatter_sentinels() -> Result<(), String> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let s = g.constant(Tensor::from_rows(&[
        vec![10.0, 11.0],
        vec![20.0, 21.0],
        vec![30.0, 31.0],
        vec![40.0, 41.0],
    ]));
    let rh = g.constant(Tensor::from_rows(&[vec![-1.0, -1.5], vec![-3.0, -3.5]]));
    let r = scatter(&mut g, rh, &[0, 2], s).map_err(err)?;
    let want = [-1.0, -1.5, 20.0, 21.0, -3.0, -3.5, 40.0, 41.0];
    close_all("scatter", g.value(r).data(), &want, 0.0)
}

pub fn convex_hand() -> Result<(), String> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let s = g.constant(Tensor::scalar(0.0));
    let r = g.constant(Tensor::scalar(2.0));
    let half = g.constant(Tensor::scalar(0.5));
    let out = gated_fuse(&mut g, s, r, half).map_err(err)?;
    close("S_t", g.value(out).item(), 1.0, FORMULA_TOL)
}

pub fn refiner_step() -> Result<(), String> {
    let (store, f) = refiner_fixture(2)?;
    let s = vec![vec![0.2, -0.5], vec![0.9, 0.4], vec![-0.7, 0.3]];
    let v = vec![vec![0.1, 0.8], vec![-0.6, -0.2]];
    // the second and third tokens
    let tokens = [1, 2];
    let want = oracle::refiner(&store, &f, &s, &tokens, &v);
    let mut g = Graph::new(&store);
    let sv = g.constant(Tensor::from_rows(&s));
    let vv = g.constant(Tensor::from_rows(&v));
    let mask = g.constant(Tensor::col_vector(&[0.0, 1.0, 1.0]));
    let out = f.step(&mut g, sv, &tokens, Some(mask), vv).map_err(err)?;
    let got = rows(g.value(out.state));
    ensure(got[0] == s[0], "unselected row changed")?;
    let d = oracle::max_diff(&got, &want);
    ensure(d < COMPOSED_TOL, &format!("state differs by {d}"))
}

pub fn refiner_bounded() -> Result<(), String> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Fgip::new(&mut store, 8, 2, &mut rng).map_err(err)?;
    let s0 = Tensor::uniform(5, 8, 1.0, &mut rng);
    let v = Tensor::uniform(4, 8, 1.0, &mut rng);
    let norm0 = s0.sum_squares().sqrt();
    let mut g = Graph::new(&store);
    let vv = g.constant(v);
    let mut s = g.constant(s0);
    for t in 0..100 {
        s = f.step(&mut g, s, &[1, 2, 3], None, vv).map_err(err)?.state;
        let n = g.value(s).sum_squares().sqrt();
        ensure(n <= 10.0 * norm0, &format!("step {t}: norm {n} exceeds {}", 10.0 * norm0))?;
    }
    Ok(())
}

/// Small model with every weight hand-set; two steps of the full engine
/// against the composed picker and refiner oracles, then the action scores.
pub fn engine_composed() -> Result<(), String> {
    let vocab = Vocabulary::new(["walk", "to", "the", "lamp", "then", "stop"]);
    let mut cfg = ModelConfig::new(vocab.len(), 4);
    cfg.heads = 2;
    cfg.max_len = 16;
    let mut model = Model::new(cfg, None).map_err(err)?;
    oracle::hand_set(&mut model.store);
    let inst = tokenize("walk to the lamp then stop", &vocab).map_err(err)?;
    let obs = [
        Tensor::from_rows(&[vec![0.3, -0.2, 0.8, 0.1], vec![-0.5, 0.4, 0.0, 0.9], vec![0.2, 0.2, -0.7, 0.3]]),
        Tensor::from_rows(&[vec![0.6, 0.1, -0.3, -0.4], vec![0.0, -0.9, 0.5, 0.2]]),
    ];
    let mut g = Graph::new(&model.store);
    let mut agent = model.begin(&mut g, &inst, Ablation::FULL).map_err(err)?;
    let s0 = rows(g.value(agent.s0));
    let clauses = agent.segs.clauses.clone();
    let mut s_prev = s0.clone();
    for (t, o) in obs.iter().enumerate() {
        let v = rows(o);
        let pick = oracle::picker(&model.store, &model.cgip, &s0, &v, &clauses);
        let tokens: Vec<usize> = clauses[pick.k_star].clone().collect();
        let want = oracle::refiner(&model.store, &model.fgip, &s_prev, &tokens, &v);
        let out = model
            .step(&mut g, &mut agent, &Observation::new(o.clone(), t).map_err(err)?, Mode::Infer)
            .map_err(err)?;
        let rel = out.relevance.as_ref().ok_or("picker diagnostics")?;
        close_all(&format!("alpha at {t}"), &rel.alpha, &pick.alpha, COMPOSED_TOL)?;
        ensure(rel.k_star == pick.k_star, "k_star")?;
        let got = rows(g.value(out.state));
        let d = oracle::max_diff(&got, &want);
        ensure(d < COMPOSED_TOL, &format!("state at {t} differs by {d}"))?;

        let pooled: Vec<f64> = (0..4)
            .map(|j| tokens.iter().map(|&i| want[i][j]).sum::<f64>() / tokens.len() as f64)
            .collect();
        let wa = rows(model.store.value(model.policy));
        let q = oracle::mm(&vec![pooled], &wa);
        let mut feats = v.clone();
        feats.push(model.store.value(model.stop_feature).row(0).to_vec());
        let logits = oracle::mm(&q, &oracle::tr(&feats))[0].clone();
        let cands = o.clone();
        let scores = model
            .act(&mut g, out.pooled, Some(&cands), &vec![true; v.len() + 1])
            .map_err(err)?;
        close_all(&format!("probs at {t}"), &scores.probs, &oracle::softmax(&logits), COMPOSED_TOL)?;
        s_prev = want;
    }
    Ok(())
}

pub fn aligned_candidate() -> Result<(), String> {
    let mut cfg = ModelConfig::new(8, 4);
    cfg.heads = 2;
    let model = Model::new(cfg, None).map_err(err)?;
    let pooled_t = Tensor::row_vector(&[0.5, -0.2, 0.1, 0.9]);
    let dir = pooled_t.matmul(model.store.value(model.policy)).map_err(err)?;
    let n = dir.sum_squares().sqrt();
    let aligned: Vec<f64> = dir.data().iter().map(|v| v / n).collect();
    // unit vectors orthogonal to the aligned one, by Gram-Schmidt
    let mut others = Vec::new();
    for e in 0..2 {
        let mut o = [0.0; 4];
        o[e] = 1.0;
        let dot: f64 = o.iter().zip(&aligned).map(|(a, b)| a * b).sum();
        o.iter_mut().zip(&aligned).for_each(|(x, a)| *x -= dot * a);
        let m = o.iter().map(|x| x * x).sum::<f64>().sqrt();
        others.push(o.iter().map(|x| x / m).collect::<Vec<_>>());
    }
    let cands = Tensor::from_rows(&[others[0].clone(), aligned, others[1].clone()]);
    let mut g = Graph::new(&model.store);
    let pooled = g.constant(pooled_t);
    let s = model.act(&mut g, pooled, Some(&cands), &[true, true, true, false]).map_err(err)?;
    ensure(s.probs[1] > s.probs[0] && s.probs[1] > s.probs[2], &format!("probs {:?}", s.probs))
}

/// Breadth-first reachability, written independently of the world type.
fn reachable(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = stack.pop() {
        for &(a, b) in edges {
            let u = if a == v { b } else if b == v { a } else { continue };
            if !seen[u] {
                seen[u] = true;
                count += 1;
                stack.push(u);
            }
        }
    }
    count
}

pub fn world_connectivity() -> Result<(), String> {
    let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let mut degree = 0.0;
    for seed in 0..20 {
        let w = generate_world(seed, 20, &words).map_err(err)?;
        ensure(reachable(20, &w.edges) == 20, &format!("world {seed} is disconnected"))?;
        degree += 2.0 * w.edges.len() as f64 / 20.0;
    }
    let mean = degree / 20.0;
    ensure((2.5..=4.5).contains(&mean), &format!("mean degree {mean}"))
}

pub fn line_graph_path() -> Result<(), String> {
    let nodes = (0..3)
        .map(|id| Node {
            id,
            pos: [id as f64, 0.0],
            landmarks: vec![id],
        })
        .collect();
    let words: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let w = World::from_parts(0, nodes, vec![(0, 1), (1, 2)], words).map_err(err)?;
    let (path, length) = w.shortest_path(0, 2).ok_or("no path")?;
    ensure(path == vec![0, 1, 2], &format!("path {path:?}"))?;
    close("length", length, 2.0, FORMULA_TOL)
}

fn trace(log_prob: instate::numerics::Var, reward: f64) -> StepTrace {
    StepTrace {
        t: 0,
        node: 0,
        action: instate::envsim::Action::Stop,
        log_prob,
        entropy: None,
        value: None,
        reward,
        probs: vec![],
        choice: 0,
        k_star: None,
        alpha: None,
        gate_mean: None,
    }
}

fn rollout(steps: Vec<StepTrace>) -> Rollout {
    Rollout {
        steps,
        trajectory: Trajectory {
            nodes: vec![0],
            positions: vec![[0.0, 0.0]],
            length: 0.0,
            stopped: true,
            timed_out: false,
        },
        target: Target {
            goal: [0.0, 0.0],
            radius: 1.0,
            shortest: 0.0,
        },
    }
}

pub fn il_uniform() -> Result<(), String> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let steps = (0..3)
        .map(|_| {
            let logits = g.constant(Tensor::row_vector(&[0.7, 0.7]));
            let lp = g.log_softmax_rows(logits);
            trace(g.pick(lp, 0, 1).expect("column"), 0.0)
        })
        .collect();
    let loss = il_loss(&mut g, &rollout(steps)).map_err(err)?;
    close("loss", g.value(loss).item(), 2f64.ln(), FORMULA_TOL)
}

pub fn il_gradcheck() -> Result<(), String> {
    let mut store = ParamStore::new();
    let w = store.add("logits", Tensor::from_rows(&[vec![0.3, -0.4, 1.1], vec![0.9, 0.2, -0.6]]));
    let report = finite_difference_check(&store, DEFAULT_EPS, |g| {
        let p = g.param(w);
        let lp = g.log_softmax_rows(p);
        let steps = vec![trace(g.pick(lp, 0, 2)?, 0.0), trace(g.pick(lp, 1, 0)?, 0.0)];
        il_loss(g, &rollout(steps))
    })
    .map_err(err)?;
    ensure(report.max_rel_error < 1e-6, &format!("error {}", report.max_rel_error))
}

pub fn a2c_single_step() -> Result<(), String> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let logits = g.constant(Tensor::row_vector(&[0.2, -0.3]));
    let lp = g.log_softmax_rows(logits);
    let pick = g.pick(lp, 0, 0).map_err(err)?;
    let log_pi = g.value(pick).item();
    let mut t = trace(pick, 2.0);
    t.value = Some(g.constant(Tensor::scalar(0.0)));
    t.entropy = Some(g.constant(Tensor::scalar(0.4)));
    let ro = rollout(vec![t]);
    for gamma in [0.0, 0.95] {
        let terms = rl_loss(&mut g, &ro, gamma, 0.0).map_err(err)?;
        close("value term", g.value(terms.value).item(), 4.0, FORMULA_TOL)?;
        close("policy term", g.value(terms.policy).item(), -2.0 * log_pi, FORMULA_TOL)?;
        let total = g.value(terms.policy).item() + 0.5 * g.value(terms.value).item();
        close("beta = 0 total", g.value(terms.loss).item(), total, FORMULA_TOL)?;
    }
    Ok(())
}

pub fn sr_boundary() -> Result<(), String> {
    let t = Trajectory {
        nodes: vec![0, 1],
        positions: vec![[0.0, 0.0], [3.0, 4.0]],
        length: 5.0,
        stopped: true,
        timed_out: false,
    };
    let target = Target {
        goal: [3.0, 5.0],
        radius: 1.0,
        shortest: 5.0,
    };
    close("NE", ne(&t, &target), 1.0, FORMULA_TOL)?;
    close("SR", sr(&t, &target), 1.0, 0.0)
}

pub fn spl_half() -> Result<(), String> {
    let t = Trajectory {
        nodes: vec![0, 1, 2],
        positions: vec![[0.0, 0.0], [0.0, 3.0], [0.0, 0.0]],
        length: 6.0,
        stopped: true,
        timed_out: false,
    };
    let target = Target {
        goal: [0.0, 0.0],
        radius: 1.0,
        shortest: 3.0,
    };
    close("SPL", spl(&t, &target), 0.5, FORMULA_TOL)
}

pub fn rgspl_half() -> Result<(), String> {
    let t = Trajectory {
        nodes: vec![0, 1],
        positions: vec![[0.0, 0.0], [2.0, 0.0]],
        length: 2.0,
        stopped: true,
        timed_out: false,
    };
    let target = Target {
        goal: [4.0, 0.0],
        radius: 1.0,
        shortest: 2.0 * 2.0,
    };
    // NE = 2 = ℓ*/2 but TL = 2 ≠ ℓ*; use ℓ* = TL = 4 instead
    let t = Trajectory { length: 4.0, ..t };
    close("NE", ne(&t, &target), 2.0, FORMULA_TOL)?;
    close("RGSPL", rgspl(&t, &target), 0.5, FORMULA_TOL)
}

/// Hand-computed metric values on crafted trajectories over a 4-node world.
pub struct MetricFixture {
    pub name: &'static str,
    pub nodes: Vec<usize>,
    pub stopped: bool,
    pub goal: usize,
    /// TL, NE, SR, OSR, SPL, RGSPL
    pub want: [f64; 6],
}

/// Square of side 3 with corners 0 (0,0), 1 (3,0), 2 (3,4), 3 (0,4) and
/// edges along the sides plus the 5-long diagonal 0–2.
pub fn metric_world() -> World {
    let pos = [[0.0, 0.0], [3.0, 0.0], [3.0, 4.0], [0.0, 4.0]];
    let nodes = pos
        .iter()
        .enumerate()
        .map(|(id, &pos)| Node {
            id,
            pos,
            landmarks: vec![id],
        })
        .collect();
    let words = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    World::from_parts(7, nodes, vec![(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)], words).expect("fixture world")
}

pub fn metric_fixtures() -> Vec<MetricFixture> {
    vec![
        // diagonal straight to the goal
        MetricFixture {
            name: "shortest",
            nodes: vec![0, 2],
            stopped: true,
            goal: 2,
            want: [5.0, 0.0, 1.0, 1.0, 1.0, 1.0],
        },
        // around two sides: TL 7 against ℓ* 5
        MetricFixture {
            name: "detour",
            nodes: vec![0, 1, 2],
            stopped: true,
            goal: 2,
            want: [7.0, 0.0, 1.0, 1.0, 5.0 / 7.0, 5.0 / 7.0],
        },
        // passes the goal, stops one side beyond it
        MetricFixture {
            name: "overshoot",
            nodes: vec![0, 2, 3],
            stopped: true,
            goal: 2,
            want: [8.0, 3.0, 0.0, 1.0, 0.0, (1.0 - 3.0 / 5.0) * 5.0 / 8.0],
        },
        // times out next to the start
        MetricFixture {
            name: "timeout",
            nodes: vec![0, 1],
            stopped: false,
            goal: 2,
            want: [3.0, 4.0, 0.0, 0.0, 0.0, (1.0 - 4.0 / 5.0) * 5.0 / 5.0],
        },
        // start at the goal and stop
        MetricFixture {
            name: "no movement",
            nodes: vec![3],
            stopped: true,
            goal: 3,
            want: [0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
        },
    ]
}

/// Runs the fixtures; errors name the first mismatch.
pub fn check_metric_fixtures() -> Result<(), String> {
    let world = metric_world();
    for f in metric_fixtures() {
        let traj = Trajectory::from_nodes(&world, f.nodes.clone(), f.stopped, !f.stopped).map_err(err)?;
        let shortest = world.shortest_path(f.nodes[0], f.goal).ok_or("no path")?.1;
        let target = Target {
            goal: world.nodes[f.goal].pos,
            radius: 1.0,
            shortest,
        };
        let got = [
            tl(&traj),
            ne(&traj, &target),
            sr(&traj, &target),
            osr(&traj, &target),
            spl(&traj, &target),
            rgspl(&traj, &target),
        ];
        close_all(f.name, &got, &f.want, FORMULA_TOL)?;
    }
    Ok(())
}

/// Random episodes in random worlds with random walks: SPL ≤ SR ≤ OSR.
pub fn check_metric_sanity(episodes: usize) -> Result<(), String> {
    use rand::Rng;
    let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for e in 0..episodes {
        let world = generate_world(e as u64, rng.random_range(2..25), &words).map_err(err)?;
        let spec = make_episode(&world, e as u64, 4).map_err(err)?;
        let mut nodes = vec![spec.start];
        for _ in 0..rng.random_range(0..8) {
            let here = *nodes.last().expect("non-empty");
            let nb = world.neighbors(here);
            if nb.is_empty() {
                break;
            }
            nodes.push(nb[rng.random_range(0..nb.len())]);
        }
        let stopped = rng.random_bool(0.7);
        let traj = Trajectory::from_nodes(&world, nodes, stopped, !stopped).map_err(err)?;
        let target = Target::of(&world, &spec);
        let (s, o, p) = (sr(&traj, &target), osr(&traj, &target), spl(&traj, &target));
        ensure(p <= s && s <= o, &format!("episode {e}: SPL {p} SR {s} OSR {o}"))?;
        ensure((0.0..=1.0).contains(&rgspl(&traj, &target)), "RGSPL range")?;
    }
    Ok(())
}

/// Distance of the fixture's discrete decisions (boundary threshold and
/// clause argmax) from a flip.
fn decision_margin(model: &Model, inst: &instate::encoder::Instruction, views: &[(Tensor, usize, usize)]) -> Result<f64, String> {
    let mut g = Graph::relaxed(&model.store);
    let mut agent = model.begin(&mut g, inst, Ablation::FULL).map_err(err)?;
    let mut margin = agent
        .boundaries
        .b_hat
        .iter()
        .map(|b| (b - model.config.delta_b).abs())
        .fold(f64::INFINITY, f64::min);
    for (t, (v, _, _)) in views.iter().enumerate() {
        let obs = Observation::new(v.clone(), t).map_err(err)?;
        let out = model.step(&mut g, &mut agent, &obs, Mode::Train).map_err(err)?;
        let mut phi = out.relevance.ok_or("picker disabled")?.phi;
        phi.sort_by(|a, b| b.total_cmp(a));
        if phi.len() > 1 {
            margin = margin.min(phi[0] - phi[1]);
        }
    }
    Ok(margin)
}

/// Worst relative error of the two-step composed loss (picker, refiner,
/// action scores, cross-entropy) over `fixtures` random models at `d = 8`.
/// Fixtures within `1e-5` of a discrete flip are redrawn, since finite
/// differences are meaningless across one. Returns the worst error, the
/// number of entries checked and the number of redrawn fixtures.
pub fn composed_gradcheck(fixtures: usize) -> Result<(f64, usize, usize), String> {
    use rand::Rng;
    let landmarks = ["lamp", "sofa", "door", "sink"];
    let vocab = Vocabulary::new(["walk", "to", "the", "then", "and", "stop"].into_iter().chain(landmarks));
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut accepted = 0;
    let mut redrawn = 0;
    let mut seed = 0u64;
    while accepted < fixtures {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let legs = rng.random_range(1..=2);
        let clauses: Vec<String> = (0..legs)
            .map(|_| format!("walk to the {}", landmarks[rng.random_range(0..landmarks.len())]))
            .collect();
        let inst = tokenize(&format!("{} and stop", clauses.join(" then ")), &vocab).map_err(err)?;
        let mut cfg = ModelConfig::new(vocab.len(), 8);
        cfg.seed = seed;
        let mut model = Model::new(cfg, None).map_err(err)?;
        // the boundary scorer keeps its rule-following start
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
        let views: Vec<(Tensor, usize, usize)> = (0..2)
            .map(|_| {
                let n = rng.random_range(2..=6);
                let cands = rng.random_range(1..n);
                (Tensor::uniform(n, 8, 1.0, &mut rng), cands, rng.random_range(0..=cands))
            })
            .collect();
        let margin = decision_margin(&model, &inst, &views)?;
        if margin < 1e-5 {
            redrawn += 1;
            continue;
        }
        let report = finite_difference_check(&model.store, DEFAULT_EPS, |g| {
            let mut agent = model.begin(g, &inst, Ablation::FULL)?;
            if agent.segs.count() > 3 {
                return Err(instate::Error::Contract("more than three clauses".into()));
            }
            let mut total: Option<instate::numerics::Var> = None;
            for (t, (v, cands, target)) in views.iter().enumerate() {
                let obs = Observation::new(v.clone(), t)?;
                let out = model.step(g, &mut agent, &obs, Mode::Train)?;
                let idx: Vec<usize> = (0..*cands).collect();
                let feats = v.select_rows(&idx);
                let s = model.act(g, out.pooled, Some(&feats), &vec![true; cands + 1])?;
                let lp = g.pick(s.log_probs, 0, *target)?;
                let nll = g.scale(lp, -1.0);
                total = Some(match total {
                    Some(acc) => g.add(acc, nll)?,
                    None => nll,
                });
            }
            Ok(total.expect("two steps"))
        })
        .map_err(err)?;
        worst = worst.max(report.max_rel_error);
        checked += report.checked;
        accepted += 1;
    }
    Ok((worst, checked, redrawn))
}
