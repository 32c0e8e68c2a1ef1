//! Randomised contract sweeps; each returns how many cases it checked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use instate::cgip::{clause_scores, normalize_within_clauses, route, Mode, Observation};
use instate::encoder::{tokenize, Vocabulary};
use instate::engine::{Ablation, Model, ModelConfig};
use instate::fgip::{gated_fuse, Fgip};
use instate::numerics::{Graph, ParamStore, Tensor};
use instate::segmenter::{refine, BoundarySet, BoundaryScore, BoundarySource, SegmentSet};

fn fail<T>(case: usize, what: String) -> Result<T, String> {
    Err(format!("case {case}: {what}"))
}

/// Random strictly increasing ranges covering `0..len`.
pub fn random_segments(rng: &mut ChaCha8Rng, len: usize, max_clauses: usize) -> SegmentSet {
    let mut gaps: Vec<usize> = (1..len).filter(|_| rng.random_bool(0.3)).collect();
    gaps.truncate(max_clauses.saturating_sub(1));
    SegmentSet::split(&BoundarySet::new(gaps, BoundarySource::Refined, len).expect("valid gaps"))
}

fn lowest_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Routing on random clause scores, a quarter of them with tied maxima.
pub fn routing(cases: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa1fa);
    let store = ParamStore::new();
    for case in 0..cases {
        let m = rng.random_range(1..=6);
        let mut phi: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        if case % 4 == 0 && m > 1 {
            let (a, b) = (rng.random_range(0..m), rng.random_range(0..m));
            phi[a] = 1.0;
            phi[b] = 1.0;
        }
        let shift = rng.random_range(-50.0..50.0);
        let mut g = Graph::new(&store);
        let p = g.input(Tensor::row_vector(&phi));
        let train = route(&mut g, p, Mode::Train).map_err(|e| e.to_string())?;
        let infer = route(&mut g, p, Mode::Infer).map_err(|e| e.to_string())?;
        let shifted_phi: Vec<f64> = phi.iter().map(|v| v + shift).collect();
        let q = g.constant(Tensor::row_vector(&shifted_phi));
        let shifted = route(&mut g, q, Mode::Infer).map_err(|e| e.to_string())?;

        let alpha = g.value(train.alpha).data().to_vec();
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return fail(case, format!("alpha sums to {total}"));
        }
        if alpha.iter().any(|&a| a <= 0.0) {
            return fail(case, format!("non-positive alpha {alpha:?}"));
        }
        if train.k_star != lowest_argmax(&phi) {
            return fail(case, format!("k_star {} for {phi:?}", train.k_star));
        }
        if shifted.k_star != train.k_star || infer.k_star != train.k_star {
            return fail(case, "k_star moved under a shift or mode change".into());
        }
        if g.value(train.selection).data() != g.value(infer.selection).data() {
            return fail(case, "train and infer selections differ".into());
        }

        // straight-through: the gradient reaching phi is the soft one
        let c: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights = g.constant(Tensor::col_vector(&c));
        let hard = g.matmul(train.selection, weights).map_err(|e| e.to_string())?;
        let soft = g.matmul(train.alpha, weights).map_err(|e| e.to_string())?;
        let gh = g.backward(hard).map_err(|e| e.to_string())?;
        let gs = g.backward(soft).map_err(|e| e.to_string())?;
        let (a, b) = (gh.wrt(p).ok_or("no phi gradient")?, gs.wrt(p).ok_or("no phi gradient")?);
        if a.max_abs_diff(b) > 1e-12 {
            return fail(case, "straight-through gradient differs from the soft gradient".into());
        }
    }
    Ok(cases)
}

/// Clause weights and scores on random segmentations and relevances.
pub fn clause_scoring(cases: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc1a5);
    let store = ParamStore::new();
    for case in 0..cases {
        let len = rng.random_range(1..=12);
        let segs = random_segments(&mut rng, len, 4);
        let raw: Vec<f64> = (0..len).map(|_| rng.random_range(-30.0f64..30.0).exp()).collect();
        let r: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..=1.0)).collect();
        let mut g = Graph::new(&store);
        let rawv = g.constant(Tensor::col_vector(&raw));
        let w = normalize_within_clauses(&mut g, rawv, &segs).map_err(|e| e.to_string())?;
        let rv = g.constant(Tensor::col_vector(&r));
        let phi = clause_scores(&mut g, rv, w, &segs).map_err(|e| e.to_string())?;
        let wv = g.value(w).data().to_vec();
        for (k, c) in segs.clauses.iter().enumerate() {
            let s: f64 = wv[c.clone()].iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return fail(case, format!("clause {k} weights sum to {s}"));
            }
        }
        if let Some(bad) = g.value(phi).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return fail(case, format!("phi {bad} outside [0, 1]"));
        }
    }
    Ok(cases)
}

/// Split partitions the tokens and yields one more clause than boundaries.
pub fn partitions(cases: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e9);
    for case in 0..cases {
        let len = rng.random_range(1..=80);
        let mut scores = BoundaryScore::from_logits(&vec![0.0; len - 1], vec![0.0; len - 1], vec![0.0; len - 1]);
        scores.b_hat = (0..len - 1).map(|_| rng.random_range(0.0..1.0)).collect();
        let delta = rng.random_range(0.0..1.0);
        let (b, segs) = refine(&scores, delta);
        let covered: Vec<usize> = segs.clauses.iter().flat_map(|c| c.clone()).collect();
        if covered != (0..len).collect::<Vec<_>>() {
            return fail(case, format!("clauses {:?} do not partition 0..{len}", segs.clauses));
        }
        if segs.clauses.iter().any(|c| c.is_empty()) {
            return fail(case, "empty clause".into());
        }
        if segs.count() != b.positions.len() + 1 {
            return fail(case, format!("{} clauses for {} boundaries", segs.count(), b.positions.len()));
        }
    }
    Ok(cases)
}

/// Counts of cases for the four state-update contracts.
#[derive(Clone, Copy, Debug, Default)]
pub struct StateUpdateCounts {
    pub off_segment: usize,
    pub gate_bounds: usize,
    pub convex: usize,
    pub zero_gate: usize,
}

/// Random refiner steps with a random contiguous active clause.
pub fn state_updates(cases: usize) -> Result<StateUpdateCounts, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x57a7e);
    let mut counts = StateUpdateCounts::default();
    for case in 0..cases {
        let dim = [2, 4, 8][rng.random_range(0..3)];
        let heads = if dim >= 4 { rng.random_range(1..=2) } else { 1 };
        let len = rng.random_range(1..=12);
        let n = rng.random_range(1..=6);
        let segs = random_segments(&mut rng, len, 3);
        let k = rng.random_range(0..segs.count());
        let tokens = segs.tokens(k);
        let mut store = ParamStore::new();
        let f = Fgip::new(&mut store, dim, heads, &mut rng).map_err(|e| e.to_string())?;
        let scale = rng.random_range(0.1..3.0);
        let s_prev = Tensor::uniform(len, dim, scale, &mut rng);
        let obs = Tensor::uniform(n, dim, 1.0, &mut rng);
        let mask: Vec<f64> = (0..len).map(|i| f64::from(tokens.contains(&i))).collect();

        let mut g = Graph::new(&store);
        let sv = g.constant(s_prev.clone());
        let vv = g.constant(obs);
        let mv = g.constant(Tensor::col_vector(&mask));
        let out = f.step(&mut g, sv, &tokens, Some(mv), vv).map_err(|e| e.to_string())?;
        let (s_t, r, gate) = (g.value(out.state).clone(), g.value(out.r).clone(), g.value(out.gate).clone());

        for i in (0..len).filter(|i| !tokens.contains(i)) {
            if s_t.row(i) != s_prev.row(i) {
                return fail(case, format!("row {i} outside the clause changed"));
            }
        }
        counts.off_segment += 1;

        if let Some(bad) = gate.data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return fail(case, format!("gate {bad} outside (0, 1)"));
        }
        counts.gate_bounds += 1;

        for ((&s, &p), &q) in s_t.data().iter().zip(s_prev.data()).zip(r.data()) {
            if s < p.min(q) || s > p.max(q) {
                return fail(case, format!("{s} outside [{}, {}]", p.min(q), p.max(q)));
            }
        }
        counts.convex += 1;

        let zero = g.constant(Tensor::zeros(len, dim));
        let rv = g.constant(r.clone());
        let fused = gated_fuse(&mut g, sv, rv, zero).map_err(|e| e.to_string())?;
        if g.value(fused).data() != s_prev.data() {
            return fail(case, "zero gate changed the state".into());
        }
        counts.zero_gate += 1;
    }
    Ok(counts)
}

/// With the full engine, perturbing the running state leaves the picker's
/// distribution unchanged while the refiner's output moves.
pub fn picker_ignores_previous_state(cases: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0ce);
    let vocab = Vocabulary::new(["walk", "to", "the", "lamp", "sofa", "then", "and", "stop"]);
    let inst = tokenize("walk to the lamp then walk to the sofa and stop", &vocab).map_err(|e| e.to_string())?;
    for case in 0..cases {
        let mut cfg = ModelConfig::new(vocab.len(), 8);
        cfg.seed = case as u64;
        let model = Model::new(cfg, None).map_err(|e| e.to_string())?;
        let obs = Observation::new(Tensor::uniform(rng.random_range(1..=5), 8, 1.0, &mut rng), 0)
            .map_err(|e| e.to_string())?;
        let mut g = Graph::new(&model.store);
        let mut plain = model.begin(&mut g, &inst, Ablation::FULL).map_err(|e| e.to_string())?;
        let mut drifted = plain.clone();
        drifted.s_prev = g.constant(Tensor::uniform(inst.len(), 8, 5.0, &mut rng));
        let a = model.step(&mut g, &mut plain, &obs, Mode::Infer).map_err(|e| e.to_string())?;
        let b = model.step(&mut g, &mut drifted, &obs, Mode::Infer).map_err(|e| e.to_string())?;
        let (ra, rb) = (a.relevance.ok_or("no picker output")?, b.relevance.ok_or("no picker output")?);
        if ra.alpha != rb.alpha || ra.k_star != rb.k_star || a.tokens != b.tokens {
            return fail(case, "picker output depends on the running state".into());
        }
        if g.value(a.state).data() == g.value(b.state).data() {
            return fail(case, "refiner ignored the running state".into());
        }
    }
    Ok(cases)
}
