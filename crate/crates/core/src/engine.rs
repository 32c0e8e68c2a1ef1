//! Full per-step instruction-state update plus the action and value heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgip::{Cgip, ClauseRelevance, Mode, Observation};
use crate::encoder::{Encoder, Instruction, InstructionState, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::fgip::{gate_mean, Fgip};
use crate::numerics::layers::Linear;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::segmenter::{
    clause_membership, refine, segment_rules, BoundaryScore, BoundaryScorer, SegmentRules,
    SegmentSet, DEFAULT_BOUNDARY_THRESHOLD,
};

pub const DEFAULT_MAX_STEPS: usize = 20;
const POLICY_INIT_SCALE: f64 = 0.05;

/// Which of the two instruction-processing stages run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub cgip: bool,
    pub fgip: bool,
}

impl Ablation {
    pub const FULL: Self = Self {
        cgip: true,
        fgip: true,
    };
    pub const CGIP_ONLY: Self = Self {
        cgip: true,
        fgip: false,
    };
    pub const FGIP_ONLY: Self = Self {
        cgip: false,
        fgip: true,
    };
    pub const NEITHER: Self = Self {
        cgip: false,
        fgip: false,
    };
    pub const ALL: [Self; 4] = [Self::FULL, Self::CGIP_ONLY, Self::FGIP_ONLY, Self::NEITHER];

    pub fn name(self) -> &'static str {
        match (self.cgip, self.fgip) {
            (true, true) => "full",
            (true, false) => "cgip-only",
            (false, true) => "fgip-only",
            (false, false) => "neither",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown ablation {name}")))
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub delta_b: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, dim: usize) -> Self {
        Self {
            vocab_size,
            dim,
            heads: 2,
            max_len: DEFAULT_MAX_LEN,
            delta_b: DEFAULT_BOUNDARY_THRESHOLD,
            seed: 0,
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("d".into(), self.dim.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("delta_b".into(), format!("{:?}", self.delta_b)),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint config lacks {k}")))
        };
        let bad = |k: &str| Error::Format(format!("bad value for {k}"));
        Ok(Self {
            vocab_size: get("vocab_size")?.parse().map_err(|_| bad("vocab_size"))?,
            dim: get("d")?.parse().map_err(|_| bad("d"))?,
            heads: get("heads")?.parse().map_err(|_| bad("heads"))?,
            max_len: get("max_len")?.parse().map_err(|_| bad("max_len"))?,
            delta_b: get("delta_b")?.parse().map_err(|_| bad("delta_b"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        })
    }
}

/// Every learned component and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub scorer: BoundaryScorer,
    pub cgip: Cgip,
    pub fgip: Fgip,
    pub rules: SegmentRules,
    /// Bilinear action map `W_a` (`d × d`).
    pub policy: ParamId,
    /// Learned STOP feature (`1 × d`).
    pub stop_feature: ParamId,
    pub value_head: Linear,
}

impl Model {
    /// `embedding_init`, when given, seeds the word embeddings.
    pub fn new(config: ModelConfig, embedding_init: Option<&Tensor>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let encoder = Encoder::new(
            &mut store,
            config.vocab_size,
            d,
            config.heads,
            config.max_len,
            embedding_init,
            &mut rng,
        )?;
        let scorer = BoundaryScorer::new(&mut store, d, &mut rng);
        let cgip = Cgip::new(&mut store, d, config.heads, &mut rng)?;
        let fgip = Fgip::new(&mut store, d, config.heads, &mut rng)?;
        let policy = store.add(
            "policy.bilinear",
            Tensor::uniform(d, d, POLICY_INIT_SCALE, &mut rng),
        );
        let stop_feature = store.add("policy.stop", Tensor::uniform(1, d, 1.0, &mut rng));
        let value_head = Linear::new(&mut store, "value", 2 * d, 1, true, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            scorer,
            cgip,
            fgip,
            rules: SegmentRules::default(),
            policy,
            stop_feature,
            value_head,
        })
    }

    /// Encodes and segments an instruction.
    pub fn begin(&self, g: &mut Graph, inst: &Instruction, flags: Ablation) -> Result<AgentState> {
        let enc = self.encoder.encode(g, inst)?;
        let s0 = enc.states;
        let (segs, boundaries, membership) = if flags.cgip {
            let coarse = segment_rules(inst, &self.rules);
            let scored = self.scorer.score(g, s0, &coarse)?;
            let (_, segs) = refine(&scored.score, self.config.delta_b);
            let membership = clause_membership(g, &segs, scored.probs)?;
            (segs, scored.score, membership)
        } else {
            let len = inst.len();
            let empty = BoundaryScore {
                b_hat: vec![],
                prior: vec![],
                coherence: vec![],
            };
            (SegmentSet::whole(len), empty, g.constant(Tensor::ones(len, 1)))
        };
        Ok(AgentState {
            s0,
            s_prev: s0,
            segs,
            boundaries,
            membership,
            step: 0,
            flags,
        })
    }

    /// `T_{k*}` from the picker, then the refiner's gated update of
    /// `S_{t-1}`.
    pub fn step(
        &self,
        g: &mut Graph,
        agent: &mut AgentState,
        obs: &Observation,
        mode: Mode,
    ) -> Result<StepOutput> {
        let v = g.constant(obs.features.clone());
        let (tokens, token_mask, relevance) = if agent.flags.cgip {
            let out = self
                .cgip
                .step(g, agent.s0, &agent.segs, agent.membership, v, mode)?;
            (out.tokens, Some(out.token_mask), Some(out.relevance))
        } else {
            ((0..agent.segs.len).collect(), None, None)
        };
        let (state, gate) = if agent.flags.fgip {
            let out = self.fgip.step(g, agent.s_prev, &tokens, token_mask, v)?;
            (out.state, Some(gate_mean(g.value(out.gate), &tokens)))
        } else {
            (agent.s_prev, None)
        };
        agent.s_prev = state;
        agent.step += 1;
        let pooled = pool(g, state, token_mask)?;
        Ok(StepOutput {
            state,
            pooled,
            tokens,
            relevance,
            gate_mean: gate,
            obs: v,
        })
    }

    /// Bilinear candidate scores `s̄·W_a·f_c` plus the STOP score, softmaxed
    /// over unmasked actions. `mask` has one entry per candidate row plus a
    /// trailing STOP entry; `None` means STOP is the only action.
    pub fn act(
        &self,
        g: &mut Graph,
        pooled: Var,
        candidates: Option<&Tensor>,
        mask: &[bool],
    ) -> Result<ActionScores> {
        let k = candidates.map_or(0, Tensor::rows);
        if mask.len() != k + 1 {
            return Err(Error::Contract(format!(
                "mask has {} entries for {k} candidates plus STOP",
                mask.len()
            )));
        }
        let valid: Vec<usize> = (0..=k).filter(|&i| mask[i]).collect();
        if valid.is_empty() {
            return Err(Error::Contract("every action is masked".into()));
        }
        let w = g.param(self.policy);
        let q = g.matmul(pooled, w)?;
        let f_stop = g.param(self.stop_feature);
        let feats = match candidates {
            Some(c) => {
                let c = g.constant(c.clone());
                g.concat_rows(&[c, f_stop])?
            }
            None => f_stop,
        };
        let ft = g.transpose(feats);
        let logits = g.matmul(q, ft)?;
        let logits = if valid.len() == k + 1 {
            logits
        } else {
            let col = g.transpose(logits);
            let kept = g.gather_rows(col, &valid)?;
            g.transpose(kept)
        };
        let log_probs = g.log_softmax_rows(logits);
        let mut probs = vec![0.0; k + 1];
        for (j, &a) in valid.iter().enumerate() {
            probs[a] = g.value(log_probs).get(0, j).exp();
        }
        Ok(ActionScores {
            logits,
            log_probs,
            probs,
            valid,
        })
    }

    /// Scalar state value from `[s̄; mean(V_t)]`.
    pub fn value(&self, g: &mut Graph, pooled: Var, obs: Var) -> Result<Var> {
        let [n, _] = g.shape(obs);
        let ones = g.constant(Tensor::full(1, n, 1.0 / n as f64));
        let summary = g.matmul(ones, obs)?;
        let x = g.concat_cols(&[pooled, summary])?;
        self.value_head.forward(g, x)
    }
}

/// Mean of the state rows weighted by `mask` (all rows when absent).
pub fn pool(g: &mut Graph, state: Var, mask: Option<Var>) -> Result<Var> {
    let [len, _] = g.shape(state);
    match mask {
        Some(m) => {
            let mt = g.transpose(m);
            let num = g.matmul(mt, state)?;
            let den = g.sum_all(m);
            g.div_scalar(num, den)
        }
        None => {
            let w = g.constant(Tensor::full(1, len, 1.0 / len as f64));
            g.matmul(w, state)
        }
    }
}

/// Per-episode agent state. `s0` is never reassigned after [`Model::begin`].
#[derive(Clone, Debug)]
pub struct AgentState {
    pub s0: Var,
    pub s_prev: Var,
    pub segs: SegmentSet,
    pub boundaries: BoundaryScore,
    pub membership: Var,
    pub step: usize,
    pub flags: Ablation,
}

impl AgentState {
    pub fn snapshot(&self, g: &Graph) -> InstructionState {
        InstructionState {
            values: g.value(self.s_prev).clone(),
            step: self.step,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: Var,
    pub pooled: Var,
    pub tokens: Vec<usize>,
    /// Absent when the picker is disabled.
    pub relevance: Option<ClauseRelevance>,
    /// Absent when the refiner is disabled.
    pub gate_mean: Option<f64>,
    pub obs: Var,
}

#[derive(Clone, Debug)]
pub struct ActionScores {
    /// `1 × |valid|` logits over unmasked actions.
    pub logits: Var,
    pub log_probs: Var,
    /// Probabilities over every action (masked ones are 0); STOP last.
    pub probs: Vec<f64>,
    /// Action indices behind each logit column.
    pub valid: Vec<usize>,
}

impl ActionScores {
    pub fn stop_index(&self) -> usize {
        self.probs.len() - 1
    }

    /// Column of `action` in `logits`.
    pub fn column(&self, action: usize) -> Option<usize> {
        self.valid.iter().position(|&a| a == action)
    }

    /// Highest-probability action; ties go to the lowest index.
    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}
