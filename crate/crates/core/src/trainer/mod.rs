//! Imitation plus advantage actor-critic training over synthetic episodes.

mod config;

pub use config::TrainConfig;

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgip::Mode;
use crate::encoder::Vocabulary;
use crate::engine::{Ablation, Model, ModelConfig};
use crate::envsim::{
    build_vocabulary, generate_world, landmark_words, make_episode, Appearance, EpisodeSpec, World,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::numerics::{Adam, Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::rollout::{run_episode, Driver, Rollout, Scene};

const UNSEEN_WORLD_OFFSET: u64 = 5_000;
const VAL_EPISODE_OFFSET: u64 = 1_000_000;
const TEST_EPISODE_OFFSET: u64 = 2_000_000;
const EMBED_SALT: u64 = 0x0e3b_ed00;
const BATCH_SALT: u64 = 0xba7c_4000;

/// Episode bound to the index of its world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEpisode {
    pub world: usize,
    pub spec: EpisodeSpec,
}

/// Worlds, vocabulary and episode splits derived from a configuration.
#[derive(Clone, Debug)]
pub struct Task {
    pub landmarks: Vec<String>,
    pub vocab: Vocabulary,
    pub appearance: Appearance,
    pub seen: Vec<World>,
    pub unseen: Vec<World>,
    pub train: Vec<TaskEpisode>,
    pub val: Vec<TaskEpisode>,
    pub test: Vec<TaskEpisode>,
}

fn episodes(worlds: &[World], count: usize, offset: u64, max_legs: usize) -> Result<Vec<TaskEpisode>> {
    if worlds.is_empty() {
        return Ok(vec![]);
    }
    (0..count)
        .map(|k| {
            let world = k % worlds.len();
            let spec = make_episode(&worlds[world], offset + k as u64, max_legs)?;
            Ok(TaskEpisode { world, spec })
        })
        .collect()
}

impl Task {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let landmarks = landmark_words(cfg.landmarks)?;
        let vocab = build_vocabulary(&landmarks);
        let appearance = Appearance::new(landmarks.len(), cfg.d, cfg.appearance_seed);
        let base = cfg.world_seed.wrapping_mul(10_000);
        let make = |offset: u64, n: usize| -> Result<Vec<World>> {
            (0..n)
                .map(|i| generate_world(base + offset + i as u64, cfg.world_nodes, &landmarks))
                .collect()
        };
        let seen = make(0, cfg.train_worlds)?;
        let unseen = make(UNSEEN_WORLD_OFFSET, cfg.unseen_worlds)?;
        let train = episodes(&seen, cfg.episodes, 0, cfg.max_legs)?;
        let val = episodes(&seen, cfg.val_episodes, VAL_EPISODE_OFFSET, cfg.max_legs)?;
        let test = episodes(&unseen, cfg.test_episodes, TEST_EPISODE_OFFSET, cfg.max_legs)?;
        Ok(Self {
            landmarks,
            vocab,
            appearance,
            seen,
            unseen,
            train,
            val,
            test,
        })
    }

    pub fn scene<'a>(&'a self, world: &'a World, cfg: &TrainConfig) -> Scene<'a> {
        Scene {
            world,
            appearance: &self.appearance,
            vocab: &self.vocab,
            noise_sigma: cfg.noise,
            max_steps: cfg.max_steps,
        }
    }

    pub fn model_config(&self, cfg: &TrainConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            dim: cfg.d,
            heads: cfg.heads,
            max_len: crate::encoder::DEFAULT_MAX_LEN,
            delta_b: cfg.delta_b,
            seed: cfg.seed,
        }
    }

    /// Fresh model whose word embeddings start from the shared appearance
    /// table.
    pub fn init_model(&self, cfg: &TrainConfig) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EMBED_SALT);
        let table = self.appearance.embedding_init(&self.vocab, &self.landmarks, &mut rng);
        Model::new(self.model_config(cfg), Some(&table))
    }
}

/// `L = L_RL + λ·L_IL` for one batch (batch means).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_il: f64,
    pub l_rl: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Mean negative log-likelihood of the executed (teacher) actions.
pub fn il_loss(g: &mut Graph, rollout: &Rollout) -> Result<Var> {
    if rollout.steps.is_empty() {
        return Err(Error::Contract("empty rollout".into()));
    }
    let lps: Vec<Var> = rollout.steps.iter().map(|s| s.log_prob).collect();
    let col = g.concat_rows(&lps)?;
    let m = g.mean_all(col);
    Ok(g.scale(m, -1.0))
}

/// Discounted returns `G_t = r_t + γ·G_{t+1}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct RlTerms {
    pub loss: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
}

/// `policy + 0.5·value − β·entropy` over a rollout produced with critic
/// terms.
pub fn rl_loss(g: &mut Graph, rollout: &Rollout, gamma: f64, beta: f64) -> Result<RlTerms> {
    if rollout.steps.is_empty() {
        return Err(Error::Contract("empty rollout".into()));
    }
    let rewards: Vec<f64> = rollout.steps.iter().map(|s| s.reward).collect();
    let returns = discounted_returns(&rewards, gamma);
    let mut values = Vec::with_capacity(returns.len());
    let mut entropies = Vec::with_capacity(returns.len());
    for s in &rollout.steps {
        match (s.value, s.entropy) {
            (Some(v), Some(h)) => {
                values.push(v);
                entropies.push(h);
            }
            _ => return Err(Error::Contract("rollout lacks critic terms".into())),
        }
    }
    let values = g.concat_rows(&values)?;
    let entropies = g.concat_rows(&entropies)?;
    let lps: Vec<Var> = rollout.steps.iter().map(|s| s.log_prob).collect();
    let lps = g.concat_rows(&lps)?;
    let ret = g.constant(Tensor::col_vector(&returns));
    let v_detached = g.detach(values);
    let adv = g.sub(ret, v_detached)?;
    let weighted = g.mul(adv, lps)?;
    let policy = g.mean_all(weighted);
    let policy = g.scale(policy, -1.0);
    let err = g.sub(ret, values)?;
    let sq = g.mul(err, err)?;
    let value = g.mean_all(sq);
    let entropy = g.mean_all(entropies);
    let half_v = g.scale(value, 0.5);
    let mut loss = g.add(policy, half_v)?;
    if beta != 0.0 {
        let bonus = g.scale(entropy, -beta);
        loss = g.add(loss, bonus)?;
    }
    Ok(RlTerms {
        loss,
        policy,
        value,
        entropy,
    })
}

/// Line of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub l_il: f64,
    pub l_rl: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub val_sr: Option<f64>,
    pub val_spl: Option<f64>,
}

/// Which parameters have received a nonzero raw gradient so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientAudit {
    pub touched: BTreeMap<String, bool>,
}

impl GradientAudit {
    pub fn observe(&mut self, store: &ParamStore) {
        for (_, p) in store.iter() {
            let hit = p.grad.data().iter().any(|&v| v != 0.0);
            let e = self.touched.entry(p.name.clone()).or_insert(false);
            *e |= hit;
        }
    }

    pub fn untouched(&self) -> Vec<&str> {
        self.touched
            .iter()
            .filter(|(_, &t)| !t)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation-SPL evaluation.
    pub model: Model,
    pub history: Vec<HistoryRecord>,
    pub best_iteration: usize,
    pub best_val: MetricReport,
    pub audit: GradientAudit,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        checkpoint_for(&self.model, cfg)
    }

    pub fn write_history<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.history {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }
}

pub fn checkpoint_for(model: &Model, cfg: &TrainConfig) -> Checkpoint {
    let mut pairs = cfg.to_pairs();
    pairs.push(("vocab_size".into(), model.config.vocab_size.to_string()));
    pairs.push(("max_len".into(), model.config.max_len.to_string()));
    Checkpoint::from_store(&model.store, pairs)
}

/// Rebuilds the configuration, task and model stored in a checkpoint.
pub fn load_checkpoint(ck: &Checkpoint) -> Result<(TrainConfig, Task, Model)> {
    let cfg = TrainConfig::from_pairs(&ck.config)?;
    let task = Task::new(&cfg)?;
    let mut model = Model::new(ModelConfig::from_pairs(&ck.config)?, None)?;
    ck.load_into(&mut model.store)?;
    Ok((cfg, task, model))
}

/// Loss of one training episode: teacher-forced imitation plus, when
/// `rl` is set, actor-critic on a sampled rollout.
pub fn episode_loss(
    g: &mut Graph,
    model: &Model,
    scene: &Scene,
    spec: &EpisodeSpec,
    cfg: &TrainConfig,
    rl: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossReport)> {
    let mut noise = ChaCha8Rng::seed_from_u64(rng.random());
    let tf = run_episode(g, model, scene, spec, cfg.ablation, Mode::Train, Driver::Teacher, false, &mut noise)?;
    let il = il_loss(g, &tf)?;
    let l_il = g.value(il).item();
    let weighted = g.scale(il, cfg.lambda);
    if !rl {
        let total = g.value(weighted).item();
        return Ok((
            weighted,
            LossReport {
                l_il,
                l_rl: 0.0,
                total,
                lambda: cfg.lambda,
            },
        ));
    }
    let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut noise = ChaCha8Rng::seed_from_u64(rng.random());
    let ro = run_episode(
        g,
        model,
        scene,
        spec,
        cfg.ablation,
        Mode::Train,
        Driver::Sample(&mut sample_rng),
        true,
        &mut noise,
    )?;
    let terms = rl_loss(g, &ro, cfg.gamma, cfg.beta)?;
    let total = g.add(terms.loss, weighted)?;
    Ok((
        total,
        LossReport {
            l_il,
            l_rl: g.value(terms.loss).item(),
            total: g.value(total).item(),
            lambda: cfg.lambda,
        },
    ))
}

pub fn validate(model: &Model, task: &Task, cfg: &TrainConfig, flags: Ablation) -> Result<MetricReport> {
    Ok(evaluate(model, task, &task.seen, &task.val, cfg, flags)?.report)
}

/// Runs the configured number of iterations. Every `eval_every` iterations
/// (and at the end) the model is scored on the validation split; the best
/// validation SPL is kept.
pub fn train(cfg: &TrainConfig, task: &Task) -> Result<TrainOutcome> {
    train_with(cfg, task, |_| {})
}

/// As [`train`], calling `progress` after every history record.
pub fn train_with<F: FnMut(&HistoryRecord)>(
    cfg: &TrainConfig,
    task: &Task,
    mut progress: F,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if task.train.is_empty() {
        return Err(Error::Config("no training episodes".into()));
    }
    let mut model = task.init_model(cfg)?;
    let mut adam = Adam::new(&model.store, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_SALT);
    let mut audit = GradientAudit::default();
    let mut history = Vec::with_capacity(cfg.iters);
    let mut best: Option<(usize, MetricReport, ParamStore)> = None;
    let warmup = cfg.warmup_iters();

    for it in 0..cfg.iters {
        let rl = cfg.rl && it >= warmup;
        model.store.zero_grad();
        let mut sums = (0.0, 0.0, 0.0);
        let mut seeds = Vec::with_capacity(cfg.batch);
        let scale = 1.0 / cfg.batch as f64;
        for _ in 0..cfg.batch {
            let ep = &task.train[rng.random_range(0..task.train.len())];
            seeds.push(ep.spec.episode_seed);
            let scene = task.scene(&task.seen[ep.world], cfg);
            let grads = {
                let mut g = Graph::new(&model.store);
                let (loss, report) = episode_loss(&mut g, &model, &scene, &ep.spec, cfg, rl, &mut rng)?;
                if !report.total.is_finite() {
                    return Err(Error::NonFinite {
                        iteration: it,
                        seeds,
                    });
                }
                sums.0 += report.l_il * scale;
                sums.1 += report.l_rl * scale;
                sums.2 += report.total * scale;
                g.backward(loss)?
            };
            grads.accumulate_into(&mut model.store, scale);
        }
        audit.observe(&model.store);
        let grad_norm = model.store.clip_grad_norm(cfg.clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                seeds,
            });
        }
        adam.step(&mut model.store);

        let mut record = HistoryRecord {
            iteration: it,
            l_il: sums.0,
            l_rl: sums.1,
            total: sums.2,
            grad_norm,
            val_sr: None,
            val_spl: None,
        };
        if (it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iters {
            let report = validate(&model, task, cfg, cfg.ablation)?;
            record.val_sr = Some(report.mean.sr);
            record.val_spl = Some(report.mean.spl);
            if best.as_ref().is_none_or(|(_, b, _)| report.mean.spl > b.mean.spl) {
                best = Some((it, report, model.store.clone()));
            }
        }
        progress(&record);
        history.push(record);
    }

    let (best_iteration, best_val, store) = match best {
        Some(b) => b,
        None => {
            let report = validate(&model, task, cfg, cfg.ablation)?;
            (0, report, model.store.clone())
        }
    };
    model.store.copy_values_from(&store)?;
    Ok(TrainOutcome {
        model,
        history,
        best_iteration,
        best_val,
        audit,
    })
}
