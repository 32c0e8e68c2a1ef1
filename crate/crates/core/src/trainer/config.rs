use std::fmt::Display;
use std::str::FromStr;

use crate::engine::Ablation;
use crate::error::{Error, Result};

/// Flat key-value training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    pub heads: usize,
    pub delta_b: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub iters: usize,
    /// Model initialisation and sampling seed.
    pub seed: u64,
    /// Seed of the world layouts; independent of `seed`.
    pub world_seed: u64,
    pub world_nodes: usize,
    pub train_worlds: usize,
    pub unseen_worlds: usize,
    pub landmarks: usize,
    pub appearance_seed: u64,
    pub episodes: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    pub eval_every: usize,
    /// Fraction of iterations trained with imitation only.
    pub warmup: f64,
    /// Enables the actor-critic term after warmup.
    pub rl: bool,
    pub noise: f64,
    pub max_steps: usize,
    pub max_legs: usize,
    pub clip: f64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 2,
            delta_b: 0.5,
            lambda: 0.2,
            gamma: 0.95,
            beta: 0.01,
            lr: 3e-4,
            batch: 8,
            iters: 3000,
            seed: 0,
            world_seed: 1,
            world_nodes: 20,
            train_worlds: 10,
            unseen_worlds: 10,
            landmarks: 40,
            appearance_seed: crate::envsim::DEFAULT_APPEARANCE_SEED,
            episodes: 500,
            val_episodes: 100,
            test_episodes: 100,
            eval_every: 250,
            warmup: 0.25,
            rl: true,
            noise: crate::envsim::DEFAULT_NOISE_SIGMA,
            max_steps: crate::engine::DEFAULT_MAX_STEPS,
            max_legs: crate::envsim::DEFAULT_MAX_LEGS,
            clip: 5.0,
            ablation: Ablation::FULL,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn fmt<T: Display>(v: T) -> String {
    v.to_string()
}

impl TrainConfig {
    pub const KEYS: [&'static str; 29] = [
        "d",
        "heads",
        "delta_b",
        "lambda",
        "gamma",
        "beta",
        "lr",
        "batch",
        "iters",
        "seed",
        "world_seed",
        "world_nodes",
        "train_worlds",
        "unseen_worlds",
        "landmarks",
        "appearance_seed",
        "episodes",
        "val_episodes",
        "test_episodes",
        "eval_every",
        "warmup",
        "rl",
        "noise",
        "max_steps",
        "max_legs",
        "clip",
        "ablation",
        "vocab_size",
        "max_len",
    ];

    /// Sets one key. `vocab_size` and `max_len` are derived values written
    /// into checkpoints; they are accepted and ignored.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d" => self.d = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "delta_b" => self.delta_b = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "world_seed" => self.world_seed = parse(key, value)?,
            "world_nodes" => self.world_nodes = parse(key, value)?,
            "train_worlds" => self.train_worlds = parse(key, value)?,
            "unseen_worlds" => self.unseen_worlds = parse(key, value)?,
            "landmarks" => self.landmarks = parse(key, value)?,
            "appearance_seed" => self.appearance_seed = parse(key, value)?,
            "episodes" => self.episodes = parse(key, value)?,
            "val_episodes" => self.val_episodes = parse(key, value)?,
            "test_episodes" => self.test_episodes = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "rl" => self.rl = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "max_legs" => self.max_legs = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "ablation" => self.ablation = Ablation::parse(value)?,
            "vocab_size" | "max_len" => {}
            _ => return Err(Error::Config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail("d must be a positive multiple of heads");
        }
        if !(self.delta_b > 0.0 && self.delta_b < 1.0) {
            return fail("delta_b must lie in (0, 1)");
        }
        if self.lambda < 0.0 || self.beta < 0.0 || !(0.0..=1.0).contains(&self.gamma) {
            return fail("lambda and beta must be nonnegative and gamma in [0, 1]");
        }
        if self.lr <= 0.0 || self.clip <= 0.0 {
            return fail("lr and clip must be positive");
        }
        if self.batch == 0 || self.episodes == 0 || self.train_worlds == 0 || self.world_nodes == 0 {
            return fail("batch, episodes, train_worlds and world_nodes must be positive");
        }
        if self.eval_every == 0 || self.max_steps == 0 {
            return fail("eval_every and max_steps must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return fail("warmup must lie in [0, 1]");
        }
        if self.noise < 0.0 {
            return fail("noise must be nonnegative");
        }
        Ok(())
    }

    pub fn warmup_iters(&self) -> usize {
        (self.warmup * self.iters as f64).ceil() as usize
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let v = [
            fmt(self.d),
            fmt(self.heads),
            format!("{:?}", self.delta_b),
            format!("{:?}", self.lambda),
            format!("{:?}", self.gamma),
            format!("{:?}", self.beta),
            format!("{:?}", self.lr),
            fmt(self.batch),
            fmt(self.iters),
            fmt(self.seed),
            fmt(self.world_seed),
            fmt(self.world_nodes),
            fmt(self.train_worlds),
            fmt(self.unseen_worlds),
            fmt(self.landmarks),
            fmt(self.appearance_seed),
            fmt(self.episodes),
            fmt(self.val_episodes),
            fmt(self.test_episodes),
            fmt(self.eval_every),
            format!("{:?}", self.warmup),
            fmt(self.rl),
            format!("{:?}", self.noise),
            fmt(self.max_steps),
            fmt(self.max_legs),
            format!("{:?}", self.clip),
            self.ablation.name().to_string(),
        ];
        Self::KEYS.iter().zip(v).map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// `key = value` lines accepted by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
