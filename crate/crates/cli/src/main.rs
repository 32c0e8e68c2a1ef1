use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use instate::cgip::Mode;
use instate::encoder::{tokenize, Vocabulary};
use instate::engine::{Ablation, Model, ModelConfig};
use instate::envsim::{generate_world, landmark_words, make_episode, EpisodeSpec, World};
use instate::eval::{
    ablation_table, check_composed, evaluate, evaluate_episode, plot_data, AblationResult, MetricReport,
};
use instate::numerics::{Checkpoint, Graph};
use instate::rollout::{run_episode, Driver};
use instate::segmenter::{segment_rules, SegmentRules};
use instate::trainer::{load_checkpoint, train_with, Task, TaskEpisode, TrainConfig};

/// Instruction-state navigation agent on synthetic graph worlds.
#[derive(Parser)]
#[command(name = "instate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment instructions, one per input line, into clauses.
    Segment(SegmentArgs),
    /// Generate a world and optionally episodes over it, as JSON.
    GenWorld(GenWorldArgs),
    /// Replay one episode with a trained model and print its step log.
    Rollout(RolloutArgs),
    /// Train a model and write its best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Train and compare the four module variants.
    Ablate(AblateArgs),
    /// Finite-difference check of the composed step loss.
    Gradcheck(GradcheckArgs),
}

/// Configuration file plus `key=value` overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides, e.g. `--set iters=200 --set rl=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("expected KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SegmentArgs {
    /// Instructions file; standard input when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Scores boundaries with this model; otherwise a fresh model seeded by `--seed`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Boundary threshold (fresh models only).
    #[arg(long, default_value_t = 0.5)]
    delta_b: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model width (fresh models only).
    #[arg(long, default_value_t = 32)]
    dim: usize,
}

#[derive(Args)]
struct GenWorldArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    nodes: usize,
    /// Size of the landmark vocabulary.
    #[arg(long, default_value_t = 40)]
    landmarks: usize,
    /// Episodes to sample, seeded 0..N.
    #[arg(long, default_value_t = 0)]
    episodes: u64,
    #[arg(long, default_value_t = instate::envsim::DEFAULT_MAX_LEGS)]
    max_legs: usize,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum DriverKind {
    Greedy,
    Teacher,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// World JSON (from `gen-world`); requires `--episode`.
    #[arg(long, requires = "episode")]
    world: Option<PathBuf>,
    /// Episode JSON; requires `--world`.
    #[arg(long, requires = "world")]
    episode: Option<PathBuf>,
    /// Split to pick from when no episode file is given.
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, value_enum, default_value = "greedy")]
    driver: DriverKind,
    /// full, cgip-only, fgip-only or neither; the checkpoint's own by default.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint path.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Metrics history, one JSON record per iteration.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Prints a progress line at every validation.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long)]
    ablation: Option<String>,
    /// Step logs of every episode.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Per-step trajectory and clause distribution as CSV.
    #[arg(long)]
    plot_data: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training seeds `seed..seed+N`, averaged.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Writes the per-seed reports as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    fixtures: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Relative error tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_checkpoint(path: &Path) -> Result<(TrainConfig, Task, Model)> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let ck = Checkpoint::read(BufReader::new(f))?;
    Ok(load_checkpoint(&ck)?)
}

fn ablation_or(name: Option<&str>, default: Ablation) -> Result<Ablation> {
    Ok(match name {
        Some(n) => Ablation::parse(n)?,
        None => default,
    })
}

fn split(task: &Task, split: Split) -> (&[World], &[TaskEpisode]) {
    match split {
        Split::Train => (&task.seen, &task.train),
        Split::Val => (&task.seen, &task.val),
        Split::Test => (&task.unseen, &task.test),
    }
}

fn segment(args: &SegmentArgs) -> Result<()> {
    let mut text = String::new();
    match &args.input {
        Some(p) => {
            File::open(p).with_context(|| format!("opening {}", p.display()))?.read_to_string(&mut text)?;
        }
        None => {
            io::stdin().read_to_string(&mut text)?;
        }
    }
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let (vocab, model) = match &args.checkpoint {
        Some(p) => {
            let (_, task, model) = read_checkpoint(p)?;
            (task.vocab, model)
        }
        None => {
            let vocab = Vocabulary::new(lines.iter().flat_map(|l| instate::encoder::split_words(l)));
            let mut cfg = ModelConfig::new(vocab.len(), args.dim);
            cfg.delta_b = args.delta_b;
            cfg.seed = args.seed;
            cfg.heads = if args.dim.is_multiple_of(2) { 2 } else { 1 };
            let model = Model::new(cfg, None)?;
            (vocab, model)
        }
    };
    let mut out = output(None)?;
    for line in lines {
        let inst = tokenize(line, &vocab)?;
        let coarse = segment_rules(&inst, &SegmentRules::default());
        let mut g = Graph::new(&model.store);
        let agent = model.begin(&mut g, &inst, Ablation::FULL)?;
        let clauses: Vec<serde_json::Value> = agent
            .segs
            .clauses
            .iter()
            .map(|c| json!({ "start": c.start, "end": c.end, "text": inst.token_texts[c.clone()].join(" ") }))
            .collect();
        let record = json!({
            "instruction": line,
            "tokens": inst.token_texts,
            "coarse": coarse.positions,
            "b_hat": agent.boundaries.b_hat,
            "clauses": clauses,
        });
        writeln!(out, "{record}")?;
    }
    Ok(())
}

fn gen_world(args: &GenWorldArgs) -> Result<()> {
    let words = landmark_words(args.landmarks)?;
    let world = generate_world(args.seed, args.nodes, &words)?;
    let episodes = (0..args.episodes)
        .map(|e| make_episode(&world, e, args.max_legs))
        .collect::<instate::Result<Vec<_>>>()?;
    let mut out = output(args.out.as_deref())?;
    let doc = if args.episodes == 0 {
        serde_json::to_value(&world)?
    } else {
        json!({ "world": world, "episodes": episodes })
    };
    writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn rollout(args: &RolloutArgs) -> Result<()> {
    let (cfg, task, model) = read_checkpoint(&args.checkpoint)?;
    let flags = ablation_or(args.ablation.as_deref(), cfg.ablation)?;
    let (world, spec) = match (&args.world, &args.episode) {
        (Some(w), Some(e)) => {
            let world = World::from_json(&std::fs::read_to_string(w)?)?;
            let spec = EpisodeSpec::from_json(&std::fs::read_to_string(e)?)?;
            (world, spec)
        }
        _ => {
            let (worlds, episodes) = split(&task, args.split);
            let ep = episodes
                .get(args.index)
                .with_context(|| format!("split has {} episodes", episodes.len()))?;
            (worlds[ep.world].clone(), ep.spec.clone())
        }
    };
    let mut out = output(None)?;
    match args.driver {
        DriverKind::Greedy => {
            let ep = TaskEpisode { world: 0, spec };
            let run = evaluate_episode(&model, &task, &world, &ep, &cfg, flags)?;
            run.write_log(&mut out)?;
        }
        DriverKind::Teacher => {
            let scene = task.scene(&world, &cfg);
            let mut g = Graph::new(&model.store);
            let mut noise = ChaCha8Rng::seed_from_u64(spec.episode_seed);
            let ro = run_episode(&mut g, &model, &scene, &spec, flags, Mode::Infer, Driver::Teacher, false, &mut noise)?;
            for s in &ro.steps {
                writeln!(out, "{}", serde_json::to_string(&s.record())?)?;
            }
            let metrics = instate::eval::EpisodeMetrics::compute(&ro.trajectory, &ro.target);
            writeln!(out, "{}", json!({ "nodes": ro.trajectory.nodes, "metrics": metrics }))?;
        }
    }
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let task = Task::new(&cfg)?;
    let verbose = args.verbose;
    let outcome = train_with(&cfg, &task, |r| {
        if verbose {
            if let (Some(sr), Some(spl)) = (r.val_sr, r.val_spl) {
                eprintln!("iter {:>6} il {:.4} rl {:.4} val sr {sr:.3} spl {spl:.3}", r.iteration + 1, r.l_il, r.l_rl);
            }
        }
    })?;
    let mut f = BufWriter::new(File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?);
    outcome.checkpoint(&cfg).write(&mut f)?;
    f.flush()?;
    if let Some(h) = &args.history {
        outcome.write_history(BufWriter::new(File::create(h)?))?;
    }
    let untouched = outcome.audit.untouched();
    if !untouched.is_empty() {
        eprintln!("parameters without gradient: {}", untouched.join(", "));
    }
    println!(
        "best iteration {} val SR {:.3} SPL {:.3}; wrote {}",
        outcome.best_iteration + 1,
        outcome.best_val.mean.sr,
        outcome.best_val.mean.spl,
        args.out.display()
    );
    Ok(())
}

fn print_report(name: &str, r: &MetricReport) {
    let m = &r.mean;
    println!(
        "{name}: episodes {} TL {:.3} NE {:.3} SR {:.3} OSR {:.3} SPL {:.3} RGSPL {:.3}",
        r.episodes.len(),
        m.tl,
        m.ne,
        m.sr,
        m.osr,
        m.spl,
        m.rgspl
    );
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (cfg, task, model) = read_checkpoint(&args.checkpoint)?;
    let flags = ablation_or(args.ablation.as_deref(), cfg.ablation)?;
    let (worlds, episodes) = split(&task, args.split);
    let outcome = evaluate(&model, &task, worlds, episodes, &cfg, flags)?;
    if let Some(p) = &args.log {
        let mut w = BufWriter::new(File::create(p)?);
        for run in &outcome.runs {
            run.write_log(&mut w)?;
        }
        w.flush()?;
    }
    if let Some(p) = &args.plot_data {
        std::fs::write(p, plot_data(&outcome.runs))?;
    }
    print_report(flags.name(), &outcome.report);
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let base = args.config.load()?;
    let mut per_seed: Vec<Vec<AblationResult>> = Vec::new();
    for s in 0..args.seeds {
        let cfg = TrainConfig {
            seed: base.seed + s,
            ..base.clone()
        };
        let task = Task::new(&cfg)?;
        let results = instate::eval::run_ablation(&cfg, &task)?;
        eprintln!("seed {}\n{}", cfg.seed, ablation_table(&results));
        per_seed.push(results);
    }
    let means: Vec<AblationResult> = Ablation::ALL
        .iter()
        .enumerate()
        .map(|(i, &ablation)| {
            let episodes = per_seed.iter().flat_map(|r| r[i].report.episodes.clone()).collect();
            AblationResult {
                ablation,
                report: MetricReport::from_episodes(episodes),
            }
        })
        .collect();
    print!("{}", ablation_table(&means));
    if let Some(p) = &args.report {
        let doc: Vec<serde_json::Value> = per_seed
            .iter()
            .enumerate()
            .map(|(s, rs)| {
                json!({
                    "seed": base.seed + s as u64,
                    "variants": rs.iter().map(|r| json!({ "variant": r.ablation.name(), "mean": r.report.mean })).collect::<Vec<_>>(),
                })
            })
            .collect();
        std::fs::write(p, serde_json::to_string_pretty(&doc)?)?;
    }
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let results = check_composed(args.fixtures, args.dim, args.seed)?;
    let mut worst = 0.0f64;
    for r in &results {
        println!("{}", serde_json::to_string(r)?);
        worst = worst.max(r.max_rel_error);
    }
    if worst > args.tol {
        bail!("max relative error {worst:.3e} exceeds {:.1e}", args.tol);
    }
    eprintln!("{} fixtures, max relative error {worst:.3e}", results.len());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Segment(a) => segment(a),
        Command::GenWorld(a) => gen_world(a),
        Command::Rollout(a) => rollout(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}
