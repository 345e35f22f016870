use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use dynres::agents::{AgentCheckpoint, Algorithm, HandlerKind};
use dynres::env::EnvConfig;
use dynres::harness::{
    compute_metrics, format_triple, read_csv, read_jsonl, run_evaluation, run_training, time_to_threshold,
    trajectory_svg, write_csv, write_jsonl, EpisodeRow, EpisodeTrajectory, ExperimentConfig, SearchSpec, Snapshot,
};

#[derive(Parser)]
#[command(
    name = "dynres",
    version,
    about = "Train and evaluate agents under dynamic action restrictions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent per seed and write episode rows, snapshots and checkpoints.
    Train(TrainArgs),
    /// Roll out trained checkpoints deterministically.
    Evaluate(EvaluateArgs),
    /// Random search with successive halving.
    Search(SearchArgs),
    /// Aggregate metrics tables and trajectory plots from a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algo: Option<Algorithm>,
    #[arg(long)]
    handler: Option<HandlerKind>,
    /// `a..b` (inclusive), a comma list, or a single seed.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    /// Obstacle scenario: none, simple, complex or moving.
    #[arg(long)]
    obstacles: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// A checkpoint file or a directory of `checkpoint_seed*.json` files.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "0..39")]
    env_seeds: String,
    /// Evaluation scenario; defaults to the training environment.
    #[arg(long)]
    obstacles: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    space: PathBuf,
    /// Per-configuration step cap.
    #[arg(long)]
    cap: Option<u64>,
    /// Where to write the search log as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Write metrics tables as CSV.
    #[arg(long)]
    csv: bool,
    /// Render trajectories as SVG.
    #[arg(long)]
    svg: bool,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().with_context(|| format!("bad seed range {s:?}"))?;
        let b: u64 = b
            .trim()
            .trim_start_matches('=')
            .parse()
            .with_context(|| format!("bad seed range {s:?}"))?;
        ensure!(a <= b, "empty seed range {s:?}");
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse::<u64>().with_context(|| format!("bad seed {p:?}")))
        .collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => read_json::<ExperimentConfig>(p)?,
        None => {
            let (Some(algo), Some(handler)) = (args.algo, args.handler) else {
                bail!("--algo and --handler are required without --config");
            };
            ExperimentConfig::new(algo, handler, vec![0], 50_000)
        }
    };
    if let Some(a) = args.algo {
        cfg.algorithm = a;
    }
    if let Some(h) = args.handler {
        cfg.handler = h;
    }
    if let Some(s) = &args.seeds {
        cfg.agent_seeds = parse_seeds(s)?;
    }
    if let Some(n) = args.steps {
        cfg.total_steps = n;
    }
    if let Some(o) = &args.obstacles {
        cfg.env = EnvConfig::scenario(o)?;
    }
    if cfg.hyperparams.is_none() {
        cfg.hyperparams = Some(cfg.resolved_hyperparams()?);
    }
    cfg.validate()?;

    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("config.json"), &cfg)?;
    let report = run_training(&cfg)?;
    write_csv(&args.out.join("episodes.csv"), &report.episodes())?;
    write_csv(&args.out.join("snapshots.csv"), &report.snapshots())?;
    for run in &report.runs {
        write_json(
            &args.out.join(format!("checkpoint_seed{}.json", run.agent_seed)),
            &run.checkpoint,
        )?;
        let solved = run.episodes.iter().filter(|r| r.solved).count();
        println!(
            "seed {}: {} steps, {} episodes, {solved} solved, {} collisions",
            run.agent_seed,
            run.steps,
            run.episodes.len(),
            run.episodes.iter().filter(|r| r.collided).count()
        );
    }
    for (seed, err) in &report.failures {
        eprintln!("seed {seed} failed: {err}");
    }
    ensure!(report.failures.is_empty(), "{} seed(s) failed", report.failures.len());
    Ok(())
}

fn load_checkpoints(path: &Path) -> Result<Vec<AgentCheckpoint>> {
    let mut cps: Vec<AgentCheckpoint> = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("checkpoint") && n.ends_with(".json"))
            })
            .collect();
        files.sort();
        files.iter().map(|f| read_json(f)).collect::<Result<_>>()?
    } else {
        vec![read_json(path)?]
    };
    ensure!(!cps.is_empty(), "no checkpoints found in {}", path.display());
    cps.sort_by_key(|c| c.seed);
    Ok(cps)
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let cps = load_checkpoints(&args.checkpoint)?;
    let env_seeds = parse_seeds(&args.env_seeds)?;
    let env = args.obstacles.as_deref().map(EnvConfig::scenario).transpose()?;
    let mut rows = Vec::new();
    let mut trajectories = Vec::new();
    for cp in &cps {
        let ev = run_evaluation(cp, env.as_ref(), &env_seeds)
            .with_context(|| format!("evaluating agent seed {}", cp.seed))?;
        rows.extend(ev.rows);
        trajectories.extend(ev.trajectories);
    }
    fs::create_dir_all(&args.out)?;
    write_csv(&args.out.join("evaluation.csv"), &rows)?;
    write_jsonl(&args.out.join("trajectories.jsonl"), &trajectories)?;
    for m in compute_metrics(&rows)? {
        println!(
            "{}/{}: {} ({} episodes)",
            m.algorithm,
            m.handler,
            format_triple(&m),
            m.episodes
        );
    }
    Ok(())
}

fn search(args: SearchArgs) -> Result<()> {
    let mut spec: SearchSpec = read_json(&args.space)?;
    if let Some(cap) = args.cap {
        spec.halving.cap = cap;
        spec.halving.min_budget = spec.halving.min_budget.min(cap);
    }
    let res = spec.run()?;
    for (i, rung) in res.rungs.iter().enumerate() {
        println!(
            "rung {i}: budget {} steps, {} candidates",
            rung.budget,
            rung.candidates.len()
        );
    }
    println!("best score {:.3}", res.best_score);
    println!("{}", serde_json::to_string_pretty(res.best_candidate())?);
    if let Some(out) = &args.out {
        write_json(out, &res)?;
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let dir = &args.input;
    let mut found = false;
    for (source, target) in [
        ("episodes.csv", "training_metrics.csv"),
        ("evaluation.csv", "evaluation_metrics.csv"),
    ] {
        let path = dir.join(source);
        if !path.exists() {
            continue;
        }
        found = true;
        let rows: Vec<EpisodeRow> = read_csv(&path)?;
        if rows.is_empty() {
            continue;
        }
        let metrics = compute_metrics(&rows)?;
        for m in &metrics {
            println!("{source} {}/{}: {}", m.algorithm, m.handler, format_triple(m));
        }
        if args.csv {
            write_csv(&dir.join(target), &metrics)?;
        }
    }
    let snapshots = dir.join("snapshots.csv");
    let config = dir.join("config.json");
    if snapshots.exists() && config.exists() {
        let cfg: ExperimentConfig = read_json(&config)?;
        let snaps: Vec<Snapshot> = read_csv(&snapshots)?;
        for seed in &cfg.agent_seeds {
            let fractions: Vec<f64> = snaps
                .iter()
                .filter(|s| s.agent_seed == *seed)
                .map(|s| s.solved_fraction)
                .collect();
            match time_to_threshold(&fractions, cfg.iteration_steps, 0.8) {
                Some(steps) => println!("seed {seed}: >80% solved after {steps} steps"),
                None => println!("seed {seed}: never above 80% solved"),
            }
        }
    }
    if args.svg {
        let path = dir.join("trajectories.jsonl");
        ensure!(path.exists(), "--svg needs {}", path.display());
        let trajectories: Vec<EpisodeTrajectory> = read_jsonl(&path)?;
        let svg_dir = dir.join("svg");
        fs::create_dir_all(&svg_dir)?;
        for tr in &trajectories {
            let name = format!(
                "{}_{}_agent{}_env{}.svg",
                tr.algorithm, tr.handler, tr.agent_seed, tr.env_seed
            );
            fs::write(svg_dir.join(name), trajectory_svg(tr))?;
        }
        println!("wrote {} trajectory plots to {}", trajectories.len(), svg_dir.display());
        found = true;
    }
    ensure!(found, "no run outputs found in {}", dir.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Search(a) => search(a),
        Command::Report(a) => report(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("40..45").unwrap(), vec![40, 41, 42, 43, 44, 45]);
        assert_eq!(parse_seeds("0..39").unwrap().len(), 40);
        assert_eq!(parse_seeds("1,5, 9").unwrap(), vec![1, 5, 9]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert!(parse_seeds("5..2").is_err());
        assert!(parse_seeds("a").is_err());
    }
}
