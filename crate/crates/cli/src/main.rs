//! `dali`: train agents, evaluate them on context regimes, and run the
//! counterfactual and probing analyses on finished runs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use dali_core::checkpoint::{sha256_hex, Checkpoint};
use dali_core::config::ExperimentConfig;
use dali_core::counterfactual::{analyze, expected_period_shifts, perturb_and_rollout, sign_consistency, ActionMode, AnalysisConfig};
use dali_core::evaluation::{build_report, evaluate_checkpoint, write_archive, EvalRecord};
use dali_core::model::{Variant, EMBED_DIM};
use dali_core::probes::{
    compare_information, entropy_decay_curve, fit_context_probe, DecayConfig, ProbeConfig, ProbeReport, Representation, RunTag,
    WindowFeatures,
};
use dali_core::replay::read_replay;
use dali_core::trainer::{load_agent, resume_experiment, run_experiment, RunPaths, TrainConfig};
use dali_core::{plot, Agent32, DaliError};
use serde::Serialize;

/// Overrides the output root of every command.
const OUTPUT_ROOT_VAR: &str = "DALI_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "dali", version, about = "Context-aware world-model agents on small contextual MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent; writes checkpoints, the training log and the resolved config.
    Train(TrainArgs),
    /// Evaluate finished runs on the interpolation, extrapolation and mixed grids.
    Eval(EvalArgs),
    /// Rank embedding dimensions by how much perturbing them changes imagined rollouts.
    Counterfactual(CounterfactualArgs),
    /// Probe representations for context information and measure decay curves.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Run directory (default: `<output root>/<env>_<variant>_seed<seed>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue an interrupted run from this checkpoint inside its run directory.
    #[arg(long, conflicts_with_all = ["config", "overrides", "out"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directories (or checkpoint files) to evaluate.
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated subset of interpolate, extrapolate, mixed.
    #[arg(long)]
    regimes: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CounterfactualArgs {
    /// Run directory of a trained inferred-context agent.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated embedding dimensions, 1-based (default: all).
    #[arg(long)]
    dims: Option<String>,
    /// Start states per dimension.
    #[arg(long, default_value_t = 2500)]
    pairs: usize,
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    /// Filtering history before each start state.
    #[arg(long, default_value_t = 50)]
    history: usize,
    #[arg(long, default_value = "zero")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start states used for the oscillation-period check of the top dimension.
    #[arg(long, default_value_t = 10)]
    period_starts: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Run directories with a final checkpoint and replay data.
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    /// Window lengths of the decay curve, strictly increasing.
    #[arg(long, default_value = "1,2,4,8,16,32")]
    kgrid: String,
    /// Variant treated as the reference in comparisons.
    #[arg(long, default_value = "dreamer_dr")]
    reference: String,
    /// Seeds of the decay curve.
    #[arg(long, default_value_t = 1)]
    decay_seeds: u64,
    /// Random-policy episodes per context bin for the decay curve.
    #[arg(long, default_value_t = 40)]
    decay_episodes: usize,
    /// Length of those episodes.
    #[arg(long, default_value_t = 100)]
    decay_episode_len: usize,
    /// Fewest replay episodes a probe accepts.
    #[arg(long, default_value_t = 100)]
    min_episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A usage error the user can fix by changing the command line.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(d) = cause.downcast_ref::<DaliError>() {
            if matches!(d, DaliError::Config { .. } | DaliError::UnknownEnv(_) | DaliError::UnknownVariant(_)) {
                return 2;
            }
        }
    }
    1
}

fn output_root(cfg_dir: &Path) -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| cfg_dir.to_path_buf())
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// A finished run: its directory, agent and training config.
struct Run {
    dir: PathBuf,
    agent: Agent32,
    train: TrainConfig,
}

fn open_run(path: &Path) -> Result<Run> {
    let (dir, ck_path) = if path.is_dir() {
        (path.to_path_buf(), RunPaths::new(path).final_checkpoint())
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    if !ck_path.exists() {
        bail!("no checkpoint at {}", ck_path.display());
    }
    let ck = Checkpoint::load(&ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
    let (agent, train) = load_agent::<f32>(&ck)?;
    Ok(Run { dir, agent, train })
}

fn experiment_of(train: &TrainConfig) -> ExperimentConfig {
    ExperimentConfig { train: train.clone(), ..ExperimentConfig::default() }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if let Some(ck) = args.resume {
        let dir = ck.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = resume_experiment::<f32>(&dir, &ck)?;
        println!("resumed {} to {} steps; log sha256 {}", dir.display(), out.state.env_steps, out.log_hash);
        return Ok(());
    }
    let cfg = load_config(&args.cfg)?;
    let t = &cfg.train;
    let dir = args
        .out
        .unwrap_or_else(|| output_root(&cfg.output_dir).join(format!("{}_{}_seed{}", t.env, t.variant, t.seed)));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.cfg"), cfg.to_text())?;
    let out = run_experiment::<f32>(t, Some(RunPaths::new(&dir)))?;
    let last: Vec<f64> = out.state.log.iter().rev().take(10).map(|r| r.episode_return).collect();
    let mean = last.iter().sum::<f64>() / last.len().max(1) as f64;
    println!(
        "trained {} on {} for {} steps; mean return of the last {} episodes {mean:.2}; log sha256 {}",
        t.variant,
        t.env,
        out.state.env_steps,
        last.len(),
        out.log_hash
    );
    println!("run directory {}", dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&args.cfg)?;
    if let Some(r) = &args.regimes {
        cfg.set("eval.regimes", r).map_err(|e| usage(e.to_string()))?;
    }
    let runs = args.checkpoints.iter().map(|p| open_run(p)).collect::<Result<Vec<_>>>()?;
    let env = runs[0].train.env;
    for run in &runs {
        if run.train.env != env {
            bail!(usage(format!("runs mix environments {} and {}", env, run.train.env)));
        }
        if args.cfg.config.is_some() && run.train.env != cfg.train.env {
            bail!(usage(format!("config is for {} but {} was trained on {}", cfg.train.env, run.dir.display(), run.train.env)));
        }
    }
    let dir = args.out.unwrap_or_else(|| output_root(&cfg.output_dir).join("eval"));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.cfg"), cfg.to_text())?;
    let mut records: Vec<EvalRecord> = Vec::new();
    for run in &runs {
        let t = &run.train;
        eprintln!("evaluating {} seed {} ({})", t.variant, t.seed, run.dir.display());
        records.extend(evaluate_checkpoint(&run.agent, t.variant.as_str(), t.seed, t.mode, t.env_config(), &cfg.eval)?);
    }
    let archive = dir.join("scores.csv");
    write_archive(&archive, &env.space().names(), &records)?;
    let mut report = build_report(&records, cfg.eval.bootstrap, cfg.eval.seed)?;
    report.archive_sha256 = Some(sha256_hex(&fs::read(&archive)?));
    write_json(&dir.join("report.json"), &report)?;
    plot::iqm_bars(&dir.join("iqm.svg"), &report)?;
    plot::poi_panels(&dir.join("poi.svg"), &report)?;
    for sec in &report.sections {
        println!("{}", sec.regime);
        for m in &sec.methods {
            println!("  {:<12} IQM {:.4}  95% CI [{:.4}, {:.4}]", m.method, m.iqm, m.ci.lo, m.ci.hi);
        }
    }
    println!("archive sha256 {}", report.archive_sha256.as_deref().unwrap_or(""));
    println!("outputs in {}", dir.display());
    Ok(())
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| usage(format!("--{flag}: cannot parse `{p}`"))))
        .collect()
}

#[derive(Serialize)]
struct PeriodCheck {
    dim: usize,
    starts: usize,
    samples: usize,
    horizon: usize,
    shifts: Vec<Option<f64>>,
    consistent: usize,
}

fn cmd_counterfactual(args: CounterfactualArgs) -> Result<()> {
    let mode: ActionMode = args.mode.parse().map_err(|e: DaliError| usage(e.to_string()))?;
    let dims: Vec<usize> = match &args.dims {
        Some(s) => parse_list::<usize>("dims", s)?
            .into_iter()
            .map(|d| if (1..=EMBED_DIM).contains(&d) { Ok(d - 1) } else { Err(usage(format!("--dims: {d} outside 1..={EMBED_DIM}"))) })
            .collect::<Result<_>>()?,
        None => (0..EMBED_DIM).collect(),
    };
    let run = open_run(&args.checkpoint)?;
    if !run.train.variant.uses_encoder() {
        bail!(usage(format!("counterfactual analysis needs an inferred-context run, got {}", run.train.variant)));
    }
    let replay = RunPaths::new(&run.dir).replay();
    let (_, episodes) = read_replay(&replay).with_context(|| format!("reading replay data {}", replay.display()))?;
    let cfg = AnalysisConfig { pairs: args.pairs, horizon: args.horizon, history: args.history, mode, ..AnalysisConfig::default() };
    let dir = args.out.unwrap_or_else(|| output_root(Path::new("runs")).join("counterfactual"));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.cfg"), experiment_of(&run.train).to_text())?;
    write_json(&dir.join("analysis.json"), &serde_json::json!({ "analysis": &cfg, "dims": &dims, "seed": args.seed }))?;

    let (ranking, starts, std) = analyze(&run.agent, &episodes, &dims, &cfg, args.seed)?;
    write_json(&dir.join("ranking.json"), &ranking)?;
    let mut table = csv::Writer::from_path(dir.join("ranking.csv"))?;
    table.write_record(["rank", "dimension", "delta", "auc", "ci_lo", "ci_hi", "samples"])?;
    for (rank, d) in ranking.ranking.iter().enumerate() {
        let s = ranking.scores.iter().find(|s| s.dim == *d).expect("ranked dimension");
        table.write_record(&[
            (rank + 1).to_string(),
            (s.dim + 1).to_string(),
            s.delta.to_string(),
            s.auc.to_string(),
            s.ci.lo.to_string(),
            s.ci.hi.to_string(),
            s.samples.to_string(),
        ])?;
    }
    table.flush()?;
    plot::auc_bars(&dir.join("auc.svg"), &ranking)?;

    let names: Vec<String> = run.agent.env.observation_names();
    let first = starts.select(&[0]);
    for &j in &dims {
        let batch = perturb_and_rollout(&run.agent, &first, j, std[j] * cfg.delta_scale, cfg.horizon, mode, args.seed)?;
        plot::trajectory_overlay(&dir.join(format!("trajectory_dim{}.svg", j + 1)), &batch.pair(0), &names)?;
    }

    let top = ranking.top();
    let n = args.period_starts.min(starts.len());
    let subset = starts.select(&(0..n).collect::<Vec<_>>());
    let samples = 64;
    let horizon = args.horizon.max(100);
    let shifts = expected_period_shifts(&run.agent, &subset, top, std[top] * cfg.delta_scale, horizon, 0, samples, args.seed)?;
    let check = PeriodCheck { dim: top + 1, starts: n, samples, horizon, consistent: sign_consistency(&shifts), shifts };
    write_json(&dir.join("period.json"), &check)?;

    for s in &ranking.scores {
        println!("dimension {}  AUC {:.3}  95% CI [{:.3}, {:.3}]", s.dim + 1, s.auc, s.ci.lo, s.ci.hi);
    }
    for sig in &ranking.significance {
        println!("dimension {} vs {}: gap {:.3}, p = {:.4}", sig.better + 1, sig.worse + 1, sig.gap, sig.p);
    }
    println!("top dimension {}: period shift sign consistent on {}/{} starts", top + 1, check.consistent, n);
    println!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let kgrid: Vec<usize> = parse_list("kgrid", &args.kgrid)?;
    if kgrid.is_empty() || kgrid[0] == 0 || kgrid.windows(2).any(|w| w[0] >= w[1]) {
        bail!(usage("--kgrid must be positive and strictly increasing"));
    }
    let reference: Variant = args.reference.parse().map_err(|e: DaliError| usage(e.to_string()))?;
    let runs = args.checkpoints.iter().map(|p| open_run(p)).collect::<Result<Vec<_>>>()?;
    let dir = args.out.unwrap_or_else(|| output_root(Path::new("runs")).join("probe"));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.cfg"), experiment_of(&runs[0].train).to_text())?;

    let mut reports: Vec<(usize, ProbeReport)> = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let replay = RunPaths::new(&run.dir).replay();
        if !replay.exists() {
            bail!("missing replay data {}", replay.display());
        }
        let (_, episodes) = read_replay(&replay)?;
        let t = &run.train;
        let tag = RunTag { variant: t.variant.to_string(), seed: t.seed, train_steps: t.total_steps };
        let pcfg = ProbeConfig { window: t.model.window, min_episodes: args.min_episodes, seed: args.seed, ..ProbeConfig::default() };
        let reps: &[Representation] = if run.agent.context.is_some() {
            &[Representation::CtxEmbedding, Representation::RecurrentState]
        } else {
            &[Representation::RecurrentState]
        };
        let mut own = Vec::new();
        for &r in reps {
            let rep = fit_context_probe(&run.agent, &episodes, r, &tag, &pcfg)?;
            println!("{} seed {} {}: held-out R² {:?}", rep.variant, rep.seed, rep.representation, rep.r2);
            own.push(rep.clone());
            reports.push((i, rep));
        }
        write_json(&dir.join(format!("probe_{}_seed{}.json", t.variant, t.seed)), &own)?;
    }

    if runs.len() >= 2 {
        let ref_variant = if runs.iter().any(|r| r.train.variant == reference) { reference } else { runs[runs.len() - 1].train.variant };
        let is_ref = |i: usize| runs[i].train.variant == ref_variant;
        let mut comparisons = Vec::new();
        for rep_kind in [Representation::CtxEmbedding, Representation::RecurrentState] {
            let mut pairs = Vec::new();
            for (i, cand) in reports.iter().filter(|(i, r)| !is_ref(*i) && r.representation == rep_kind) {
                let found = reports.iter().find(|(j, r)| {
                    is_ref(*j) && r.representation == Representation::RecurrentState && r.seed == cand.seed && *j != *i
                });
                if let Some((_, refr)) = found {
                    pairs.push((cand.clone(), refr.clone()));
                }
            }
            if !pairs.is_empty() {
                let cmp = compare_information(&pairs, 2000, args.seed)?;
                println!(
                    "{} vs {}: {} wins / {} losses, sign-test p = {:.4}, mean difference {:.4} [{:.4}, {:.4}]",
                    cmp.candidate, cmp.reference, cmp.wins, cmp.losses, cmp.sign_p, cmp.mean_difference, cmp.difference_ci.lo, cmp.difference_ci.hi
                );
                comparisons.push(cmp);
            }
        }
        write_json(&dir.join("comparison.json"), &comparisons)?;
    }

    let first = &runs[0];
    let dcfg = DecayConfig {
        kgrid,
        episodes_per_bin: args.decay_episodes,
        episode_len: args.decay_episode_len,
        sigma: first.train.sigma,
        ..DecayConfig::default()
    };
    let mut curves = Vec::new();
    for s in 0..args.decay_seeds {
        let seed = args.seed + s;
        let curve = entropy_decay_curve(first.agent.env, first.train.mode, WindowFeatures::<f32>::Pooled, &dcfg, seed)?;
        println!(
            "decay seed {seed}: {:?}, Spearman {:?}, rate {:?}",
            curve.points.iter().map(|p| (p.k, p.error)).collect::<Vec<_>>(),
            curve.spearman(),
            curve.lambda
        );
        curves.push((format!("seed {seed}"), curve));
    }
    write_json(&dir.join("decay.json"), &curves)?;
    plot::decay_curves(&dir.join("decay.svg"), &curves)?;
    println!("outputs in {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Counterfactual(a) => cmd_counterfactual(a),
        Command::Probe(a) => cmd_probe(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
