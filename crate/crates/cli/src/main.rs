//! `eqpool` command-line interface.
//!
//! ```text
//! eqpool synth  --out data/synth [--config synth.json] [--seed 3] [--overlap 0]
//! eqpool train  --dataset adult --method ours --seeds 0,1,2 [--config train.json] [--evaluate]
//! eqpool eval   --checkpoint out/adult/ours/0/checkpoint.json --dataset adult
//! eqpool sweep  --grid grid.json --dataset german
//! ```
//!
//! Exit status: 0 on success, 1 for usage and I/O problems, 2 when training
//! or evaluation hits a non-finite value.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use eqpool::checkpoint::Checkpoint;
use eqpool::data::{gen_synthetic, load_dataset_dir, DatasetSplits, SynthConfig};
use eqpool::metrics::{embed, evaluate, export_embeddings, AdvKind, AggregateReport, EvalConfig};
use eqpool::pipeline::{hyperparam_select, run_method, validate_candidate, write_json, Method, RunResult, TrainConfig, TraceRow};
use eqpool::Error;

use manifest::Manifest;

/// Environment variable naming the directory that holds dataset folders.
const DATA_DIR_ENV: &str = "EQPOOL_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "eqpool", version, about = "Covariate-equivariant, site-invariant representations for pooled data")]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-site dataset with known ground truth.
    Synth(SynthArgs),
    /// Train one method for one or more seeds.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Score candidate configurations on validation and pick one.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Generator settings as JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
}

/// Flags that override fields of a training configuration file.
#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs_stage1: Option<usize>,
    #[arg(long)]
    epochs_stage2: Option<usize>,
    #[arg(long)]
    lambda_eq: Option<f64>,
    #[arg(long)]
    lambda_mmd: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    /// Latent sphere dimension.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(epochs_stage1, epochs_stage2, lambda_eq, lambda_mmd, kappa, n, lr, batch);
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AdvArg {
    Accuracy,
    RocAuc,
}

impl From<AdvArg> for AdvKind {
    fn from(a: AdvArg) -> AdvKind {
        match a {
            AdvArg::Accuracy => AdvKind::Accuracy,
            AdvArg::RocAuc => AdvKind::RocAuc,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory, or a folder name under $EQPOOL_DATA_DIR (default ./data).
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value = "ours")]
    method: String,
    /// Training configuration JSON; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also score each seed on the test split.
    #[arg(long)]
    evaluate: bool,
    #[arg(long, value_enum, default_value = "accuracy")]
    adv: AdvArg,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: String,
    /// Where to write metrics.json and embeddings.csv (default: next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "accuracy")]
    adv: AdvArg,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// JSON array of candidate training configurations.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_enum, default_value = "accuracy")]
    adv: AdvArg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. } | Error::Singular { .. }) => 2,
        _ => 1,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn resolve_dataset(name: &str) -> PathBuf {
    let direct = PathBuf::from(name);
    if direct.is_dir() {
        return direct;
    }
    let root = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| "data".into());
    root.join(name)
}

fn load_splits(name: &str) -> anyhow::Result<DatasetSplits> {
    let dir = resolve_dataset(name);
    if !dir.is_dir() {
        bail!("dataset directory {} not found (set {DATA_DIR_ENV} or pass a path)", dir.display());
    }
    let splits = load_dataset_dir(&dir, 0)?;
    log::info!(
        "{}: {} train / {} val / {} test rows, {} features, {} dropped for missing values",
        splits.name,
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        splits.train.d(),
        splits.dropped
    );
    Ok(splits)
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n_samples {
        cfg.n_samples = v;
    }
    if let Some(v) = a.overlap {
        cfg.overlap = v;
    }
    if let Some(v) = a.kappa {
        cfg.kappa = v;
    }
    let data = gen_synthetic(&cfg)?;
    let files = data.write(&a.out)?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.method = a.method.parse::<Method>()?;
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn write_trace_rows(path: &Path, rows: &[TraceRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["epoch", "term", "value"])?;
    for r in rows {
        w.write_record([r.epoch.to_string(), r.term.clone(), format!("{:e}", r.value)])?;
    }
    w.flush()?;
    Ok(())
}

/// Saves a failed run's loss history and returns its path.
fn write_failed_trace(dir: &Path, e: &Error) -> Option<PathBuf> {
    let Error::NonFinite { stage, trace, .. } = e else {
        return None;
    };
    let path = dir.join("trace_failed.csv");
    let rows: Vec<TraceRow> = trace
        .iter()
        .enumerate()
        .map(|(epoch, &value)| TraceRow {
            epoch,
            term: format!("{stage}/total"),
            value,
        })
        .collect();
    fs::create_dir_all(dir).ok()?;
    write_trace_rows(&path, &rows).ok()?;
    Some(path)
}

fn save_run(dir: &Path, run: &RunResult) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Checkpoint::from_model(&run.model, &run.config).save(&dir.join("checkpoint.json"))?;
    run.write_trace(&dir.join("trace.csv"))?;
    write_json(&dir.join("config.json"), &run.config)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = train_config(&a)?;
    if a.seeds.is_empty() {
        bail!("--seeds must list at least one seed");
    }
    let splits = load_splits(&a.dataset)?;
    let method_dir = a.out.join(&splits.name).join(cfg.method.name());
    let eval_cfg = EvalConfig {
        adv_kind: a.adv.into(),
        ..EvalConfig::default()
    };
    let cfgs: Vec<TrainConfig> = a.seeds.iter().map(|&seed| TrainConfig { seed, ..cfg.clone() }).collect();
    let outcomes = run_parallel(&cfgs, a.jobs, |c| run_method(&splits.train, c));

    let mut reports = Vec::new();
    for (c, outcome) in cfgs.iter().zip(outcomes) {
        let dir = method_dir.join(c.seed.to_string());
        let run = match outcome {
            Ok(run) => run,
            Err(e) => {
                if let Some(p) = write_failed_trace(&dir, &e) {
                    eprintln!("seed {}: loss trace up to the failure written to {}", c.seed, p.display());
                }
                return Err(anyhow::Error::new(e).context(format!("training seed {}", c.seed)));
            }
        };
        save_run(&dir, &run)?;
        for w in &run.warnings {
            eprintln!("seed {}: warning: {w}", c.seed);
        }
        if a.evaluate {
            let eval = EvalConfig { seed: c.seed, ..eval_cfg };
            let m = evaluate(&run.model, &splits.train, &splits.test, &eval)?;
            write_json(&dir.join("metrics.json"), &m)?;
            export_embeddings(&dir.join("embeddings.csv"), &splits.test, &embed(&run.model, &splits.test)?)?;
            reports.push(m);
        }
        println!("{}", dir.display());
    }
    if a.evaluate {
        let agg = AggregateReport::new(cfg.method.name(), &splits.name, &a.seeds, reports)?;
        write_json(&method_dir.join("aggregate.json"), &agg)?;
        println!(
            "{} on {}: ACC {:.2} ± {:.2}, Adv {:.3} ± {:.3}, M×100 {:.3}, ΔEq {:.3}",
            agg.method, agg.dataset, agg.acc.mean, agg.acc.std, agg.adv.mean, agg.adv.std, agg.mmd.x100.mean, agg.delta_eq.mean
        );
    }
    Manifest::new("train", a.config.as_deref(), &cfg, &a.out).write()?;
    Ok(())
}

/// Runs `f` over `items`, at most `jobs` at a time, keeping input order.
fn run_parallel<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(jobs.max(1)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|item| s.spawn(|| f(item))).collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("worker panicked")));
        });
    }
    out
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let splits = load_splits(&a.dataset)?;
    if splits.train.d() != model.dims.d {
        bail!(
            "checkpoint expects {} input features but dataset '{}' has {}",
            model.dims.d,
            splits.name,
            splits.train.d()
        );
    }
    let target = match a.split {
        SplitArg::Val => &splits.val,
        SplitArg::Test => &splits.test,
    };
    let eval = EvalConfig {
        adv_kind: a.adv.into(),
        seed: ckpt.config.seed,
        ..EvalConfig::default()
    };
    let m = evaluate(&model, &splits.train, target, &eval)?;
    let out = match a.out {
        Some(p) => p,
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    write_json(&out.join("metrics.json"), &m)?;
    export_embeddings(&out.join("embeddings.csv"), target, &embed(&model, target)?)?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    rank: usize,
    candidate: usize,
    acc: f64,
    mmd: f64,
    adv: f64,
    in_window: bool,
    chosen: bool,
    config: TrainConfig,
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let grid: Vec<TrainConfig> = read_json(&a.grid)?;
    if grid.is_empty() {
        bail!("grid {} lists no candidate configurations", a.grid.display());
    }
    for (i, c) in grid.iter().enumerate() {
        c.validate().with_context(|| format!("candidate {i}"))?;
    }
    let splits = load_splits(&a.dataset)?;
    let eval = EvalConfig {
        adv_kind: a.adv.into(),
        ..EvalConfig::default()
    };
    let scored = run_parallel(&grid, a.jobs, |c| validate_candidate(&splits, c, &eval).map(|(_, s)| s));
    let candidates = grid
        .iter()
        .cloned()
        .zip(scored)
        .map(|(c, s)| s.map(|s| (c, s)))
        .collect::<Result<Vec<_>, Error>>()?;
    let chosen = hyperparam_select(&candidates)?;
    let best_acc = candidates.iter().map(|(_, s)| s.acc).fold(f64::NEG_INFINITY, f64::max);
    let in_window = |acc: f64| acc >= best_acc - eqpool::pipeline::SELECTION_WINDOW - 1e-12;

    // Ranked as the selection rule sees them: window members first, then by
    // validation MMD and adversary score.
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&x, &y| {
        let (sx, sy) = (candidates[x].1, candidates[y].1);
        in_window(sy.acc)
            .cmp(&in_window(sx.acc))
            .then(sx.mmd.total_cmp(&sy.mmd))
            .then(sx.adv.total_cmp(&sy.adv))
            .then(x.cmp(&y))
    });
    if let Some(pos) = order.iter().position(|&i| i == chosen) {
        let c = order.remove(pos);
        order.insert(0, c);
    }
    let rows: Vec<SweepRow> = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| SweepRow {
            rank: rank + 1,
            candidate: i,
            acc: candidates[i].1.acc,
            mmd: candidates[i].1.mmd,
            adv: candidates[i].1.adv,
            in_window: in_window(candidates[i].1.acc),
            chosen: i == chosen,
            config: candidates[i].0.clone(),
        })
        .collect();

    let dir = a.out.join(&splits.name).join("sweep");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut w = csv::Writer::from_path(dir.join("ranking.csv"))?;
    w.write_record(["rank", "candidate", "acc", "mmd", "adv", "in_window", "chosen"])?;
    for r in &rows {
        w.write_record([
            r.rank.to_string(),
            r.candidate.to_string(),
            format!("{:.6}", r.acc),
            format!("{:e}", r.mmd),
            format!("{:.6}", r.adv),
            r.in_window.to_string(),
            r.chosen.to_string(),
        ])?;
        println!(
            "{:>3} cand {:>3}  acc {:.4}  mmd {:.3e}  adv {:.4}{}",
            r.rank,
            r.candidate,
            r.acc,
            r.mmd,
            r.adv,
            if r.chosen { "  <- chosen" } else { "" }
        );
    }
    w.flush()?;
    write_json(&dir.join("ranking.json"), &rows)?;
    write_json(&dir.join("chosen.json"), &candidates[chosen].0)?;
    Manifest::new("sweep", Some(&a.grid), &candidates[chosen].0, &a.out).write()?;
    Ok(())
}
