//! `paodp` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use paodp::dataset::{normalize_states, read_dataset, write_dataset, OfflineDataset};
use paodp::envs::{generate_dataset, make_env, Quality};
use paodp::eval::{ablation_sweep, rat_curve, render_svg, Curve, SweepAxis};
use paodp::prefgen::Strategy;
use paodp::trainer::{self, latest_checkpoint, read_metrics, RunOptions, TrainConfig, TrainState, METRICS_FILE};
use paodp::Error;

const MANIFEST_FILE: &str = "manifest.json";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(name = "paodp", version, about = "Preference-optimized diffusion policies for offline RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a scripted behavior policy into a dataset file.
    GenData(GenDataArgs),
    /// Train a behavior policy, critic and surrogate policy.
    Train(TrainArgs),
    /// Score a saved checkpoint of a run.
    Eval(EvalArgs),
    /// Sweep one hyperparameter over several values and seeds.
    Ablate(AblateArgs),
    /// Draw running-average score curves of finished runs as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    env: String,
    #[arg(long, default_value = "mixed")]
    quality: String,
    #[arg(long, default_value_t = 20000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Flags that override keys of the config file.
#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    n_actions: Option<usize>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Flat `key = value` config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint file; defaults to the latest one in the run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated values of the swept key.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directories, or directories whose subdirectories are runs.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Output SVG; a `.csv` summary is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "Running average score")]
    title: String,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::NonFinite { .. } | Error::Io { .. }) => 1,
            CliError::Core(_) | CliError::Usage(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Serialize, Deserialize)]
struct SweepTag {
    axis: String,
    value: String,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    config: TrainConfig,
    dataset: PathBuf,
    dataset_sha256: String,
    code_version: String,
    seed: u64,
    started_unix: u64,
    finished_unix: Option<u64>,
    notes: Vec<String>,
    sweep: Option<SweepTag>,
}

impl RunManifest {
    fn new(config: &TrainConfig, dataset: &Path, notes: Vec<String>) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            dataset: fs::canonicalize(dataset).map_err(|e| io(dataset, e))?,
            dataset_sha256: sha256_file(dataset)?,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            started_unix: now(),
            finished_unix: None,
            notes,
            sweep: None,
        })
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(Error::from)?;
        trainer::write_text(&dir.join(MANIFEST_FILE), &json)?;
        trainer::write_text(&dir.join(CONFIG_FILE), &self.config.to_kv())?;
        Ok(())
    }

    fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| usage_io(&path, e))?;
        Ok(serde_json::from_slice(&bytes).map_err(Error::from)?)
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Missing inputs named on the command line are usage errors.
fn usage_io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("cannot read {}: {e}", path.display()))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| usage_io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("dataset {} does not exist", path.display())));
    }
    Ok(read_dataset(path)?)
}

/// Config file (if any) with flag overrides applied. Returns the notes that
/// record every flag that replaced a value set in the file.
fn resolve_config(path: Option<&Path>, o: &Overrides) -> Result<(TrainConfig, Vec<String>)> {
    let (mut cfg, file_keys) = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage_io(p, e))?;
            let keys: Vec<String> = text
                .lines()
                .filter_map(|l| l.split('#').next()?.split_once('=').map(|(k, _)| k.trim().to_string()))
                .collect();
            (TrainConfig::from_kv(&text)?, keys)
        }
        None => (TrainConfig::default(), Vec::new()),
    };
    let flags: [(&str, Option<String>); 7] = [
        ("eta", o.eta.map(|v| v.to_string())),
        ("lambda", o.lambda.map(|v| v.to_string())),
        ("xi", o.xi.map(|v| v.to_string())),
        ("n_actions", o.n_actions.map(|v| v.to_string())),
        ("strategy", o.strategy.map(|v| v.to_string())),
        ("epochs", o.epochs.map(|v| v.to_string())),
        ("seed", o.seed.map(|v| v.to_string())),
    ];
    let mut notes = Vec::new();
    for (key, value) in flags {
        let Some(value) = value else { continue };
        let before = cfg.get(key)?;
        cfg.set(key, &value)?;
        let after = cfg.get(key)?;
        if file_keys.iter().any(|k| k == key) && before != after {
            notes.push(format!("flag --{} = {after} overrides config value {before}", key.replace('_', "-")));
        }
    }
    cfg.validate()?;
    Ok((cfg, notes))
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let env = make_env(&a.env)?;
    let quality: Quality = a.quality.parse()?;
    let ds = normalize_states(generate_dataset(env.as_ref(), quality, a.n, a.seed)?);
    write_dataset(&ds, &a.out)?;
    println!("wrote {} transitions to {}", ds.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let env = make_env(&ds.env_id)?;
    let (cfg, notes) = resolve_config(a.config.as_deref(), &a.overrides)?;
    let resuming = a.resume && a.out.join(MANIFEST_FILE).is_file();
    let mut manifest = if resuming {
        let m = RunManifest::read(&a.out)?;
        if m.dataset_sha256 != sha256_file(&a.dataset)? {
            return Err(CliError::Usage("dataset differs from the one recorded in the run manifest".into()));
        }
        m
    } else {
        let m = RunManifest::new(&cfg, &a.dataset, notes)?;
        m.write(&a.out)?;
        m
    };
    for n in &manifest.notes {
        log::warn!("{n}");
    }
    let opts = RunOptions {
        out: Some(a.out.clone()),
        resume: a.resume,
        env: Some(env.as_ref()),
    };
    let out = trainer::run(&manifest.config, &ds, &opts)?;
    manifest.finished_unix = Some(now());
    manifest.write(&a.out)?;
    let scores: Vec<f64> = out.evals.iter().map(|e| e.normalized).collect();
    if !scores.is_empty() {
        println!(
            "final RAT {:.3}, OMS {:.3}",
            paodp::eval::rat(&scores)?,
            paodp::eval::oms(&scores)?
        );
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let manifest = RunManifest::read(&a.run)?;
    let ckpt = match &a.checkpoint {
        Some(p) if p.is_file() => p.clone(),
        Some(p) => return Err(CliError::Usage(format!("checkpoint {} does not exist", p.display()))),
        None => match latest_checkpoint(&a.run)? {
            Some((_, p)) => p,
            None => return Err(CliError::Usage(format!("no checkpoint in {}", a.run.display()))),
        },
    };
    let ds = load_dataset(&manifest.dataset)?;
    let env = make_env(&ds.env_id)?;
    let state = TrainState::load(&ckpt)?;
    let (raw, normalized) = trainer::evaluate(&state, &ds, env.as_ref(), a.episodes, a.seed)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": ckpt,
            "epoch": state.epoch,
            "episodes": a.episodes,
            "seed": a.seed,
            "raw": raw,
            "normalized": normalized,
        })
    );
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let env = make_env(&ds.env_id)?;
    let (base, notes) = resolve_config(a.config.as_deref(), &a.overrides)?;
    for value in &a.values {
        for &seed in &a.seeds {
            let mut cfg = base.clone();
            cfg.set(a.axis.name(), value)?;
            cfg.seed = seed;
            cfg.validate()?;
            let mut m = RunManifest::new(&cfg, &a.dataset, notes.clone())?;
            m.sweep = Some(SweepTag {
                axis: a.axis.to_string(),
                value: value.clone(),
            });
            m.write(&a.out.join(format!("{}_{}_s{}", a.axis, value, seed)))?;
        }
    }
    let result = ablation_sweep(&base, a.axis, &a.values, &a.seeds, &ds, env.as_ref(), Some(&a.out))?;
    result.write_long_csv(a.out.join("sweep_long.csv"))?;
    result.write_summary_csv(a.out.join("sweep_summary.csv"))?;
    for s in result.summary() {
        println!(
            "{}={}: RAT {:.3} ± {:.3}, OMS {:.3} ± {:.3} over {} seeds",
            a.axis, s.value, s.rat_mean, s.rat_std, s.oms_mean, s.oms_std, s.seeds
        );
    }
    Ok(())
}

fn run_dirs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for root in roots {
        if root.join(METRICS_FILE).is_file() {
            dirs.push(root.clone());
            continue;
        }
        let entries = fs::read_dir(root).map_err(|e| usage_io(root, e))?;
        let mut children: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(METRICS_FILE).is_file())
            .collect();
        children.sort();
        if children.is_empty() {
            return Err(CliError::Usage(format!("{} holds no runs", root.display())));
        }
        dirs.extend(children);
    }
    Ok(dirs)
}

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    // label -> per-seed score sequences
    let mut groups: Vec<(String, Vec<(Vec<u64>, Vec<f64>)>)> = Vec::new();
    for dir in run_dirs(&a.runs)? {
        let label = match RunManifest::read(&dir).ok().and_then(|m| m.sweep) {
            Some(tag) => tag.value,
            None => dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        let rows = read_metrics(&dir.join(METRICS_FILE), u64::MAX)?;
        let (epochs, scores): (Vec<u64>, Vec<f64>) =
            rows.iter().filter_map(|m| m.eval_score.map(|s| (m.epoch, s))).unzip();
        if scores.is_empty() {
            log::warn!("{} has no evaluations; skipped", dir.display());
            continue;
        }
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, runs)) => runs.push((epochs, scores)),
            None => groups.push((label, vec![(epochs, scores)])),
        }
    }
    if groups.is_empty() {
        return Err(CliError::Usage("no evaluated runs to plot".into()));
    }
    let mut curves = Vec::new();
    let mut summary = String::from("label,runs,final_rat_mean,final_rat_std\n");
    for (label, runs) in &groups {
        let len = runs.iter().map(|(e, _)| e.len()).min().unwrap_or(0);
        let rats: Vec<Vec<f64>> = runs.iter().map(|(_, s)| rat_curve(&s[..len])).collect();
        let points = (0..len)
            .map(|i| {
                let mean = rats.iter().map(|r| r[i]).sum::<f64>() / rats.len() as f64;
                (runs[0].0[i] as f64, mean)
            })
            .collect();
        let finals: Vec<f64> = rats.iter().map(|r| r[len - 1]).collect();
        let (m, s) = paodp::eval::mean_std(&finals);
        summary.push_str(&format!("{label},{},{m},{s}\n", runs.len()));
        curves.push(Curve {
            label: label.clone(),
            points,
        });
    }
    trainer::write_text(&a.out, &render_svg(&a.title, "epoch", "RAT", &curves))?;
    let csv_path = a.out.with_extension("csv");
    trainer::write_text(&csv_path, &summary)?;
    println!("wrote {} and {}", a.out.display(), csv_path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
