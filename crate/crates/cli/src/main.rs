use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use spikefuse::checkpoint::Checkpoint;
use spikefuse::config::RunConfig;
use spikefuse::data::{generate_raw, load_dataset, write_samples, Dataset, SynthConfig};
use spikefuse::model::{Model, Toggles};
use spikefuse::trainer::{ablate, evaluate, train};

const SEED_ENV: &str = "SPIKEFUSE_SEED";
const SNAPSHOT_NAME: &str = "config.resolved";
const CHECKPOINT_NAME: &str = "checkpoint.bin";
const METRICS_NAME: &str = "metrics.log";

#[derive(Parser, Debug)]
#[command(name = "spikefuse", version, about = "Spiking skeleton + event action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file of `section.key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for all randomness; falls back to $SPIKEFUSE_SEED, then the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        samples_per_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Optional validation set reported each epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the cumulative component chain.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer operation and energy estimate for a checkpoint.
    EnergyReport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory whose samples drive the measured firing rates.
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(v.trim().parse::<u64>().with_context(|| format!("{SEED_ENV}=`{v}` is not an integer"))?),
        Err(_) => None,
    };
    if let Some(seed) = common.seed.or(env_seed) {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

/// Writes the configuration with a single timestamp line on top.
fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let text = format!("# written_at_unix={secs}\n{}", cfg.to_text());
    fs::write(dir.join(SNAPSHOT_NAME), text)?;
    Ok(())
}

fn load_for(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let m = &cfg.model;
    load_dataset(dir, m.time, m.height, m.width).with_context(|| format!("loading dataset {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, classes, samples_per_class, out } => {
            let mut cfg = resolve(&common)?;
            if let Some(c) = classes {
                cfg.data.classes = c;
            }
            if let Some(n) = samples_per_class {
                cfg.data.samples_per_class = n;
            }
            cfg.validate()?;
            let synth = SynthConfig::toy(cfg.data.classes, cfg.data.samples_per_class);
            let raw = generate_raw(&synth, cfg.train.seed)?;
            fs::create_dir_all(&out)?;
            let manifest = write_samples(&out, &raw, cfg.data.classes)?;
            write_snapshot(&out, &cfg)?;
            println!("samples={} classes={} out={}", manifest.entries.len(), manifest.classes, out.display());
        }
        Command::Train { common, data, val, out } => {
            let mut cfg = resolve(&common)?;
            let train_set = load_for(&cfg, &data)?;
            cfg.model.classes = train_set.classes;
            cfg.validate()?;
            let val_set = val.map(|v| load_for(&cfg, &v)).transpose()?;
            fs::create_dir_all(&out)?;
            write_snapshot(&out, &cfg)?;
            let (model, mut store) = Model::new(cfg.model.clone(), cfg.train.seed)?;
            let mut log = String::new();
            let result = train(&model, &mut store, &cfg.train, &train_set, val_set.as_ref(), |m| {
                println!("{}", m.to_line());
                let _ = writeln!(log, "{}", m.to_line());
            });
            fs::write(out.join(METRICS_NAME), &log)?;
            result?;
            Checkpoint::capture(&cfg, &store).save(&out.join(CHECKPOINT_NAME))?;
            let acc = evaluate(&model, &store, &train_set)?.accuracy;
            println!("train_accuracy={acc:?} checkpoint={}", out.join(CHECKPOINT_NAME).display());
        }
        Command::Eval { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let (model, store) = ck.restore()?;
            let set = load_for(&ck.config, &data)?;
            if set.classes != ck.config.model.classes {
                bail!("dataset has {} classes, checkpoint expects {}", set.classes, ck.config.model.classes);
            }
            let r = evaluate(&model, &store, &set)?;
            let text = format!(
                "samples={}\naccuracy={:?}\nce={:?}\nfr_b1={:?}\nfr_b2={:?}\n",
                set.len(),
                r.accuracy,
                r.ce,
                r.fr_b1,
                r.fr_b2
            );
            print!("{text}");
            if let Some(out) = out {
                fs::create_dir_all(&out)?;
                fs::write(out.join("eval.txt"), text)?;
                write_snapshot(&out, &ck.config)?;
            }
        }
        Command::Ablate { common, data, test, out } => {
            let mut cfg = resolve(&common)?;
            let train_set = load_for(&cfg, &data)?;
            let test_set = load_for(&cfg, &test)?;
            cfg.model.classes = train_set.classes;
            cfg.validate()?;
            fs::create_dir_all(&out)?;
            write_snapshot(&out, &cfg)?;
            let grid: Vec<(String, Toggles)> = Toggles::chain().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
            let rows = ablate(&cfg.model, &cfg.train, &grid, &train_set, &test_set)?;
            let mut text = String::new();
            for r in &rows {
                println!("{}", r.to_line());
                let _ = writeln!(text, "{}", r.to_line());
            }
            fs::write(out.join("ablation.txt"), text)?;
        }
        Command::EnergyReport { checkpoint, probe, out } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let (model, store) = ck.restore()?;
            let set = load_for(&ck.config, &probe)?;
            if set.is_empty() {
                bail!("probe set {} is empty", probe.display());
            }
            let all: Vec<usize> = (0..set.len()).collect();
            let report = model.energy(&store, &set.batch(&all)?)?;
            print!("{}", report.to_text());
            if let Some(out) = out {
                fs::create_dir_all(&out)?;
                fs::write(out.join("energy.txt"), report.to_kv())?;
                write_snapshot(&out, &ck.config)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
