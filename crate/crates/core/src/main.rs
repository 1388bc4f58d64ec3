use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use sems::channel::ScenarioFlags;
use sems::config::{LabConfig, TaskKind};
use sems::dataset::{generate_dataset, load_dataset};
use sems::error::{Error, Result};
use sems::harness::{
    emit_plots, evaluate, parse_csv, run_selftest, sweep, train, write_history, Family, Method, PreparedData,
    SweepSpec, TrainSpec, TrainedModel,
};

#[derive(Parser)]
#[command(name = "sems", version, about = "Task-oriented pilot design lab for OFDM sensing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// INI configuration; built-in desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the 30,000-frame profile instead of desk scale.
    #[arg(long)]
    full_scale: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<LabConfig> {
        let base = match &self.config {
            Some(p) if !p.exists() => return Err(Error::MissingArtifact(p.display().to_string())),
            Some(p) => LabConfig::from_file(p)?,
            None => LabConfig::default(),
        };
        Ok(if self.full_scale {
            LabConfig {
                frame: base.frame,
                ..LabConfig::full_scale()
            }
        } else {
            base
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled channel dataset.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// One path per target.
        #[arg(long)]
        single_path: bool,
        /// Add static clutter paths.
        #[arg(long)]
        clutter: bool,
        /// Drop the micro-Doppler component.
        #[arg(long)]
        no_micro_doppler: bool,
    },
    /// Train one method on a dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Path count for sparse estimators.
        #[arg(long, default_value_t = 1)]
        paths: usize,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Omit for a noiseless evaluation.
        #[arg(long, allow_hyphen_values = true)]
        snr_db: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run or resume an experiment family.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        family: Family,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Comma-separated method subset.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Fail instead of generating missing datasets and models.
        #[arg(long)]
        no_build: bool,
    },
    /// Render SVG plots from a records CSV.
    Plot {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Gradient checks and estimator oracles.
    Selftest,
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => e.into(),
    })
}

/// The dataset plus the frame configuration it was generated under.
fn load_data(path: &Path, lab: &LabConfig) -> Result<PreparedData> {
    let ds = load_dataset(path)?;
    if !(0..8).any(|b| ds.check_config(&lab.frame, ScenarioFlags::from_bits(b)).is_ok()) {
        return Err(Error::validation("data", "dataset was generated under a different frame configuration"));
    }
    PreparedData::new(&ds, &lab.frame)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            cfg,
            task,
            frames,
            out,
            seed,
            single_path,
            clutter,
            no_micro_doppler,
        } => {
            let lab = cfg.load()?;
            let scenario = ScenarioFlags {
                single_path,
                clutter,
                micro_doppler_disabled: no_micro_doppler,
            };
            let frames = frames.unwrap_or(lab.train.frames);
            let t = Instant::now();
            let ds = generate_dataset(&lab.frame, task, frames, scenario, seed)?;
            ds.write(&out)?;
            println!("wrote {} frames to {} in {:.1?}", ds.len(), out.display(), t.elapsed());
        }
        Command::Train {
            cfg,
            task,
            method,
            data,
            out,
            seed,
            paths,
        } => {
            let lab = cfg.load()?;
            let data = load_data(&data, &lab)?;
            let mut spec = TrainSpec::from_config(&lab, task, method, seed)?;
            spec.k_paths = paths;
            let t = Instant::now();
            let outcome = train(&spec, &data)?;
            outcome.model.save(&out)?;
            if !outcome.history.is_empty() {
                write_history(&out.with_extension("history.csv"), &outcome.history)?;
            }
            for e in &outcome.history {
                println!(
                    "epoch {:>3}  loss {:.4}  val {:.4}  tau {:.3}",
                    e.epoch, e.train_loss, e.val_score, e.temperature
                );
            }
            println!("saved {} in {:.1?}", out.display(), t.elapsed());
        }
        Command::Eval {
            cfg,
            ckpt,
            data,
            snr_db,
            seed,
        } => {
            let model = TrainedModel::load(&ckpt)?;
            let data = load_data(&data, &cfg.load()?)?;
            if (data.cfg.n_slots, data.cfg.n_subcarriers) != (model.n_slots, model.n_subcarriers) {
                return Err(Error::validation("data", "grid size differs from the checkpoint"));
            }
            let result = evaluate(&model, &data, &data.splits.test, snr_db, seed)?;
            for (metric, value) in &result.metrics {
                println!("{metric}\t{value}");
            }
        }
        Command::Sweep {
            cfg,
            family,
            out_dir,
            workers,
            methods,
            no_build,
        } => {
            let lab = cfg.load()?;
            std::fs::create_dir_all(&out_dir)?;
            let mut spec = SweepSpec::new(family, &lab, &out_dir);
            spec.workers = workers.max(1);
            spec.build_missing = !no_build;
            if !methods.is_empty() {
                spec.methods = methods;
            }
            let t = Instant::now();
            let added = sweep(&spec)?;
            println!(
                "{}: {} new records in {} ({:.1?})",
                family,
                added.len(),
                spec.records_path().display(),
                t.elapsed()
            );
        }
        Command::Plot { records, out_dir } => {
            let records = parse_csv(open(&records)?)?;
            std::fs::create_dir_all(&out_dir)?;
            for p in emit_plots(&records, &out_dir)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Selftest => {
            let t = Instant::now();
            let checks = run_selftest(&LabConfig::default().frame)?;
            let mut failed = 0;
            for c in &checks {
                println!("{}  {:<48} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            println!("{} checks, {failed} failed, {:.1?}", checks.len(), t.elapsed());
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} self-test checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
