use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;

use super::data::PreparedData;
use super::eval::evaluate;
use super::model::TrainedModel;
use super::records::{emit_csv, parse_csv, ExperimentRecord, Metric, RecordKey};
use super::train::{train, EpochStats, TrainSpec};
use super::Method;
use crate::channel::{ScenarioFlags, PATHS_PER_TARGET};
use crate::config::{LabConfig, SeedSpec, Stream, TaskKind};
use crate::dataset::{generate_dataset, load_dataset_for};
use crate::decoders::write_latent_csv;
use crate::encoder::pattern_svg;
use crate::error::{Error, Result};

/// The experiment families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Classification,
    NoMicroDoppler,
    Clutter,
    DelaySingle,
    DelayMulti,
    Budget,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Classification,
        Family::NoMicroDoppler,
        Family::Clutter,
        Family::DelaySingle,
        Family::DelayMulti,
        Family::Budget,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Classification => "fig4_cls",
            Family::NoMicroDoppler => "fig5a_no_udoppler",
            Family::Clutter => "fig5b_clutter",
            Family::DelaySingle => "fig7_delay_single",
            Family::DelayMulti => "fig7_delay_multi",
            Family::Budget => "fig8_budget",
        }
    }

    pub fn task(self) -> TaskKind {
        match self {
            Family::Classification | Family::NoMicroDoppler | Family::Clutter => TaskKind::Classification,
            _ => TaskKind::DelayEstimation,
        }
    }

    pub fn scenario(self) -> ScenarioFlags {
        ScenarioFlags {
            micro_doppler_disabled: self == Family::NoMicroDoppler,
            clutter: self == Family::Clutter,
            single_path: self == Family::DelaySingle,
        }
    }

    pub fn default_methods(self) -> Vec<Method> {
        match self {
            Family::Classification | Family::NoMicroDoppler | Family::Clutter => vec![
                Method::PerfectCSI,
                Method::SemS,
                Method::MseRecon,
                Method::UniformPilotDL,
                Method::FeatureSvmUniform,
                Method::FeatureSvmOptimized,
            ],
            Family::DelaySingle | Family::DelayMulti => {
                vec![Method::SemS, Method::Omp, Method::UpMusic, Method::RpMusic, Method::OpMusic]
            }
            Family::Budget => vec![Method::SemS],
        }
    }

    /// Sources handed to OMP and MUSIC: the known path count of a target.
    pub fn k_paths(self) -> usize {
        if self == Family::DelaySingle {
            1
        } else {
            PATHS_PER_TARGET
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| Error::Validation {
            field: "family".into(),
            reason: format!("unknown experiment family {s:?}"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub family: Family,
    pub lab: LabConfig,
    pub snr_grid_db: Vec<f64>,
    pub pilot_budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub out_dir: PathBuf,
    pub workers: usize,
    /// Generate datasets and train models that are not on disk yet.
    pub build_missing: bool,
}

impl SweepSpec {
    /// Family defaults from a configuration: only the budget family varies
    /// the pilot count.
    pub fn new(family: Family, lab: &LabConfig, out_dir: &Path) -> Self {
        let pilot_budgets = if family == Family::Budget {
            lab.sweep.pilot_budgets.clone()
        } else {
            vec![lab.train.n_pilots]
        };
        Self {
            family,
            lab: lab.clone(),
            snr_grid_db: lab.sweep.snr_grid_db.clone(),
            pilot_budgets,
            seeds: lab.sweep.seeds.clone(),
            methods: family.default_methods(),
            out_dir: out_dir.to_path_buf(),
            workers: 1,
            build_missing: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("snr_grid_db", self.snr_grid_db.is_empty()),
            ("pilot_budgets", self.pilot_budgets.is_empty()),
            ("seeds", self.seeds.is_empty()),
            ("methods", self.methods.is_empty()),
        ] {
            if empty {
                return Err(Error::validation(name, "grid must be nonempty"));
            }
        }
        if let Some(m) = self.methods.iter().find(|m| !m.supports(self.family.task())) {
            return Err(Error::Validation {
                field: "methods".into(),
                reason: format!("{m} does not apply to {}", self.family),
            });
        }
        Ok(())
    }

    pub fn records_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.csv", self.family.name()))
    }

    fn metrics(&self, method: Method) -> Vec<Metric> {
        match self.family.task() {
            TaskKind::Classification if method_has_latent(method) => vec![Metric::Accuracy, Metric::MacroF1, Metric::JDisc],
            TaskKind::Classification => vec![Metric::Accuracy, Metric::MacroF1],
            TaskKind::DelayEstimation => vec![Metric::MaeBins],
        }
    }
}

fn method_has_latent(m: Method) -> bool {
    matches!(m, Method::SemS | Method::MseRecon | Method::UniformPilotDL | Method::PerfectCSI)
}

/// One trained model and all its evaluation points.
#[derive(Debug, Clone, Copy)]
struct Cell {
    method: Method,
    n_pilots: usize,
    seed: u64,
}

fn snr_key(snr: f64) -> i64 {
    (snr * 100.0).round() as i64
}

fn dataset_path(spec: &SweepSpec, seed: u64) -> PathBuf {
    let s = spec.family.scenario();
    spec.out_dir.join("data").join(format!(
        "{}_s{}_seed{seed}_n{}.bin",
        spec.family.task().name(),
        s.bits(),
        spec.lab.train.frames
    ))
}

fn model_stem(spec: &SweepSpec, c: &Cell) -> String {
    format!(
        "{}_{}_np{}_seed{}",
        spec.family.name(),
        c.method.name().replace('-', "_"),
        c.n_pilots,
        c.seed
    )
}

/// Seed of the evaluation noise, shared by all methods of a sweep seed.
pub fn eval_seed(seed: u64) -> u64 {
    SeedSpec::new(seed).stream(Stream::Noise, 1 << 56)
}

/// Training-run seed; each method and budget gets its own initialization.
pub fn train_seed(seed: u64, method: Method, n_pilots: usize) -> u64 {
    SeedSpec::new(seed).stream(Stream::Init, (1 << 40) + ((method.code() as u64) << 20) + n_pilots as u64)
}

fn load_or_build_data(spec: &SweepSpec, seed: u64, lock: &Mutex<()>) -> Result<PreparedData> {
    let path = dataset_path(spec, seed);
    let cfg = &spec.lab.frame;
    let scenario = spec.family.scenario();
    // one generator per file; other workers wait for it
    let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
    let ds = match load_dataset_for(&path, cfg, scenario) {
        Ok(ds) => ds,
        Err(Error::MissingArtifact(_)) if spec.build_missing => {
            let ds = generate_dataset(cfg, spec.family.task(), spec.lab.train.frames, scenario, seed)?;
            fs::create_dir_all(path.parent().unwrap())?;
            let tmp = path.with_extension("tmp");
            ds.write(&tmp)?;
            fs::rename(&tmp, &path)?;
            ds
        }
        Err(Error::MissingArtifact(p)) => {
            return Err(Error::MissingArtifact(format!("dataset {p} for {} seed {seed}", spec.family)))
        }
        Err(e) => return Err(e),
    };
    PreparedData::new(&ds, cfg)
}

pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_score", "temperature", "pattern_cells"])?;
    for e in history {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_score.to_string(),
            e.temperature.to_string(),
            e.pattern_cells.map_or(String::new(), |c| c.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn load_or_train(spec: &SweepSpec, cell: &Cell, data: &PreparedData) -> Result<TrainedModel> {
    let dir = spec.out_dir.join("models");
    let stem = model_stem(spec, cell);
    let path = dir.join(format!("{stem}.ckpt"));
    if path.exists() {
        return TrainedModel::load(&path);
    }
    if !spec.build_missing {
        return Err(Error::MissingArtifact(format!(
            "model for cell {} {} N_p={} seed {} ({})",
            spec.family,
            cell.method,
            cell.n_pilots,
            cell.seed,
            path.display()
        )));
    }
    let mut lab = spec.lab.clone();
    lab.train.n_pilots = cell.n_pilots;
    let mut ts = TrainSpec::from_config(&lab, spec.family.task(), cell.method, train_seed(cell.seed, cell.method, cell.n_pilots))?;
    ts.k_paths = spec.family.k_paths();
    let outcome = train(&ts, data)?;
    fs::create_dir_all(&dir)?;
    if !outcome.history.is_empty() {
        write_history(&dir.join(format!("{stem}_history.csv")), &outcome.history)?;
    }
    if let Some(p) = &outcome.model.pattern {
        p.write_csv(&dir.join(format!("{stem}_pattern.csv")))?;
        fs::write(dir.join(format!("{stem}_pattern.svg")), pattern_svg(p, &stem))?;
    }
    let tmp = path.with_extension("tmp");
    outcome.model.save(&tmp)?;
    fs::rename(&tmp, &path)?;
    Ok(outcome.model)
}

/// SNR at which latent features are exported.
const LATENT_SNR_DB: f64 = 10.0;

fn run_cell(spec: &SweepSpec, cell: &Cell, data: &PreparedData) -> Result<Vec<ExperimentRecord>> {
    let model = load_or_train(spec, cell, data)?;
    let test = &data.splits.test;
    let mut out = Vec::new();
    for &snr in &spec.snr_grid_db {
        let r = evaluate(&model, data, test, Some(snr), eval_seed(cell.seed))?;
        if snr_key(snr) == snr_key(LATENT_SNR_DB) && !r.latent.is_empty() {
            let dir = spec.out_dir.join("latent");
            fs::create_dir_all(&dir)?;
            write_latent_csv(&dir.join(format!("{}.csv", model_stem(spec, cell))), &r.latent)?;
        }
        for metric in spec.metrics(cell.method) {
            if let Some(value) = r.get(metric) {
                out.push(ExperimentRecord {
                    experiment: spec.family.name().to_string(),
                    task: spec.family.task(),
                    method: cell.method,
                    snr_db: snr,
                    n_pilots: cell.n_pilots,
                    seed: cell.seed,
                    metric,
                    value,
                });
            }
        }
    }
    Ok(out)
}

fn read_existing(path: &Path) -> Result<Vec<ExperimentRecord>> {
    match fs::File::open(path) {
        Ok(f) => parse_csv(std::io::BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

/// Evaluates the cross product `method × budget × seed × SNR`. Cells whose
/// records are already in the family's CSV are skipped; every finished cell
/// rewrites the file atomically. Returns the newly computed records.
pub fn sweep(spec: &SweepSpec) -> Result<Vec<ExperimentRecord>> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir)?;
    let path = spec.records_path();
    let existing = read_existing(&path)?;
    let done: BTreeSet<RecordKey> = existing.iter().map(ExperimentRecord::key).collect();
    let family = spec.family.name();
    let mut cells = Vec::new();
    for &seed in &spec.seeds {
        for &n_pilots in &spec.pilot_budgets {
            for &method in &spec.methods {
                let complete = spec.snr_grid_db.iter().all(|&snr| {
                    spec.metrics(method).into_iter().filter(|&m| m != Metric::JDisc).all(|metric| {
                        done.contains(&RecordKey {
                            experiment: family.to_string(),
                            method,
                            n_pilots,
                            snr_centi_db: snr_key(snr),
                            seed,
                            metric,
                        })
                    })
                });
                if !complete {
                    cells.push(Cell { method, n_pilots, seed });
                }
            }
        }
    }
    if cells.is_empty() {
        return Ok(Vec::new());
    }
    let all = Mutex::new(existing);
    let fresh = Mutex::new(Vec::new());
    let data_lock = Mutex::new(());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers.max(1))
        .build()
        .map_err(|e| Error::Format(e.to_string()))?;
    // cells of a seed share one dataset, so group by seed
    let seeds: Vec<u64> = spec.seeds.clone();
    pool.install(|| {
        seeds.par_iter().try_for_each(|&seed| -> Result<()> {
            let mine: Vec<&Cell> = cells.iter().filter(|c| c.seed == seed).collect();
            if mine.is_empty() {
                return Ok(());
            }
            let data = load_or_build_data(spec, seed, &data_lock)?;
            mine.par_iter().try_for_each(|cell| -> Result<()> {
                let records = run_cell(spec, cell, &data)?;
                let keys: BTreeSet<RecordKey> = records.iter().map(ExperimentRecord::key).collect();
                let mut all = all.lock().unwrap_or_else(|e| e.into_inner());
                all.retain(|r| !keys.contains(&r.key()));
                all.extend(records.iter().cloned());
                let tmp = path.with_extension("csv.tmp");
                emit_csv(&all, &tmp)?;
                fs::rename(&tmp, &path)?;
                fresh.lock().unwrap_or_else(|e| e.into_inner()).extend(records);
                Ok(())
            })
        })
    })?;
    let mut fresh = fresh.into_inner().unwrap_or_else(|e| e.into_inner());
    super::records::sort_records(&mut fresh);
    Ok(fresh)
}
