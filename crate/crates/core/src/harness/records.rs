use std::cmp::Ordering;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use super::Method;
use crate::config::TaskKind;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "experiment,task,method,snr_db,n_pilots,seed,metric,value";

/// The closed set of reported metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Accuracy,
    MacroF1,
    MaeBins,
    JDisc,
    Loss,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Accuracy, Metric::MacroF1, Metric::MaeBins, Metric::JDisc, Metric::Loss];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro_f1",
            Metric::MaeBins => "mae_bins",
            Metric::JDisc => "j_disc",
            Metric::Loss => "loss",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation {
                field: "metric".into(),
                reason: format!("{s:?} is not a registered metric"),
            })
    }
}

/// One evaluated cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub task: TaskKind,
    pub method: Method,
    pub snr_db: f64,
    pub n_pilots: usize,
    pub seed: u64,
    pub metric: Metric,
    pub value: f64,
}

/// Identity of a record without its value; SNR stored in hundredths of a dB.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub experiment: String,
    pub method: Method,
    pub n_pilots: usize,
    pub snr_centi_db: i64,
    pub seed: u64,
    pub metric: Metric,
}

impl ExperimentRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            experiment: self.experiment.clone(),
            method: self.method,
            n_pilots: self.n_pilots,
            snr_centi_db: (self.snr_db * 100.0).round() as i64,
            seed: self.seed,
            metric: self.metric,
        }
    }
}

pub fn sort_records(records: &mut [ExperimentRecord]) {
    records.sort_by(|a, b| a.key().cmp(&b.key()).then(a.value.partial_cmp(&b.value).unwrap_or(Ordering::Equal)));
}

fn task_name(t: TaskKind) -> &'static str {
    match t {
        TaskKind::Classification => "classification",
        TaskKind::DelayEstimation => "delay",
    }
}

fn parse_task(s: &str) -> Result<TaskKind> {
    match s {
        "classification" => Ok(TaskKind::Classification),
        "delay" => Ok(TaskKind::DelayEstimation),
        _ => Err(Error::Format(format!("unknown task {s:?}"))),
    }
}

/// Writes records sorted by key, so the file does not depend on the order
/// in which cells finished.
pub fn emit_csv(records: &[ExperimentRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::validation("records", "nothing to write"));
    }
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER.split(','))?;
    for r in &sorted {
        w.write_record([
            r.experiment.clone(),
            task_name(r.task).to_string(),
            r.method.name().to_string(),
            r.snr_db.to_string(),
            r.n_pilots.to_string(),
            r.seed.to_string(),
            r.metric.name().to_string(),
            r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn field<T: FromStr>(row: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    row.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad {name} field in record {:?}", row)))
}

pub fn parse_csv(reader: impl Read) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<&str> = r.headers()?.iter().collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Format(format!("unexpected header {:?}", header.join(","))));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        out.push(ExperimentRecord {
            experiment: row.get(0).unwrap_or_default().to_string(),
            task: parse_task(row.get(1).unwrap_or_default())?,
            method: row.get(2).unwrap_or_default().parse()?,
            snr_db: field(&row, 3, "snr_db")?,
            n_pilots: field(&row, 4, "n_pilots")?,
            seed: field(&row, 5, "seed")?,
            metric: row.get(6).unwrap_or_default().parse()?,
            value: field(&row, 7, "value")?,
        });
    }
    Ok(out)
}
