//! Training, evaluation, experiment sweeps and their file outputs.

mod data;
mod eval;
mod model;
mod plot;
mod records;
mod selftest;
mod sweep;
mod train;

pub use data::{observe, observe_split, PreparedData};
pub use eval::{delay_dictionary, evaluate, EvalResult};
pub use model::{ModelHead, TrainedModel};
pub use plot::{emit_plot, emit_plots, line_plot_svg};
pub use records::{emit_csv, parse_csv, sort_records, ExperimentRecord, Metric, RecordKey, CSV_HEADER};
pub use selftest::{end_to_end_gradient_check, estimator_oracles, primitive_gradient_checks, run_selftest, Check};
pub use sweep::{sweep, write_history, Family, SweepSpec};
pub use train::{train, EpochStats, SnrPolicy, TrainOutcome, TrainSpec};

use std::fmt;
use std::str::FromStr;

use crate::baselines::{BaselinePattern, MusicVariant};
use crate::config::TaskKind;
use crate::error::{Error, Result};

/// Delay grid points per subcarrier.
pub const DELAY_OVERSAMPLING: usize = 4;

/// Every pipeline the harness can train or evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    SemS,
    MseRecon,
    UniformPilotDL,
    PerfectCSI,
    FeatureSvmUniform,
    FeatureSvmOptimized,
    Omp,
    UpMusic,
    RpMusic,
    OpMusic,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::SemS,
        Method::MseRecon,
        Method::UniformPilotDL,
        Method::PerfectCSI,
        Method::FeatureSvmUniform,
        Method::FeatureSvmOptimized,
        Method::Omp,
        Method::UpMusic,
        Method::RpMusic,
        Method::OpMusic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SemS => "SemS",
            Method::MseRecon => "MseRecon",
            Method::UniformPilotDL => "UniformPilotDL",
            Method::PerfectCSI => "PerfectCSI",
            Method::FeatureSvmUniform => "FeatureSVM-UP",
            Method::FeatureSvmOptimized => "FeatureSVM-OP",
            Method::Omp => "OMP",
            Method::UpMusic => "UP-MUSIC",
            Method::RpMusic => "RP-MUSIC",
            Method::OpMusic => "OP-MUSIC",
        }
    }

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&m| m == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Self::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown method code {c}")))
    }

    /// Whether the method can be used for the task.
    pub fn supports(self, task: TaskKind) -> bool {
        match self {
            Method::FeatureSvmUniform | Method::FeatureSvmOptimized => task == TaskKind::Classification,
            Method::Omp | Method::UpMusic | Method::RpMusic | Method::OpMusic => task == TaskKind::DelayEstimation,
            _ => true,
        }
    }

    /// Estimators without a training phase.
    pub fn is_estimator(self) -> bool {
        matches!(self, Method::Omp | Method::UpMusic | Method::RpMusic | Method::OpMusic)
    }

    pub fn music_variant(self) -> Option<MusicVariant> {
        match self {
            Method::UpMusic => Some(MusicVariant::UniformPilots),
            Method::RpMusic => Some(MusicVariant::RandomPilots),
            Method::OpMusic => Some(MusicVariant::OptimizedPilots),
            _ => None,
        }
    }

    /// Fixed layout of the non-learned pilot methods.
    pub fn fixed_pattern(self) -> Option<BaselinePattern> {
        match self {
            Method::UniformPilotDL | Method::FeatureSvmUniform => Some(BaselinePattern::Uniform),
            Method::FeatureSvmOptimized => Some(BaselinePattern::DopplerColumns),
            Method::Omp => Some(BaselinePattern::Optimized),
            m => m.music_variant().map(MusicVariant::pattern_kind),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name().to_ascii_lowercase().replace('-', "") == key)
            .or(match key.as_str() {
                "featuresvm" => Some(Method::FeatureSvmOptimized),
                "mserecondl" => Some(Method::MseRecon),
                _ => None,
            })
            .ok_or_else(|| Error::Validation {
                field: "method".into(),
                reason: format!("unknown method {s:?}"),
            })
    }
}
