use std::path::Path;

use super::Method;
use crate::ad::{ParamSet, Tensor};
use crate::baselines::LinearSvmModel;
use crate::config::TaskKind;
use crate::decoders::{ClassifierParams, RegressorParams};
use crate::encoder::{PilotPattern, SelectorParams, TemperatureSchedule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelHead {
    Classifier(ClassifierParams),
    Regressor(RegressorParams),
    Svm(LinearSvmModel),
    /// OMP or MUSIC; nothing learned.
    Estimator,
}

/// Everything needed to evaluate a method on new frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub task: TaskKind,
    pub method: Method,
    pub n_pilots: usize,
    pub n_slots: usize,
    pub n_subcarriers: usize,
    /// Source count handed to OMP and MUSIC.
    pub k_paths: usize,
    /// `None` when the decoder sees the true channel.
    pub pattern: Option<PilotPattern>,
    pub selector: Option<SelectorParams>,
    pub head: ModelHead,
}

impl TrainedModel {
    pub fn to_param_set(&self) -> ParamSet {
        let mut ps = ParamSet::default();
        ps.push(
            "meta",
            Tensor::from_slice(&[
                self.task.code() as f64,
                self.method.code() as f64,
                self.n_pilots as f64,
                self.n_slots as f64,
                self.n_subcarriers as f64,
                self.k_paths as f64,
            ]),
        );
        if let Some(p) = &self.pattern {
            let flat: Vec<f64> = p.cells.iter().map(|&(n, m)| (n * p.n_subcarriers + m) as f64).collect();
            ps.push("pattern", Tensor::from_slice(&flat));
        }
        if let Some(s) = &self.selector {
            ps.push("selector.scores", s.scores.clone());
            ps.push(
                "selector.schedule",
                Tensor::from_slice(&[s.schedule.init, s.schedule.decay, s.schedule.min]),
            );
        }
        match &self.head {
            ModelHead::Classifier(c) => ps.entries.extend(c.to_param_set("cls").entries),
            ModelHead::Regressor(r) => ps.entries.extend(r.to_param_set("reg").entries),
            ModelHead::Svm(svm) => {
                ps.push("svm.mean", Tensor::from_slice(&svm.feature_mean));
                ps.push("svm.scale", Tensor::from_slice(&svm.feature_scale));
                let d = svm.feature_mean.len() + 1;
                ps.push(
                    "svm.weights",
                    Tensor {
                        shape: vec![svm.weights.len(), d],
                        data: svm.weights.concat(),
                    },
                );
            }
            ModelHead::Estimator => {}
        }
        ps
    }

    pub fn from_param_set(ps: &ParamSet) -> Result<Self> {
        let meta = ps.get("meta")?;
        if meta.len() != 6 {
            return Err(Error::Format("malformed checkpoint metadata".into()));
        }
        let task = TaskKind::from_code(meta.data[0] as u8)?;
        let method = Method::from_code(meta.data[1] as u8)?;
        let (n_pilots, n_slots, n_subcarriers) = (meta.data[2] as usize, meta.data[3] as usize, meta.data[4] as usize);
        let k_paths = meta.data[5] as usize;
        let pattern = match ps.get("pattern") {
            Ok(t) => Some(PilotPattern::from_flat(
                n_slots,
                n_subcarriers,
                &t.data.iter().map(|&v| v as usize).collect::<Vec<_>>(),
            )?),
            Err(_) => None,
        };
        let selector = match ps.get("selector.scores") {
            Ok(scores) => {
                let s = ps.get("selector.schedule")?;
                Some(SelectorParams {
                    scores: scores.clone(),
                    n_pilots,
                    schedule: TemperatureSchedule {
                        init: s.data[0],
                        decay: s.data[1],
                        min: s.data[2],
                    },
                })
            }
            Err(_) => None,
        };
        let head = if ps.get("cls.arch").is_ok() {
            ModelHead::Classifier(ClassifierParams::from_param_set(ps, "cls")?)
        } else if ps.get("reg.0").is_ok() {
            ModelHead::Regressor(RegressorParams::from_param_set(ps, "reg")?)
        } else if let Ok(w) = ps.get("svm.weights") {
            let d = w.shape[1];
            ModelHead::Svm(LinearSvmModel {
                n_classes: w.shape[0],
                feature_mean: ps.get("svm.mean")?.data.clone(),
                feature_scale: ps.get("svm.scale")?.data.clone(),
                weights: w.data.chunks_exact(d).map(<[f64]>::to_vec).collect(),
            })
        } else {
            ModelHead::Estimator
        };
        Ok(Self {
            task,
            method,
            n_pilots,
            n_slots,
            n_subcarriers,
            k_paths,
            pattern,
            selector,
            head,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_param_set().to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_param_set().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_param_set(&ParamSet::load(path)?)
    }
}
