use rayon::prelude::*;

use super::data::{observe_split, PreparedData};
use super::model::{ModelHead, TrainedModel};
use super::records::Metric;
use super::DELAY_OVERSAMPLING;
use crate::ad::Tensor;
use crate::baselines::{doppler_spectrum, music_delay, omp_delay, stat_features};
use crate::channel::max_scene_delay;
use crate::config::{noise_variance_for_snr, FrameConfig, TaskKind, NUM_CLASSES};
use crate::decoders::{
    batch, build_delay_dictionary, classify_batch, estimate_delay_batch, DelayDictionary, LATENT_DIM,
};
use crate::encoder::PilotPattern;
use crate::error::{Error, Result};
use crate::metrics::{classification_report, delay_report, discriminative_gain};

const EVAL_BATCH: usize = 256;

/// The shared delay grid: `4M` points over the largest scene delay.
pub fn delay_dictionary(cfg: &FrameConfig) -> Result<DelayDictionary> {
    build_delay_dictionary(cfg, DELAY_OVERSAMPLING * cfg.n_subcarriers, max_scene_delay())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub classes: Vec<usize>,
    pub latent: Vec<[f64; LATENT_DIM]>,
    pub delays: Vec<f64>,
}

/// Observations fed to the decoder: true channels for perfect-CSI models,
/// otherwise the normalized pilots of the physical receive path.
fn inputs(model: &TrainedModel, data: &PreparedData, idx: &[usize], noise_variance: f64, seed: u64) -> Result<Vec<Tensor>> {
    match &model.pattern {
        None => Ok(idx
            .iter()
            .map(|&i| Tensor {
                shape: vec![2, data.cfg.n_slots, data.cfg.n_subcarriers],
                data: data.frame(i).to_vec(),
            })
            .collect()),
        Some(p) => observe_split(data, idx, p, noise_variance, seed),
    }
}

/// Doppler-moment features of one observation.
pub fn svm_features(t: &Tensor, pattern: &PilotPattern) -> Result<Vec<f64>> {
    let spec = doppler_spectrum(t, pattern)?;
    match stat_features(&spec) {
        Ok(f) => Ok(f.to_vec()),
        // an all-zero observation carries no Doppler information
        Err(_) => Ok(vec![0.0; 4]),
    }
}

pub fn predict(model: &TrainedModel, data: &PreparedData, idx: &[usize], noise_variance: f64, seed: u64) -> Result<Predictions> {
    if model.task != data.task {
        return Err(Error::Validation {
            field: "task".into(),
            reason: format!("model is for {}, data for {}", model.task.name(), data.task.name()),
        });
    }
    let obs = inputs(model, data, idx, noise_variance, seed)?;
    let mut out = Predictions::default();
    match &model.head {
        ModelHead::Classifier(params) => {
            for chunk in obs.chunks(EVAL_BATCH) {
                let (probs, latent) = classify_batch(&batch(chunk)?, params)?;
                out.classes.extend(probs.iter().map(|p| crate::ad::argmax(p)));
                out.latent.extend(latent);
            }
        }
        ModelHead::Regressor(params) => {
            let dict = delay_dictionary(&data.cfg)?;
            for chunk in obs.chunks(EVAL_BATCH) {
                out.delays.extend(estimate_delay_batch(&batch(chunk)?, params, &dict)?);
            }
        }
        ModelHead::Svm(svm) => {
            let pattern = model.pattern.as_ref().ok_or_else(|| Error::Format("SVM model without a pattern".into()))?;
            out.classes = obs
                .par_iter()
                .map(|t| Ok(svm.predict(&svm_features(t, pattern)?)))
                .collect::<Result<_>>()?;
        }
        ModelHead::Estimator => {
            let pattern = model.pattern.as_ref().ok_or_else(|| Error::Format("estimator without a pattern".into()))?;
            let dict = delay_dictionary(&data.cfg)?;
            let k = model.k_paths.max(1);
            out.delays = obs
                .par_iter()
                .map(|t| {
                    if model.method.music_variant().is_some() {
                        music_delay(t, pattern, k, &dict)
                    } else {
                        let r = omp_delay(t, &dict, pattern, k)?;
                        Ok(r.delays.first().copied().unwrap_or(0.0))
                    }
                })
                .collect::<Result<_>>()?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub metrics: Vec<(Metric, f64)>,
    /// `(frame, label, features)` for classification decoders.
    pub latent: Vec<(usize, usize, [f64; LATENT_DIM])>,
}

impl EvalResult {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| *k == m).map(|(_, v)| *v)
    }
}

/// Scores a model on the given frames at `snr_db` (`None`: noiseless).
pub fn evaluate(model: &TrainedModel, data: &PreparedData, idx: &[usize], snr_db: Option<f64>, seed: u64) -> Result<EvalResult> {
    let noise_variance = snr_db.map_or(0.0, |s| noise_variance_for_snr(data.cfg.pilot_energy, s));
    let pred = predict(model, data, idx, noise_variance, seed)?;
    let mut metrics = Vec::new();
    let mut latent = Vec::new();
    match model.task {
        TaskKind::Classification => {
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let r = classification_report(&pred.classes, &labels, NUM_CLASSES)?;
            metrics.push((Metric::Accuracy, r.accuracy));
            metrics.push((Metric::MacroF1, r.macro_f1));
            if !pred.latent.is_empty() {
                let feats: Vec<Vec<f64>> = pred.latent.iter().map(|f| f.to_vec()).collect();
                if let Ok(j) = discriminative_gain(&feats, &labels) {
                    metrics.push((Metric::JDisc, j));
                }
                latent = idx.iter().zip(&labels).zip(&pred.latent).map(|((&i, &l), f)| (i, l, *f)).collect();
            }
        }
        TaskKind::DelayEstimation => {
            let truths: Vec<f64> = idx.iter().map(|&i| data.delays[i]).collect();
            let dict = delay_dictionary(&data.cfg)?;
            let r = delay_report(&pred.delays, &truths, dict.spacing())?;
            metrics.push((Metric::MaeBins, r.mae_bins));
        }
    }
    Ok(EvalResult { metrics, latent })
}
