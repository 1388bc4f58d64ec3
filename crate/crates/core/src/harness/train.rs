use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{observe_split, PreparedData};
use super::eval::{delay_dictionary, predict, svm_features};
use super::model::{ModelHead, TrainedModel};
use super::Method;
use crate::ad::{adam_step, AdamState, Graph, Tensor, Var};
use crate::baselines::{make_baseline_pattern, train_linear_svm, SvmHyper};
use crate::config::{noise_variance_for_snr, LabConfig, SeedSpec, Stream, TaskKind, NUM_CLASSES};
use crate::decoders::{
    batch, classifier_forward, grid_var, init_classifier, init_reconstructor, init_regressor, reconstruct_forward,
    reconstruction_loss, register, regressor_forward, ClassifierParams, DelayDictionary, ReconParams, RegressorParams,
};
use crate::encoder::{export_pattern, init_selector, select_pilots, soft_masks, PilotPattern, SelectorParams, TemperatureSchedule};
use crate::error::{Error, Result};

/// SNR used for the noise of each training batch.
#[derive(Debug, Clone, PartialEq)]
pub enum SnrPolicy {
    Fixed(f64),
    /// Drawn uniformly from the points for every batch.
    Grid(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub task: TaskKind,
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub selector_learning_rate: f64,
    pub n_pilots: usize,
    pub snr: SnrPolicy,
    /// Validation SNR for checkpoint selection.
    pub val_snr_db: f64,
    pub seed: u64,
    pub schedule: TemperatureSchedule,
    /// Temperature above which training uses the relaxed masks.
    pub relaxed_above: f64,
    /// Final learning rate as a fraction of the initial one (cosine decay).
    pub lr_final_fraction: f64,
    pub backbone_blocks: usize,
    pub backbone_hidden: usize,
    /// Source count for OMP and MUSIC.
    pub k_paths: usize,
}

/// Validation SNR of the classification task.
pub const CLS_VAL_SNR_DB: f64 = 10.0;

impl TrainSpec {
    /// Desk defaults: classification draws its SNR from the sweep grid,
    /// delay trains and validates at the configured fixed SNR.
    pub fn from_config(lab: &LabConfig, task: TaskKind, method: Method, seed: u64) -> Result<Self> {
        let t = &lab.train;
        let (snr, val_snr_db) = match task {
            TaskKind::Classification => (SnrPolicy::Grid(lab.sweep.snr_grid_db.clone()), CLS_VAL_SNR_DB),
            TaskKind::DelayEstimation => (SnrPolicy::Fixed(t.delay_train_snr_db), t.delay_train_snr_db),
        };
        let spec = Self {
            task,
            method,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            selector_learning_rate: t.selector_learning_rate,
            n_pilots: t.n_pilots,
            snr,
            val_snr_db,
            seed,
            schedule: TemperatureSchedule::from_config(t)?,
            relaxed_above: t.relaxed_above,
            lr_final_fraction: t.lr_final_fraction,
            backbone_blocks: t.backbone_blocks,
            backbone_hidden: t.backbone_hidden,
            k_paths: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Cosine factor applied to both learning rates in `epoch`.
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return 1.0;
        }
        let progress = epoch as f64 / (self.epochs - 1) as f64;
        let f = self.lr_final_fraction;
        f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        if !self.method.supports(self.task) {
            return Err(Error::Validation {
                field: "method".into(),
                reason: format!("{} does not apply to {}", self.method, self.task.name()),
            });
        }
        if self.n_pilots == 0 {
            return Err(Error::validation("n_pilots", "must be at least 1"));
        }
        if let SnrPolicy::Grid(g) = &self.snr {
            if g.is_empty() {
                return Err(Error::validation("snr", "empty SNR grid"));
            }
        }
        if !(self.learning_rate > 0.0 && self.selector_learning_rate > 0.0) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    /// Higher is better: accuracy, negated MAE in bins or negated channel MSE.
    pub val_score: f64,
    pub temperature: f64,
    /// Cells in the pattern exported after the epoch, if one is learned.
    pub pattern_cells: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: Vec<EpochStats>,
}

/// Trainable decoder of one training stage.
#[derive(Debug, Clone)]
enum Head {
    Cls(ClassifierParams),
    Reg(RegressorParams),
    Recon(ReconParams),
}

impl Head {
    fn tensors(&self) -> &[Tensor] {
        match self {
            Head::Cls(p) => &p.tensors,
            Head::Reg(p) => &p.tensors,
            Head::Recon(p) => &p.tensors,
        }
    }

    fn tensors_mut(&mut self) -> &mut Vec<Tensor> {
        match self {
            Head::Cls(p) => &mut p.tensors,
            Head::Reg(p) => &mut p.tensors,
            Head::Recon(p) => &mut p.tensors,
        }
    }
}

/// Where the pilot mask of a stage comes from.
enum Pilots {
    Learned(SelectorParams),
    Fixed(PilotPattern),
    /// The decoder sees the true channel.
    Perfect,
}

struct Stage<'a> {
    spec: &'a TrainSpec,
    data: &'a PreparedData,
    dict: Option<DelayDictionary>,
    /// Offsets the global step so stages draw distinct noise.
    step_offset: u64,
}

impl Stage<'_> {
    fn noise_variance(&self, step: u64) -> f64 {
        let snr = match &self.spec.snr {
            SnrPolicy::Fixed(s) => *s,
            SnrPolicy::Grid(g) => {
                let seed = SeedSpec::new(self.spec.seed).stream(Stream::Split, step);
                g[ChaCha8Rng::seed_from_u64(seed).gen_range(0..g.len())]
            }
        };
        noise_variance_for_snr(self.data.cfg.pilot_energy, snr)
    }

    fn loss(&self, g: &mut Graph, head: &Head, p: &[Var], x: Var, idx: &[usize]) -> Result<Var> {
        match head {
            Head::Cls(params) => {
                let out = classifier_forward(g, params, p, x)?;
                let labels: Vec<usize> = idx.iter().map(|&i| self.data.labels[i]).collect();
                g.cross_entropy(out.probs, &labels)
            }
            Head::Reg(_) => {
                let dict = self.dict.as_ref().expect("regression stage has a dictionary");
                let grid = grid_var(g, dict);
                let pred = regressor_forward(g, p, dict, grid, x)?;
                let targets: Vec<f64> = idx.iter().map(|&i| self.data.delays[i]).collect();
                g.mse(pred, &targets, idx.len() as f64 * dict.tau_max * dict.tau_max)
            }
            Head::Recon(params) => {
                let pred = reconstruct_forward(g, params, p, x)?;
                reconstruction_loss(g, pred, &self.data.clean_batch(idx))
            }
        }
    }

    /// Validation score of the current parameters, higher is better.
    fn validate(&self, head: &Head, pattern: Option<&PilotPattern>) -> Result<f64> {
        let val = &self.data.splits.val;
        let noise_variance = noise_variance_for_snr(self.data.cfg.pilot_energy, self.spec.val_snr_db);
        let seed = SeedSpec::new(self.spec.seed).stream(Stream::Noise, u64::MAX >> 1);
        if let Head::Recon(params) = head {
            let pattern = pattern.expect("reconstruction stage learns a pattern");
            let obs = observe_split(self.data, val, pattern, noise_variance, seed)?;
            let mut g = Graph::new();
            let p = register(&mut g, &params.tensors, false);
            let x = g.constant(batch(&obs)?);
            let pred = reconstruct_forward(&mut g, params, &p, x)?;
            let loss = reconstruction_loss(&mut g, pred, &self.data.clean_batch(val))?;
            return Ok(-g.value(loss).data[0]);
        }
        let model = TrainedModel {
            task: self.spec.task,
            method: self.spec.method,
            n_pilots: self.spec.n_pilots,
            n_slots: self.data.cfg.n_slots,
            n_subcarriers: self.data.cfg.n_subcarriers,
            k_paths: self.spec.k_paths,
            pattern: pattern.cloned(),
            selector: None,
            head: match head {
                Head::Cls(p) => ModelHead::Classifier(p.clone()),
                Head::Reg(p) => ModelHead::Regressor(p.clone()),
                Head::Recon(_) => unreachable!(),
            },
        };
        let pred = predict(&model, self.data, val, noise_variance, seed)?;
        Ok(match head {
            Head::Cls(_) => {
                let hits = pred.classes.iter().zip(val).filter(|(&c, &i)| c == self.data.labels[i]).count();
                hits as f64 / val.len().max(1) as f64
            }
            _ => {
                let dict = self.dict.as_ref().expect("regression stage has a dictionary");
                let mae = pred.delays.iter().zip(val).map(|(e, &i)| (e - self.data.delays[i]).abs()).sum::<f64>()
                    / val.len().max(1) as f64;
                -mae / dict.spacing()
            }
        })
    }

    /// Runs the epochs of one stage and returns the best-validation
    /// parameters with the per-epoch history.
    fn run(&self, mut head: Head, mut pilots: Pilots) -> Result<(Head, Pilots, Vec<EpochStats>)> {
        let spec = self.spec;
        let seeds = SeedSpec::new(spec.seed);
        let mut head_state = AdamState::new(head.tensors(), spec.learning_rate);
        let mut sel_state = match &pilots {
            Pilots::Learned(s) => Some(AdamState::new(std::slice::from_ref(&s.scores), spec.selector_learning_rate)),
            _ => None,
        };
        let mut train_idx = self.data.splits.train.clone();
        if train_idx.is_empty() {
            return Err(Error::validation("dataset", "training split is empty"));
        }
        let mut history = Vec::with_capacity(spec.epochs);
        let mut best: Option<(f64, Head, Option<Tensor>)> = None;
        let mut step = self.step_offset;
        for epoch in 0..spec.epochs {
            let temperature = spec.schedule.at(epoch);
            let lr_scale = spec.lr_scale(epoch);
            head_state.lr = spec.learning_rate * lr_scale;
            if let Some(state) = sel_state.as_mut() {
                state.lr = spec.selector_learning_rate * lr_scale;
            }
            let shuffle_seed = seeds.stream(Stream::Split, (1 << 48) + self.step_offset + epoch as u64);
            train_idx.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for idx in train_idx.chunks(spec.batch_size) {
                let noise_seed = seeds.stream(Stream::Noise, step);
                let mut g = Graph::new();
                let p = register(&mut g, head.tensors(), true);
                let (x, scores) = match &pilots {
                    Pilots::Perfect => (g.constant(self.data.clean_batch(idx)), None),
                    Pilots::Fixed(pattern) => {
                        let noisy = self.data.noisy_batch(idx, self.noise_variance(step), noise_seed);
                        let obs = g.constant(noisy);
                        let mask = g.constant(pattern.mask_tensor());
                        (g.mask_mul(obs, mask)?, None)
                    }
                    Pilots::Learned(sel) => {
                        let noisy = self.data.noisy_batch(idx, self.noise_variance(step), noise_seed);
                        let obs = g.constant(noisy);
                        let scores = g.leaf(sel.scores.clone());
                        let gumbel_seed = seeds.stream(Stream::Gumbel, step);
                        // Relaxed masks early let the decoder see the whole
                        // grid faintly; later steps use the hard pattern.
                        let mask = if temperature > spec.relaxed_above {
                            let sel = soft_masks(&mut g, scores, temperature, gumbel_seed)?;
                            g.sum_rows(sel.soft)?
                        } else {
                            select_pilots(&mut g, scores, temperature, gumbel_seed)?.0
                        };
                        (g.mask_mul(obs, mask)?, Some(scores))
                    }
                };
                let loss = self.loss(&mut g, &head, &p, x, idx)?;
                let value = g.value(loss).data[0];
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss in epoch {epoch}, batch seed {noise_seed}"
                    )));
                }
                let grads = g.backward(loss)?;
                let head_grads: Vec<Tensor> = p.iter().map(|&v| grads.tensor(v)).collect();
                adam_step(head.tensors_mut(), &head_grads, &mut head_state)?;
                if let (Pilots::Learned(sel), Some(s), Some(state)) = (&mut pilots, scores, sel_state.as_mut()) {
                    adam_step(std::slice::from_mut(&mut sel.scores), &[grads.tensor(s)], state)?;
                }
                loss_sum += value;
                batches += 1;
                step += 1;
            }
            let exported = match &pilots {
                Pilots::Learned(sel) => Some(export_pattern(sel)),
                Pilots::Fixed(p) => Some(p.clone()),
                Pilots::Perfect => None,
            };
            let val_score = self.validate(&head, exported.as_ref())?;
            history.push(EpochStats {
                epoch,
                train_loss: loss_sum / batches as f64,
                val_score,
                temperature,
                pattern_cells: match &pilots {
                    Pilots::Learned(_) => exported.as_ref().map(PilotPattern::len),
                    _ => None,
                },
            });
            // ties keep the earlier epoch
            if best.as_ref().is_none_or(|(s, _, _)| val_score > *s) {
                let scores = match &pilots {
                    Pilots::Learned(sel) => Some(sel.scores.clone()),
                    _ => None,
                };
                best = Some((val_score, head.clone(), scores));
            }
        }
        if let Some((_, h, scores)) = best {
            head = h;
            if let (Pilots::Learned(sel), Some(s)) = (&mut pilots, scores) {
                sel.scores = s;
            }
        }
        Ok((head, pilots, history))
    }
}

fn task_head(spec: &TrainSpec, data: &PreparedData, seed: u64) -> Head {
    match spec.task {
        TaskKind::Classification => Head::Cls(init_classifier(&data.cfg, spec.backbone_blocks, spec.backbone_hidden, seed)),
        TaskKind::DelayEstimation => Head::Reg(init_regressor(&data.cfg, seed)),
    }
}

fn selector_for(spec: &TrainSpec, data: &PreparedData, seed: u64) -> Result<SelectorParams> {
    let mut sel = init_selector(
        spec.n_pilots,
        &data.cfg,
        &crate::config::TrainConfig {
            n_pilots: spec.n_pilots,
            ..Default::default()
        },
        seed,
    )?;
    sel.schedule = spec.schedule;
    Ok(sel)
}

/// Fits a method on the training split, selecting the checkpoint with the
/// best validation score.
pub fn train(spec: &TrainSpec, data: &PreparedData) -> Result<TrainOutcome> {
    spec.validate()?;
    if spec.task != data.task {
        return Err(Error::Validation {
            field: "task".into(),
            reason: format!("spec is for {}, dataset holds {}", spec.task.name(), data.task.name()),
        });
    }
    let seeds = SeedSpec::new(spec.seed);
    let cfg = &data.cfg;
    let mut model = TrainedModel {
        task: spec.task,
        method: spec.method,
        n_pilots: spec.n_pilots,
        n_slots: cfg.n_slots,
        n_subcarriers: cfg.n_subcarriers,
        k_paths: spec.k_paths,
        pattern: None,
        selector: None,
        head: ModelHead::Estimator,
    };
    if let Some(kind) = spec.method.fixed_pattern() {
        model.pattern = Some(make_baseline_pattern(kind, spec.n_pilots, cfg, seeds.stream(Stream::Init, 4))?);
    }
    if spec.method.is_estimator() {
        return Ok(TrainOutcome { model, history: Vec::new() });
    }
    if matches!(spec.method, Method::FeatureSvmUniform | Method::FeatureSvmOptimized) {
        let pattern = model.pattern.clone().expect("SVM methods use a fixed pattern");
        model.head = ModelHead::Svm(train_svm(spec, data, &pattern)?);
        return Ok(TrainOutcome { model, history: Vec::new() });
    }
    let stage = Stage {
        spec,
        data,
        dict: match spec.task {
            TaskKind::DelayEstimation => Some(delay_dictionary(cfg)?),
            TaskKind::Classification => None,
        },
        step_offset: 0,
    };
    let head_seed = seeds.stream(Stream::Init, 0);
    let selector_seed = seeds.stream(Stream::Init, 1);
    let (head, pilots, history) = match spec.method {
        Method::SemS => stage.run(task_head(spec, data, head_seed), Pilots::Learned(selector_for(spec, data, selector_seed)?))?,
        Method::MseRecon => {
            let recon = Head::Recon(init_reconstructor(spec.backbone_blocks, spec.backbone_hidden, seeds.stream(Stream::Init, 3)));
            let recon_stage = Stage { dict: None, ..stage };
            let (_, pilots, mut history) =
                recon_stage.run(recon, Pilots::Learned(selector_for(spec, data, selector_seed)?))?;
            let Pilots::Learned(sel) = pilots else { unreachable!() };
            let pattern = export_pattern(&sel);
            let task_stage = Stage {
                dict: match spec.task {
                    TaskKind::DelayEstimation => Some(delay_dictionary(cfg)?),
                    TaskKind::Classification => None,
                },
                step_offset: 1 << 32,
                ..recon_stage
            };
            let (head, _, h2) = task_stage.run(task_head(spec, data, head_seed), Pilots::Fixed(pattern))?;
            let offset = history.len();
            history.extend(h2.into_iter().map(|mut e| {
                e.epoch += offset;
                e
            }));
            model.selector = Some(sel.clone());
            (head, Pilots::Learned(sel), history)
        }
        Method::UniformPilotDL => {
            let pattern = model.pattern.clone().expect("uniform DL uses a fixed pattern");
            stage.run(task_head(spec, data, head_seed), Pilots::Fixed(pattern))?
        }
        Method::PerfectCSI => stage.run(task_head(spec, data, head_seed), Pilots::Perfect)?,
        _ => unreachable!("handled above"),
    };
    if let Pilots::Learned(sel) = pilots {
        model.pattern = Some(export_pattern(&sel));
        model.selector = Some(sel);
    }
    model.head = match head {
        Head::Cls(p) => ModelHead::Classifier(p),
        Head::Reg(p) => ModelHead::Regressor(p),
        Head::Recon(_) => unreachable!("the task stage always ends with a task head"),
    };
    Ok(TrainOutcome { model, history })
}

/// Linear SVM on Doppler moments, each training frame observed once at an
/// SNR drawn by the training SNR policy.
fn train_svm(spec: &TrainSpec, data: &PreparedData, pattern: &PilotPattern) -> Result<crate::baselines::LinearSvmModel> {
    let seeds = SeedSpec::new(spec.seed);
    let train_idx = &data.splits.train;
    let mut features = Vec::with_capacity(train_idx.len());
    for (j, &i) in train_idx.iter().enumerate() {
        let snr = match &spec.snr {
            SnrPolicy::Fixed(s) => *s,
            SnrPolicy::Grid(g) => g[ChaCha8Rng::seed_from_u64(seeds.stream(Stream::Split, j as u64)).gen_range(0..g.len())],
        };
        let nv = noise_variance_for_snr(data.cfg.pilot_energy, snr);
        let obs = observe_split(data, &[i], pattern, nv, seeds.stream(Stream::Noise, 1 << 40))?;
        features.push(svm_features(&obs[0], pattern)?);
    }
    let labels: Vec<usize> = train_idx.iter().map(|&i| data.labels[i]).collect();
    train_linear_svm(&features, &labels, NUM_CLASSES, &SvmHyper::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ScenarioFlags;
    use crate::config::FrameConfig;
    use crate::dataset::generate_dataset;
    use crate::harness::evaluate;
    use crate::harness::records::Metric;

    fn prepared(task: TaskKind, n: usize, seed: u64) -> PreparedData {
        let cfg = FrameConfig::default();
        let ds = generate_dataset(&cfg, task, n, ScenarioFlags::default(), seed).unwrap();
        PreparedData::new(&ds, &cfg).unwrap()
    }

    #[test]
    fn spec_validation() {
        let lab = LabConfig::default();
        assert!(TrainSpec::from_config(&lab, TaskKind::Classification, Method::SemS, 1).is_ok());
        assert!(TrainSpec::from_config(&lab, TaskKind::DelayEstimation, Method::FeatureSvmOptimized, 1).is_err());
        assert!(TrainSpec::from_config(&lab, TaskKind::Classification, Method::UpMusic, 1).is_err());
        let mut s = TrainSpec::from_config(&lab, TaskKind::Classification, Method::SemS, 1).unwrap();
        s.batch_size = 0;
        assert!(s.validate().is_err());
        s.batch_size = 1;
        s.snr = SnrPolicy::Grid(vec![]);
        assert!(s.validate().is_err());

        let data = prepared(TaskKind::DelayEstimation, 12, 1);
        let s = TrainSpec::from_config(&lab, TaskKind::Classification, Method::SemS, 1).unwrap();
        assert!(train(&s, &data).is_err(), "task mismatch");
    }

    #[test]
    fn learning_rate_follows_cosine() {
        let mut s = TrainSpec::from_config(&LabConfig::default(), TaskKind::Classification, Method::SemS, 1).unwrap();
        s.epochs = 11;
        assert!((0..11).all(|e| s.lr_scale(e) == 1.0), "constant by default");
        s.lr_final_fraction = 0.05;
        assert_eq!(s.lr_scale(0), 1.0);
        assert!((s.lr_scale(5) - (1.0 + s.lr_final_fraction) / 2.0).abs() < 1e-12);
        assert!((s.lr_scale(10) - s.lr_final_fraction).abs() < 1e-12);
        assert!((1..11).all(|e| s.lr_scale(e) < s.lr_scale(e - 1)));
    }

    #[test]
    fn sems_overfits_32_frames() {
        let mut data = prepared(TaskKind::Classification, 32, 2);
        // select on the training frames themselves
        let all: Vec<usize> = (0..32).collect();
        data.splits.train = all.clone();
        data.splits.val = all.clone();
        let mut lab = LabConfig::default();
        lab.train.epochs = 200;
        let mut spec = TrainSpec::from_config(&lab, TaskKind::Classification, Method::SemS, 3).unwrap();
        spec.snr = SnrPolicy::Fixed(30.0);
        spec.val_snr_db = 30.0;
        let out = train(&spec, &data).unwrap();
        assert_eq!(out.history.len(), 200);
        assert!(out.history.iter().all(|e| e.pattern_cells == Some(spec.n_pilots)));
        let r = evaluate(&out.model, &data, &all, Some(30.0), 4).unwrap();
        assert_eq!(r.get(Metric::Accuracy), Some(1.0));
        assert_eq!(out.model.pattern.as_ref().unwrap().len(), spec.n_pilots);
    }

    #[test]
    fn every_method_trains_and_evaluates() {
        let cls = prepared(TaskKind::Classification, 40, 5);
        let del = prepared(TaskKind::DelayEstimation, 40, 6);
        let mut lab = LabConfig::default();
        lab.train.epochs = 2;
        for m in Method::ALL {
            for (task, data) in [(TaskKind::Classification, &cls), (TaskKind::DelayEstimation, &del)] {
                if !m.supports(task) {
                    continue;
                }
                let spec = TrainSpec::from_config(&lab, task, m, 7).unwrap();
                let out = train(&spec, data).unwrap();
                let r = evaluate(&out.model, data, &data.splits.test, Some(10.0), 1).unwrap();
                let metric = if task == TaskKind::Classification { Metric::Accuracy } else { Metric::MaeBins };
                let v = r.get(metric).unwrap();
                assert!(v.is_finite(), "{m} {v}");
                if m == Method::PerfectCSI {
                    // perfect CSI ignores the noise level
                    let again = evaluate(&out.model, data, &data.splits.test, Some(-10.0), 1).unwrap();
                    assert_eq!(again.metrics, r.metrics);
                }
            }
        }
    }
}
