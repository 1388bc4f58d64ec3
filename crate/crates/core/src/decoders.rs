//! Receiver-side networks: pilot normalization, the residual classifier,
//! the full-grid reconstruction decoder and the dictionary-correlation
//! delay regressor.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ad::{softmax_in_place, ComplexMatrix, Graph, ParamSet, Tensor, Var};
use crate::channel::TfGrid;
use crate::config::{FrameConfig, NUM_CLASSES};
use crate::encoder::PilotPattern;
use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 16;
pub const REGRESSOR_FEATURES: usize = 4;
const REGRESSOR_HIDDEN: usize = 8;

/// Divides pilot cells by the pilot symbol and stacks real/imaginary planes
/// into `[2, N, M]`; data cells are zero.
pub fn normalize_pilots(y: &TfGrid, pattern: &PilotPattern, pilot_symbol: Complex64) -> Result<Tensor> {
    if pilot_symbol.norm() == 0.0 {
        return Err(Error::validation("pilot_symbol", "must be nonzero"));
    }
    if y.n_slots != pattern.n_slots || y.n_subcarriers != pattern.n_subcarriers {
        return Err(Error::shape("received grid and pattern differ in shape"));
    }
    let cells = y.data.len();
    let mut t = Tensor::zeros(&[2, y.n_slots, y.n_subcarriers]);
    for (i, (&v, &p)) in y.data.iter().zip(&pattern.mask).enumerate() {
        if p {
            let h = v / pilot_symbol;
            t.data[i] = h.re;
            t.data[cells + i] = h.im;
        }
    }
    Ok(t)
}

/// Stacks a complex grid into real/imaginary planes `[2, N, M]` without masking.
pub fn stack_grid(h: &TfGrid) -> Tensor {
    let cells = h.data.len();
    let mut data = vec![0.0; 2 * cells];
    for (i, v) in h.data.iter().enumerate() {
        data[i] = v.re;
        data[cells + i] = v.im;
    }
    Tensor {
        shape: vec![2, h.n_slots, h.n_subcarriers],
        data,
    }
}

/// Concatenates equally shaped frames along a new leading axis.
pub fn batch(frames: &[Tensor]) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::shape("empty batch"))?;
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(&first.shape);
    let mut data = Vec::with_capacity(frames.len() * first.len());
    for f in frames {
        if f.shape != first.shape {
            return Err(Error::shape("frames in a batch must share a shape"));
        }
        data.extend_from_slice(&f.data);
    }
    Tensor::new(&shape, data)
}

/// Named trainable tensors plus the architecture needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub blocks: usize,
    pub hidden: usize,
    /// Per block `k1, b1, k2, b2`, then projection `w, b`, then head `w, b`.
    pub tensors: Vec<Tensor>,
}

fn he(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, gain * (2.0 / fan_in as f64).sqrt(), rng)
}

fn init_blocks(blocks: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut t = Vec::new();
    for _ in 0..blocks {
        t.push(he(&[hidden, 2, 3, 3], 2 * 9, 1.0, rng));
        t.push(Tensor::zeros(&[hidden]));
        // a small second conv starts each block close to the identity
        t.push(he(&[2, hidden, 3, 3], hidden * 9, 0.1, rng));
        t.push(Tensor::zeros(&[2]));
    }
    t
}

pub fn init_classifier(cfg: &FrameConfig, blocks: usize, hidden: usize, seed: u64) -> ClassifierParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = 2 * cfg.grid_cells();
    let mut tensors = init_blocks(blocks, hidden, &mut rng);
    // stored at unit fan-in scale, see `classifier_forward`
    tensors.push(he(&[flat, LATENT_DIM], 1, 1.0, &mut rng));
    tensors.push(Tensor::zeros(&[LATENT_DIM]));
    tensors.push(Tensor::randn(&[LATENT_DIM, NUM_CLASSES], (1.0 / LATENT_DIM as f64).sqrt(), &mut rng));
    tensors.push(Tensor::zeros(&[NUM_CLASSES]));
    ClassifierParams { blocks, hidden, tensors }
}

/// Residual stack `x + conv(relu(conv(x)))` repeated per block.
fn backbone(g: &mut Graph, p: &[Var], blocks: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for b in 0..blocks {
        let q = &p[4 * b..4 * b + 4];
        let a = g.conv2d(h, q[0], Some(q[1]))?;
        let a = g.relu(a);
        let a = g.conv2d(a, q[2], Some(q[3]))?;
        h = g.add(h, a)?;
    }
    Ok(h)
}

pub struct ClassifierOutput {
    pub probs: Var,
    pub latent: Var,
}

/// `x[B, 2, N, M]` → class probabilities `[B, C]` and latent `[B, 16]`.
pub fn classifier_forward(g: &mut Graph, params: &ClassifierParams, p: &[Var], x: Var) -> Result<ClassifierOutput> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::shape(format!("classifier input must be [B, 2, N, M], got {s:?}")));
    }
    let nb = 4 * params.blocks;
    let h = backbone(g, p, params.blocks, x)?;
    let fan_in = s[1] * s[2] * s[3];
    let flat = g.reshape(h, &[s[0], fan_in])?;
    // The projection weight is kept at unit scale and multiplied by the He
    // factor here, so Adam's fixed step size stays small relative to it.
    let w = g.scale(p[nb], 1.0 / (fan_in as f64).sqrt());
    let z = g.dense(flat, w, Some(p[nb + 1]))?;
    let latent = g.relu(z);
    let logits = g.dense(latent, p[nb + 2], Some(p[nb + 3]))?;
    let probs = g.softmax(logits);
    Ok(ClassifierOutput { probs, latent })
}

/// Registers tensors on a graph, as trainable leaves or as constants.
pub fn register(g: &mut Graph, tensors: &[Tensor], trainable: bool) -> Vec<Var> {
    tensors
        .iter()
        .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
        .collect()
}

/// Probabilities and latent features for a batch `[B, 2, N, M]`.
pub fn classify_batch(x: &Tensor, params: &ClassifierParams) -> Result<(Vec<[f64; NUM_CLASSES]>, Vec<[f64; LATENT_DIM]>)> {
    let mut g = Graph::new();
    let p = register(&mut g, &params.tensors, false);
    let xv = g.constant(x.clone());
    let out = classifier_forward(&mut g, params, &p, xv)?;
    let probs = g
        .value(out.probs)
        .data
        .chunks_exact(NUM_CLASSES)
        .map(|c| c.try_into().unwrap())
        .collect();
    let latent = g
        .value(out.latent)
        .data
        .chunks_exact(LATENT_DIM)
        .map(|c| c.try_into().unwrap())
        .collect();
    Ok((probs, latent))
}

/// Single-frame classification of `t_in[2, N, M]`.
pub fn classify(t_in: &Tensor, params: &ClassifierParams) -> Result<([f64; NUM_CLASSES], [f64; LATENT_DIM])> {
    let mut shape = vec![1];
    shape.extend_from_slice(&t_in.shape);
    let x = t_in.clone().reshaped(&shape)?;
    let (p, l) = classify_batch(&x, params)?;
    Ok((p[0], l[0]))
}

/// Full-grid channel estimator sharing the classifier's residual backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconParams {
    pub blocks: usize,
    pub hidden: usize,
    pub tensors: Vec<Tensor>,
}

pub fn init_reconstructor(blocks: usize, hidden: usize, seed: u64) -> ReconParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ReconParams {
        blocks,
        hidden,
        tensors: init_blocks(blocks, hidden, &mut rng),
    }
}

pub fn reconstruct_forward(g: &mut Graph, params: &ReconParams, p: &[Var], x: Var) -> Result<Var> {
    backbone(g, p, params.blocks, x)
}

/// Mean squared complex error per cell between `pred[B, 2, N, M]` and the stacked truth.
pub fn reconstruction_loss(g: &mut Graph, pred: Var, truth: &Tensor) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    let cells = s[0] * s[2..].iter().product::<usize>();
    g.mse(pred, &truth.data, cells as f64)
}

pub fn reconstruct_channel(t_in: &Tensor, params: &ReconParams) -> Result<TfGrid> {
    let s = t_in.shape.clone();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::shape(format!("reconstruction input must be [2, N, M], got {s:?}")));
    }
    let mut g = Graph::new();
    let p = register(&mut g, &params.tensors, false);
    let x = g.constant(t_in.clone().reshaped(&[1, 2, s[1], s[2]])?);
    let out = reconstruct_forward(&mut g, params, &p, x)?;
    let v = &g.value(out).data;
    let cells = s[1] * s[2];
    TfGrid::from_vec(s[1], s[2], (0..cells).map(|i| Complex64::new(v[i], v[cells + i])).collect())
}

/// Steering vectors `exp(−j2π m Δf τ_q)` on a uniform delay grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayDictionary {
    pub grid: Vec<f64>,
    pub tau_max: f64,
    pub matrix: Arc<ComplexMatrix>,
}

impl DelayDictionary {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.tau_max / (self.grid.len() - 1) as f64
    }

    pub fn n_subcarriers(&self) -> usize {
        self.matrix.rows
    }

    pub fn atom(&self, m: usize, q: usize) -> Complex64 {
        let i = m * self.matrix.cols + q;
        Complex64::new(self.matrix.re[i], self.matrix.im[i])
    }
}

pub fn build_delay_dictionary(cfg: &FrameConfig, q: usize, tau_max: f64) -> Result<DelayDictionary> {
    if q < 2 {
        return Err(Error::validation("Q", "needs at least two grid points"));
    }
    let support = cfg.max_unambiguous_delay_s();
    if !(tau_max > 0.0 && tau_max < support) {
        return Err(Error::Validation {
            field: "tau_max".into(),
            reason: format!("{tau_max} s outside (0, {support})"),
        });
    }
    let grid: Vec<f64> = (0..q).map(|i| i as f64 * tau_max / (q - 1) as f64).collect();
    let m = cfg.n_subcarriers;
    let mut re = vec![0.0; m * q];
    let mut im = vec![0.0; m * q];
    for mi in 0..m {
        for (qi, &tau) in grid.iter().enumerate() {
            let (s, c) = (-2.0 * PI * mi as f64 * cfg.subcarrier_spacing_hz * tau).sin_cos();
            re[mi * q + qi] = c;
            im[mi * q + qi] = s;
        }
    }
    Ok(DelayDictionary {
        grid,
        tau_max,
        matrix: Arc::new(ComplexMatrix { rows: m, cols: q, re, im }),
    })
}

/// `Σ τ_q·softmax(z)_q`.
pub fn soft_argmax(z: &[f64], grid: &[f64]) -> Result<f64> {
    if z.len() != grid.len() || z.is_empty() {
        return Err(Error::shape(format!("{} scores for {} grid points", z.len(), grid.len())));
    }
    let mut w = z.to_vec();
    softmax_in_place(&mut w);
    Ok(w.iter().zip(grid).map(|(a, t)| a * t).sum::<f64>().clamp(grid[0], grid[grid.len() - 1]))
}

/// `((pred − target)/τ_max)²`.
pub fn loss_mse(pred: f64, target: f64, tau_max: f64) -> f64 {
    let d = (pred - target) / tau_max;
    d * d
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    /// Slot projection `[4, 2, N]`, residual convs `k1, b1, k2, b2`, output
    /// conv `k, b`, softmax sharpness `[1]`.
    pub tensors: Vec<Tensor>,
}

pub fn init_regressor(cfg: &FrameConfig, seed: u64) -> RegressorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f, h) = (REGRESSOR_FEATURES, REGRESSOR_HIDDEN);
    let proj = Tensor::randn(&[f, 2, cfg.n_slots], (1.0 / cfg.n_slots as f64).sqrt(), &mut rng);
    let k1 = he(&[h, f, 3], f * 3, 1.0, &mut rng);
    let k2 = he(&[f, h, 3], h * 3, 0.1, &mut rng);
    // output conv starts as the average of the feature maps
    let mut out = Tensor::zeros(&[1, f, 3]);
    for c in 0..f {
        out.data[c * 3 + 1] = 1.0 / f as f64;
    }
    RegressorParams {
        tensors: vec![
            proj,
            k1,
            Tensor::zeros(&[h]),
            k2,
            Tensor::zeros(&[f]),
            out,
            Tensor::zeros(&[1]),
            Tensor::scalar(8.0),
        ],
    }
}

/// `x[B, 2, N, M]` → delay estimates `[B, 1]`.
pub fn regressor_forward(g: &mut Graph, p: &[Var], dict: &DelayDictionary, grid: Var, x: Var) -> Result<Var> {
    let b = g.shape(x)[0];
    let proj = g.slot_projection(x, p[0])?;
    let corr = g.dict_magnitude(proj, dict.matrix.clone())?;
    let r = g.rms_normalize(corr, 1e-12);
    let a = g.conv1d(r, p[1], Some(p[2]))?;
    let a = g.relu(a);
    let a = g.conv1d(a, p[3], Some(p[4]))?;
    let h = g.add(r, a)?;
    let z = g.conv1d(h, p[5], Some(p[6]))?;
    let z = g.reshape(z, &[b, dict.len()])?;
    let z = g.mask_mul(z, p[7])?;
    let w = g.softmax(z);
    g.dense(w, grid, None)
}

pub fn grid_var(g: &mut Graph, dict: &DelayDictionary) -> Var {
    g.constant(Tensor {
        shape: vec![dict.len(), 1],
        data: dict.grid.clone(),
    })
}

pub fn estimate_delay_batch(x: &Tensor, params: &RegressorParams, dict: &DelayDictionary) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = register(&mut g, &params.tensors, false);
    let grid = grid_var(&mut g, dict);
    let xv = g.constant(x.clone());
    let out = regressor_forward(&mut g, &p, dict, grid, xv)?;
    Ok(g.value(out).data.iter().map(|t| t.clamp(0.0, dict.tau_max)).collect())
}

pub fn estimate_delay(t_in: &Tensor, params: &RegressorParams, dict: &DelayDictionary) -> Result<f64> {
    let mut shape = vec![1];
    shape.extend_from_slice(&t_in.shape);
    Ok(estimate_delay_batch(&t_in.clone().reshaped(&shape)?, params, dict)?[0])
}

impl ClassifierParams {
    pub fn to_param_set(&self, prefix: &str) -> ParamSet {
        let mut ps = ParamSet::default();
        ps.push(format!("{prefix}.arch"), Tensor::from_slice(&[self.blocks as f64, self.hidden as f64]));
        for (i, t) in self.tensors.iter().enumerate() {
            ps.push(format!("{prefix}.{i}"), t.clone());
        }
        ps
    }

    pub fn from_param_set(ps: &ParamSet, prefix: &str) -> Result<Self> {
        let arch = ps.get(&format!("{prefix}.arch"))?;
        let (blocks, hidden) = (arch.data[0] as usize, arch.data[1] as usize);
        let tensors = (0..4 * blocks + 4)
            .map(|i| ps.get(&format!("{prefix}.{i}")).cloned())
            .collect::<Result<_>>()?;
        Ok(Self { blocks, hidden, tensors })
    }
}

impl ReconParams {
    pub fn to_param_set(&self, prefix: &str) -> ParamSet {
        let mut ps = ParamSet::default();
        ps.push(format!("{prefix}.arch"), Tensor::from_slice(&[self.blocks as f64, self.hidden as f64]));
        for (i, t) in self.tensors.iter().enumerate() {
            ps.push(format!("{prefix}.{i}"), t.clone());
        }
        ps
    }
}

impl RegressorParams {
    pub fn to_param_set(&self, prefix: &str) -> ParamSet {
        let mut ps = ParamSet::default();
        for (i, t) in self.tensors.iter().enumerate() {
            ps.push(format!("{prefix}.{i}"), t.clone());
        }
        ps
    }

    pub fn from_param_set(ps: &ParamSet, prefix: &str) -> Result<Self> {
        let tensors = (0..8)
            .map(|i| ps.get(&format!("{prefix}.{i}")).cloned())
            .collect::<Result<_>>()?;
        Ok(Self { tensors })
    }
}

/// Writes latent features as `frame_id,label,f0..f15`.
pub fn write_latent_csv(path: &Path, rows: &[(usize, usize, [f64; LATENT_DIM])]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["frame_id".to_string(), "label".to_string()];
    header.extend((0..LATENT_DIM).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (id, label, f) in rows {
        let mut rec = vec![id.to_string(), label.to_string()];
        rec.extend(f.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
