//! Classical reference pipelines: Doppler-moment features with a linear SVM,
//! OMP and MUSIC delay estimators, and the fixed pilot layouts they use.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use crate::ad::Tensor;
use crate::config::FrameConfig;
use crate::decoders::DelayDictionary;
use crate::encoder::PilotPattern;
use crate::error::{Error, Result};

/// Pilot observation `h̃[n, m]` from a stacked `[2, N, M]` tensor.
fn obs(t: &Tensor, n: usize, m: usize) -> Complex64 {
    let (ns, ms) = (t.shape[1], t.shape[2]);
    Complex64::new(t.data[n * ms + m], t.data[ns * ms + n * ms + m])
}

fn check_obs(t: &Tensor, pattern: &PilotPattern) -> Result<()> {
    if t.shape != [2, pattern.n_slots, pattern.n_subcarriers] {
        return Err(Error::shape(format!(
            "observation {:?} does not match a {}x{} pattern",
            t.shape, pattern.n_slots, pattern.n_subcarriers
        )));
    }
    Ok(())
}

/// Magnitude Doppler spectrum averaged over pilot subcarriers, FFT-shifted
/// so that zero Doppler sits at index `N/2`. Missing slots are zero-filled.
pub fn doppler_spectrum(t: &Tensor, pattern: &PilotPattern) -> Result<Vec<f64>> {
    check_obs(t, pattern)?;
    if pattern.is_empty() {
        return Err(Error::validation("pattern", "empty pilot pattern"));
    }
    let n = pattern.n_slots;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let subs = pattern.subcarriers();
    let mut acc = vec![0.0; n];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for &m in &subs {
        for (s, b) in buf.iter_mut().enumerate() {
            *b = if pattern.contains(s, m) { obs(t, s, m) } else { Complex64::new(0.0, 0.0) };
        }
        fft.process(&mut buf);
        for (k, b) in buf.iter().enumerate() {
            acc[(k + n / 2) % n] += b.norm();
        }
    }
    for a in &mut acc {
        *a /= subs.len() as f64;
    }
    Ok(acc)
}

/// Mean, standard deviation, skewness and excess kurtosis of the bin index
/// under the normalized spectrum. Degenerate spreads give zero skewness and
/// kurtosis.
pub fn stat_features(spectrum: &[f64]) -> Result<[f64; 4]> {
    if spectrum.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::validation("spectrum", "must be non-negative"));
    }
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 {
        return Err(Error::validation("spectrum", "all-zero spectrum"));
    }
    let p: Vec<f64> = spectrum.iter().map(|v| v / total).collect();
    let mean: f64 = p.iter().enumerate().map(|(k, w)| k as f64 * w).sum();
    let moment = |r: i32| -> f64 { p.iter().enumerate().map(|(k, w)| w * (k as f64 - mean).powi(r)).sum() };
    let var = moment(2);
    let std = var.sqrt();
    if std < 1e-9 {
        return Ok([mean, 0.0, 0.0, 0.0]);
    }
    Ok([mean, std, moment(3) / (var * std), moment(4) / (var * var) - 3.0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmHyper {
    pub lambda: f64,
    pub iterations: usize,
}

impl Default for SvmHyper {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            iterations: 2000,
        }
    }
}

/// One-vs-rest linear SVM over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvmModel {
    pub n_classes: usize,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// Per class: weights followed by the bias.
    pub weights: Vec<Vec<f64>>,
}

impl LinearSvmModel {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let z = self.standardize(x);
        self.weights
            .iter()
            .map(|w| w[..z.len()].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + w[z.len()])
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::ad::argmax(&self.scores(x))
    }
}

/// Full-batch subgradient descent on `λ/2·‖w‖² + mean hinge`, one binary
/// problem per class; the returned weights average the second half of the
/// iterates.
pub fn train_linear_svm(features: &[Vec<f64>], labels: &[usize], n_classes: usize, hyper: &SvmHyper) -> Result<LinearSvmModel> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::shape("features and labels must be nonempty and equally long"));
    }
    let mut present = vec![false; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::validation("label", "out of range"));
        }
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::validation("labels", "need at least two classes"));
    }
    let d = features[0].len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for f in features {
        for ((s, v), m) in scale.iter_mut().zip(f).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let mut model = LinearSvmModel {
        n_classes,
        feature_mean: mean,
        feature_scale: scale,
        weights: Vec::new(),
    };
    let z: Vec<Vec<f64>> = features.iter().map(|f| model.standardize(f)).collect();
    let burn_in = hyper.iterations / 2;
    for c in 0..n_classes {
        let mut w = vec![0.0; d + 1];
        let mut avg = vec![0.0; d + 1];
        for t in 0..hyper.iterations {
            let mut grad: Vec<f64> = w.iter().map(|v| hyper.lambda * v).collect();
            grad[d] = 0.0;
            for (x, &l) in z.iter().zip(labels) {
                let y = if l == c { 1.0 } else { -1.0 };
                let margin = y * (w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d]);
                if margin < 1.0 {
                    for (g, v) in grad.iter_mut().zip(x) {
                        *g -= y * v / n;
                    }
                    grad[d] -= y / n;
                }
            }
            let eta = 1.0 / (1.0 + t as f64).sqrt();
            for (a, g) in w.iter_mut().zip(&grad) {
                *a -= eta * g;
            }
            if t >= burn_in {
                for (a, v) in avg.iter_mut().zip(&w) {
                    *a += v / (hyper.iterations - burn_in) as f64;
                }
            }
        }
        model.weights.push(avg);
    }
    Ok(model)
}

/// Solves `min ‖y − A·c‖` for complex `A`.
fn least_squares(a: &DMatrix<Complex64>, y: &DVector<Complex64>) -> DVector<Complex64> {
    let ah = a.adjoint();
    let gram = &ah * a;
    let rhs = &ah * y;
    gram.clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| gram.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(a.ncols())))
}

/// Greedy sparse recovery of one observation vector. Returns the selected
/// atom indices, their least-squares coefficients and the residual energy
/// after each iteration.
pub fn omp(a: &DMatrix<Complex64>, y: &DVector<Complex64>, k: usize) -> (Vec<usize>, Vec<Complex64>, Vec<f64>) {
    let y_energy = y.norm_squared();
    let mut residual = y.clone();
    let mut selected: Vec<usize> = Vec::new();
    let mut coefs: Vec<Complex64> = Vec::new();
    let mut energies = Vec::new();
    for _ in 0..k {
        if residual.norm_squared() <= 1e-24 * y_energy.max(f64::MIN_POSITIVE) || y_energy == 0.0 {
            break;
        }
        let mut best = None;
        let mut best_v = -1.0;
        for q in 0..a.ncols() {
            if selected.contains(&q) {
                continue;
            }
            let col = a.column(q);
            let v = col.dotc(&residual).norm() / col.norm().max(f64::MIN_POSITIVE);
            if v > best_v {
                best_v = v;
                best = Some(q);
            }
        }
        let Some(q) = best else { break };
        selected.push(q);
        let sub = DMatrix::from_columns(&selected.iter().map(|&i| a.column(i).into_owned()).collect::<Vec<_>>());
        let c = least_squares(&sub, y);
        residual = y - &sub * &c;
        coefs = c.iter().copied().collect();
        energies.push(residual.norm_squared());
    }
    (selected, coefs, energies)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmpResult {
    /// Path delays, strongest first.
    pub delays: Vec<f64>,
    /// Mean final residual energy over the processed slots.
    pub residual: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-slot OMP on pilot subcarriers; each path's delay is the median of the
/// per-slot picks ranked by coefficient magnitude.
pub fn omp_delay(t: &Tensor, dict: &DelayDictionary, pattern: &PilotPattern, k_paths: usize) -> Result<OmpResult> {
    check_obs(t, pattern)?;
    if k_paths == 0 {
        return Err(Error::validation("k_paths", "must be at least 1"));
    }
    if pattern.is_empty() {
        return Err(Error::validation("pattern", "empty pilot pattern"));
    }
    let mut per_path: Vec<Vec<f64>> = vec![Vec::new(); k_paths];
    let mut residual = 0.0;
    let mut used = 0;
    let mut widest = 0;
    for n in 0..pattern.n_slots {
        let subs: Vec<usize> = (0..pattern.n_subcarriers).filter(|&m| pattern.contains(n, m)).collect();
        widest = widest.max(subs.len());
        if subs.len() < 2 {
            continue;
        }
        // a slot with few pilots resolves fewer paths
        let k = k_paths.min(subs.len());
        let a = DMatrix::from_fn(subs.len(), dict.len(), |r, q| dict.atom(subs[r], q));
        let y = DVector::from_iterator(subs.len(), subs.iter().map(|&m| obs(t, n, m)));
        let (sel, coefs, energies) = omp(&a, &y, k);
        let mut ranked: Vec<(f64, usize)> = coefs.iter().map(|c| c.norm()).zip(sel).collect();
        ranked.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(Ordering::Equal));
        for (j, (_, q)) in ranked.iter().enumerate() {
            per_path[j].push(dict.grid[*q]);
        }
        residual += energies.last().copied().unwrap_or(y.norm_squared());
        used += 1;
    }
    if used == 0 {
        return Err(Error::Validation {
            field: "pattern".into(),
            reason: format!("no slot carries 2 or more pilot subcarriers (widest: {widest})"),
        });
    }
    let delays = per_path.iter_mut().filter(|v| !v.is_empty()).map(|v| median(v)).collect();
    Ok(OmpResult {
        delays,
        residual: residual / used as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MusicVariant {
    UniformPilots,
    RandomPilots,
    OptimizedPilots,
}

impl MusicVariant {
    pub fn name(self) -> &'static str {
        match self {
            MusicVariant::UniformPilots => "UP-MUSIC",
            MusicVariant::RandomPilots => "RP-MUSIC",
            MusicVariant::OptimizedPilots => "OP-MUSIC",
        }
    }

    pub fn pattern_kind(self) -> BaselinePattern {
        match self {
            MusicVariant::UniformPilots => BaselinePattern::Uniform,
            MusicVariant::RandomPilots => BaselinePattern::Random,
            MusicVariant::OptimizedPilots => BaselinePattern::Optimized,
        }
    }
}

/// Sample covariance over slots of the pilot-subcarrier snapshots. Entry
/// `(i, j)` averages over the slots observing both subcarriers.
pub fn pilot_covariance(t: &Tensor, pattern: &PilotPattern) -> Result<(Vec<usize>, DMatrix<Complex64>)> {
    check_obs(t, pattern)?;
    let subs = pattern.subcarriers();
    let slots = pattern.slots();
    if slots.len() < 2 {
        return Err(Error::InsufficientSnapshots(format!(
            "{} pilot slot(s); the covariance needs at least 2",
            slots.len()
        )));
    }
    let p = subs.len();
    let mut r = DMatrix::<Complex64>::zeros(p, p);
    let mut counts = DMatrix::<f64>::zeros(p, p);
    for &n in &slots {
        let present: Vec<(usize, Complex64)> = subs
            .iter()
            .enumerate()
            .filter(|(_, &m)| pattern.contains(n, m))
            .map(|(i, &m)| (i, obs(t, n, m)))
            .collect();
        for &(i, a) in &present {
            for &(j, b) in &present {
                r[(i, j)] += a * b.conj();
                counts[(i, j)] += 1.0;
            }
        }
    }
    for i in 0..p {
        for j in 0..p {
            if counts[(i, j)] > 0.0 {
                r[(i, j)] /= counts[(i, j)];
            }
        }
    }
    Ok((subs, r))
}

/// `1/‖E_nᴴ a(τ_q)‖²` over the dictionary grid for a covariance on the given subcarriers.
pub fn music_pseudospectrum(cov: &DMatrix<Complex64>, subs: &[usize], dict: &DelayDictionary, k_paths: usize) -> Result<Vec<f64>> {
    let p = subs.len();
    if p <= k_paths {
        return Err(Error::Validation {
            field: "pattern".into(),
            reason: format!("{p} pilot subcarriers cannot separate {k_paths} paths"),
        });
    }
    let eig = cov.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    // ascending eigenvalues, stable for ties
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap_or(Ordering::Equal));
    let noise: Vec<usize> = order[..p - k_paths].to_vec();
    let mut spec = Vec::with_capacity(dict.len());
    for q in 0..dict.len() {
        let mut e = 0.0;
        for &c in &noise {
            let v = eig.eigenvectors.column(c);
            let mut s = Complex64::new(0.0, 0.0);
            for (i, &m) in subs.iter().enumerate() {
                s += v[i].conj() * dict.atom(m, q);
            }
            e += s.norm_sqr();
        }
        spec.push(1.0 / e.max(1e-300));
    }
    Ok(spec)
}

/// Grid delay at the global maximum of the MUSIC pseudo-spectrum. Small
/// patterns keep at least one noise-subspace dimension by assuming fewer paths.
pub fn music_delay(t: &Tensor, pattern: &PilotPattern, k_paths: usize, dict: &DelayDictionary) -> Result<f64> {
    let (subs, cov) = pilot_covariance(t, pattern)?;
    let k = k_paths.min(subs.len().saturating_sub(1)).max(1);
    let spec = music_pseudospectrum(&cov, &subs, dict, k)?;
    Ok(dict.grid[crate::ad::argmax(&spec)])
}

/// Fixed pilot layouts used by the reference methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselinePattern {
    /// Evenly spaced subcarriers on evenly spaced slots.
    Uniform,
    /// Uniform without replacement over the grid.
    Random,
    /// Minimum-redundancy subcarriers on the uniform lattice's slots.
    Optimized,
    /// Full slot columns on minimum-redundancy subcarriers.
    DopplerColumns,
}

/// Optimal Golomb rulers for 1..=10 marks.
const GOLOMB: [&[usize]; 10] = [
    &[0],
    &[0, 1],
    &[0, 1, 3],
    &[0, 1, 4, 6],
    &[0, 1, 4, 9, 11],
    &[0, 1, 4, 10, 12, 17],
    &[0, 1, 4, 10, 18, 23, 25],
    &[0, 1, 4, 9, 15, 22, 32, 34],
    &[0, 1, 5, 12, 25, 27, 35, 41, 44],
    &[0, 1, 6, 10, 23, 26, 34, 41, 53, 55],
];

/// `k` subcarriers out of `m` with as many distinct pairwise differences as
/// the heuristic finds: a scaled optimal ruler where one fits, extended
/// greedily by the position adding the most new differences.
pub fn min_redundancy_subcarriers(k: usize, m: usize) -> Result<Vec<usize>> {
    if k == 0 || k > m {
        return Err(Error::validation("subcarriers", "count must lie in 1..=M"));
    }
    let base = GOLOMB
        .iter()
        .rev()
        .find(|r| r.len() <= k && *r.last().unwrap() < m)
        .unwrap();
    let len = *base.last().unwrap();
    let scale = if len == 0 { 1 } else { ((m - 1) / len).max(1) };
    let mut marks: Vec<usize> = base.iter().map(|v| v * scale).collect();
    let mut diffs = std::collections::BTreeSet::new();
    for (i, a) in marks.iter().enumerate() {
        for b in &marks[..i] {
            diffs.insert(a.abs_diff(*b));
        }
    }
    while marks.len() < k {
        let mut best = None;
        let mut best_new = 0;
        for c in 0..m {
            if marks.contains(&c) {
                continue;
            }
            let mut new: Vec<usize> = marks.iter().map(|v| v.abs_diff(c)).filter(|d| !diffs.contains(d)).collect();
            new.sort_unstable();
            new.dedup();
            if best.is_none() || new.len() > best_new {
                best = Some(c);
                best_new = new.len();
            }
        }
        let c = best.unwrap();
        for v in &marks {
            diffs.insert(v.abs_diff(c));
        }
        marks.push(c);
    }
    marks.sort_unstable();
    Ok(marks)
}

/// Number of lattice subcarriers: the divisor of `n_pilots` closest to
/// `√(N_p·M/N)` that fits the grid.
fn lattice_dims(n_pilots: usize, cfg: &FrameConfig) -> (usize, usize) {
    let target = (n_pilots as f64 * cfg.n_subcarriers as f64 / cfg.n_slots as f64).sqrt();
    let mut best = None;
    for k in 1..=n_pilots {
        if !n_pilots.is_multiple_of(k) || k > cfg.n_subcarriers || n_pilots / k > cfg.n_slots {
            continue;
        }
        let d = (k as f64 - target).abs();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    match best {
        Some((k, _)) => (k, n_pilots / k),
        // no exact factorization: a covering lattice truncated to the budget
        None => {
            let k = (target.round() as usize).clamp(1, cfg.n_subcarriers);
            (k, n_pilots.div_ceil(k).min(cfg.n_slots))
        }
    }
}

fn spread(count: usize, total: usize) -> Vec<usize> {
    (0..count).map(|i| i * total / count).collect()
}

pub fn make_baseline_pattern(kind: BaselinePattern, n_pilots: usize, cfg: &FrameConfig, seed: u64) -> Result<PilotPattern> {
    let (n, m) = (cfg.n_slots, cfg.n_subcarriers);
    if n_pilots == 0 || n_pilots > n * m {
        return Err(Error::Validation {
            field: "n_pilots".into(),
            reason: format!("{n_pilots} pilots do not fit a grid of {} cells", n * m),
        });
    }
    let lattice = |subs: Vec<usize>, slots: Vec<usize>| -> Result<PilotPattern> {
        let cells: Vec<(usize, usize)> = slots
            .iter()
            .flat_map(|&s| subs.iter().map(move |&c| (s, c)))
            .take(n_pilots)
            .collect();
        fill_to_budget(cells, n_pilots, n, m)
    };
    match kind {
        BaselinePattern::Uniform => {
            let (k, s) = lattice_dims(n_pilots, cfg);
            lattice(spread(k, m), spread(s, n))
        }
        BaselinePattern::Optimized => {
            let (k, s) = lattice_dims(n_pilots, cfg);
            lattice(min_redundancy_subcarriers(k, m)?, spread(s, n))
        }
        BaselinePattern::DopplerColumns => {
            let k = n_pilots.div_ceil(n).min(m);
            let subs = min_redundancy_subcarriers(k, m)?;
            let mut cells = Vec::with_capacity(n_pilots);
            for (i, &c) in subs.iter().enumerate() {
                let left = n_pilots - i * n;
                let slots = if left >= n { spread(n, n) } else { spread(left, n) };
                cells.extend(slots.into_iter().map(|s| (s, c)));
            }
            cells.truncate(n_pilots);
            fill_to_budget(cells, n_pilots, n, m)
        }
        BaselinePattern::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flat = sample(&mut rng, n * m, n_pilots).into_vec();
            PilotPattern::from_flat(n, m, &flat)
        }
    }
}

/// Tops up a pattern with the first unused cells in row-major order.
fn fill_to_budget(mut cells: Vec<(usize, usize)>, n_pilots: usize, n: usize, m: usize) -> Result<PilotPattern> {
    if cells.len() < n_pilots {
        let mut used = vec![false; n * m];
        for &(a, b) in &cells {
            used[a * m + b] = true;
        }
        for f in 0..n * m {
            if cells.len() == n_pilots {
                break;
            }
            if !used[f] {
                cells.push((f / m, f % m));
            }
        }
    }
    PilotPattern::from_cells(n, m, cells)
}
