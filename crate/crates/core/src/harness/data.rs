use num_complex::Complex64;
use rayon::prelude::*;

use crate::ad::Tensor;
use crate::channel::{qpsk_data, unit_noise, TfGrid};
use crate::config::{FrameConfig, SeedSpec, Stream, TaskKind};
use crate::dataset::{Dataset, Splits};
use crate::decoders::normalize_pilots;
use crate::encoder::{multiplex, PilotPattern};
use crate::error::{Error, Result};

/// A dataset widened to f64 and stacked into `[2, N, M]` planes once.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub cfg: FrameConfig,
    pub task: TaskKind,
    pub stacked: Vec<f64>,
    pub labels: Vec<usize>,
    pub delays: Vec<f64>,
    pub splits: Splits,
    pub master_seed: u64,
}

impl PreparedData {
    pub fn new(ds: &Dataset, cfg: &FrameConfig) -> Result<Self> {
        if ds.n_slots != cfg.n_slots || ds.n_subcarriers != cfg.n_subcarriers {
            return Err(Error::shape(format!(
                "dataset grid {}x{} does not match the configuration {}x{}",
                ds.n_slots, ds.n_subcarriers, cfg.n_slots, cfg.n_subcarriers
            )));
        }
        let cells = cfg.grid_cells();
        let mut stacked = vec![0.0; ds.len() * 2 * cells];
        for (f, out) in ds.frames.iter().zip(stacked.chunks_exact_mut(2 * cells)) {
            for (i, v) in f.channel.iter().enumerate() {
                out[i] = v.re as f64;
                out[cells + i] = v.im as f64;
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            task: ds.task,
            stacked,
            labels: ds.frames.iter().map(|f| f.label as usize).collect(),
            delays: ds.frames.iter().map(|f| f.delay_s).collect(),
            splits: ds.splits(),
            master_seed: ds.master_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        2 * self.cfg.grid_cells()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let l = self.frame_len();
        &self.stacked[i * l..(i + 1) * l]
    }

    pub fn channel(&self, i: usize) -> TfGrid {
        let cells = self.cfg.grid_cells();
        let f = self.frame(i);
        TfGrid {
            n_slots: self.cfg.n_slots,
            n_subcarriers: self.cfg.n_subcarriers,
            data: (0..cells).map(|c| Complex64::new(f[c], f[cells + c])).collect(),
        }
    }

    fn shape(&self, b: usize) -> Vec<usize> {
        vec![b, 2, self.cfg.n_slots, self.cfg.n_subcarriers]
    }

    /// True channels `[B, 2, N, M]`.
    pub fn clean_batch(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.frame_len());
        for &i in idx {
            data.extend_from_slice(self.frame(i));
        }
        Tensor {
            shape: self.shape(idx.len()),
            data,
        }
    }

    /// Pilot-normalized observation of every cell, `√E_p·H + V/s_p`, whose
    /// values on pilot cells equal the physical receive path.
    pub fn noisy_batch(&self, idx: &[usize], noise_variance: f64, seed: u64) -> Tensor {
        let cells = self.cfg.grid_cells();
        let gain = self.cfg.pilot_energy.sqrt();
        let sigma = noise_variance.sqrt();
        let sp = self.cfg.pilot_symbol;
        let seeds = SeedSpec::new(seed);
        let mut data = vec![0.0; idx.len() * 2 * cells];
        data.par_chunks_exact_mut(2 * cells).zip(idx.par_iter()).enumerate().for_each(|(j, (out, &i))| {
            let f = self.frame(i);
            if sigma > 0.0 {
                let v = unit_noise(cells, seeds.stream(Stream::Noise, j as u64));
                for c in 0..cells {
                    let n = v[c] * sigma / sp;
                    out[c] = gain * f[c] + n.re;
                    out[cells + c] = gain * f[cells + c] + n.im;
                }
            } else {
                for (o, x) in out.iter_mut().zip(f) {
                    *o = gain * x;
                }
            }
        });
        Tensor {
            shape: self.shape(idx.len()),
            data,
        }
    }
}

/// Per-frame seeds of the evaluation path: data symbols and unit noise. The
/// noise draw does not depend on the SNR, so sweeps share realizations.
fn eval_seeds(seed: u64, frame: usize) -> (u64, u64) {
    let s = SeedSpec::new(seed);
    (
        s.stream(Stream::Noise, 2 * frame as u64),
        s.stream(Stream::Noise, 2 * frame as u64 + 1),
    )
}

/// Multiplex, propagate, add noise and normalize the pilots of one frame.
pub fn observe(h: &TfGrid, pattern: &PilotPattern, cfg: &FrameConfig, noise_variance: f64, seed: u64, frame: usize) -> Result<Tensor> {
    let (data_seed, noise_seed) = eval_seeds(seed, frame);
    let x_s = multiplex(pattern, &qpsk_data(cfg, data_seed), cfg)?;
    let mut y = h.hadamard(&x_s)?;
    if noise_variance > 0.0 {
        let sigma = noise_variance.sqrt();
        let noise = unit_noise(y.data.len(), noise_seed);
        for (v, n) in y.data.iter_mut().zip(noise) {
            *v += n * sigma;
        }
    }
    normalize_pilots(&y, pattern, cfg.pilot_symbol)
}

/// [`observe`] over a list of frames, in order.
pub fn observe_split(data: &PreparedData, idx: &[usize], pattern: &PilotPattern, noise_variance: f64, seed: u64) -> Result<Vec<Tensor>> {
    idx.par_iter()
        .map(|&i| observe(&data.channel(i), pattern, &data.cfg, noise_variance, seed, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ScenarioFlags;
    use crate::dataset::generate_dataset;

    fn data() -> PreparedData {
        let cfg = FrameConfig {
            pilot_energy: 2.0,
            pilot_symbol: Complex64::new(0.6, 0.8),
            ..FrameConfig::default()
        };
        let ds = generate_dataset(&cfg, TaskKind::Classification, 6, ScenarioFlags::default(), 1).unwrap();
        PreparedData::new(&ds, &cfg).unwrap()
    }

    fn pattern() -> PilotPattern {
        PilotPattern::from_cells(32, 64, (0..32).map(|i| (i, (5 * i + 3) % 64)).collect()).unwrap()
    }

    #[test]
    fn training_path_matches_physical_path_on_pilots() {
        let d = data();
        let p = pattern();
        let idx = [0, 3, 5];
        let train = d.noisy_batch(&idx, 0.0, 7);
        let mask = p.mask_tensor();
        let phys = observe_split(&d, &idx, &p, 0.0, 7).unwrap();
        let len = d.frame_len();
        for (j, obs) in phys.iter().enumerate() {
            for (c, &v) in obs.data.iter().enumerate() {
                let masked = train.data[j * len + c] * mask.data[c % mask.len()];
                assert!((masked - v).abs() < 1e-12, "frame {j} cell {c}");
            }
        }
    }

    #[test]
    fn both_paths_share_noise_statistics() {
        let d = data();
        let p = PilotPattern::full(32, 64);
        let nv = 0.5;
        let idx: Vec<usize> = (0..6).collect();
        let clean = d.noisy_batch(&idx, 0.0, 1);
        let train = d.noisy_batch(&idx, nv, 2);
        let phys: Vec<f64> = observe_split(&d, &idx, &p, nv, 3).unwrap().into_iter().flat_map(|t| t.data).collect();
        let var = |x: &[f64]| {
            x.iter().zip(&clean.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (x.len() / 2) as f64
        };
        // complex noise of variance σ²/|s_p|² per cell
        let expected = nv / d.cfg.pilot_symbol.norm_sqr();
        assert!((var(&train.data) / expected - 1.0).abs() < 0.03);
        assert!((var(&phys) / expected - 1.0).abs() < 0.03);
    }

    #[test]
    fn observation_is_reproducible_and_seed_dependent() {
        let d = data();
        let p = pattern();
        let a = observe_split(&d, &[1, 2], &p, 0.1, 4).unwrap();
        assert_eq!(a, observe_split(&d, &[1, 2], &p, 0.1, 4).unwrap());
        assert_ne!(a, observe_split(&d, &[1, 2], &p, 0.1, 5).unwrap());
    }
}
