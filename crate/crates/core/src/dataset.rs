//! Labeled channel datasets and their little-endian binary file format.
//!
//! Layout: `"SEMS"`, version u32, task u8, classes u8, N u16, M u16,
//! frame count u64, master seed u64, 32-byte config digest, then per frame
//! N·M `(f32 re, f32 im)` pairs in row-major (n, m), label u8 and delay f64.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::{Complex32, Complex64};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::channel::{sample_scene, semantic_label, synthesize_channel, Label, ScenarioFlags, TfGrid};
use crate::config::{FrameConfig, SeedSpec, Stream, TaskKind, NUM_CLASSES};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SEMS";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 1 + 2 + 2 + 8 + 8 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub channel: Vec<Complex32>,
    pub label: u8,
    pub delay_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub n_classes: u8,
    pub n_slots: usize,
    pub n_subcarriers: usize,
    pub master_seed: u64,
    pub digest: [u8; 32],
    pub frames: Vec<Frame>,
}

/// Index partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Digest of everything that determines the generated frames besides the seed.
pub fn dataset_digest(cfg: &FrameConfig, scenario: ScenarioFlags) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(cfg.digest());
    h.update([scenario.bits()]);
    h.finalize().into()
}

/// Generates `count` frames. Classes follow a round-robin so every class
/// appears ⌊count/3⌋ or ⌈count/3⌉ times.
pub fn generate_dataset(
    cfg: &FrameConfig,
    task: TaskKind,
    count: usize,
    scenario: ScenarioFlags,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::validation("count", "must be positive"));
    }
    let seeds = SeedSpec::new(seed);
    let frames = (0..count)
        .into_par_iter()
        .map(|i| {
            let scene = sample_scene(
                task,
                Some(i % NUM_CLASSES),
                cfg,
                scenario,
                seeds.stream(Stream::Scene, i as u64),
            )?;
            let h = synthesize_channel(&scene, cfg)?;
            let delay_s = match semantic_label(&scene, TaskKind::DelayEstimation) {
                Label::Delay(d) => d,
                Label::Class(_) => unreachable!(),
            };
            Ok(Frame {
                channel: h.data.iter().map(|v| Complex32::new(v.re as f32, v.im as f32)).collect(),
                label: scene.class_label as u8,
                delay_s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        task,
        n_classes: NUM_CLASSES as u8,
        n_slots: cfg.n_slots,
        n_subcarriers: cfg.n_subcarriers,
        master_seed: seed,
        digest: dataset_digest(cfg, scenario),
        frames,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Channel of frame `i` widened to double precision.
    pub fn channel(&self, i: usize) -> TfGrid {
        TfGrid {
            n_slots: self.n_slots,
            n_subcarriers: self.n_subcarriers,
            data: self.frames[i]
                .channel
                .iter()
                .map(|v| Complex64::new(v.re as f64, v.im as f64))
                .collect(),
        }
    }

    pub fn check_config(&self, cfg: &FrameConfig, scenario: ScenarioFlags) -> Result<()> {
        if self.digest != dataset_digest(cfg, scenario) {
            return Err(Error::Format("dataset digest does not match the configuration".into()));
        }
        Ok(())
    }

    /// Deterministic 8:1:1 train/validation/test partition.
    pub fn splits(&self) -> Splits {
        split_indices(self.len(), self.master_seed)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let per_frame = self.n_slots * self.n_subcarriers * 8 + 1 + 8;
        let mut out = Vec::with_capacity(HEADER_LEN + per_frame * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.task.code());
        out.push(self.n_classes);
        out.extend_from_slice(&(self.n_slots as u16).to_le_bytes());
        out.extend_from_slice(&(self.n_subcarriers as u16).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.master_seed.to_le_bytes());
        out.extend_from_slice(&self.digest);
        for f in &self.frames {
            for v in &f.channel {
                out.extend_from_slice(&v.re.to_le_bytes());
                out.extend_from_slice(&v.im.to_le_bytes());
            }
            out.push(f.label);
            out.extend_from_slice(&f.delay_s.to_le_bytes());
        }
        out
    }

    pub fn from_reader(mut r: impl Read) -> Result<Dataset> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|_| Error::Format("truncated dataset header".into()))?;
        if &header[0..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let task = TaskKind::from_code(header[8])?;
        let n_classes = header[9];
        let n_slots = u16::from_le_bytes([header[10], header[11]]) as usize;
        let n_subcarriers = u16::from_le_bytes([header[12], header[13]]) as usize;
        let count = u64::from_le_bytes(header[14..22].try_into().unwrap()) as usize;
        let master_seed = u64::from_le_bytes(header[22..30].try_into().unwrap());
        let digest: [u8; 32] = header[30..62].try_into().unwrap();
        if n_slots < 2 || n_subcarriers < 2 || n_classes == 0 {
            return Err(Error::Format("degenerate dimensions in header".into()));
        }
        let cells = n_slots * n_subcarriers;
        let mut buf = vec![0u8; cells * 8 + 9];
        let mut frames = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("dataset truncated at frame {i} of {count}")))?;
            let channel = buf[..cells * 8]
                .chunks_exact(8)
                .map(|c| {
                    Complex32::new(
                        f32::from_le_bytes(c[0..4].try_into().unwrap()),
                        f32::from_le_bytes(c[4..8].try_into().unwrap()),
                    )
                })
                .collect();
            let label = buf[cells * 8];
            if label >= n_classes {
                return Err(Error::Format(format!("label {label} out of range in frame {i}")));
            }
            let delay_s = f64::from_le_bytes(buf[cells * 8 + 1..].try_into().unwrap());
            frames.push(Frame {
                channel,
                label,
                delay_s,
            });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Format("trailing bytes after the declared frame count".into()));
        }
        Ok(Dataset {
            task,
            n_classes,
            n_slots,
            n_subcarriers,
            master_seed,
            digest,
            frames,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            e.into()
        }
    })?;
    Dataset::from_reader(BufReader::new(file))
}

/// Loads and checks the digest against the regenerating configuration.
pub fn load_dataset_for(path: &Path, cfg: &FrameConfig, scenario: ScenarioFlags) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    ds.check_config(cfg, scenario)?;
    Ok(ds)
}

pub fn split_indices(count: usize, seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(SeedSpec::new(seed).stream(Stream::Split, 0));
    idx.shuffle(&mut rng);
    let n_train = count * 8 / 10;
    let n_val = count / 10;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Splits {
        train: idx,
        val,
        test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        generate_dataset(
            &FrameConfig::default(),
            TaskKind::Classification,
            10,
            ScenarioFlags::default(),
            5,
        )
        .unwrap()
    }

    #[test]
    fn split_sizes() {
        let s = split_indices(30_000, 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (24_000, 3_000, 3_000));
        let s2 = split_indices(30_000, 1);
        assert_eq!(s, s2);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert!(all.iter().enumerate().all(|(i, &v)| i == v));
        let d = split_indices(3_000, 9);
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (2_400, 300, 300));
    }

    #[test]
    fn round_robin_balance() {
        let ds = small();
        let mut counts = [0usize; 3];
        for f in &ds.frames {
            counts[f.label as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 3 || c == 4));
    }

    #[test]
    fn bytes_round_trip_and_regeneration() {
        let ds = small();
        let bytes = ds.to_bytes();
        let back = Dataset::from_reader(&bytes[..]).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(small().to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let ds = small();
        let mut bytes = ds.to_bytes();
        assert!(Dataset::from_reader(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Dataset::from_reader(&longer[..]).is_err());
        bytes[0] = b'X';
        assert!(Dataset::from_reader(&bytes[..]).is_err());

        let cfg = FrameConfig::default();
        assert!(ds.check_config(&cfg, ScenarioFlags::default()).is_ok());
        let clutter = ScenarioFlags { clutter: true, ..Default::default() };
        assert!(ds.check_config(&cfg, clutter).is_err());
    }
}
