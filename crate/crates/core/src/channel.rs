//! Scene sampling and micro-Doppler time–frequency channel synthesis.
//!
//! A scene is a handful of propagation paths. Each path contributes
//! `α·exp(−j2π m Δf τ)·exp(j2π ν n T)·exp(j(4π/λ) A sin(ω n T + φ))` to
//! cell `(n, m)` of the channel grid.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{FrameConfig, TaskKind, NUM_CLASSES, SPEED_OF_LIGHT};
use crate::error::{Error, Result};

/// Complex N×M matrix stored row-major in (slot, subcarrier).
#[derive(Debug, Clone, PartialEq)]
pub struct TfGrid {
    pub n_slots: usize,
    pub n_subcarriers: usize,
    pub data: Vec<Complex64>,
}

impl TfGrid {
    pub fn zeros(n_slots: usize, n_subcarriers: usize) -> Self {
        Self {
            n_slots,
            n_subcarriers,
            data: vec![Complex64::new(0.0, 0.0); n_slots * n_subcarriers],
        }
    }

    pub fn filled(n_slots: usize, n_subcarriers: usize, v: Complex64) -> Self {
        Self {
            n_slots,
            n_subcarriers,
            data: vec![v; n_slots * n_subcarriers],
        }
    }

    pub fn from_vec(n_slots: usize, n_subcarriers: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != n_slots * n_subcarriers {
            return Err(Error::shape(format!(
                "{} values for a {n_slots}x{n_subcarriers} grid",
                data.len()
            )));
        }
        Ok(Self {
            n_slots,
            n_subcarriers,
            data,
        })
    }

    #[inline]
    pub fn get(&self, n: usize, m: usize) -> Complex64 {
        self.data[n * self.n_subcarriers + m]
    }

    #[inline]
    pub fn set(&mut self, n: usize, m: usize, v: Complex64) {
        self.data[n * self.n_subcarriers + m] = v;
    }

    pub fn same_shape(&self, other: &TfGrid) -> bool {
        self.n_slots == other.n_slots && self.n_subcarriers == other.n_subcarriers
    }

    pub fn hadamard(&self, other: &TfGrid) -> Result<TfGrid> {
        if !self.same_shape(other) {
            return Err(Error::shape("hadamard operands differ in shape"));
        }
        Ok(TfGrid {
            n_slots: self.n_slots,
            n_subcarriers: self.n_subcarriers,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Kinematic parameters of one propagation path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathParams {
    pub gain: Complex64,
    pub delay_s: f64,
    pub doppler_hz: f64,
    pub micro_amp_m: f64,
    pub micro_omega_rad_s: f64,
    pub micro_phase_rad: f64,
    /// Radial velocity the Doppler was derived from (kept for inspection).
    pub velocity_mps: f64,
}

impl PathParams {
    /// A static unit path at the given delay.
    pub fn static_path(gain: Complex64, delay_s: f64) -> Self {
        Self {
            gain,
            delay_s,
            doppler_hz: 0.0,
            micro_amp_m: 0.0,
            micro_omega_rad_s: 0.0,
            micro_phase_rad: 0.0,
            velocity_mps: 0.0,
        }
    }
}

/// Target classes with their kinematic envelopes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetClass {
    Pedestrian,
    Car,
    Drone,
}

/// Sampling envelope for one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassKinematics {
    pub range_m: (f64, f64),
    pub velocity_mps: (f64, f64),
    /// Micro-motion rate ω/2π in Hz, `None` for rigid targets.
    pub micro_hz: Option<(f64, f64)>,
    /// Micro-motion displacement A in metres.
    pub micro_amp_m: Option<(f64, f64)>,
}

impl TargetClass {
    pub const ALL: [TargetClass; NUM_CLASSES] =
        [TargetClass::Pedestrian, TargetClass::Car, TargetClass::Drone];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::validation("class", "class index out of range"))
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetClass::Pedestrian => "pedestrian",
            TargetClass::Car => "car",
            TargetClass::Drone => "drone",
        }
    }

    pub fn kinematics(self) -> ClassKinematics {
        match self {
            TargetClass::Pedestrian => ClassKinematics {
                range_m: (0.0, 200.0),
                velocity_mps: (0.0, 2.0),
                micro_hz: Some((1.0, 3.0)),
                micro_amp_m: Some((0.01, 0.1)),
            },
            TargetClass::Car => ClassKinematics {
                range_m: (0.0, 200.0),
                velocity_mps: (10.0, 20.0),
                micro_hz: None,
                micro_amp_m: None,
            },
            TargetClass::Drone => ClassKinematics {
                range_m: (0.0, 200.0),
                velocity_mps: (5.0, 10.0),
                micro_hz: Some((80.0, 120.0)),
                micro_amp_m: Some((0.005, 0.05)),
            },
        }
    }
}

/// Scenario switches for the experiment families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct ScenarioFlags {
    pub micro_doppler_disabled: bool,
    pub clutter: bool,
    pub single_path: bool,
}

impl ScenarioFlags {
    pub fn bits(self) -> u8 {
        self.micro_doppler_disabled as u8 | (self.clutter as u8) << 1 | (self.single_path as u8) << 2
    }

    pub fn from_bits(b: u8) -> Self {
        Self {
            micro_doppler_disabled: b & 1 != 0,
            clutter: b & 2 != 0,
            single_path: b & 4 != 0,
        }
    }
}

pub const PATHS_PER_TARGET: usize = 3;
pub const CLUTTER_PATHS: usize = 5;
/// Range spread of the paths belonging to one target.
pub const TARGET_SPREAD_M: f64 = 30.0;
const VELOCITY_JITTER: f64 = 0.1;

/// Propagation paths plus semantic labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub paths: Vec<PathParams>,
    pub class_label: usize,
    pub dominant_path: usize,
    /// Clutter paths are stored after the target paths.
    pub clutter_count: usize,
}

impl Scene {
    /// Builds a scene from explicit target paths; the dominant path is the
    /// first one with the largest |α|.
    pub fn from_paths(paths: Vec<PathParams>, class_label: usize) -> Result<Scene> {
        Self::with_clutter(paths, Vec::new(), class_label)
    }

    pub fn with_clutter(
        mut target_paths: Vec<PathParams>,
        clutter: Vec<PathParams>,
        class_label: usize,
    ) -> Result<Scene> {
        if target_paths.is_empty() {
            return Err(Error::validation("scene", "needs at least one target path"));
        }
        if class_label >= NUM_CLASSES {
            return Err(Error::validation("class", "class index out of range"));
        }
        let dominant_path = dominant_index(&target_paths);
        let clutter_count = clutter.len();
        target_paths.extend(clutter);
        Ok(Scene {
            paths: target_paths,
            class_label,
            dominant_path,
            clutter_count,
        })
    }

    pub fn target_paths(&self) -> &[PathParams] {
        &self.paths[..self.paths.len() - self.clutter_count]
    }
}

fn dominant_index(paths: &[PathParams]) -> usize {
    let mut best = 0;
    for (i, p) in paths.iter().enumerate() {
        if p.gain.norm() > paths[best].gain.norm() {
            best = i;
        }
    }
    best
}

fn complex_gaussian(rng: &mut impl Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

pub fn range_to_delay(range_m: f64) -> f64 {
    2.0 * range_m / SPEED_OF_LIGHT
}

/// Largest delay produced by the class tables.
pub fn max_scene_delay() -> f64 {
    range_to_delay(200.0)
}

/// Draws a scene. Without an explicit class the class is drawn uniformly.
pub fn sample_scene(
    task: TaskKind,
    class: Option<usize>,
    cfg: &FrameConfig,
    scenario: ScenarioFlags,
    seed: u64,
) -> Result<Scene> {
    let _ = task;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = match class {
        Some(c) => TargetClass::from_index(c)?,
        None => TargetClass::ALL[rng.gen_range(0..NUM_CLASSES)],
    };
    let kin = class.kinematics();
    let n_target = if scenario.single_path { 1 } else { PATHS_PER_TARGET };
    let n_clutter = if scenario.clutter { CLUTTER_PATHS } else { 0 };
    let (target_var, clutter_var) = if n_clutter > 0 {
        (0.5 / n_target as f64, 0.5 / n_clutter as f64)
    } else {
        (1.0 / n_target as f64, 0.0)
    };

    let velocity = uniform(&mut rng, kin.velocity_mps);
    let (omega, amp) = match (kin.micro_hz, kin.micro_amp_m) {
        (Some(hz), Some(a)) if !scenario.micro_doppler_disabled => {
            (2.0 * PI * uniform(&mut rng, hz), uniform(&mut rng, a))
        }
        _ => (0.0, 0.0),
    };
    let spread = if n_target > 1 { TARGET_SPREAD_M } else { 0.0 };
    let base_range = uniform(&mut rng, (kin.range_m.0, kin.range_m.1 - spread));

    let mut targets = Vec::with_capacity(n_target);
    for _ in 0..n_target {
        let v = if n_target > 1 {
            let jitter = uniform(&mut rng, (1.0 - VELOCITY_JITTER, 1.0 + VELOCITY_JITTER));
            (velocity * jitter).clamp(kin.velocity_mps.0, kin.velocity_mps.1)
        } else {
            velocity
        };
        let range = base_range + uniform(&mut rng, (0.0, spread));
        targets.push(PathParams {
            gain: complex_gaussian(&mut rng, target_var),
            delay_s: range_to_delay(range),
            doppler_hz: v / cfg.wavelength_m,
            micro_amp_m: amp,
            micro_omega_rad_s: omega,
            micro_phase_rad: uniform(&mut rng, (0.0, 2.0 * PI)),
            velocity_mps: v,
        });
    }
    let clutter = (0..n_clutter)
        .map(|_| {
            let range = uniform(&mut rng, kin.range_m);
            PathParams::static_path(complex_gaussian(&mut rng, clutter_var), range_to_delay(range))
        })
        .collect();
    Scene::with_clutter(targets, clutter, class.index())
}

/// Evaluates the micro-Doppler channel on the full grid.
pub fn synthesize_channel(scene: &Scene, cfg: &FrameConfig) -> Result<TfGrid> {
    let support = cfg.max_unambiguous_delay_s();
    let (n_slots, n_sc) = (cfg.n_slots, cfg.n_subcarriers);
    let mut grid = TfGrid::zeros(n_slots, n_sc);
    let k_micro = 4.0 * PI / cfg.wavelength_m;
    let mut freq = vec![Complex64::new(0.0, 0.0); n_sc];
    for p in &scene.paths {
        if !(p.delay_s >= 0.0 && p.delay_s < support) {
            return Err(Error::Validation {
                field: "delay_s".into(),
                reason: format!("{} s outside [0, {support})", p.delay_s),
            });
        }
        for (m, f) in freq.iter_mut().enumerate() {
            *f = Complex64::from_polar(1.0, -2.0 * PI * m as f64 * cfg.subcarrier_spacing_hz * p.delay_s);
        }
        for n in 0..n_slots {
            let t = n as f64 * cfg.slot_interval_s;
            let phase = 2.0 * PI * p.doppler_hz * t
                + k_micro * p.micro_amp_m * (p.micro_omega_rad_s * t + p.micro_phase_rad).sin();
            let slow = p.gain * Complex64::from_polar(1.0, phase);
            let row = &mut grid.data[n * n_sc..(n + 1) * n_sc];
            for (cell, f) in row.iter_mut().zip(&freq) {
                *cell += slow * f;
            }
        }
    }
    Ok(grid)
}

/// Adds circularly-symmetric complex Gaussian noise of the given per-cell variance.
pub fn add_noise(y: &mut [Complex64], noise_variance: f64, seed: u64) {
    if noise_variance == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in y.iter_mut() {
        *v += complex_gaussian(&mut rng, noise_variance);
    }
}

/// Unit-variance noise draws; scaling by σ gives common random numbers across SNR points.
pub fn unit_noise(len: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| complex_gaussian(&mut rng, 1.0)).collect()
}

/// Y = H ⊙ X_s + V.
pub fn receive(h: &TfGrid, x_s: &TfGrid, noise_variance: f64, seed: u64) -> Result<TfGrid> {
    if noise_variance < 0.0 {
        return Err(Error::validation("noise_variance", "must be non-negative"));
    }
    let mut y = h.hadamard(x_s)?;
    add_noise(&mut y.data, noise_variance, seed);
    Ok(y)
}

/// Unit-power QPSK filler occupying the data cells.
pub fn qpsk_data(cfg: &FrameConfig, seed: u64) -> TfGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = std::f64::consts::FRAC_1_SQRT_2;
    let data = (0..cfg.grid_cells())
        .map(|_| {
            let re = if rng.gen::<bool>() { a } else { -a };
            let im = if rng.gen::<bool>() { a } else { -a };
            Complex64::new(re, im)
        })
        .collect();
    TfGrid {
        n_slots: cfg.n_slots,
        n_subcarriers: cfg.n_subcarriers,
        data,
    }
}

/// Task variable of a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Class(usize),
    Delay(f64),
}

pub fn semantic_label(scene: &Scene, task: TaskKind) -> Label {
    match task {
        TaskKind::Classification => Label::Class(scene.class_label),
        TaskKind::DelayEstimation => Label::Delay(scene.paths[scene.dominant_path].delay_s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{SeedSpec, Stream};
    use proptest::prelude::*;
    use rustfft::FftPlanner;

    fn cfg() -> FrameConfig {
        FrameConfig::default()
    }

    fn one_path(delay: f64, doppler: f64) -> Scene {
        let mut p = PathParams::static_path(Complex64::new(1.0, 0.0), delay);
        p.doppler_hz = doppler;
        Scene::from_paths(vec![p], 0).unwrap()
    }

    #[test]
    fn trivial_path_is_all_ones() {
        let h = synthesize_channel(&one_path(0.0, 0.0), &cfg()).unwrap();
        assert!(h.data.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() == 0.0));
    }

    #[test]
    fn one_sample_delay_matches_closed_form() {
        let c = cfg();
        let tau = 1.0 / (c.n_subcarriers as f64 * c.subcarrier_spacing_hz);
        let h = synthesize_channel(&one_path(tau, 0.0), &c).unwrap();
        for n in 0..c.n_slots {
            for m in 0..c.n_subcarriers {
                let want =
                    Complex64::from_polar(1.0, -2.0 * PI * m as f64 / c.n_subcarriers as f64);
                assert!((h.get(n, m) - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn delay_outside_support_is_rejected() {
        let c = cfg();
        let scene = one_path(c.max_unambiguous_delay_s(), 0.0);
        assert!(synthesize_channel(&scene, &c).is_err());
    }

    #[test]
    fn superposition_is_exact() {
        let c = cfg();
        let seed = SeedSpec::new(3).stream(Stream::Scene, 0);
        let scene = sample_scene(TaskKind::Classification, Some(2), &c, ScenarioFlags::default(), seed)
            .unwrap();
        let whole = synthesize_channel(&scene, &c).unwrap();
        let mut sum = TfGrid::zeros(c.n_slots, c.n_subcarriers);
        for p in &scene.paths {
            let part = synthesize_channel(&Scene::from_paths(vec![p.clone()], 0).unwrap(), &c).unwrap();
            for (s, v) in sum.data.iter_mut().zip(&part.data) {
                *s += v;
            }
        }
        for (a, b) in whole.data.iter().zip(&sum.data) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn class_envelopes_hold() {
        let c = cfg();
        for class in 0..3 {
            for s in 0..200u64 {
                let scene = sample_scene(TaskKind::Classification, Some(class), &c, ScenarioFlags::default(), s)
                    .unwrap();
                let kin = TargetClass::from_index(class).unwrap().kinematics();
                assert_eq!(scene.paths.len(), PATHS_PER_TARGET);
                for p in scene.target_paths() {
                    assert!(p.velocity_mps >= kin.velocity_mps.0 && p.velocity_mps <= kin.velocity_mps.1);
                    assert!((p.doppler_hz - p.velocity_mps / c.wavelength_m).abs() < 1e-9);
                    let range = p.delay_s * SPEED_OF_LIGHT / 2.0;
                    assert!((0.0..=200.0 + 1e-9).contains(&range));
                    assert!((0.0..2.0 * PI).contains(&p.micro_phase_rad));
                    match kin.micro_hz {
                        Some((lo, hi)) => {
                            let hz = p.micro_omega_rad_s / (2.0 * PI);
                            assert!(hz >= lo && hz <= hi);
                            assert!(p.micro_amp_m > 0.0);
                        }
                        None => assert_eq!(p.micro_amp_m, 0.0),
                    }
                }
            }
        }
    }

    #[test]
    fn micro_doppler_switch_zeroes_amplitudes() {
        let flags = ScenarioFlags {
            micro_doppler_disabled: true,
            ..Default::default()
        };
        for s in 0..50 {
            let scene = sample_scene(TaskKind::Classification, None, &cfg(), flags, s).unwrap();
            assert!(scene.paths.iter().all(|p| p.micro_amp_m == 0.0));
        }
    }

    #[test]
    fn clutter_paths_are_static() {
        let flags = ScenarioFlags {
            clutter: true,
            ..Default::default()
        };
        let scene = sample_scene(TaskKind::Classification, Some(1), &cfg(), flags, 9).unwrap();
        assert_eq!(scene.clutter_count, CLUTTER_PATHS);
        assert!(scene.dominant_path < scene.paths.len() - scene.clutter_count);
        for p in &scene.paths[PATHS_PER_TARGET..] {
            assert_eq!(p.doppler_hz, 0.0);
            assert_eq!(p.micro_amp_m, 0.0);
        }
    }

    #[test]
    fn gain_normalisation_over_many_scenes() {
        for flags in [
            ScenarioFlags::default(),
            ScenarioFlags { clutter: true, ..Default::default() },
            ScenarioFlags { single_path: true, ..Default::default() },
        ] {
            let n = 10_000;
            let total: f64 = (0..n)
                .map(|s| {
                    let sc = sample_scene(TaskKind::Classification, None, &cfg(), flags, s).unwrap();
                    sc.paths.iter().map(|p| p.gain.norm_sqr()).sum::<f64>()
                })
                .sum();
            let mean = total / n as f64;
            assert!((mean - 1.0).abs() < 0.03, "{flags:?}: {mean}");
        }
    }

    #[test]
    fn static_scene_is_constant_in_time() {
        let c = cfg();
        let scene = Scene::from_paths(
            vec![
                PathParams::static_path(Complex64::new(0.3, -0.2), 2e-7),
                PathParams::static_path(Complex64::new(-0.1, 0.5), 9e-7),
            ],
            0,
        )
        .unwrap();
        let h = synthesize_channel(&scene, &c).unwrap();
        for n in 1..c.n_slots {
            for m in 0..c.n_subcarriers {
                assert!((h.get(n, m) - h.get(0, m)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn doppler_only_path_peaks_at_expected_bin() {
        let c = cfg();
        let n = c.n_slots;
        let doppler = 5.0 / (n as f64 * c.slot_interval_s) + 3.0;
        let h = synthesize_channel(&one_path(4e-7, doppler), &c).unwrap();
        let expected = (doppler * c.slot_interval_s * n as f64).round() as usize % n;
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
        for m in 0..c.n_subcarriers {
            let mut col: Vec<Complex64> = (0..n).map(|k| h.get(k, m)).collect();
            fft.process(&mut col);
            let peak = (0..n)
                .max_by(|&a, &b| col[a].norm().total_cmp(&col[b].norm()))
                .unwrap();
            assert_eq!(peak, expected);
        }
    }

    #[test]
    fn receive_behaviour() {
        let c = cfg();
        let h = synthesize_channel(&one_path(3e-7, 40.0), &c).unwrap();
        let x = qpsk_data(&c, 5);
        let clean = receive(&h, &x, 0.0, 1).unwrap();
        assert_eq!(clean, h.hadamard(&x).unwrap());
        let a = receive(&h, &x, 0.5, 11).unwrap();
        let b = receive(&h, &x, 0.5, 11).unwrap();
        assert_eq!(a, b);
        let bad = TfGrid::zeros(2, 2);
        assert!(receive(&h, &bad, 0.0, 1).is_err());
    }

    #[test]
    fn noise_variance_monte_carlo() {
        let zeros = TfGrid::zeros(100, 100);
        let y = receive(&zeros, &zeros, 1.0, 42).unwrap();
        let var = y.energy() / y.data.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn labels() {
        let mk = |g: f64, d: f64| PathParams::static_path(Complex64::new(g, 0.0), d);
        let scene = Scene::from_paths(vec![mk(0.9, 1e-7), mk(0.3, 5e-7)], 0).unwrap();
        assert_eq!(semantic_label(&scene, TaskKind::Classification), Label::Class(0));
        assert_eq!(semantic_label(&scene, TaskKind::DelayEstimation), Label::Delay(1e-7));
        let tie = Scene::from_paths(vec![mk(0.5, 2e-7), mk(-0.5, 4e-7)], 1).unwrap();
        assert_eq!(tie.dominant_path, 0);
        assert_eq!(semantic_label(&tie, TaskKind::DelayEstimation), Label::Delay(2e-7));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn magnitude_bounded_by_gain_sum(seed in any::<u64>(), clutter in any::<bool>()) {
            let c = cfg();
            let flags = ScenarioFlags { clutter, ..Default::default() };
            let scene = sample_scene(TaskKind::Classification, None, &c, flags, seed).unwrap();
            let bound: f64 = scene.paths.iter().map(|p| p.gain.norm()).sum();
            let h = synthesize_channel(&scene, &c).unwrap();
            prop_assert!(h.data.iter().all(|v| v.norm() <= bound + 1e-12));
        }
    }
}
