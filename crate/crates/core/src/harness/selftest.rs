//! Fast correctness checks runnable from the command line: finite-difference
//! gradients of every primitive, an end-to-end gradient spot check of the
//! learned-pilot classifier, and exactness oracles for the delay estimators.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ad::{gumbel_noise, gumbel_select, grad_check, grad_check_coords, ComplexMatrix, Graph, Tensor, Var};
use crate::baselines::{make_baseline_pattern, music_delay, music_pseudospectrum, omp_delay, BaselinePattern};
use crate::channel::{synthesize_channel, PathParams, ScenarioFlags, Scene};
use crate::config::{noise_variance_for_snr, FrameConfig, TaskKind, TrainConfig};
use crate::dataset::generate_dataset;
use crate::decoders::{build_delay_dictionary, classifier_forward, init_classifier, normalize_pilots, register};
use crate::encoder::{init_selector, select_pilots, soft_masks};
use crate::error::Result;

use super::data::PreparedData;

/// Relative tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Relative tolerance for the composed training graph.
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn tolerance(name: &str, err: f64, tol: f64) -> Check {
        Check {
            name: name.into(),
            passed: err <= tol,
            detail: format!("max rel err {err:.2e} (tol {tol:.0e})"),
        }
    }

    fn count(name: &str, hits: usize, total: usize) -> Check {
        Check {
            name: name.into(),
            passed: hits == total,
            detail: format!("{hits}/{total}"),
        }
    }
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(g.shape(y), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

/// Largest relative error over `trials` random draws of one primitive.
fn worst<F>(trials: u64, seed: u64, shape: &[usize], away_from_zero: bool, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var, u64) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = 0.0f64;
    for trial in 0..trials {
        let mut x = Tensor::randn(shape, 1.0, &mut rng);
        if away_from_zero {
            for v in &mut x.data {
                if v.abs() < 0.1 {
                    *v += 0.2f64.copysign(*v);
                }
            }
        }
        e = e.max(grad_check(|g, xv| f(g, xv, trial), &x, 1e-5)?);
    }
    Ok(e)
}

/// Finite-difference checks of every differentiable primitive.
pub fn primitive_gradient_checks(trials: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let b = Tensor::randn(&[5], 1.0, &mut rng);
    let k2 = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
    let k1 = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
    let other = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let proj = Tensor::randn(&[3, 2, 4], 1.0, &mut rng);
    let dict = Arc::new(ComplexMatrix {
        rows: 5,
        cols: 6,
        re: Tensor::randn(&[30], 1.0, &mut rng).data,
        im: Tensor::randn(&[30], 1.0, &mut rng).data,
    });
    let target = Tensor::randn(&[12], 1.0, &mut rng).data;
    let labels = [0usize, 2, 1, 1];

    let mut out = Vec::new();
    let mut push = |name: &str, e: f64| out.push(Check::tolerance(name, e, PRIMITIVE_TOL));
    push(
        "dense",
        worst(trials, 1, &[4, 3], false, |g, x, t| {
            let (wv, bv) = (g.leaf(w.clone()), g.leaf(b.clone()));
            let y = g.dense(x, wv, Some(bv))?;
            weighted_sum(g, y, t)
        })?,
    );
    push(
        "dense weight",
        worst(trials, 2, &[3, 5], false, |g, wv, t| {
            let x = g.constant(other.clone());
            let x = g.reshape(x, &[4, 3])?;
            let y = g.dense(x, wv, None)?;
            weighted_sum(g, y, t)
        })?,
    );
    push(
        "conv2d",
        worst(trials, 3, &[1, 2, 5, 5], false, |g, x, t| {
            let kv = g.constant(k2.clone());
            let y = g.conv2d(x, kv, None)?;
            weighted_sum(g, y, t)
        })?,
    );
    push(
        "conv2d kernel",
        worst(trials, 4, &[3, 2, 3, 3], false, |g, kv, t| {
            let x = g.constant(Tensor::randn(&[1, 2, 5, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(t)));
            let y = g.conv2d(x, kv, None)?;
            weighted_sum(g, y, t)
        })?,
    );
    push(
        "conv1d",
        worst(trials, 5, &[2, 3, 9], false, |g, x, t| {
            let kv = g.constant(k1.clone());
            let y = g.conv1d(x, kv, None)?;
            weighted_sum(g, y, t)
        })?,
    );
    push(
        "relu",
        worst(trials, 6, &[12], true, |g, x, t| {
            let y = g.relu(x);
            weighted_sum(g, y, t)
        })?,
    );
    push(
        "softmax cross-entropy",
        worst(trials, 7, &[4, 3], false, |g, x, _| {
            let p = g.softmax(x);
            g.cross_entropy(p, &labels)
        })?,
    );
    push(
        "add mul scale reshape",
        worst(trials, 8, &[3, 4], false, |g, x, t| {
            let ov = g.constant(other.clone());
            let a = g.add(x, ov)?;
            let m = g.mul(a, x)?;
            let s = g.scale(m, -1.7);
            let r = g.reshape(s, &[12])?;
            weighted_sum(g, r, t)
        })?,
    );
    push(
        "mask_mul",
        worst(trials, 9, &[4], false, |g, m, t| {
            let x = g.constant(other.clone());
            let y = g.mask_mul(x, m)?;
            weighted_sum(g, y, t)
        })?,
    );
    push(
        "sum_rows",
        worst(trials, 10, &[3, 4], false, |g, x, t| {
            let y = g.sum_rows(x)?;
            weighted_sum(g, y, t)
        })?,
    );
    push(
        "rms_normalize",
        worst(trials, 11, &[3, 4], false, |g, x, t| {
            let y = g.rms_normalize(x, 1e-9);
            weighted_sum(g, y, t)
        })?,
    );
    push("mse", worst(trials, 12, &[12], false, |g, x, _| g.mse(x, &target, 3.0))?);
    push(
        "slot projection",
        worst(trials, 13, &[2, 2, 4, 5], false, |g, x, t| {
            let wv = g.constant(proj.clone());
            let p = g.slot_projection(x, wv)?;
            weighted_sum(g, p, t)
        })?,
    );
    push(
        "dictionary correlation",
        worst(trials, 14, &[2, 2, 3, 5], false, |g, x, t| {
            let c = g.dict_magnitude(x, dict.clone())?;
            weighted_sum(g, c, t)
        })?,
    );
    push(
        "gumbel softmax",
        worst(trials, 15, &[3, 8], false, |g, x, t| {
            let noise = Tensor::new(&[3, 8], gumbel_noise(24, t))?;
            let sel = gumbel_select(g, x, noise, 0.7)?;
            weighted_sum(g, sel.soft, t)
        })?,
    );
    Ok(out)
}

/// Gradient of the full learned-pilot classification loss (selector, masking,
/// classifier, cross-entropy) on a small real batch, checked on 20
/// coordinates. Selector scores are checked through the relaxed forward pass,
/// since the hard straight-through value is piecewise constant in them;
/// decoder weights are checked through the hard pattern.
pub fn end_to_end_gradient_check(cfg: &FrameConfig, seed: u64) -> Result<Check> {
    let ds = generate_dataset(cfg, TaskKind::Classification, 12, ScenarioFlags::default(), seed)?;
    let data = PreparedData::new(&ds, cfg)?;
    let idx: Vec<usize> = (0..4).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let noisy = data.noisy_batch(&idx, noise_variance_for_snr(cfg.pilot_energy, 10.0), seed);
    let head = init_classifier(cfg, 1, 4, seed);
    let sel = init_selector(16, cfg, &TrainConfig::default(), seed + 1)?;
    let gumbel_seed = seed + 2;
    let temperature = 5.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);

    let with_scores = |g: &mut Graph, scores: Var| -> Result<Var> {
        let p = register(g, &head.tensors, false);
        let obs = g.constant(noisy.clone());
        let s = soft_masks(g, scores, temperature, gumbel_seed)?;
        let mask = g.sum_rows(s.soft)?;
        let x = g.mask_mul(obs, mask)?;
        let out = classifier_forward(g, &head, &p, x)?;
        g.cross_entropy(out.probs, &labels)
    };
    let coords: Vec<usize> = (0..10).map(|_| rng.gen_range(0..sel.scores.len())).collect();
    let mut err = grad_check_coords(with_scores, &sel.scores, 1e-5, &coords)?;

    // one decoder tensor at a time, the others held fixed
    let nb = 4 * head.blocks;
    for (which, n) in [(0usize, 3usize), (nb, 4), (nb + 2, 3)] {
        let with_param = |g: &mut Graph, wv: Var| -> Result<Var> {
            let mut p = register(g, &head.tensors, false);
            p[which] = wv;
            let obs = g.constant(noisy.clone());
            let scores = g.constant(sel.scores.clone());
            let (mask, _) = select_pilots(g, scores, temperature, gumbel_seed)?;
            let x = g.mask_mul(obs, mask)?;
            let out = classifier_forward(g, &head, &p, x)?;
            g.cross_entropy(out.probs, &labels)
        };
        let t = &head.tensors[which];
        let coords: Vec<usize> = (0..n).map(|_| rng.gen_range(0..t.len())).collect();
        err = err.max(grad_check_coords(with_param, t, 1e-5, &coords)?);
    }
    Ok(Check::tolerance("end-to-end learned-pilot gradient (20 coords)", err, END_TO_END_TOL))
}

fn single_path_obs(cfg: &FrameConfig, gain: Complex64, delay: f64, pattern: &crate::encoder::PilotPattern) -> Result<Tensor> {
    let scene = Scene::from_paths(vec![PathParams::static_path(gain, delay)], 0)?;
    normalize_pilots(&synthesize_channel(&scene, cfg)?, pattern, Complex64::new(1.0, 0.0))
}

/// OMP and MUSIC on noiseless single on-grid paths, plus MUSIC flatness
/// under a white covariance.
pub fn estimator_oracles(cfg: &FrameConfig, trials: usize) -> Result<Vec<Check>> {
    let dict = build_delay_dictionary(cfg, 4 * cfg.n_subcarriers, crate::channel::max_scene_delay())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut draw = |limit: usize| {
        let q = rng.gen_range(0..limit);
        let g = Complex64::from_polar(rng.gen_range(0.2..2.0), rng.gen_range(0.0..std::f64::consts::TAU));
        (q, g)
    };

    let op = make_baseline_pattern(BaselinePattern::Optimized, 32, cfg, 0)?;
    let mut omp_hits = 0;
    for _ in 0..trials {
        let (q, g) = draw(dict.len());
        let r = omp_delay(&single_path_obs(cfg, g, dict.grid[q], &op)?, &dict, &op, 1)?;
        if r.delays == [dict.grid[q]] {
            omp_hits += 1;
        }
    }

    let mut music_hits = 0;
    let up = make_baseline_pattern(BaselinePattern::Uniform, 32, cfg, 0)?;
    // the uniform lattice is only unambiguous up to 1/(spacing·Δf)
    let sp = up.subcarriers();
    let up_limit = dict.grid.iter().filter(|&&t| t * (sp[1] - sp[0]) as f64 * cfg.subcarrier_spacing_hz < 1.0).count();
    for pattern in [&op, &up] {
        let limit = if std::ptr::eq(pattern, &up) { up_limit } else { dict.len() };
        for _ in 0..trials {
            let (q, g) = draw(limit);
            let est = music_delay(&single_path_obs(cfg, g, dict.grid[q], pattern)?, pattern, 1, &dict)?;
            if (est - dict.grid[q]).abs() <= dict.spacing() * (1.0 + 1e-9) {
                music_hits += 1;
            }
        }
    }

    let subs: Vec<usize> = (0..8).map(|i| i * 3).collect();
    let spec = music_pseudospectrum(&DMatrix::identity(8, 8), &subs, &dict, 1)?;
    let (mx, mn) = spec.iter().fold((0.0f64, f64::MAX), |(a, b), &v| (a.max(v), b.min(v)));
    Ok(vec![
        Check::count("OMP exact single path", omp_hits, trials),
        Check::count("MUSIC within one bin", music_hits, 2 * trials),
        Check {
            name: "MUSIC flat under white covariance".into(),
            passed: mx / mn < 1.5,
            detail: format!("max/min {:.4}", mx / mn),
        },
    ])
}

/// Everything the `selftest` command runs.
pub fn run_selftest(cfg: &FrameConfig) -> Result<Vec<Check>> {
    let mut checks = primitive_gradient_checks(3)?;
    checks.push(end_to_end_gradient_check(cfg, 5)?);
    checks.extend(estimator_oracles(cfg, 100)?);
    Ok(checks)
}
