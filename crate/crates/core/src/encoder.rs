//! Learnable pilot placement: per-head score grids, Gumbel-softmax
//! selection with straight-through gradients, collision resolution and
//! pilot/data multiplexing.

use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ad::{argmax, gumbel_noise, gumbel_select, Graph, Tensor, Var};
use crate::channel::TfGrid;
use crate::config::{FrameConfig, TrainConfig};
use crate::error::{Error, Result};

/// Temperature annealing `τ(e) = max(τ_init·decay^e, τ_min)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub init: f64,
    pub decay: f64,
    pub min: f64,
}

impl TemperatureSchedule {
    pub fn from_config(t: &TrainConfig) -> Result<Self> {
        if !(t.tau_min > 0.0) || !(t.tau_init > 0.0) || !(t.tau_decay > 0.0) {
            return Err(Error::validation("tau", "temperatures and decay must be positive"));
        }
        Ok(Self {
            init: t.tau_init,
            decay: t.tau_decay,
            min: t.tau_min,
        })
    }

    pub fn at(&self, epoch: usize) -> f64 {
        (self.init * self.decay.powi(epoch as i32)).max(self.min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    /// Scores `[N_p, N, M]`, one grid per head.
    pub scores: Tensor,
    pub n_pilots: usize,
    pub schedule: TemperatureSchedule,
}

impl SelectorParams {
    pub fn n_slots(&self) -> usize {
        self.scores.shape[1]
    }

    pub fn n_subcarriers(&self) -> usize {
        self.scores.shape[2]
    }
}

pub fn init_selector(n_pilots: usize, cfg: &FrameConfig, train: &TrainConfig, seed: u64) -> Result<SelectorParams> {
    let cells = cfg.grid_cells();
    if n_pilots == 0 || n_pilots > cells {
        return Err(Error::Validation {
            field: "n_pilots".into(),
            reason: format!("{n_pilots} pilots do not fit a grid of {cells} cells"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(SelectorParams {
        scores: Tensor::randn(&[n_pilots, cfg.n_slots, cfg.n_subcarriers], 0.01, &mut rng),
        n_pilots,
        schedule: TemperatureSchedule::from_config(train)?,
    })
}

/// A set of distinct pilot cells on an N×M grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotPattern {
    pub n_slots: usize,
    pub n_subcarriers: usize,
    /// `(slot, subcarrier)` in head order.
    pub cells: Vec<(usize, usize)>,
    /// Row-major occupancy.
    pub mask: Vec<bool>,
}

impl PilotPattern {
    pub fn from_cells(n_slots: usize, n_subcarriers: usize, cells: Vec<(usize, usize)>) -> Result<Self> {
        let mut mask = vec![false; n_slots * n_subcarriers];
        for &(n, m) in &cells {
            if n >= n_slots || m >= n_subcarriers {
                return Err(Error::Validation {
                    field: "pattern".into(),
                    reason: format!("cell ({n}, {m}) outside {n_slots}x{n_subcarriers}"),
                });
            }
            let f = n * n_subcarriers + m;
            if mask[f] {
                return Err(Error::Validation {
                    field: "pattern".into(),
                    reason: format!("duplicate cell ({n}, {m})"),
                });
            }
            mask[f] = true;
        }
        Ok(Self {
            n_slots,
            n_subcarriers,
            cells,
            mask,
        })
    }

    pub fn from_flat(n_slots: usize, n_subcarriers: usize, flat: &[usize]) -> Result<Self> {
        let cells = flat.iter().map(|&f| (f / n_subcarriers, f % n_subcarriers)).collect();
        Self::from_cells(n_slots, n_subcarriers, cells)
    }

    pub fn full(n_slots: usize, n_subcarriers: usize) -> Self {
        let cells = (0..n_slots).flat_map(|n| (0..n_subcarriers).map(move |m| (n, m))).collect();
        Self::from_cells(n_slots, n_subcarriers, cells).expect("full grid is valid")
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, n: usize, m: usize) -> bool {
        self.mask[n * self.n_subcarriers + m]
    }

    /// Occupancy as a 0/1 tensor of length N·M.
    pub fn mask_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.mask.iter().map(|&b| b as u8 as f64).collect::<Vec<_>>())
    }

    /// Sorted distinct subcarriers carrying at least one pilot.
    pub fn subcarriers(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.cells.iter().map(|c| c.1).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Sorted distinct slots carrying at least one pilot.
    pub fn slots(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.cells.iter().map(|c| c.0).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["head", "slot", "subcarrier"])?;
        for (h, (n, m)) in self.cells.iter().enumerate() {
            w.write_record([h.to_string(), n.to_string(), m.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, n_slots: usize, n_subcarriers: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Error::MissingArtifact(path.display().to_string())
            }
            _ => e.into(),
        })?;
        let mut rows: Vec<(usize, usize, usize)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<usize> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad pattern row {rec:?}")))
            };
            rows.push((field(0)?, field(1)?, field(2)?));
        }
        rows.sort_unstable();
        Self::from_cells(n_slots, n_subcarriers, rows.into_iter().map(|(_, n, m)| (n, m)).collect())
    }
}

/// Resolves collisions among per-head picks: a head whose cell is already
/// claimed takes its own next-highest-scoring unclaimed cell, heads scanned
/// in order, ties to the lowest flat index.
pub fn combine_masks(hard: &[usize], scores: &Tensor, n_slots: usize, n_subcarriers: usize) -> Result<PilotPattern> {
    let cells = n_slots * n_subcarriers;
    if scores.len() != hard.len() * cells {
        return Err(Error::shape(format!(
            "{} heads need scores of {} entries, got {}",
            hard.len(),
            hard.len() * cells,
            scores.len()
        )));
    }
    if hard.len() > cells {
        return Err(Error::validation("n_pilots", "more heads than grid cells"));
    }
    let mut claimed = vec![false; cells];
    let mut flat = Vec::with_capacity(hard.len());
    for (r, &pick) in hard.iter().enumerate() {
        let cell = if !claimed[pick] {
            pick
        } else {
            let row = &scores.data[r * cells..(r + 1) * cells];
            let mut best = usize::MAX;
            for (i, &v) in row.iter().enumerate() {
                if !claimed[i] && (best == usize::MAX || v > row[best]) {
                    best = i;
                }
            }
            best
        };
        claimed[cell] = true;
        flat.push(cell);
    }
    PilotPattern::from_flat(n_slots, n_subcarriers, &flat)
}

/// Relaxed selection of all heads at temperature `τ` with Gumbel noise from
/// `seed`. Returns the soft masks `[N_p, N·M]`, the raw per-head argmax and
/// the perturbed scores.
pub fn soft_masks(g: &mut Graph, scores: Var, temperature: f64, seed: u64) -> Result<crate::ad::GumbelSelection> {
    let shape = g.shape(scores).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!("scores must be [N_p, N, M], got {shape:?}")));
    }
    let flat = g.reshape(scores, &[shape[0], shape[1] * shape[2]])?;
    let noise = Tensor::new(&[shape[0], shape[1] * shape[2]], gumbel_noise(g.value(flat).len(), seed))?;
    gumbel_select(g, flat, noise, temperature)
}

/// Straight-through pilot mask for one training step: the forward value is
/// the de-duplicated hard pattern, the backward pass follows the soft masks.
/// Returns the mask var `[N·M]` and the hard pattern.
pub fn select_pilots(g: &mut Graph, scores: Var, temperature: f64, seed: u64) -> Result<(Var, PilotPattern)> {
    let shape = g.shape(scores).to_vec();
    let (heads, n, m) = (shape[0], shape[1], shape[2]);
    let sel = soft_masks(g, scores, temperature, seed)?;
    let pattern = combine_masks(&sel.hard, &sel.perturbed, n, m)?;
    let mut hard = Tensor::zeros(&[heads, n * m]);
    for (r, &(sn, sm)) in pattern.cells.iter().enumerate() {
        hard.data[r * n * m + sn * m + sm] = 1.0;
    }
    let st = g.straight_through(hard, sel.soft)?;
    Ok((g.sum_rows(st)?, pattern))
}

/// Noise-free argmax per head followed by collision resolution.
pub fn export_pattern(params: &SelectorParams) -> PilotPattern {
    let (n, m) = (params.n_slots(), params.n_subcarriers());
    let hard: Vec<usize> = params.scores.data.chunks_exact(n * m).map(argmax).collect();
    combine_masks(&hard, &params.scores, n, m).expect("selector invariants hold")
}

/// `X_s = √E_p·s_p` on pilot cells, `√E_d·x_data` elsewhere.
pub fn multiplex(pattern: &PilotPattern, x_data: &TfGrid, cfg: &FrameConfig) -> Result<TfGrid> {
    if x_data.n_slots != pattern.n_slots || x_data.n_subcarriers != pattern.n_subcarriers {
        return Err(Error::shape(format!(
            "pattern {}x{} vs data {}x{}",
            pattern.n_slots, pattern.n_subcarriers, x_data.n_slots, x_data.n_subcarriers
        )));
    }
    let pilot = cfg.pilot_symbol * cfg.pilot_energy.sqrt();
    let data_gain = cfg.data_energy.sqrt();
    let data = x_data
        .data
        .iter()
        .zip(&pattern.mask)
        .map(|(&x, &p)| if p { pilot } else { x * data_gain })
        .collect::<Vec<Complex64>>();
    TfGrid::from_vec(x_data.n_slots, x_data.n_subcarriers, data)
}

/// Writes a pattern as an SVG occupancy map, slots as rows.
pub fn pattern_svg(pattern: &PilotPattern, title: &str) -> String {
    let cell = 8.0;
    let (w, h) = (pattern.n_subcarriers as f64 * cell, pattern.n_slots as f64 * cell);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
        w + 60.0,
        h + 60.0
    );
    s.push_str(&format!(
        "<text x=\"30\" y=\"18\" font-size=\"12\">{}</text>\n",
        xml_escape(title)
    ));
    s.push_str(&format!(
        "<rect x=\"30\" y=\"30\" width=\"{w}\" height=\"{h}\" fill=\"#f4f4f4\" stroke=\"#888\"/>\n"
    ));
    for &(n, m) in &pattern.cells {
        s.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"#c0392b\"/>\n",
            30.0 + m as f64 * cell,
            30.0 + n as f64 * cell
        ));
    }
    s.push_str(&format!(
        "<text x=\"30\" y=\"{}\" font-size=\"10\">subcarrier</text>\n<text x=\"4\" y=\"28\" font-size=\"10\">slot</text>\n</svg>\n",
        h + 48.0
    ));
    s
}

pub(crate) fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg() -> FrameConfig {
        FrameConfig::default()
    }

    fn selector(n_pilots: usize, seed: u64) -> SelectorParams {
        init_selector(n_pilots, &cfg(), &TrainConfig::default(), seed).unwrap()
    }

    #[test]
    fn init_shapes_and_budget_limits() {
        let s = selector(32, 1);
        assert_eq!(s.scores.shape, vec![32, 32, 64]);
        let cells = cfg().grid_cells();
        assert!(init_selector(cells, &cfg(), &TrainConfig::default(), 1).is_ok());
        assert!(init_selector(cells + 1, &cfg(), &TrainConfig::default(), 1).is_err());
        assert!(init_selector(0, &cfg(), &TrainConfig::default(), 1).is_err());
    }

    #[test]
    fn schedule_decays_to_floor() {
        let t = TrainConfig {
            tau_init: 1.0,
            tau_decay: 0.5,
            tau_min: 0.1,
            ..TrainConfig::default()
        };
        let s = TemperatureSchedule::from_config(&t).unwrap();
        assert_eq!(s.at(0), 1.0);
        assert_eq!(s.at(1), 0.5);
        assert_eq!(s.at(10), 0.1);
    }

    #[test]
    fn soft_masks_are_normalized() {
        let s = selector(4, 2);
        let mut g = Graph::new();
        let z = g.leaf(s.scores.clone());
        let sel = soft_masks(&mut g, z, 0.7, 3).unwrap();
        for row in g.value(sel.soft).data.chunks(cfg().grid_cells()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(sel.hard.len(), 4);
    }

    #[test]
    fn peaked_scores_pick_their_cells() {
        let cells = cfg().grid_cells();
        let targets = [5usize, 700, 1500];
        let mut scores = Tensor::zeros(&[3, 32, 64]);
        for (r, &t) in targets.iter().enumerate() {
            scores.data[r * cells + t] = 20.0;
        }
        let mut hits = 0;
        let draws = 200;
        for seed in 0..draws {
            let mut g = Graph::new();
            let z = g.constant(scores.clone());
            let sel = soft_masks(&mut g, z, 1.0, seed).unwrap();
            hits += usize::from(sel.hard == targets);
        }
        assert!(hits as f64 / draws as f64 > 0.99, "{hits}/{draws}");
    }

    #[test]
    fn hot_temperature_is_near_uniform() {
        let cells = cfg().grid_cells();
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 32, 64]));
        let sel = soft_masks(&mut g, z, 100.0, 9).unwrap();
        let mx = g.value(sel.soft).data.iter().cloned().fold(0.0, f64::max);
        assert!(mx < 2.0 / cells as f64, "{mx}");
    }

    #[test]
    fn combine_masks_rules() {
        let (n, m) = (2, 3);
        let scores = Tensor::zeros(&[2, n * m]);
        let p = combine_masks(&[4, 1], &scores, n, m).unwrap();
        assert_eq!(p.cells, vec![(1, 1), (0, 1)]);

        // head 1 collides at (0,0) and falls back to its second best (0,1)
        let mut scores = Tensor::zeros(&[2, n * m]);
        scores.data[0] = 5.0;
        scores.data[n * m] = 5.0;
        scores.data[n * m + 1] = 3.0;
        let p = combine_masks(&[0, 0], &scores, n, m).unwrap();
        assert_eq!(p.cells, vec![(0, 0), (0, 1)]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores = Tensor::randn(&[n * m, n * m], 1.0, &mut rng);
        let p = combine_masks(&vec![0; n * m], &scores, n, m).unwrap();
        assert!(p.mask.iter().all(|&b| b));
        assert!(combine_masks(&[0], &Tensor::zeros(&[3]), n, m).is_err());
    }

    #[test]
    fn budget_holds_for_random_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let np = rng.gen_range(1..=128);
            let mut s = selector(np, trial);
            // coarse scores force plenty of collisions
            for v in &mut s.scores.data {
                *v = (*v * 300.0).round();
            }
            let p = export_pattern(&s);
            assert_eq!(p.len(), np);
            assert_eq!(p.mask.iter().filter(|&&b| b).count(), np);
            let mut g = Graph::new();
            let z = g.leaf(s.scores.clone());
            let (mask, pattern) = select_pilots(&mut g, z, 0.5, trial).unwrap();
            assert_eq!(pattern.len(), np);
            assert_eq!(g.value(mask).data.iter().sum::<f64>(), np as f64);
        }
    }

    #[test]
    fn export_is_deterministic_and_follows_argmax() {
        let cells = cfg().grid_cells();
        let mut s = selector(3, 4);
        s.scores.data[17] = 1.0;
        s.scores.data[cells + 300] = 1.0;
        s.scores.data[2 * cells + 2047] = 1.0;
        let p = export_pattern(&s);
        assert_eq!(p, export_pattern(&s));
        assert_eq!(p.cells, vec![(0, 17), (4, 44), (31, 63)]);

        let flat = SelectorParams {
            scores: Tensor::zeros(&[5, 32, 64]),
            ..s
        };
        assert_eq!(export_pattern(&flat).cells, (0..5).map(|m| (0, m)).collect::<Vec<_>>());
    }

    #[test]
    fn multiplex_cases() {
        let c = FrameConfig {
            pilot_energy: 1.0,
            data_energy: 1.0,
            pilot_symbol: Complex64::new(1.0, 0.0),
            ..cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<Complex64> = (0..c.grid_cells()).map(|_| Complex64::new(rng.gen(), rng.gen())).collect();
        let x = TfGrid::from_vec(c.n_slots, c.n_subcarriers, data).unwrap();

        let empty = PilotPattern::from_cells(c.n_slots, c.n_subcarriers, vec![]).unwrap();
        assert_eq!(multiplex(&empty, &x, &c).unwrap(), x);

        let full = PilotPattern::full(c.n_slots, c.n_subcarriers);
        let xs = multiplex(&full, &x, &c).unwrap();
        assert!(xs.data.iter().all(|&v| v == Complex64::new(1.0, 0.0)));

        let one = PilotPattern::from_cells(c.n_slots, c.n_subcarriers, vec![(0, 0)]).unwrap();
        let xs = multiplex(&one, &x, &c).unwrap();
        assert_eq!(xs.get(0, 0), Complex64::new(1.0, 0.0));
        assert_eq!(&xs.data[1..], &x.data[1..]);

        let d = cfg();
        let xs = multiplex(&one, &x, &d).unwrap();
        assert_eq!(xs.get(0, 0), d.pilot_symbol * d.pilot_energy.sqrt());
        assert_eq!(xs.get(3, 3), x.get(3, 3) * d.data_energy.sqrt());
    }

    #[test]
    fn straight_through_forward_is_hard_and_gradient_follows_soft_jacobian() {
        // Linear downstream loss: the soft Jacobian fully predicts how the
        // relaxed loss moves, so signs must agree.
        let cells = cfg().grid_cells();
        let s = selector(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Tensor::randn(&[cells], 1.0, &mut rng);
        let (tau, seed) = (0.5, 11);

        let mut g = Graph::new();
        let z = g.leaf(s.scores.clone());
        let (mask, pattern) = select_pilots(&mut g, z, tau, seed).unwrap();
        let hard: Vec<f64> = g.value(mask).data.clone();
        assert_eq!(hard, pattern.mask_tensor().data);
        let wv = g.constant(w.clone());
        let prod = g.mul(mask, wv).unwrap();
        let loss = g.sum(prod);
        let grad = g.backward(loss).unwrap().tensor(z);
        assert!(grad.data.iter().any(|&v| v != 0.0), "selector gradient must be live");

        let relaxed = |scores: &Tensor| {
            let mut g = Graph::new();
            let z = g.constant(scores.clone());
            let sel = soft_masks(&mut g, z, tau, seed).unwrap();
            let m = g.sum_rows(sel.soft).unwrap();
            g.value(m).data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut order: Vec<usize> = (0..grad.len()).collect();
        order.sort_by(|&a, &b| grad.data[b].abs().total_cmp(&grad.data[a].abs()));
        let mut agree = 0;
        for &i in &order[..10] {
            let h = 1e-6;
            let mut up = s.scores.clone();
            up.data[i] += h;
            let mut dn = s.scores.clone();
            dn.data[i] -= h;
            let fd = (relaxed(&up) - relaxed(&dn)) / (2.0 * h);
            agree += usize::from(fd.signum() == grad.data[i].signum());
        }
        assert!(agree >= 9, "{agree}/10");
    }

    #[test]
    fn pattern_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let p = export_pattern(&selector(32, 8));
        p.write_csv(&path).unwrap();
        assert_eq!(PilotPattern::read_csv(&path, 32, 64).unwrap(), p);
        assert!(matches!(
            PilotPattern::read_csv(&dir.path().join("missing.csv"), 32, 64),
            Err(Error::MissingArtifact(_))
        ));
        assert!(PilotPattern::from_cells(2, 2, vec![(0, 0), (0, 0)]).is_err());
        assert!(PilotPattern::from_cells(2, 2, vec![(2, 0)]).is_err());
    }
}
