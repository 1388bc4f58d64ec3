use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::{argmax, Tensor};
use crate::error::{Error, Result};

/// Standard Gumbel draws `−ln(−ln u)`, `u ~ U(0, 1)`.
pub fn gumbel_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Relaxed selection of every row of `z`.
pub struct GumbelSelection {
    /// `softmax((z + g)/τ)` per row.
    pub soft: Var,
    /// `argmax(z + g)` per row.
    pub hard: Vec<usize>,
    /// Perturbed scores `z + g`, kept for collision resolution.
    pub perturbed: Tensor,
}

/// Gumbel-softmax over the last axis of `z` with explicit noise.
pub fn gumbel_select(g: &mut Graph, z: Var, noise: Tensor, temperature: f64) -> Result<GumbelSelection> {
    if !(temperature > 0.0) {
        return Err(Error::validation("temperature", "must be positive"));
    }
    if noise.shape != g.shape(z) {
        return Err(Error::shape("gumbel noise must match the score shape"));
    }
    let k = *noise.shape.last().unwrap();
    let gn = g.constant(noise);
    let perturbed = g.add(z, gn)?;
    let pv = g.value(perturbed).clone();
    let hard = pv.data.chunks_exact(k).map(argmax).collect();
    let scaled = g.scale(perturbed, 1.0 / temperature);
    let soft = g.softmax(scaled);
    Ok(GumbelSelection {
        soft,
        hard,
        perturbed: pv,
    })
}

/// Straight-through Gumbel-softmax of a score vector `z[K]`: the returned
/// var carries `one_hot(argmax(z + g))` forward and the Jacobian of
/// `softmax((z + g)/τ)` backward.
pub fn gumbel_softmax_st(g: &mut Graph, z: Var, temperature: f64, seed: u64) -> Result<(Var, Var, usize)> {
    let k = g.value(z).len();
    let noise = Tensor::new(g.shape(z), gumbel_noise(k, seed))?;
    let sel = gumbel_select(g, z, noise, temperature)?;
    let idx = sel.hard[0];
    let mut one_hot = Tensor::zeros(g.shape(z));
    one_hot.data[idx] = 1.0;
    let out = g.straight_through(one_hot, sel.soft)?;
    Ok((out, sel.soft, idx))
}
