use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Compares reverse-mode gradients of a scalar function against central
/// differences with the given step. Returns the largest relative error
/// `|a − n| / max(|a|, |n|, 1e-6)` over coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, step, &coords)
}

/// [`grad_check`] restricted to a subset of coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let loss = f(&mut g, xv)?;
    let analytic = g.backward(loss)?.tensor(xv);
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data[i] += step;
        let mut minus = x.clone();
        minus.data[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}
