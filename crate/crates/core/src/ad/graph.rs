//! Gradient tape. Nodes are appended in evaluation order, so reverse
//! iteration is a valid topological order for the backward sweep.

use std::sync::Arc;

use super::kernels::{conv2d_backward, conv2d_forward, gemm, ConvDims};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Complex M×Q matrix used by the dictionary-correlation op, stored as
/// separate real and imaginary row-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, k: Var, b: Option<Var>, dims: ConvDims },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MaskMul { x: Var, mask: Var },
    Softmax(Var),
    CrossEntropy { probs: Var, labels: Vec<usize> },
    Sum(Var),
    Reshape(Var),
    SumRows(Var),
    StraightThrough(Var),
    SlotProjection { x: Var, w: Var },
    DictMagnitude { x: Var, dict: Arc<ComplexMatrix> },
    RmsNormalize { x: Var, eps: f64 },
    Mse { pred: Var, target: Vec<f64>, denom: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`; zero when `v` is not on any path to the loss.
    pub fn tensor(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => Tensor {
                shape: self.shapes[v.0].clone(),
                data: g.to_vec(),
            },
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// `x[.., in]·w[in, out] + b[out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(shape_err("dense", format!("x {xs:?} w {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).len() / k;
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(shape_err("dense", format!("bias {:?} for {n} outputs", self.shape(b))));
            }
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        gemm(m, k, n, &self.value(x).data, false, &self.value(w).data, false, &mut out, 1.0);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor { shape, data: out }, Op::Dense { x, w, b }, rg))
    }

    /// Same-padded 2-D correlation, `x[B, Ci, H, W]`, `k[Co, Ci, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(shape_err("conv2d", format!("x {xs:?} k {ks:?}")));
        }
        let dims = ConvDims {
            batch: xs[0],
            c_in: xs[1],
            c_out: ks[0],
            h: xs[2],
            w: xs[3],
            kh: ks[2],
            kw: ks[3],
        };
        self.conv_common(x, k, b, dims, vec![xs[0], ks[0], xs[2], xs[3]], &ks[1])
    }

    /// Same-padded 1-D correlation, `x[B, Ci, L]`, `k[Co, Ci, kl]`.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 3 {
            return Err(shape_err("conv1d", format!("x {xs:?} k {ks:?}")));
        }
        let dims = ConvDims {
            batch: xs[0],
            c_in: xs[1],
            c_out: ks[0],
            h: 1,
            w: xs[2],
            kh: 1,
            kw: ks[2],
        };
        self.conv_common(x, k, b, dims, vec![xs[0], ks[0], xs[2]], &ks[1])
    }

    fn conv_common(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        dims: ConvDims,
        out_shape: Vec<usize>,
        k_cin: &usize,
    ) -> Result<Var> {
        if *k_cin != dims.c_in {
            return Err(shape_err(
                "conv",
                format!("kernel expects {k_cin} input channels, got {}", dims.c_in),
            ));
        }
        if dims.kh.is_multiple_of(2) || dims.kw.is_multiple_of(2) {
            return Err(shape_err("conv", "kernel spatial size must be odd".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [dims.c_out] {
                return Err(shape_err("conv", format!("bias {:?}", self.shape(b))));
            }
        }
        let mut out = vec![0.0; out_shape.iter().product()];
        conv2d_forward(
            &dims,
            &self.value(x).data,
            &self.value(k).data,
            b.map(|b| self.value(b).data.as_slice()),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Conv { x, k, b, dims },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a * s).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// `x[.., S] ⊙ mask[S]`, broadcasting the mask over all leading axes.
    pub fn mask_mul(&mut self, x: Var, mask: Var) -> Result<Var> {
        let s = self.value(mask).len();
        if !self.value(x).len().is_multiple_of(s) || self.shape(mask).len() != 1 {
            return Err(shape_err(
                "mask_mul",
                format!("x {:?} mask {:?}", self.shape(x), self.shape(mask)),
            ));
        }
        let m = &self.value(mask).data;
        let data = self
            .value(x)
            .data
            .chunks_exact(s)
            .flat_map(|row| row.iter().zip(m).map(|(a, b)| a * b))
            .collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        let rg = self.rg(x) || self.rg(mask);
        Ok(self.push(t, Op::MaskMul { x, mask }, rg))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let k = *v.shape.last().unwrap_or(&1);
        let mut data = v.data.clone();
        for row in data.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let t = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Mean over rows of `−ln probs[row, label]`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(probs);
        let k = *v.shape.last().unwrap_or(&1);
        let rows = v.len() / k;
        if rows != labels.len() {
            return Err(shape_err("cross_entropy", format!("{rows} rows, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Validation {
                field: "label".into(),
                reason: format!("{bad} not below {k} classes"),
            });
        }
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -v.data[r * k + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / rows as f64;
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `[R, K] → [K]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("sum_rows", format!("{s:?}")));
        }
        let mut out = vec![0.0; s[1]];
        for row in self.value(x).data.chunks_exact(s[1]) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![s[1]], data: out }, Op::SumRows(x), rg))
    }

    /// Forward value `hard`, backward gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape != self.shape(soft) {
            return Err(shape_err(
                "straight_through",
                format!("{:?} vs {:?}", hard.shape, self.shape(soft)),
            ));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// Complex projection along the slot axis.
    ///
    /// `x[B, 2, N, M]` holds real/imaginary planes, `w[F, 2, N]` complex
    /// weights; the result `[B, 2, F, M]` holds `Σ_n w[f, n]·x[n, m]`.
    pub fn slot_projection(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || xs[1] != 2 || ws.len() != 3 || ws[1] != 2 || ws[2] != xs[2] {
            return Err(shape_err("slot_projection", format!("x {xs:?} w {ws:?}")));
        }
        let (b, n, m, f) = (xs[0], xs[2], xs[3], ws[0]);
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let mut out = vec![0.0; b * 2 * f * m];
        // real-valued stacking: [wr, -wi; wi, wr] applied to [x_re; x_im]
        let mut wre = vec![0.0; f * 2 * n];
        let mut wim = vec![0.0; f * 2 * n];
        for fi in 0..f {
            for ni in 0..n {
                let (a, c) = (wv[(fi * 2) * n + ni], wv[(fi * 2 + 1) * n + ni]);
                wre[fi * 2 * n + ni] = a;
                wre[fi * 2 * n + n + ni] = -c;
                wim[fi * 2 * n + ni] = c;
                wim[fi * 2 * n + n + ni] = a;
            }
        }
        for bi in 0..b {
            let xb = &xv[bi * 2 * n * m..(bi + 1) * 2 * n * m];
            let ob = &mut out[bi * 2 * f * m..(bi + 1) * 2 * f * m];
            let (ore, oim) = ob.split_at_mut(f * m);
            gemm(f, 2 * n, m, &wre, false, xb, false, ore, 0.0);
            gemm(f, 2 * n, m, &wim, false, xb, false, oim, 0.0);
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor {
                shape: vec![b, 2, f, m],
                data: out,
            },
            Op::SlotProjection { x, w },
            rg,
        ))
    }

    /// Magnitude of the correlation of complex rows with dictionary columns:
    /// `x[B, 2, F, M]` → `[B, F, Q]`, `|Σ_m c_f[m]·conj(D[m, q])|`.
    pub fn dict_magnitude(&mut self, x: Var, dict: Arc<ComplexMatrix>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != 2 || xs[3] != dict.rows {
            return Err(shape_err(
                "dict_magnitude",
                format!("x {xs:?} dictionary {}x{}", dict.rows, dict.cols),
            ));
        }
        let (b, f, m, q) = (xs[0], xs[2], xs[3], dict.cols);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; b * f * q];
        let mut sr = vec![0.0; f * q];
        let mut si = vec![0.0; f * q];
        for bi in 0..b {
            let cr = &xv[bi * 2 * f * m..bi * 2 * f * m + f * m];
            let ci = &xv[bi * 2 * f * m + f * m..(bi + 1) * 2 * f * m];
            correlate(f, m, q, cr, ci, &dict, &mut sr, &mut si);
            for (o, (a, c)) in out[bi * f * q..(bi + 1) * f * q].iter_mut().zip(sr.iter().zip(&si)) {
                *o = a.hypot(*c);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, f, q],
                data: out,
            },
            Op::DictMagnitude { x, dict },
            rg,
        ))
    }

    /// Divides each leading-axis slice by its root-mean-square.
    pub fn rms_normalize(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let b = v.shape[0];
        let n = v.len() / b;
        let mut data = v.data.clone();
        for frame in data.chunks_exact_mut(n) {
            let r = (frame.iter().map(|a| a * a).sum::<f64>() / n as f64 + eps).sqrt();
            for a in frame.iter_mut() {
                *a /= r;
            }
        }
        let t = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(t, Op::RmsNormalize { x, eps }, rg)
    }

    /// `Σ (pred − target)² / denom`.
    pub fn mse(&mut self, pred: Var, target: &[f64], denom: f64) -> Result<Var> {
        let p = &self.value(pred).data;
        if p.len() != target.len() {
            return Err(shape_err("mse", format!("{} predictions, {} targets", p.len(), target.len())));
        }
        let loss = p.iter().zip(target).map(|(a, t)| (a - t) * (a - t)).sum::<f64>() / denom;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
                denom,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Dense { x, w, b } => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let m = g.len() / n;
                if let Some(gx) = self.acc(grads, *x) {
                    gemm(m, n, k, g, false, &self.value(*w).data, true, gx, 1.0);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(k, m, n, &self.value(*x).data, true, g, false, gw, 1.0);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for row in g.chunks_exact(n) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            Op::Conv { x, k, b, dims } => {
                let xv = &self.value(*x).data;
                let kv = &self.value(*k).data;
                // take each buffer out to satisfy the borrow checker
                let mut gx = self.acc(grads, *x).map(std::mem::take);
                let mut gk = self.acc(grads, *k).map(std::mem::take);
                let mut gb = b.and_then(|b| self.acc(grads, b).map(std::mem::take));
                conv2d_backward(dims, xv, kv, g, gx.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut());
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gk {
                    grads[k.0] = Some(v);
                }
                if let (Some(b), Some(v)) = (b, gb) {
                    grads[b.0] = Some(v);
                }
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &gv), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *a += gv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        for (t, s) in gv.iter_mut().zip(g) {
                            *t += s;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((t, s), o) in ga.iter_mut().zip(g).zip(bv) {
                        *t += s * o;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((t, s), o) in gb.iter_mut().zip(g).zip(av) {
                        *t += s * o;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (t, v) in gx.iter_mut().zip(g) {
                        *t += s * v;
                    }
                }
            }
            Op::MaskMul { x, mask } => {
                let mv = &self.value(*mask).data;
                let xv = &self.value(*x).data;
                let s = mv.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for (grow, gin) in gx.chunks_exact_mut(s).zip(g.chunks_exact(s)) {
                        for ((t, v), m) in grow.iter_mut().zip(gin).zip(mv) {
                            *t += v * m;
                        }
                    }
                }
                if let Some(gm) = self.acc(grads, *mask) {
                    for (xrow, gin) in xv.chunks_exact(s).zip(g.chunks_exact(s)) {
                        for ((t, v), xi) in gm.iter_mut().zip(gin).zip(xrow) {
                            *t += v * xi;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let k = *out.shape.last().unwrap_or(&1);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((grow, yrow), gin) in
                        gx.chunks_exact_mut(k).zip(out.data.chunks_exact(k)).zip(g.chunks_exact(k))
                    {
                        let dot: f64 = yrow.iter().zip(gin).map(|(y, d)| y * d).sum();
                        for ((t, y), d) in grow.iter_mut().zip(yrow).zip(gin) {
                            *t += y * (d - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { probs, labels } => {
                let pv = &self.value(*probs).data;
                let k = pv.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                if let Some(gp) = self.acc(grads, *probs) {
                    for (r, &l) in labels.iter().enumerate() {
                        gp[r * k + l] -= scale / pv[r * k + l].max(f64::MIN_POSITIVE);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for t in gx.iter_mut() {
                        *t += g[0];
                    }
                }
            }
            Op::Reshape(x) | Op::StraightThrough(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (t, v) in gx.iter_mut().zip(g) {
                        *t += v;
                    }
                }
            }
            Op::SumRows(x) => {
                let k = g.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for row in gx.chunks_exact_mut(k) {
                        for (t, v) in row.iter_mut().zip(g) {
                            *t += v;
                        }
                    }
                }
            }
            Op::SlotProjection { x, w } => {
                let xs = self.shape(*x);
                let (b, n, m) = (xs[0], xs[2], xs[3]);
                let f = self.shape(*w)[0];
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..b {
                        let gb = &g[bi * 2 * f * m..(bi + 1) * 2 * f * m];
                        let (gre, gim) = gb.split_at(f * m);
                        for fi in 0..f {
                            for ni in 0..n {
                                let (a, c) = (wv[(fi * 2) * n + ni], wv[(fi * 2 + 1) * n + ni]);
                                let base = bi * 2 * n * m;
                                for mi in 0..m {
                                    let (dr, di) = (gre[fi * m + mi], gim[fi * m + mi]);
                                    gx[base + ni * m + mi] += a * dr + c * di;
                                    gx[base + n * m + ni * m + mi] += -c * dr + a * di;
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for bi in 0..b {
                        let gb = &g[bi * 2 * f * m..(bi + 1) * 2 * f * m];
                        let (gre, gim) = gb.split_at(f * m);
                        let xre = &xv[bi * 2 * n * m..bi * 2 * n * m + n * m];
                        let xim = &xv[bi * 2 * n * m + n * m..(bi + 1) * 2 * n * m];
                        for fi in 0..f {
                            let (dr, di) = (&gre[fi * m..(fi + 1) * m], &gim[fi * m..(fi + 1) * m]);
                            for ni in 0..n {
                                let (xr, xi) = (&xre[ni * m..(ni + 1) * m], &xim[ni * m..(ni + 1) * m]);
                                let mut ga = 0.0;
                                let mut gc = 0.0;
                                for mi in 0..m {
                                    ga += xr[mi] * dr[mi] + xi[mi] * di[mi];
                                    gc += -xi[mi] * dr[mi] + xr[mi] * di[mi];
                                }
                                gw[(fi * 2) * n + ni] += ga;
                                gw[(fi * 2 + 1) * n + ni] += gc;
                            }
                        }
                    }
                }
            }
            Op::DictMagnitude { x, dict } => {
                let xs = self.shape(*x);
                let (b, f, m) = (xs[0], xs[2], xs[3]);
                let q = dict.cols;
                let xv = &self.value(*x).data;
                if let Some(gx) = self.acc(grads, *x) {
                    let mut sr = vec![0.0; f * q];
                    let mut si = vec![0.0; f * q];
                    let mut dsr = vec![0.0; f * q];
                    let mut dsi = vec![0.0; f * q];
                    for bi in 0..b {
                        let cr = &xv[bi * 2 * f * m..bi * 2 * f * m + f * m];
                        let ci = &xv[bi * 2 * f * m + f * m..(bi + 1) * 2 * f * m];
                        correlate(f, m, q, cr, ci, dict, &mut sr, &mut si);
                        let gy = &g[bi * f * q..(bi + 1) * f * q];
                        let yv = &out.data[bi * f * q..(bi + 1) * f * q];
                        for j in 0..f * q {
                            if yv[j] > 0.0 {
                                dsr[j] = gy[j] * sr[j] / yv[j];
                                dsi[j] = gy[j] * si[j] / yv[j];
                            } else {
                                dsr[j] = 0.0;
                                dsi[j] = 0.0;
                            }
                        }
                        // sr = cr·Dr + ci·Di, si = ci·Dr − cr·Di
                        let gb = &mut gx[bi * 2 * f * m..(bi + 1) * 2 * f * m];
                        let (gcr, gci) = gb.split_at_mut(f * m);
                        gemm(f, q, m, &dsr, false, &dict.re, true, gcr, 1.0);
                        let neg_dsi: Vec<f64> = dsi.iter().map(|v| -v).collect();
                        gemm(f, q, m, &neg_dsi, false, &dict.im, true, gcr, 1.0);
                        gemm(f, q, m, &dsr, false, &dict.im, true, gci, 1.0);
                        gemm(f, q, m, &dsi, false, &dict.re, true, gci, 1.0);
                    }
                }
            }
            Op::RmsNormalize { x, eps } => {
                let xv = &self.value(*x).data;
                let b = out.shape[0];
                let n = out.len() / b;
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..b {
                        let xf = &xv[bi * n..(bi + 1) * n];
                        let yf = &out.data[bi * n..(bi + 1) * n];
                        let gf = &g[bi * n..(bi + 1) * n];
                        let r = (xf.iter().map(|a| a * a).sum::<f64>() / n as f64 + eps).sqrt();
                        let proj: f64 = gf.iter().zip(yf).map(|(a, c)| a * c).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[bi * n + j] += (gf[j] - yf[j] * proj) / r;
                        }
                    }
                }
            }
            Op::Mse { pred, target, denom } => {
                let pv = &self.value(*pred).data;
                if let Some(gp) = self.acc(grads, *pred) {
                    for ((t, p), y) in gp.iter_mut().zip(pv).zip(target) {
                        *t += g[0] * 2.0 * (p - y) / denom;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn correlate(
    f: usize,
    m: usize,
    q: usize,
    cr: &[f64],
    ci: &[f64],
    dict: &ComplexMatrix,
    sr: &mut [f64],
    si: &mut [f64],
) {
    gemm(f, m, q, cr, false, &dict.re, false, sr, 0.0);
    gemm(f, m, q, ci, false, &dict.im, false, sr, 1.0);
    gemm(f, m, q, ci, false, &dict.re, false, si, 0.0);
    let neg: Vec<f64> = cr.iter().map(|v| -v).collect();
    gemm(f, m, q, &neg, false, &dict.im, false, si, 1.0);
}

pub fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
