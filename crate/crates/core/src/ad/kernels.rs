//! Numeric kernels behind the graph ops.

/// `c = alpha·op(a)·op(b) + beta·c` for row-major matrices.
/// `a` is m×k (or k×m when `ta`), `b` is k×n (or n×k when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the m×k, k×n and m×n elements the
    // strides address, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a same-padded 2-D correlation.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Valid output column range `[x0, x1)` for horizontal kernel offset `dx`.
    #[inline]
    fn cols(&self, dx: isize) -> (usize, usize) {
        let w = self.w as isize;
        ((-dx).max(0) as usize, (w - dx.max(0)).max(0) as usize)
    }
}

fn row_flags(plane: &[f64], h: usize, w: usize) -> Vec<bool> {
    (0..h)
        .map(|y| plane[y * w..(y + 1) * w].iter().any(|&v| v != 0.0))
        .collect()
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

pub fn conv2d_forward(d: &ConvDims, x: &[f64], k: &[f64], b: Option<&[f64]>, out: &mut [f64]) {
    let plane = d.plane();
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    for bi in 0..d.batch {
        let xb = &x[bi * d.c_in * plane..(bi + 1) * d.c_in * plane];
        let flags: Vec<Vec<bool>> = (0..d.c_in)
            .map(|ci| row_flags(&xb[ci * plane..(ci + 1) * plane], d.h, d.w))
            .collect();
        for co in 0..d.c_out {
            let ob = &mut out[(bi * d.c_out + co) * plane..(bi * d.c_out + co + 1) * plane];
            ob.fill(b.map_or(0.0, |b| b[co]));
            for ci in 0..d.c_in {
                let xp = &xb[ci * plane..(ci + 1) * plane];
                for ky in 0..d.kh {
                    let dy = ky as isize - ph;
                    for kx in 0..d.kw {
                        let wv = k[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - pw;
                        let (x0, x1) = d.cols(dx);
                        for y in 0..d.h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= d.h as isize || !flags[ci][sy as usize] {
                                continue;
                            }
                            let src = sy as usize * d.w;
                            axpy(
                                &mut ob[y * d.w + x0..y * d.w + x1],
                                wv,
                                &xp[(src as isize + x0 as isize + dx) as usize
                                    ..(src as isize + x1 as isize + dx) as usize],
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates kernel/bias gradients and, when `dx` is given, the input gradient.
pub fn conv2d_backward(
    d: &ConvDims,
    x: &[f64],
    k: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let plane = d.plane();
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    if let Some(db) = db {
        for bi in 0..d.batch {
            for co in 0..d.c_out {
                let g = &dout[(bi * d.c_out + co) * plane..(bi * d.c_out + co + 1) * plane];
                db[co] += g.iter().sum::<f64>();
            }
        }
    }
    if let Some(dk) = dk {
        for bi in 0..d.batch {
            let xb = &x[bi * d.c_in * plane..(bi + 1) * d.c_in * plane];
            for ci in 0..d.c_in {
                let xp = &xb[ci * plane..(ci + 1) * plane];
                let flags = row_flags(xp, d.h, d.w);
                for co in 0..d.c_out {
                    let g = &dout[(bi * d.c_out + co) * plane..(bi * d.c_out + co + 1) * plane];
                    for ky in 0..d.kh {
                        let dy = ky as isize - ph;
                        for kx in 0..d.kw {
                            let dx_ = kx as isize - pw;
                            let (x0, x1) = d.cols(dx_);
                            let mut acc = 0.0;
                            for y in 0..d.h {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= d.h as isize || !flags[sy as usize] {
                                    continue;
                                }
                                let src = sy as usize * d.w;
                                acc += dot(
                                    &g[y * d.w + x0..y * d.w + x1],
                                    &xp[(src as isize + x0 as isize + dx_) as usize
                                        ..(src as isize + x1 as isize + dx_) as usize],
                                );
                            }
                            dk[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(dx) = dx.as_mut() {
        for bi in 0..d.batch {
            for ci in 0..d.c_in {
                let dxp = &mut dx[(bi * d.c_in + ci) * plane..(bi * d.c_in + ci + 1) * plane];
                for co in 0..d.c_out {
                    let g = &dout[(bi * d.c_out + co) * plane..(bi * d.c_out + co + 1) * plane];
                    for ky in 0..d.kh {
                        let dy = ky as isize - ph;
                        for kx in 0..d.kw {
                            let wv = k[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let dx_ = kx as isize - pw;
                            let (x0, x1) = d.cols(dx_);
                            for y in 0..d.h {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= d.h as isize {
                                    continue;
                                }
                                let dst = sy as usize * d.w;
                                axpy(
                                    &mut dxp[(dst as isize + x0 as isize + dx_) as usize
                                        ..(dst as isize + x1 as isize + dx_) as usize],
                                    wv,
                                    &g[y * d.w + x0..y * d.w + x1],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

