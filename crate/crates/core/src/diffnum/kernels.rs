//! Raw forward/backward kernels over flat buffers.
//!
//! The tape in [`super::tape`] validates shapes and then calls into these.

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], c_out: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let [batch, c_in, h, w] = x;
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1x1 stride-1 convolutions are a plain matrix product over pixels.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = p.saturating_sub(kx).div_ceil(s).min(self.w_out);
        // Largest ox with ox * s + kx - p <= w - 1.
        let hi = if self.w + p < kx + 1 {
            0
        } else {
            ((self.w + p - kx - 1) / s + 1).min(self.w_out)
        };
        (lo, hi.max(lo))
    }

    fn im2col<F: Scalar>(&self, x: &[F], cols: &mut [F]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ncols = self.cols();
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx);
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.h_out {
                        let iy = (oy * s + ky) as isize - p;
                        let line = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(F::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        line[..lo].fill(F::zero());
                        line[hi..].fill(F::zero());
                        let first = lo * s + kx - self.pad;
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, &v) in
                                line[lo..hi].iter_mut().zip(src[first..].iter().step_by(s))
                            {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Scalar>(&self, cols: &[F], dx: &mut [F]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ncols = self.cols();
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx);
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.h_out {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize || lo == hi {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let first = lo * s + kx - self.pad;
                        let taps = &src[oy * self.w_out + lo..oy * self.w_out + hi];
                        if s == 1 {
                            for (d, &v) in line[first..first + taps.len()].iter_mut().zip(taps) {
                                *d = *d + v;
                            }
                        } else {
                            for (d, &v) in line[first..].iter_mut().step_by(s).zip(taps) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<F: Scalar>(&self, x: &[F], weight: &[F], bias: Option<&[F]>) -> Vec<F> {
        let (rows, ncols) = (self.rows(), self.cols());
        let in_item = self.c_in * self.h * self.w;
        let out_item = self.c_out * ncols;
        let mut out = vec![F::zero(); self.batch * out_item];
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![F::zero(); rows * ncols]
        };
        for n in 0..self.batch {
            let xn = &x[n * in_item..(n + 1) * in_item];
            let src: &[F] = if self.is_pointwise() {
                xn
            } else {
                self.im2col(xn, &mut cols);
                &cols
            };
            let on = &mut out[n * out_item..(n + 1) * out_item];
            if let Some(b) = bias {
                for (co, chunk) in on.chunks_mut(ncols).enumerate() {
                    chunk.fill(b[co]);
                }
            }
            F::gemm(
                self.c_out,
                rows,
                ncols,
                F::one(),
                weight,
                (rows as isize, 1),
                src,
                (ncols as isize, 1),
                if bias.is_some() { F::one() } else { F::zero() },
                on,
                (ncols as isize, 1),
            );
        }
        out
    }

    /// Accumulates gradients for the requested operands.
    pub fn backward<F: Scalar>(
        &self,
        x: &[F],
        weight: &[F],
        dout: &[F],
        mut dx: Option<&mut [F]>,
        mut dw: Option<&mut [F]>,
        mut db: Option<&mut [F]>,
    ) {
        let (rows, ncols) = (self.rows(), self.cols());
        let in_item = self.c_in * self.h * self.w;
        let out_item = self.c_out * ncols;
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise || dw.is_none() {
            Vec::new()
        } else {
            vec![F::zero(); rows * ncols]
        };
        let mut dcols = if pointwise || dx.is_none() {
            Vec::new()
        } else {
            vec![F::zero(); rows * ncols]
        };
        for n in 0..self.batch {
            let dn = &dout[n * out_item..(n + 1) * out_item];
            if let Some(db) = db.as_deref_mut() {
                for (co, chunk) in dn.chunks(ncols).enumerate() {
                    db[co] = db[co] + chunk.iter().copied().sum::<F>();
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                let xn = &x[n * in_item..(n + 1) * in_item];
                let src: &[F] = if pointwise {
                    xn
                } else {
                    self.im2col(xn, &mut cols);
                    &cols
                };
                F::gemm(
                    self.c_out,
                    ncols,
                    rows,
                    F::one(),
                    dn,
                    (ncols as isize, 1),
                    src,
                    (1, ncols as isize),
                    F::one(),
                    dw,
                    (rows as isize, 1),
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxn = &mut dx[n * in_item..(n + 1) * in_item];
                if pointwise {
                    F::gemm(
                        rows,
                        self.c_out,
                        ncols,
                        F::one(),
                        weight,
                        (1, rows as isize),
                        dn,
                        (ncols as isize, 1),
                        F::one(),
                        dxn,
                        (ncols as isize, 1),
                    );
                } else {
                    F::gemm(
                        rows,
                        self.c_out,
                        ncols,
                        F::one(),
                        weight,
                        (1, rows as isize),
                        dn,
                        (ncols as isize, 1),
                        F::zero(),
                        &mut dcols,
                        (ncols as isize, 1),
                    );
                    self.col2im(&dcols, dxn);
                }
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling of NCHW data.
pub fn upsample2x<F: Scalar>(x: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<F: Scalar>(dout: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                let d = &mut dst[(y / 2) * w + xx / 2];
                *d = *d + src[y * w2 + xx];
            }
        }
    }
    dx
}

/// Per-(item, group) statistics saved by the group-norm forward pass.
#[derive(Debug, Clone)]
pub struct GroupStats<F> {
    pub mean: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn group_norm<F: Scalar>(
    x: &[F],
    dims: [usize; 4],
    groups: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> (Vec<F>, GroupStats<F>) {
    let [n, c, h, w] = dims;
    let cg = c / groups;
    let m = cg * h * w;
    let inv_m = F::from_f64(1.0 / m as f64);
    let mut out = vec![F::zero(); x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for i in 0..n {
        for g in 0..groups {
            let off = (i * c + g * cg) * h * w;
            let seg = &x[off..off + m];
            let mu = seg.iter().copied().sum::<F>() * inv_m;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_m;
            let r = F::one() / (var + eps).sqrt();
            mean.push(mu);
            rstd.push(r);
            for ch in 0..cg {
                let cidx = g * cg + ch;
                let base = off + ch * h * w;
                for j in 0..h * w {
                    out[base + j] = (x[base + j] - mu) * r * gamma[cidx] + beta[cidx];
                }
            }
        }
    }
    (out, GroupStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<F: Scalar>(
    x: &[F],
    dims: [usize; 4],
    groups: usize,
    gamma: &[F],
    stats: &GroupStats<F>,
    dout: &[F],
    mut dx: Option<&mut [F]>,
    mut dgamma: Option<&mut [F]>,
    mut dbeta: Option<&mut [F]>,
) {
    let [n, c, h, w] = dims;
    let cg = c / groups;
    let hw = h * w;
    let m = F::from_f64((cg * hw) as f64);
    for i in 0..n {
        for g in 0..groups {
            let gi = i * groups + g;
            let (mu, r) = (stats.mean[gi], stats.rstd[gi]);
            let off = (i * c + g * cg) * hw;
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for ch in 0..cg {
                let cidx = g * cg + ch;
                let base = off + ch * hw;
                let mut dgs = F::zero();
                let mut dbs = F::zero();
                for j in 0..hw {
                    let xhat = (x[base + j] - mu) * r;
                    let dy = dout[base + j];
                    dgs = dgs + dy * xhat;
                    dbs = dbs + dy;
                    let dxh = dy * gamma[cidx];
                    sum_dxhat = sum_dxhat + dxh;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat;
                }
                if let Some(dg) = dgamma.as_deref_mut() {
                    dg[cidx] = dg[cidx] + dgs;
                }
                if let Some(db) = dbeta.as_deref_mut() {
                    db[cidx] = db[cidx] + dbs;
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let k = r / m;
                for ch in 0..cg {
                    let cidx = g * cg + ch;
                    let base = off + ch * hw;
                    for j in 0..hw {
                        let xhat = (x[base + j] - mu) * r;
                        let dxh = dout[base + j] * gamma[cidx];
                        dx[base + j] =
                            dx[base + j] + k * (m * dxh - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
        }
    }
}

/// Row-wise softmax over the trailing axis of a `rows x cols` buffer.
pub fn softmax_rows<F: Scalar>(x: &[F], cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mx = src.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut total = F::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mx).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

pub fn softmax_rows_backward<F: Scalar>(y: &[F], dout: &[F], cols: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); y.len()];
    for ((yr, dr), xr) in y
        .chunks(cols)
        .zip(dout.chunks(cols))
        .zip(dx.chunks_mut(cols))
    {
        let dot: F = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
        for ((d, &a), &b) in xr.iter_mut().zip(yr).zip(dr) {
            *d = a * (b - dot);
        }
    }
    dx
}
