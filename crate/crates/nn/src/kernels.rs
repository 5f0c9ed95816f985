//! Raw forward/backward kernels on contiguous NCHW buffers.

use crate::scalar::{gemm, Scalar, Trans};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in bounds.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        // largest ox with ox*stride + kx - pad <= w - 1
        let limit = self.w + self.pad;
        let hi = if limit > kx {
            ((limit - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.ho {
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        out[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                            *o = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_ox(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in lo..hi {
                        let ix = ox * g.stride + kx - g.pad;
                        drow[ix] = drow[ix] + srow[ox];
                    }
                }
            }
        }
    }
}

/// `y[n] = W · cols(x[n]) + b` for every sample.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let k = g.col_rows();
    let p = g.col_cols();
    let in_len = g.cin * g.h * g.w;
    let mut y = vec![T::zero(); n * cout * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let ys = &mut y[s * cout * p..(s + 1) * cout * p];
        if let Some(b) = bias {
            for (co, row) in ys.chunks_exact_mut(p).enumerate() {
                row.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let colsref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(cout, k, p, weight, Trans::No, colsref, Trans::No, beta, ys);
    }
    y
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let k = g.col_rows();
    let p = g.col_cols();
    let in_len = g.cin * g.h * g.w;
    let mut dx = need_dx.then(|| vec![T::zero(); n * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); cout * k]);
    let mut db = need_db.then(|| vec![T::zero(); cout]);
    let pointwise = g.is_pointwise();
    let mut cols = if need_dw && !pointwise {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    let mut dcols = if need_dx && !pointwise {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let dys = &dy[s * cout * p..(s + 1) * cout * p];
        if let Some(db) = db.as_mut() {
            for (co, row) in dys.chunks_exact(p).enumerate() {
                let sum: T = row.iter().copied().sum();
                db[co] = db[co] + sum;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let colsref: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dW (cout×k) += dY (cout×p) · colsᵀ (p×k)
            gemm(cout, p, k, dys, Trans::No, colsref, Trans::Yes, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if pointwise {
                gemm(k, cout, p, weight, Trans::Yes, dys, Trans::No, T::zero(), dxs);
            } else {
                // dcols (k×p) = Wᵀ (k×cout) · dY (cout×p)
                gemm(k, cout, p, weight, Trans::Yes, dys, Trans::No, T::zero(), &mut dcols);
                col2im(&dcols, g, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2×2/stride-2 max pooling. Returns pooled values and, per output, the flat
/// input index that won (first maximum in scan order).
pub(crate) fn max_pool2_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = base + (2 * oy) * w + 2 * ox;
                let mut best = x[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                y.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (y, arg)
}

pub(crate) fn upsample2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * ho * wo];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut y[pl * ho * wo..(pl + 1) * ho * wo];
        for iy in 0..h {
            let srow = &src[iy * w..(iy + 1) * w];
            let (top, bottom) = dst[2 * iy * wo..(2 * iy + 2) * wo].split_at_mut(wo);
            for (ix, &v) in srow.iter().enumerate() {
                top[2 * ix] = v;
                top[2 * ix + 1] = v;
            }
            bottom.copy_from_slice(top);
        }
    }
    y
}

pub(crate) fn upsample2_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let wo = 2 * w;
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let src = &dy[pl * 4 * h * w..(pl + 1) * 4 * h * w];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for iy in 0..h {
            for ix in 0..w {
                let r0 = 2 * iy * wo + 2 * ix;
                let r1 = r0 + wo;
                dst[iy * w + ix] = src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1];
            }
        }
    }
    dx
}

/// Per-(sample, group) mean and reciprocal standard deviation.
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, NormStats<T>) {
    let cg = c / groups;
    let glen = cg * hw;
    let mut y = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for s in 0..n {
        for gi in 0..groups {
            let off = (s * c + gi * cg) * hw;
            let seg = &x[off..off + glen];
            let mu = seg.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / glen as f64;
            let var = seg
                .iter()
                .map(|v| {
                    let d = v.to_f64_lossy() - mu;
                    d * d
                })
                .sum::<f64>()
                / glen as f64;
            let r = 1.0 / (var + eps).sqrt();
            let (mu_t, r_t) = (T::from_f64_lossy(mu), T::from_f64_lossy(r));
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let (ga, be) = (gamma[ch], beta[ch]);
                let base = off + ci * hw;
                for i in base..base + hw {
                    y[i] = (x[i] - mu_t) * r_t * ga + be;
                }
            }
            mean.push(mu_t);
            rstd.push(r_t);
        }
    }
    (y, NormStats { mean, rstd })
}

pub(crate) struct NormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    stats: &NormStats<T>,
    dy: &[T],
) -> NormGrads<T> {
    let cg = c / groups;
    let glen = cg * hw;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for s in 0..n {
        for gi in 0..groups {
            let si = s * groups + gi;
            let (mu, r) = (stats.mean[si], stats.rstd[si]);
            let off = (s * c + gi * cg) * hw;
            let mut m1 = 0.0f64;
            let mut m2 = 0.0f64;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let ga = gamma[ch].to_f64_lossy();
                let base = off + ci * hw;
                let (mut sg, mut sb) = (0.0f64, 0.0f64);
                for i in base..base + hw {
                    let xhat = ((x[i] - mu) * r).to_f64_lossy();
                    let d = dy[i].to_f64_lossy();
                    sg += d * xhat;
                    sb += d;
                    m1 += d * ga;
                    m2 += d * ga * xhat;
                }
                dgamma[ch] += sg;
                dbeta[ch] += sb;
            }
            m1 /= glen as f64;
            m2 /= glen as f64;
            let rf = r.to_f64_lossy();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let ga = gamma[ch].to_f64_lossy();
                let base = off + ci * hw;
                for i in base..base + hw {
                    let xhat = ((x[i] - mu) * r).to_f64_lossy();
                    let dxhat = dy[i].to_f64_lossy() * ga;
                    dx[i] = T::from_f64_lossy(rf * (dxhat - m1 - xhat * m2));
                }
            }
        }
    }
    NormGrads {
        dx,
        dgamma: dgamma.into_iter().map(T::from_f64_lossy).collect(),
        dbeta: dbeta.into_iter().map(T::from_f64_lossy).collect(),
    }
}

/// Mean pixel-wise softmax cross-entropy over `(n, classes, hw)` logits.
pub(crate) fn cross_entropy_forward<T: Scalar>(
    logits: &[T],
    n: usize,
    classes: usize,
    hw: usize,
    target: &[u8],
) -> f64 {
    let mut total = 0.0f64;
    for s in 0..n {
        let base = s * classes * hw;
        for p in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..classes {
                mx = mx.max(logits[base + k * hw + p].to_f64_lossy());
            }
            let mut z = 0.0;
            for k in 0..classes {
                z += (logits[base + k * hw + p].to_f64_lossy() - mx).exp();
            }
            let t = target[s * hw + p] as usize;
            total += mx + z.ln() - logits[base + t * hw + p].to_f64_lossy();
        }
    }
    total / (n * hw) as f64
}

pub(crate) fn cross_entropy_backward<T: Scalar>(
    logits: &[T],
    n: usize,
    classes: usize,
    hw: usize,
    target: &[u8],
    upstream: f64,
) -> Vec<T> {
    let scale = upstream / (n * hw) as f64;
    let mut d = vec![T::zero(); logits.len()];
    let mut probs = vec![0.0f64; classes];
    for s in 0..n {
        let base = s * classes * hw;
        for p in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..classes {
                mx = mx.max(logits[base + k * hw + p].to_f64_lossy());
            }
            let mut z = 0.0;
            for (k, pr) in probs.iter_mut().enumerate() {
                *pr = (logits[base + k * hw + p].to_f64_lossy() - mx).exp();
                z += *pr;
            }
            let t = target[s * hw + p] as usize;
            for (k, pr) in probs.iter().enumerate() {
                let onehot = if k == t { 1.0 } else { 0.0 };
                d[base + k * hw + p] = T::from_f64_lossy((pr / z - onehot) * scale);
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64], cout: usize) -> Vec<f64> {
        let mut y = vec![0.0; cout * g.ho * g.wo];
        for co in 0..cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0.0;
                    for ci in 0..g.cin {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                    * w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                    y[(co * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(h, w, k, stride, pad) in &[
            (5, 7, 3, 1, 1),
            (6, 6, 3, 2, 1),
            (5, 4, 2, 1, 0),
            (7, 5, 3, 2, 0),
            (4, 4, 1, 1, 0),
            (3, 3, 3, 1, 2),
        ] {
            let cin = 2;
            let cout = 3;
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (w + 2 * pad - k) / stride + 1;
            let g = ConvGeom { cin, h, w, kh: k, kw: k, stride, pad, ho, wo };
            let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let wt: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
            let got = conv2d_forward(&x, 1, &g, &wt, cout, None);
            assert_eq!(got, naive_conv(&x, &g, &wt, cout), "case {h}x{w} k{k} s{stride} p{pad}");
        }
    }
}
