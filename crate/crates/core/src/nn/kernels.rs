//! Forward and adjoint kernels on raw slices. Volume tensors are laid out
//! `N×C×D×H×W`, row-major.

use rayon::prelude::*;

#[inline]
pub(crate) fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, ra) = a.split_at(a.len() - a.len() % 4);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub fn size(&self) -> usize {
        self.d * self.h * self.w
    }
}

/// Unfolds one sample (`C×D×H×W`) into a `(C·k³)×S` patch matrix with zero
/// padding `k/2`.
fn im2col(x: &[f64], c: usize, dims: Dims3, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let s = dims.size();
    let (dd, hh, ww) = (dims.d as isize, dims.h as isize, dims.w as isize);
    for ci in 0..c {
        let xc = &x[ci * s..(ci + 1) * s];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut col[row * s..(row + 1) * s];
                    let (od, oh, ow) = (kd as isize - pad, kh as isize - pad, kw as isize - pad);
                    for d in 0..dd {
                        let sd = d + od;
                        for h in 0..hh {
                            let sh = h + oh;
                            let drow = &mut dst[((d * hh + h) * ww) as usize..((d * hh + h + 1) * ww) as usize];
                            if sd < 0 || sd >= dd || sh < 0 || sh >= hh {
                                drow.fill(0.0);
                                continue;
                            }
                            let src_base = ((sd * hh + sh) * ww) as usize;
                            let lo = (-ow).max(0);
                            let hi = (ww - ow).min(ww);
                            drow[..lo as usize].fill(0.0);
                            if hi > lo {
                                let src = &xc[(src_base as isize + lo + ow) as usize..(src_base as isize + hi + ow) as usize];
                                drow[lo as usize..hi as usize].copy_from_slice(src);
                            }
                            drow[hi.max(lo) as usize..].fill(0.0);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds a patch-matrix gradient back into `dx`.
fn col2im(col: &[f64], c: usize, dims: Dims3, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let s = dims.size();
    let (dd, hh, ww) = (dims.d as isize, dims.h as isize, dims.w as isize);
    for ci in 0..c {
        let xc = &mut dx[ci * s..(ci + 1) * s];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &col[row * s..(row + 1) * s];
                    let (od, oh, ow) = (kd as isize - pad, kh as isize - pad, kw as isize - pad);
                    for d in 0..dd {
                        let sd = d + od;
                        if sd < 0 || sd >= dd {
                            continue;
                        }
                        for h in 0..hh {
                            let sh = h + oh;
                            if sh < 0 || sh >= hh {
                                continue;
                            }
                            let lo = (-ow).max(0);
                            let hi = (ww - ow).min(ww);
                            if hi <= lo {
                                continue;
                            }
                            let srow = &src[((d * hh + h) * ww + lo) as usize..((d * hh + h) * ww + hi) as usize];
                            let base = ((sd * hh + sh) * ww + lo + ow) as usize;
                            for (o, v) in xc[base..base + srow.len()].iter_mut().zip(srow) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub dims: Dims3,
}

impl ConvShape {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }
}

fn patches<'a>(x: &'a [f64], cs: &ConvShape, buf: &'a mut Vec<f64>) -> &'a [f64] {
    if cs.k == 1 {
        x
    } else {
        buf.resize(cs.patch() * cs.dims.size(), 0.0);
        im2col(x, cs.cin, cs.dims, cs.k, buf);
        buf
    }
}

pub(crate) fn conv3d_forward(x: &[f64], w: &[f64], b: &[f64], cs: &ConvShape) -> Vec<f64> {
    let s = cs.dims.size();
    let kp = cs.patch();
    let mut out = vec![0.0; cs.n * cs.cout * s];
    out.par_chunks_mut(cs.cout * s)
        .zip(x.par_chunks(cs.cin * s))
        .for_each_init(Vec::new, |buf, (out_n, x_n)| {
            let col = patches(x_n, cs, buf);
            for co in 0..cs.cout {
                let orow = &mut out_n[co * s..(co + 1) * s];
                orow.fill(b[co]);
                let wrow = &w[co * kp..(co + 1) * kp];
                for (p, &a) in wrow.iter().enumerate() {
                    if a != 0.0 {
                        axpy(orow, a, &col[p * s..(p + 1) * s]);
                    }
                }
            }
        });
    out
}

/// Returns `(dx, dw, db)`; `dx` only if requested.
pub(crate) fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    cs: &ConvShape,
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let s = cs.dims.size();
    let kp = cs.patch();
    let per_sample: Vec<(Option<Vec<f64>>, Vec<f64>, Vec<f64>)> = x
        .par_chunks(cs.cin * s)
        .zip(dy.par_chunks(cs.cout * s))
        .map_init(Vec::new, |buf, (x_n, dy_n)| {
            let col = patches(x_n, cs, buf);
            let mut dw = vec![0.0; cs.cout * kp];
            let mut db = vec![0.0; cs.cout];
            for co in 0..cs.cout {
                let grow = &dy_n[co * s..(co + 1) * s];
                db[co] = grow.iter().sum();
                for p in 0..kp {
                    dw[co * kp + p] = dot(grow, &col[p * s..(p + 1) * s]);
                }
            }
            let dx = want_dx.then(|| {
                let mut dcol = vec![0.0; kp * s];
                for co in 0..cs.cout {
                    let grow = &dy_n[co * s..(co + 1) * s];
                    for p in 0..kp {
                        let a = w[co * kp + p];
                        if a != 0.0 {
                            axpy(&mut dcol[p * s..(p + 1) * s], a, grow);
                        }
                    }
                }
                if cs.k == 1 {
                    dcol
                } else {
                    let mut dx = vec![0.0; cs.cin * s];
                    col2im(&dcol, cs.cin, cs.dims, cs.k, &mut dx);
                    dx
                }
            });
            (dx, dw, db)
        })
        .collect();
    let mut dw = vec![0.0; cs.cout * kp];
    let mut db = vec![0.0; cs.cout];
    let mut dx = want_dx.then(|| Vec::with_capacity(cs.n * cs.cin * s));
    for (dxn, dwn, dbn) in per_sample {
        axpy(&mut dw, 1.0, &dwn);
        axpy(&mut db, 1.0, &dbn);
        if let (Some(acc), Some(d)) = (dx.as_mut(), dxn) {
            acc.extend_from_slice(&d);
        }
    }
    (dx, dw, db)
}

pub const GN_EPS: f64 = 1e-5;

/// Returns `(y, mean, rstd)` with per-(sample, group) statistics.
pub(crate) fn groupnorm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let m = (cg * s) as f64;
    let mut y = vec![0.0; x.len()];
    let mut means = vec![0.0; n * groups];
    let mut rstds = vec![0.0; n * groups];
    for ni in 0..n {
        for g in 0..groups {
            let base = (ni * c + g * cg) * s;
            let blk = &x[base..base + cg * s];
            let mean = blk.iter().sum::<f64>() / m;
            let var = blk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let rstd = 1.0 / (var + GN_EPS).sqrt();
            means[ni * groups + g] = mean;
            rstds[ni * groups + g] = rstd;
            for cl in 0..cg {
                let ch = g * cg + cl;
                let o = base + cl * s;
                for i in o..o + s {
                    y[i] = (x[i] - mean) * rstd * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (y, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn groupnorm_backward(
    x: &[f64],
    gamma: &[f64],
    dy: &[f64],
    means: &[f64],
    rstds: &[f64],
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let m = (cg * s) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for g in 0..groups {
            let mean = means[ni * groups + g];
            let rstd = rstds[ni * groups + g];
            let base = (ni * c + g * cg) * s;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for cl in 0..cg {
                let ch = g * cg + cl;
                let o = base + cl * s;
                for i in o..o + s {
                    let xhat = (x[i] - mean) * rstd;
                    let dxhat = dy[i] * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma[ch] += dy[i] * xhat;
                    dbeta[ch] += dy[i];
                }
            }
            for cl in 0..cg {
                let ch = g * cg + cl;
                let o = base + cl * s;
                for i in o..o + s {
                    let xhat = (x[i] - mean) * rstd;
                    let dxhat = dy[i] * gamma[ch];
                    dx[i] = rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Single-head dot-product attention over the spatial axis. `q, k, v` are
/// `N×C×S`; returns the output and the softmax probabilities (`N×S×S`).
pub(crate) fn attention_forward(q: &[f64], k: &[f64], v: &[f64], n: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (c as f64).sqrt();
    let mut probs = vec![0.0; n * s * s];
    let mut out = vec![0.0; n * c * s];
    for ni in 0..n {
        let (qn, kn, vn) = (
            &q[ni * c * s..(ni + 1) * c * s],
            &k[ni * c * s..(ni + 1) * c * s],
            &v[ni * c * s..(ni + 1) * c * s],
        );
        let pn = &mut probs[ni * s * s..(ni + 1) * s * s];
        for ch in 0..c {
            let krow = &kn[ch * s..(ch + 1) * s];
            for i in 0..s {
                axpy(&mut pn[i * s..(i + 1) * s], qn[ch * s + i] * scale, krow);
            }
        }
        for i in 0..s {
            let row = &mut pn[i * s..(i + 1) * s];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                z += *r;
            }
            for r in row.iter_mut() {
                *r /= z;
            }
        }
        let on = &mut out[ni * c * s..(ni + 1) * c * s];
        for ch in 0..c {
            let vrow = &vn[ch * s..(ch + 1) * s];
            for i in 0..s {
                on[ch * s + i] = dot(&pn[i * s..(i + 1) * s], vrow);
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    n: usize,
    c: usize,
    s: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (c as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; s * s];
    for ni in 0..n {
        let off = ni * c * s;
        let pn = &probs[ni * s * s..(ni + 1) * s * s];
        let don = &dout[off..off + c * s];
        // dV[c, j] = sum_i P[i, j] dout[c, i]
        for ch in 0..c {
            let dvrow = &mut dv[off + ch * s..off + (ch + 1) * s];
            for i in 0..s {
                axpy(dvrow, don[ch * s + i], &pn[i * s..(i + 1) * s]);
            }
        }
        // dP[i, j] = sum_c dout[c, i] v[c, j]
        dp.fill(0.0);
        for ch in 0..c {
            let vrow = &v[off + ch * s..off + (ch + 1) * s];
            for i in 0..s {
                axpy(&mut dp[i * s..(i + 1) * s], don[ch * s + i], vrow);
            }
        }
        // softmax adjoint, in place: dS = P * (dP - <P, dP>)
        for i in 0..s {
            let prow = &pn[i * s..(i + 1) * s];
            let drow = &mut dp[i * s..(i + 1) * s];
            let inner = dot(prow, drow);
            for (d, &p) in drow.iter_mut().zip(prow) {
                *d = p * (*d - inner) * scale;
            }
        }
        for ch in 0..c {
            let krow = &k[off + ch * s..off + (ch + 1) * s];
            let qrow = &q[off + ch * s..off + (ch + 1) * s];
            for i in 0..s {
                let ds_row = &dp[i * s..(i + 1) * s];
                dq[off + ch * s + i] = dot(ds_row, krow);
                axpy(&mut dk[off + ch * s..off + (ch + 1) * s], qrow[i], ds_row);
            }
        }
    }
    (dq, dk, dv)
}

pub(crate) fn avgpool2_forward(x: &[f64], nc: usize, dims: Dims3) -> Vec<f64> {
    let (d2, h2, w2) = (dims.d / 2, dims.h / 2, dims.w / 2);
    let s = dims.size();
    let mut out = vec![0.0; nc * d2 * h2 * w2];
    for b in 0..nc {
        let xb = &x[b * s..(b + 1) * s];
        let ob = &mut out[b * d2 * h2 * w2..(b + 1) * d2 * h2 * w2];
        for d in 0..dims.d {
            for h in 0..dims.h {
                for w in 0..dims.w {
                    ob[((d / 2) * h2 + h / 2) * w2 + w / 2] += 0.125 * xb[(d * dims.h + h) * dims.w + w];
                }
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward(dy: &[f64], nc: usize, dims: Dims3) -> Vec<f64> {
    let (h2, w2) = (dims.h / 2, dims.w / 2);
    let s = dims.size();
    let s2 = s / 8;
    let mut dx = vec![0.0; nc * s];
    for b in 0..nc {
        for d in 0..dims.d {
            for h in 0..dims.h {
                for w in 0..dims.w {
                    dx[b * s + (d * dims.h + h) * dims.w + w] = 0.125 * dy[b * s2 + ((d / 2) * h2 + h / 2) * w2 + w / 2];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling; `dims` are the input dims.
pub(crate) fn upsample2_forward(x: &[f64], nc: usize, dims: Dims3) -> Vec<f64> {
    let (d2, h2, w2) = (dims.d * 2, dims.h * 2, dims.w * 2);
    let s = dims.size();
    let s2 = s * 8;
    let mut out = vec![0.0; nc * s2];
    for b in 0..nc {
        for d in 0..d2 {
            for h in 0..h2 {
                for w in 0..w2 {
                    out[b * s2 + (d * h2 + h) * w2 + w] = x[b * s + ((d / 2) * dims.h + h / 2) * dims.w + w / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dy: &[f64], nc: usize, dims: Dims3) -> Vec<f64> {
    let (d2, h2, w2) = (dims.d * 2, dims.h * 2, dims.w * 2);
    let s = dims.size();
    let s2 = s * 8;
    let mut dx = vec![0.0; nc * s];
    for b in 0..nc {
        for d in 0..d2 {
            for h in 0..h2 {
                for w in 0..w2 {
                    dx[b * s + ((d / 2) * dims.h + h / 2) * dims.w + w / 2] += dy[b * s2 + (d * h2 + h) * w2 + w];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], cs: &ConvShape) -> Vec<f64> {
        let Dims3 { d, h, w: ww } = cs.dims;
        let k = cs.k as isize;
        let pad = k / 2;
        let s = d * h * ww;
        let mut out = vec![0.0; cs.n * cs.cout * s];
        for n in 0..cs.n {
            for co in 0..cs.cout {
                for z in 0..d as isize {
                    for y in 0..h as isize {
                        for xx in 0..ww as isize {
                            let mut acc = b[co];
                            for ci in 0..cs.cin {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let (sz, sy, sx) = (z + kd - pad, y + kh - pad, xx + kw - pad);
                                            if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= ww as isize {
                                                continue;
                                            }
                                            let wi = (((co * cs.cin + ci) * cs.k + kd as usize) * cs.k + kh as usize) * cs.k + kw as usize;
                                            let xi = ((n * cs.cin + ci) * d + sz as usize) * h * ww + sy as usize * ww + sx as usize;
                                            acc += w[wi] * x[xi];
                                        }
                                    }
                                }
                            }
                            out[((n * cs.cout + co) * d + z as usize) * h * ww + y as usize * ww + xx as usize] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_sum() {
        let cs = ConvShape {
            n: 2,
            cin: 3,
            cout: 2,
            k: 3,
            dims: Dims3 { d: 3, h: 4, w: 5 },
        };
        let x: Vec<f64> = (0..2 * 3 * 60).map(|i| ((i * 31) % 17) as f64 - 8.0).collect();
        let w: Vec<f64> = (0..2 * 3 * 27).map(|i| ((i * 13) % 7) as f64 / 7.0 - 0.5).collect();
        let b = vec![0.25, -1.0];
        let fast = conv3d_forward(&x, &w, &b, &cs);
        let slow = naive_conv(&x, &w, &b, &cs);
        for (a, e) in fast.iter().zip(&slow) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..11).map(|i| i as f64).collect();
        assert_eq!(dot(&a, &a), (0..11).map(|i| (i * i) as f64).sum::<f64>());
    }
}
