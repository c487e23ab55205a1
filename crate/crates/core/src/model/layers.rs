//! Dense kernels on row-major token matrices, each paired with its
//! vector-Jacobian product. Gradients are always accumulated (`+=`).

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

pub const LN_EPS: f64 = 1e-5;

/// `out[m×k] += x[m×d] · w[d×k]`
pub fn matmul_acc(x: &[f64], w: &[f64], out: &mut [f64], m: usize, d: usize, k: usize) {
    for i in 0..m {
        let row = &mut out[i * k..(i + 1) * k];
        for (p, &a) in x[i * d..(i + 1) * d].iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, wv) in row.iter_mut().zip(&w[p * k..(p + 1) * k]) {
                *o += a * wv;
            }
        }
    }
}

/// `out[d×k] += xᵀ · g` for `x[m×d]`, `g[m×k]`.
pub fn matmul_tn_acc(x: &[f64], g: &[f64], out: &mut [f64], m: usize, d: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * k..(i + 1) * k];
        for (p, &a) in x[i * d..(i + 1) * d].iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, gv) in out[p * k..(p + 1) * k].iter_mut().zip(grow) {
                *o += a * gv;
            }
        }
    }
}

/// `out[m×d] += g · wᵀ` for `g[m×k]`, `w[d×k]`.
pub fn matmul_nt_acc(g: &[f64], w: &[f64], out: &mut [f64], m: usize, d: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * k..(i + 1) * k];
        for p in 0..d {
            let wrow = &w[p * k..(p + 1) * k];
            out[i * d + p] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

pub fn add_bias(y: &mut [f64], b: &[f64]) {
    for row in y.chunks_exact_mut(b.len()) {
        for (v, bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
}

pub fn bias_grad_acc(g: &[f64], out: &mut [f64]) {
    for row in g.chunks_exact(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| math::silu(*v)).collect()
}

/// Gradient through `silu` given the pre-activation.
pub fn silu_backward(pre: &[f64], g: &[f64]) -> Vec<f64> {
    pre.iter().zip(g).map(|(x, gv)| gv * math::silu_grad(*x)).collect()
}

/// Per-row layer normalization without affine parameters. Returns the
/// normalized rows and each row's reciprocal standard deviation.
pub fn layer_norm(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let m = x.len() / c;
    let mut out = vec![0.0; x.len()];
    let mut rstd = vec![0.0; m];
    for i in 0..m {
        let row = &x[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let r = 1.0 / math::sqrt(var + LN_EPS);
        rstd[i] = r;
        for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
    }
    (out, rstd)
}

pub fn layer_norm_backward(normed: &[f64], rstd: &[f64], g: &[f64], c: usize, gx: &mut [f64]) {
    for (i, r) in rstd.iter().enumerate() {
        let n = &normed[i * c..(i + 1) * c];
        let gr = &g[i * c..(i + 1) * c];
        let mean_g = gr.iter().sum::<f64>() / c as f64;
        let mean_gn = gr.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for j in 0..c {
            gx[i * c + j] += r * (gr[j] - mean_g - n[j] * mean_gn);
        }
    }
}

/// `y = n ⊙ (1 + scale) + shift`, with `scale`/`shift` shared by every row.
pub fn modulate(n: &[f64], shift: &[f64], scale: &[f64]) -> Vec<f64> {
    let c = shift.len();
    let mut out = n.to_vec();
    for row in out.chunks_exact_mut(c) {
        for j in 0..c {
            row[j] = row[j] * (1.0 + scale[j]) + shift[j];
        }
    }
    out
}

/// Returns the gradient w.r.t. `n` and accumulates into `g_shift`/`g_scale`.
pub fn modulate_backward(n: &[f64], scale: &[f64], g: &[f64], g_shift: &mut [f64], g_scale: &mut [f64]) -> Vec<f64> {
    let c = scale.len();
    let mut gn = vec![0.0; n.len()];
    for (i, (grow, nrow)) in g.chunks_exact(c).zip(n.chunks_exact(c)).enumerate() {
        for j in 0..c {
            gn[i * c + j] = grow[j] * (1.0 + scale[j]);
            g_shift[j] += grow[j];
            g_scale[j] += grow[j] * nrow[j];
        }
    }
    gn
}

/// Geometry of a token tensor laid out as `[frames][grid rows][grid cols][channels]`.
#[derive(Debug, Clone, Copy)]
pub struct Grid {
    pub frames: usize,
    pub side: usize,
    pub channels: usize,
}

impl Grid {
    pub fn tokens(&self) -> usize {
        self.frames * self.side * self.side
    }

    pub fn positions(&self) -> usize {
        self.side * self.side
    }
}

/// Depthwise 3×3 convolution over each frame's token grid with zero padding.
/// `w` is `[9][channels]` (row-major kernel taps), `b` is `[channels]`.
pub fn dwconv3(x: &[f64], w: &[f64], b: &[f64], grid: Grid) -> Vec<f64> {
    let (s, c) = (grid.side, grid.channels);
    let mut out = vec![0.0; x.len()];
    for f in 0..grid.frames {
        for i in 0..s {
            for j in 0..s {
                let o = ((f * s + i) * s + j) * c;
                out[o..o + c].copy_from_slice(b);
                for di in 0..3 {
                    let ii = i + di;
                    if ii < 1 || ii > s {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = j + dj;
                        if jj < 1 || jj > s {
                            continue;
                        }
                        let src = ((f * s + ii - 1) * s + jj - 1) * c;
                        let tap = &w[(di * 3 + dj) * c..(di * 3 + dj + 1) * c];
                        for ch in 0..c {
                            out[o + ch] += tap[ch] * x[src + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients (if given) and returns the input gradient.
pub fn dwconv3_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    grid: Grid,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) -> Vec<f64> {
    let (s, c) = (grid.side, grid.channels);
    let mut gx = vec![0.0; x.len()];
    for f in 0..grid.frames {
        for i in 0..s {
            for j in 0..s {
                let o = ((f * s + i) * s + j) * c;
                if let Some(gb) = gb.as_deref_mut() {
                    for ch in 0..c {
                        gb[ch] += g[o + ch];
                    }
                }
                for di in 0..3 {
                    let ii = i + di;
                    if ii < 1 || ii > s {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = j + dj;
                        if jj < 1 || jj > s {
                            continue;
                        }
                        let src = ((f * s + ii - 1) * s + jj - 1) * c;
                        let t = (di * 3 + dj) * c;
                        for ch in 0..c {
                            gx[src + ch] += w[t + ch] * g[o + ch];
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            for ch in 0..c {
                                gw[t + ch] += x[src + ch] * g[o + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Single-head attention across frames at every grid position. Returns the
/// attended values and the attention weights `[position][query frame][key frame]`.
pub fn temporal_attention(q: &[f64], k: &[f64], v: &[f64], grid: Grid) -> (Vec<f64>, Vec<f64>) {
    let (nf, np, c) = (grid.frames, grid.positions(), grid.channels);
    let inv = 1.0 / math::sqrt(c as f64);
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; np * nf * nf];
    let mut scores = vec![0.0; nf];
    for p in 0..np {
        for f in 0..nf {
            let qi = (f * np + p) * c;
            let qrow = &q[qi..qi + c];
            let mut max = f64::NEG_INFINITY;
            for (g, s) in scores.iter_mut().enumerate() {
                let ki = (g * np + p) * c;
                *s = qrow.iter().zip(&k[ki..ki + c]).map(|(a, b)| a * b).sum::<f64>() * inv;
                max = max.max(*s);
            }
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = math::exp(*s - max);
                total += *s;
            }
            let prow = &mut probs[(p * nf + f) * nf..(p * nf + f + 1) * nf];
            for (g, s) in scores.iter().enumerate() {
                let w = s / total;
                prow[g] = w;
                let vi = (g * np + p) * c;
                for ch in 0..c {
                    out[qi + ch] += w * v[vi + ch];
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(gq, gk, gv)`.
pub fn temporal_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    grid: Grid,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (nf, np, c) = (grid.frames, grid.positions(), grid.channels);
    let inv = 1.0 / math::sqrt(c as f64);
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut gp = vec![0.0; nf];
    for p in 0..np {
        for f in 0..nf {
            let qi = (f * np + p) * c;
            let grow = &g[qi..qi + c];
            let prow = &probs[(p * nf + f) * nf..(p * nf + f + 1) * nf];
            let mut dot = 0.0;
            for gidx in 0..nf {
                let vi = (gidx * np + p) * c;
                gp[gidx] = grow.iter().zip(&v[vi..vi + c]).map(|(a, b)| a * b).sum::<f64>();
                dot += prow[gidx] * gp[gidx];
                for ch in 0..c {
                    gv[vi + ch] += prow[gidx] * grow[ch];
                }
            }
            for gidx in 0..nf {
                let gs = prow[gidx] * (gp[gidx] - dot) * inv;
                if gs == 0.0 {
                    continue;
                }
                let ki = (gidx * np + p) * c;
                for ch in 0..c {
                    gq[qi + ch] += gs * k[ki + ch];
                    gk[ki + ch] += gs * q[qi + ch];
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Sinusoidal embedding of a scalar time in `[0, 1]` (scaled by 1000).
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = math::exp(-math::ln(10_000.0) * i as f64 / half as f64);
        let a = 1000.0 * t * freq;
        out[i] = math::sin(a);
        out[half + i] = math::cos(a);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        for i in 0..x.len() {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let fd = (f(&p) - f(&m)) / 2e-5;
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "{i}: fd {fd} vs {}", analytic[i]);
        }
    }

    fn probe(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| math::sin(seed + 1.7 * i as f64) * 0.8).collect()
    }

    #[test]
    fn layer_norm_gradient() {
        let x = probe(12, 0.3);
        let w = probe(12, 1.1);
        let (n, r) = layer_norm(&x, 4);
        let mut gx = vec![0.0; 12];
        layer_norm_backward(&n, &r, &w, 4, &mut gx);
        fd_check(|x| layer_norm(x, 4).0.iter().zip(&w).map(|(a, b)| a * b).sum(), &x, &gx);
    }

    #[test]
    fn dwconv_gradients() {
        let grid = Grid { frames: 2, side: 3, channels: 2 };
        let x = probe(36, 0.1);
        let w = probe(18, 2.0);
        let b = probe(2, 3.0);
        let g = probe(36, 4.0);
        let mut gw = vec![0.0; 18];
        let gx = dwconv3_backward(&x, &w, &g, grid, Some(&mut gw), None);
        let loss = |x: &[f64], w: &[f64]| dwconv3(x, w, &b, grid).iter().zip(&g).map(|(a, c)| a * c).sum::<f64>();
        fd_check(|x| loss(x, &w), &x, &gx);
        fd_check(|w| loss(&x, w), &w, &gw);
    }

    #[test]
    fn attention_gradients_and_rows_sum_to_one() {
        let grid = Grid { frames: 3, side: 2, channels: 2 };
        let n = grid.tokens() * 2;
        let (q, k, v, g) = (probe(n, 0.0), probe(n, 1.0), probe(n, 2.0), probe(n, 3.0));
        let (_, probs) = temporal_attention(&q, &k, &v, grid);
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let (gq, gk, gv) = temporal_attention_backward(&q, &k, &v, &probs, &g, grid);
        let loss = |q: &[f64], k: &[f64], v: &[f64]| {
            temporal_attention(q, k, v, grid).0.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        fd_check(|x| loss(x, &k, &v), &q, &gq);
        fd_check(|x| loss(&q, x, &v), &k, &gk);
        fd_check(|x| loss(&q, &k, x), &v, &gv);
    }

    #[test]
    fn matmul_variants_agree() {
        let x = probe(6, 0.2); // 2×3
        let w = probe(12, 0.9); // 3×4
        let mut y = vec![0.0; 8];
        matmul_acc(&x, &w, &mut y, 2, 3, 4);
        assert!((y[5] - (x[3] * w[1] + x[4] * w[5] + x[5] * w[9])).abs() < 1e-15);
        let g = probe(8, 1.3);
        let mut gx = vec![0.0; 6];
        matmul_nt_acc(&g, &w, &mut gx, 2, 3, 4);
        let mut gw = vec![0.0; 12];
        matmul_tn_acc(&x, &g, &mut gw, 2, 3, 4);
        let loss = |x: &[f64], w: &[f64]| {
            let mut y = vec![0.0; 8];
            matmul_acc(x, w, &mut y, 2, 3, 4);
            y.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        fd_check(|v| loss(v, &w), &x, &gx);
        fd_check(|v| loss(&x, v), &w, &gw);
    }
}
