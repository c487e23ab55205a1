use alloc::vec;
use alloc::vec::Vec;

use super::forward::{prepare, Prepared};
use super::{footprint, RenderSettings};
use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::geometry::GaussianCloud;
use crate::math::{Mat3, Vec3};
use crate::par;

/// Partial derivatives of a scalar image loss with respect to every splat parameter.
///
/// Rotation gradients are taken with respect to the raw (possibly non-unit)
/// quaternion, including the normalization inside the renderer.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub means: Vec<Vec3>,
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<Vec3>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vec3>,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        RenderGradients {
            means: vec![Vec3::ZERO; n],
            rotations: vec![[0.0; 4]; n],
            scales: vec![Vec3::ZERO; n],
            opacities: vec![0.0; n],
            colors: vec![Vec3::ZERO; n],
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.means.iter().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.scales.iter().all(|v| v.is_finite())
            && self.opacities.iter().all(|v| v.is_finite())
            && self.colors.iter().all(|v| v.is_finite())
    }

    pub fn accumulate(&mut self, other: &RenderGradients) {
        for i in 0..self.len() {
            self.means[i] += other.means[i];
            self.scales[i] += other.scales[i];
            self.colors[i] += other.colors[i];
            self.opacities[i] += other.opacities[i];
            for k in 0..4 {
                self.rotations[i][k] += other.rotations[i][k];
            }
        }
    }
}

/// Screen-space gradient of one splat: `u, v, conic a, b, c, opacity, rgb`.
#[derive(Debug, Clone, Copy, Default)]
struct Grad2d {
    u: f64,
    v: f64,
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

struct Hit {
    k: usize,
    g: f64,
    alpha: f64,
    dx: f64,
    dy: f64,
}

fn tile_backward(
    prepared: &Prepared,
    tile: usize,
    pose: &CameraPose,
    settings: &RenderSettings,
    upstream: &[f64],
) -> Vec<Grad2d> {
    let list = &prepared.tiles[tile];
    let mut grads = vec![Grad2d::default(); list.len()];
    let (x0, x1, y0, y1) = prepared.tile_bounds(tile, pose);
    let cutoff_sq = settings.sigma_cutoff * settings.sigma_cutoff;
    let mut hits: Vec<(usize, Hit)> = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let pix = (y * pose.width + x) * 3;
            let dl = Vec3::new(upstream[pix], upstream[pix + 1], upstream[pix + 2]);
            if dl == Vec3::ZERO {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            hits.clear();
            for (slot, &k) in list.iter().enumerate() {
                let p = &prepared.splats[k].1;
                let Some((g, dx, dy)) = footprint(p, px, py, cutoff_sq) else { continue };
                let alpha = p.opacity * g;
                if alpha < settings.alpha_min {
                    continue;
                }
                hits.push((slot, Hit { k, g, alpha, dx, dy }));
            }
            // transmittance in front of each hit
            let mut t = 1.0;
            let mut t_front = Vec::with_capacity(hits.len());
            for (_, h) in &hits {
                t_front.push(t);
                t *= 1.0 - h.alpha;
            }
            // colour behind hit i, normalised by the transmittance just behind it
            let mut behind = settings.background;
            for (idx, (slot, h)) in hits.iter().enumerate().rev() {
                let p = &prepared.splats[h.k].1;
                let ti = t_front[idx];
                let gr = &mut grads[*slot];
                let w = h.alpha * ti;
                for c in 0..3 {
                    gr.color[c] += dl[c] * w;
                }
                let dalpha = ti * dl.dot(p.color - behind);
                behind = p.color * h.alpha + behind * (1.0 - h.alpha);

                gr.opacity += dalpha * h.g;
                let dpower = dalpha * p.opacity * h.g;
                let (a, b, c) = (p.conic[0], p.conic[1], p.conic[2]);
                gr.u += dpower * (a * h.dx + b * h.dy);
                gr.v += dpower * (b * h.dx + c * h.dy);
                gr.conic[0] += dpower * (-0.5 * h.dx * h.dx);
                gr.conic[1] += dpower * (-h.dx * h.dy);
                gr.conic[2] += dpower * (-0.5 * h.dy * h.dy);
            }
        }
    }
    grads
}

/// Derivatives of `R(q/|q|)` with respect to the unit quaternion `(w, x, y, z)`,
/// contracted against `g_r`.
fn rotation_vjp(qn: [f64; 4], g_r: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = qn;
    let g = &g_r.0;
    let mut out = [0.0; 4];
    let mut add = |gij: f64, d: [f64; 4]| {
        for k in 0..4 {
            out[k] += gij * d[k];
        }
    };
    add(g[0][0], [0.0, 0.0, -4.0 * y, -4.0 * z]);
    add(g[0][1], [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w]);
    add(g[0][2], [2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x]);
    add(g[1][0], [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w]);
    add(g[1][1], [0.0, -4.0 * x, 0.0, -4.0 * z]);
    add(g[1][2], [-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y]);
    add(g[2][0], [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x]);
    add(g[2][1], [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y]);
    add(g[2][2], [0.0, -4.0 * x, -4.0 * y, 0.0]);
    out
}

fn outer(a: Vec3, b: Vec3) -> Mat3 {
    Mat3(core::array::from_fn(|i| core::array::from_fn(|j| a[i] * b[j])))
}

/// Chain rule from screen-space gradients back to the 3D splat parameters.
fn splat_backward(cloud: &GaussianCloud, i: usize, g2: &Grad2d, pose: &CameraPose, dilation: f64, out: &mut RenderGradients) {
    let q = cloud.rotations[i];
    let qnorm = q.norm();
    let qn = q.normalized();
    let r = qn.to_rotation();
    let s = cloud.scales[i];
    let m = r.mul_mat(&Mat3::diag(s));
    let sigma = m.mul_mat(&m.transpose());

    let w = &pose.rotation;
    let cam = pose.to_camera(cloud.means[i]);
    let f = pose.focal();
    let iz = 1.0 / cam.z();
    let (x, y) = (cam.x(), cam.y());
    let j0 = Vec3::new(f * iz, 0.0, -f * x * iz * iz);
    let j1 = Vec3::new(0.0, f * iz, -f * y * iz * iz);
    let wt = w.transpose();
    let t0 = wt.mul_vec(j0);
    let t1 = wt.mul_vec(j1);

    // recompute the conic exactly as the forward pass did
    let s_t0 = sigma.mul_vec(t0);
    let s_t1 = sigma.mul_vec(t1);
    let (cov_a, cov_b, cov_c) = (t0.dot(s_t0) + dilation, t0.dot(s_t1), t1.dot(s_t1) + dilation);
    let det = cov_a * cov_c - cov_b * cov_b;
    let k = [[cov_c / det, -cov_b / det], [-cov_b / det, cov_a / det]];

    // dL/dΣ2d = -K G_K K
    let gk = [[g2.conic[0], 0.5 * g2.conic[1]], [0.5 * g2.conic[1], g2.conic[2]]];
    let mut kg = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            kg[a][b] = (0..2).map(|c| k[a][c] * gk[c][b]).sum();
        }
    }
    let mut g_cov = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            g_cov[a][b] = -(0..2).map(|c| kg[a][c] * k[c][b]).sum::<f64>();
        }
    }

    // Σ2d = T Σ Tᵀ with rows t0, t1
    let t = [t0, t1];
    let mut g_sigma = Mat3::ZERO;
    for a in 0..2 {
        for b in 0..2 {
            g_sigma = g_sigma.add(&outer(t[a], t[b]).scale(g_cov[a][b]));
        }
    }
    // dL/dT = 2 G_cov T Σ
    let st = [s_t0, s_t1];
    let g_t: [Vec3; 2] = core::array::from_fn(|a| st[0] * (2.0 * g_cov[a][0]) + st[1] * (2.0 * g_cov[a][1]));
    // T rows are Wᵀ j_a, so dL/dj_a = W dL/dt_a
    let g_j0 = w.mul_vec(g_t[0]);
    let g_j1 = w.mul_vec(g_t[1]);

    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_cam = Vec3::new(g2.u * f * iz, g2.v * f * iz, -g2.u * f * x * iz2 - g2.v * f * y * iz2);
    // J00 = f/z, J02 = -f x/z², J11 = f/z, J12 = -f y/z²
    g_cam.0[2] += g_j0[0] * (-f * iz2);
    g_cam.0[0] += g_j0[2] * (-f * iz2);
    g_cam.0[2] += g_j0[2] * (2.0 * f * x * iz3);
    g_cam.0[2] += g_j1[1] * (-f * iz2);
    g_cam.0[1] += g_j1[2] * (-f * iz2);
    g_cam.0[2] += g_j1[2] * (2.0 * f * y * iz3);
    out.means[i] += w.transpose().mul_vec(g_cam);

    // Σ = M Mᵀ, M = R diag(s)
    let g_m = g_sigma.scale(2.0).mul_mat(&m);
    let mut g_r = Mat3::ZERO;
    let mut g_s = Vec3::ZERO;
    for a in 0..3 {
        for b in 0..3 {
            g_s.0[b] += g_m.0[a][b] * r.0[a][b];
            g_r.0[a][b] = g_m.0[a][b] * s[b];
        }
    }
    out.scales[i] += g_s;

    let g_qn = rotation_vjp(qn.0, &g_r);
    let dot: f64 = (0..4).map(|k| g_qn[k] * qn.0[k]).sum();
    for k in 0..4 {
        out.rotations[i][k] += (g_qn[k] - qn.0[k] * dot) / qnorm;
    }
    out.opacities[i] += g2.opacity;
    out.colors[i] += Vec3(g2.color);
}

/// Gradients of `Σ_pixels upstream · render(cloud)` for every splat parameter.
///
/// `upstream` holds `dL/dpixel` in the image's interleaved RGB layout.
pub fn render_backward(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    settings: &RenderSettings,
    upstream: &[f64],
) -> Result<RenderGradients> {
    if upstream.len() != pose.width * pose.height * 3 {
        return Err(Error::param("upstream gradient does not match image size"));
    }
    if upstream.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite upstream gradient".into()));
    }
    let prepared = prepare(cloud, pose, settings);
    let tile_grads = par::map(prepared.tiles.len(), |tile| tile_backward(&prepared, tile, pose, settings, upstream));

    let mut screen = vec![Grad2d::default(); prepared.splats.len()];
    for (tile, grads) in tile_grads.iter().enumerate() {
        for (slot, g) in grads.iter().enumerate() {
            let acc = &mut screen[prepared.tiles[tile][slot]];
            acc.u += g.u;
            acc.v += g.v;
            acc.opacity += g.opacity;
            for c in 0..3 {
                acc.conic[c] += g.conic[c];
                acc.color[c] += g.color[c];
            }
        }
    }

    let mut out = RenderGradients::zeros(cloud.len());
    for (k, (i, _)) in prepared.splats.iter().enumerate() {
        splat_backward(cloud, *i, &screen[k], pose, settings.dilation, &mut out);
    }
    Ok(out)
}
