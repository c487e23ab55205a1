//! Brute-force reference renderer written directly from the compositing sum.
//!
//! It shares no code with the tiled rasterizer: every splat is tested at
//! every pixel with nalgebra linear algebra, and contributions are sorted per
//! pixel. Passing a frozen activation lets finite differences stay inside
//! one smooth piece of the (piecewise-smooth) image function.

#![allow(dead_code)]

use loopfill_core::camera::CameraPose;
use loopfill_core::geometry::GaussianCloud;
use loopfill_core::render::RenderSettings;
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};

/// Per pixel, the source indices of contributing splats, front to back.
pub type Activation = Vec<Vec<usize>>;

struct Footprint {
    center: Vector2<f64>,
    conic: Matrix2<f64>,
    depth: f64,
}

fn footprint(cloud: &GaussianCloud, i: usize, pose: &CameraPose, settings: &RenderSettings) -> Option<Footprint> {
    let q = cloud.rotations[i].0;
    let rot = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    let r: Matrix3<f64> = *rot.to_rotation_matrix().matrix();
    let s = Matrix3::from_diagonal(&Vector3::from(cloud.scales[i].0));
    let sigma = r * s * s.transpose() * r.transpose();

    let w = Matrix3::from_fn(|a, b| pose.rotation.0[a][b]);
    let t = Vector3::from(pose.translation.0);
    let m = w * Vector3::from(cloud.means[i].0) + t;
    if m.z <= settings.near {
        return None;
    }
    let f = 0.5 * pose.height as f64 / (0.5 * pose.fov_y_deg.to_radians()).tan();
    let center = Vector2::new(f * m.x / m.z + 0.5 * pose.width as f64, f * m.y / m.z + 0.5 * pose.height as f64);
    let j = Matrix2x3::new(f / m.z, 0.0, -f * m.x / (m.z * m.z), 0.0, f / m.z, -f * m.y / (m.z * m.z));
    let cov = j * w * sigma * w.transpose() * j.transpose() + Matrix2::identity() * settings.dilation;
    let conic = cov.try_inverse()?;
    if cov.determinant() <= 0.0 {
        return None;
    }
    Some(Footprint { center, conic, depth: m.z })
}

/// Renders `cloud` as interleaved RGB in f64. With `frozen`, the listed
/// splats are composited in the listed order and the cutoff tests are skipped.
pub fn render(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    settings: &RenderSettings,
    frozen: Option<&Activation>,
) -> (Vec<f64>, Activation) {
    let prints: Vec<Option<Footprint>> = (0..cloud.len()).map(|i| footprint(cloud, i, pose, settings)).collect();
    let mut out = vec![0.0; pose.width * pose.height * 3];
    let mut activation = Vec::with_capacity(pose.width * pose.height);
    for py in 0..pose.height {
        for px in 0..pose.width {
            let pixel = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
            let eval = |i: usize| -> Option<f64> {
                let fp = prints[i].as_ref()?;
                let d = pixel - fp.center;
                Some((d.transpose() * fp.conic * d)[(0, 0)])
            };
            let order: Vec<usize> = match frozen {
                Some(fz) => fz[py * pose.width + px].clone(),
                None => {
                    let mut cands: Vec<usize> = (0..cloud.len())
                        .filter(|&i| match eval(i) {
                            Some(q) => {
                                q <= settings.sigma_cutoff * settings.sigma_cutoff
                                    && cloud.opacities[i] * (-0.5 * q).exp() >= settings.alpha_min
                            }
                            None => false,
                        })
                        .collect();
                    cands.sort_by(|&a, &b| {
                        let (da, db) = (prints[a].as_ref().unwrap().depth, prints[b].as_ref().unwrap().depth);
                        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                    });
                    cands
                }
            };
            // c = Σ_i c_i α_i G_i Π_{j<i} (1 − α_j G_j) + T·background
            let mut rgb = [0.0; 3];
            for (n, &i) in order.iter().enumerate() {
                let g = (-0.5 * eval(i).unwrap()).exp();
                let mut trans = 1.0;
                for &j in &order[..n] {
                    trans *= 1.0 - cloud.opacities[j] * (-0.5 * eval(j).unwrap()).exp();
                }
                for c in 0..3 {
                    rgb[c] += cloud.colors[i][c] * cloud.opacities[i] * g * trans;
                }
            }
            let t_final: f64 = order.iter().map(|&j| 1.0 - cloud.opacities[j] * (-0.5 * eval(j).unwrap()).exp()).product();
            let base = (py * pose.width + px) * 3;
            for c in 0..3 {
                out[base + c] = rgb[c] + settings.background[c] * t_final;
            }
            activation.push(order);
        }
    }
    (out, activation)
}

pub fn weighted_loss(pixels: &[f64], upstream: &[f64]) -> f64 {
    pixels.iter().zip(upstream).map(|(p, u)| p * u).sum()
}

/// Finite-difference gradients of `Σ upstream·render` for every parameter,
/// in the layout `[means(3), rotations(4), scales(3), opacity(1), colors(3)]`
/// per splat, with the activation frozen at the unperturbed cloud.
pub fn finite_difference_gradients(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    settings: &RenderSettings,
    upstream: &[f64],
    step: f64,
) -> Vec<[f64; 14]> {
    let (_, frozen) = render(cloud, pose, settings, None);
    let loss = |c: &GaussianCloud| weighted_loss(&render(c, pose, settings, Some(&frozen)).0, upstream);
    let mut out = vec![[0.0; 14]; cloud.len()];
    for i in 0..cloud.len() {
        for p in 0..14 {
            let mut plus = cloud.clone();
            let mut minus = cloud.clone();
            perturb(&mut plus, i, p, step);
            perturb(&mut minus, i, p, -step);
            out[i][p] = (loss(&plus) - loss(&minus)) / (2.0 * step);
        }
    }
    out
}

fn perturb(c: &mut GaussianCloud, i: usize, p: usize, h: f64) {
    match p {
        0..=2 => c.means[i].0[p] += h,
        3..=6 => c.rotations[i].0[p - 3] += h,
        7..=9 => c.scales[i].0[p - 7] += h,
        10 => c.opacities[i] += h,
        _ => c.colors[i].0[p - 11] += h,
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
