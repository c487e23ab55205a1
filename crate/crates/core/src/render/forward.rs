use alloc::vec;
use alloc::vec::Vec;

use super::{footprint, project_splat, Image, ProjectedSplat, Projected, RenderSettings, TILE_SIZE};
use crate::camera::CameraPose;
use crate::geometry::GaussianCloud;
use crate::math::Vec3;
use crate::par;

/// Counters for splats the rasterizer had to skip or repair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RenderStats {
    pub behind_camera: usize,
    pub degenerate: usize,
    pub offscreen: usize,
    pub renormalized_quaternions: usize,
}

/// Depth-sorted visible splats binned into screen tiles.
pub(crate) struct Prepared {
    /// Visible splats with their index in the source cloud, sorted by depth.
    pub splats: Vec<(usize, ProjectedSplat)>,
    /// Per tile, indices into `splats` (front to back).
    pub tiles: Vec<Vec<usize>>,
    pub tiles_x: usize,
    pub stats: RenderStats,
}

impl Prepared {
    pub fn tile_bounds(&self, tile: usize, pose: &CameraPose) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, (x0 + TILE_SIZE).min(pose.width), y0, (y0 + TILE_SIZE).min(pose.height))
    }
}

pub(crate) fn prepare(cloud: &GaussianCloud, pose: &CameraPose, settings: &RenderSettings) -> Prepared {
    let mut stats = RenderStats::default();
    let mut splats = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let q = cloud.rotations[i];
        if (q.norm() - 1.0).abs() > 1e-6 {
            stats.renormalized_quaternions += 1;
        }
        match project_splat(cloud.means[i], q, cloud.scales[i], cloud.opacities[i], cloud.colors[i], pose, settings) {
            Projected::Visible(p) => splats.push((i, p)),
            Projected::Behind => stats.behind_camera += 1,
            Projected::Degenerate => stats.degenerate += 1,
            Projected::Offscreen => stats.offscreen += 1,
        }
    }
    // stable: equal depths keep source order
    splats.sort_by(|a, b| a.1.depth.total_cmp(&b.1.depth));

    let tiles_x = pose.width.div_ceil(TILE_SIZE);
    let tiles_y = pose.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, (_, p)) in splats.iter().enumerate() {
        for ty in p.y_range.0 / TILE_SIZE..=p.y_range.1 / TILE_SIZE {
            for tx in p.x_range.0 / TILE_SIZE..=p.x_range.1 / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(k);
            }
        }
    }
    Prepared { splats, tiles, tiles_x, stats }
}

/// Pixel colour (before clamping) and final transmittance of one pixel.
#[inline]
pub(crate) fn shade_pixel(
    prepared: &Prepared,
    list: &[usize],
    px: f64,
    py: f64,
    settings: &RenderSettings,
) -> (Vec3, f64) {
    let cutoff_sq = settings.sigma_cutoff * settings.sigma_cutoff;
    let mut color = Vec3::ZERO;
    let mut t = 1.0;
    for &k in list {
        let p = &prepared.splats[k].1;
        let Some((g, _, _)) = footprint(p, px, py, cutoff_sq) else { continue };
        let alpha = p.opacity * g;
        if alpha < settings.alpha_min {
            continue;
        }
        color += p.color * (alpha * t);
        t *= 1.0 - alpha;
    }
    (color + settings.background * t, t)
}

/// Renders the cloud; splats outside the view or with degenerate footprints are skipped.
pub fn render(cloud: &GaussianCloud, pose: &CameraPose, settings: &RenderSettings) -> Image {
    render_with_stats(cloud, pose, settings).0
}

pub fn render_with_stats(cloud: &GaussianCloud, pose: &CameraPose, settings: &RenderSettings) -> (Image, RenderStats) {
    let prepared = prepare(cloud, pose, settings);
    let (w, h) = (pose.width, pose.height);
    let blocks = par::map(prepared.tiles.len(), |tile| {
        let (x0, x1, y0, y1) = prepared.tile_bounds(tile, pose);
        let list = &prepared.tiles[tile];
        let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0) * 3);
        for y in y0..y1 {
            for x in x0..x1 {
                let (c, _) = shade_pixel(&prepared, list, x as f64 + 0.5, y as f64 + 0.5, settings);
                out.extend(c.0.iter().map(|v| v.clamp(0.0, 1.0) as f32));
            }
        }
        out
    });
    let mut pixels = vec![0.0f32; w * h * 3];
    for (tile, block) in blocks.into_iter().enumerate() {
        let (x0, x1, y0, y1) = prepared.tile_bounds(tile, pose);
        let row = (x1 - x0) * 3;
        for (r, y) in (y0..y1).enumerate() {
            let dst = (y * w + x0) * 3;
            pixels[dst..dst + row].copy_from_slice(&block[r * row..(r + 1) * row]);
        }
    }
    (Image { width: w, height: h, pixels }, prepared.stats)
}

/// Alpha (`1 − T`) of every pixel, row-major.
pub fn render_alpha(cloud: &GaussianCloud, pose: &CameraPose, settings: &RenderSettings) -> Vec<f64> {
    let prepared = prepare(cloud, pose, settings);
    let mut alpha = vec![0.0; pose.width * pose.height];
    for tile in 0..prepared.tiles.len() {
        let (x0, x1, y0, y1) = prepared.tile_bounds(tile, pose);
        for y in y0..y1 {
            for x in x0..x1 {
                let (_, t) = shade_pixel(&prepared, &prepared.tiles[tile], x as f64 + 0.5, y as f64 + 0.5, settings);
                alpha[y * pose.width + x] = 1.0 - t;
            }
        }
    }
    alpha
}
