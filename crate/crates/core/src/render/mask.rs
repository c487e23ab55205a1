use alloc::vec::Vec;

use super::MaskImage;
use crate::camera::CameraPose;
use crate::geometry::Mask3D;

/// Binary mask: a pixel is 1 iff the ray through its centre meets any mask primitive.
pub fn render_mask(mask: &Mask3D, pose: &CameraPose) -> MaskImage {
    let origin = pose.position();
    let mut values = Vec::with_capacity(pose.width * pose.height);
    for y in 0..pose.height {
        for x in 0..pose.width {
            let dir = pose.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            let hit = mask.primitives.iter().any(|p| p.ray_hits(origin, dir));
            values.push(if hit { 1.0 } else { 0.0 });
        }
    }
    MaskImage { width: pose.width, height: pose.height, values }
}
