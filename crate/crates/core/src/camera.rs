//! Orbital camera rig and pinhole projection.
//!
//! Camera frames follow the usual computer-vision convention: +x right,
//! +y down, +z along the optical axis. World up is +z and elevation is
//! measured from the xy-plane.

use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};

/// Elevation of the orbital rig in degrees.
pub const DEFAULT_ELEVATION_DEG: f64 = 20.0;
/// Distance of every rig camera from the origin.
pub const DEFAULT_RADIUS: f64 = 2.7;
/// Vertical field of view in degrees.
pub const DEFAULT_FOV_Y_DEG: f64 = 50.0;
pub const DEFAULT_VIEWS: usize = 16;
pub const DEFAULT_RESOLUTION: usize = 64;

/// World-to-camera extrinsics plus pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame z; non-positive means the point is behind the camera.
    pub depth: f64,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.depth > 0.0
    }
}

impl CameraPose {
    pub fn new(rotation: Mat3, translation: Vec3, fov_y_deg: f64, width: usize, height: usize) -> Result<Self> {
        let pose = CameraPose { rotation, translation, fov_y_deg, width, height };
        pose.validate()?;
        Ok(pose)
    }

    /// Camera looking from `eye` at `target` with world +z as up.
    pub fn look_at(eye: Vec3, target: Vec3, fov_y_deg: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye).normalized();
        let mut right = forward.cross(Vec3::new(0.0, 0.0, 1.0));
        if right.norm() < 1e-12 {
            right = Vec3::new(1.0, 0.0, 0.0);
        }
        let right = right.normalized();
        let down = forward.cross(right);
        let rotation = Mat3::from_rows(right, down, forward);
        let translation = -rotation.mul_vec(eye);
        CameraPose::new(rotation, translation, fov_y_deg, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose().mul_mat(&self.rotation);
        let orthonormal = (0..3).all(|i| {
            (0..3).all(|j| {
                let want = if i == j { 1.0 } else { 0.0 };
                (rtr.0[i][j] - want).abs() <= 1e-9
            })
        });
        if !orthonormal || (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::param("camera rotation is not a proper orthonormal matrix"));
        }
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(Error::param("fov_y must lie in (0, 180) degrees"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::param("image dimensions must be at least 8 pixels"));
        }
        Ok(())
    }

    /// Focal length in pixels (square pixels).
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / math::tan(0.5 * self.fov_y_deg.to_radians())
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * self.width as f64, 0.5 * self.height as f64)
    }

    /// Camera centre in world coordinates.
    pub fn position(&self) -> Vec3 {
        -self.rotation.transpose().mul_vec(self.translation)
    }

    pub fn to_camera(&self, p_world: Vec3) -> Vec3 {
        self.rotation.mul_vec(p_world) + self.translation
    }

    /// World-space direction (unnormalized) of the ray through pixel
    /// coordinates `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        let d_cam = Vec3::new((u - cx) / f, (v - cy) / f, 1.0);
        self.rotation.transpose().mul_vec(d_cam)
    }

    pub fn with_resolution(&self, width: usize, height: usize) -> CameraPose {
        CameraPose { width, height, ..*self }
    }
}

/// Pinhole projection. Points behind the camera come back with
/// `depth <= 0` and undefined pixel coordinates.
pub fn project(p_world: Vec3, pose: &CameraPose) -> Projection {
    let pc = pose.to_camera(p_world);
    let f = pose.focal();
    let (cx, cy) = pose.principal_point();
    let depth = pc.z();
    if depth == 0.0 {
        return Projection { u: f64::NAN, v: f64::NAN, depth };
    }
    Projection { u: f * pc.x() / depth + cx, v: f * pc.y() / depth + cy, depth }
}

/// Parameters of a fixed-elevation orbit around the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RigSpec {
    pub n_views: usize,
    pub elevation_deg: f64,
    pub radius: f64,
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
    pub azimuth_offset_deg: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec {
            n_views: DEFAULT_VIEWS,
            elevation_deg: DEFAULT_ELEVATION_DEG,
            radius: DEFAULT_RADIUS,
            fov_y_deg: DEFAULT_FOV_Y_DEG,
            width: DEFAULT_RESOLUTION,
            height: DEFAULT_RESOLUTION,
            azimuth_offset_deg: 0.0,
        }
    }
}

impl RigSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 {
            return Err(Error::param("rig needs at least one view"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::param("rig radius must be positive"));
        }
        Ok(())
    }

    pub fn azimuth_deg(&self, k: usize) -> f64 {
        self.azimuth_offset_deg + 360.0 * k as f64 / self.n_views as f64
    }
}

/// Camera centre on the orbit at the given azimuth and elevation.
pub fn orbit_position(azimuth_deg: f64, elevation_deg: f64, radius: f64) -> Vec3 {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    Vec3::new(
        radius * math::cos(el) * math::cos(az),
        radius * math::cos(el) * math::sin(az),
        radius * math::sin(el),
    )
}

/// Cameras `k = 0..n_views` at azimuth `offset + 360°·k/n`, all aimed at the origin.
pub fn make_rig(spec: &RigSpec) -> Result<Vec<CameraPose>> {
    spec.validate()?;
    (0..spec.n_views)
        .map(|k| {
            let eye = orbit_position(spec.azimuth_deg(k), spec.elevation_deg, spec.radius);
            CameraPose::look_at(eye, Vec3::ZERO, spec.fov_y_deg, spec.width, spec.height)
        })
        .collect()
}

/// Cameras along a partial forward-facing arc, used for the video-like
/// pretraining distribution: azimuths sweep `arc_deg` starting at `start_deg`.
pub fn make_arc(spec: &RigSpec, start_deg: f64, arc_deg: f64) -> Result<Vec<CameraPose>> {
    spec.validate()?;
    let denom = (spec.n_views.max(2) - 1) as f64;
    (0..spec.n_views)
        .map(|k| {
            let az = start_deg + arc_deg * k as f64 / denom;
            let eye = orbit_position(az, spec.elevation_deg, spec.radius);
            CameraPose::look_at(eye, Vec3::ZERO, spec.fov_y_deg, spec.width, spec.height)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rig_geometry() {
        let spec = RigSpec { n_views: 16, ..RigSpec::default() };
        let rig = make_rig(&spec).unwrap();
        assert_eq!(rig.len(), 16);
        for (k, pose) in rig.iter().enumerate() {
            let c = pose.position();
            assert!((c.norm() - 2.7).abs() < 1e-9);
            let el = libm::asin(c.z() / c.norm()).to_degrees();
            assert!((el - 20.0).abs() < 1e-9);
            let az = libm::atan2(c.y(), c.x()).to_degrees().rem_euclid(360.0);
            let want = 22.5 * k as f64;
            assert!((az - want).abs() < 1e-9 || (az - want).abs() > 359.0);
        }
    }

    #[test]
    fn four_view_azimuths() {
        let spec = RigSpec { n_views: 4, ..RigSpec::default() };
        let got: Vec<f64> = (0..4).map(|k| spec.azimuth_deg(k)).collect();
        assert_eq!(got, [0.0, 90.0, 180.0, 270.0]);
    }

    #[test]
    fn origin_projects_to_center() {
        for pose in make_rig(&RigSpec::default()).unwrap() {
            let p = project(Vec3::ZERO, &pose);
            assert!((p.u - 32.0).abs() < 0.5 && (p.v - 32.0).abs() < 0.5);
            assert!((p.depth - 2.7).abs() < 1e-9);
        }
    }

    #[test]
    fn behind_camera_is_flagged() {
        let pose = make_rig(&RigSpec::default()).unwrap()[0];
        let behind = pose.position() * 2.0;
        assert!(!project(behind, &pose).in_front());
    }

    #[test]
    fn cyclic_shift_symmetry() {
        let n = 12;
        let base = make_rig(&RigSpec { n_views: n, ..RigSpec::default() }).unwrap();
        let shifted = make_rig(&RigSpec { n_views: n, azimuth_offset_deg: 360.0 / n as f64, ..RigSpec::default() }).unwrap();
        for k in 0..n {
            let a = &shifted[k];
            let b = &base[(k + 1) % n];
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a.rotation.0[i][j] - b.rotation.0[i][j]).abs() < 1e-9);
                }
                assert!((a.translation[i] - b.translation[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(make_rig(&RigSpec { n_views: 0, ..RigSpec::default() }).is_err());
        assert!(make_rig(&RigSpec { radius: 0.0, ..RigSpec::default() }).is_err());
        assert!(make_rig(&RigSpec { fov_y_deg: 180.0, ..RigSpec::default() }).is_err());
        assert!(make_rig(&RigSpec { width: 4, ..RigSpec::default() }).is_err());
    }
}
