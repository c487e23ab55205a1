//! On-disk sequence bundles and NeRF-synthetic style camera manifests.
//!
//! ```text
//! bundle/
//!   manifest.json  full.ply  carved.ply  mask.json
//!   frames/000.png  frames/000.f32  ...
//!   masks/000.png   masks/000.f32   ...
//!   targets/000.png targets/000.f32 ...
//! ```
//!
//! PNGs are for inspection; loaders prefer the `.f32` file next to each PNG
//! so pipeline stages hand frames to each other without quantization.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use loopfill_core::camera::CameraPose;
use loopfill_core::geometry::{GaussianCloud, Mask3D, ObjectSample};
use loopfill_core::math::{Mat3, Vec3};
use loopfill_core::render::{Image, MaskImage};
use loopfill_core::sequence::FrameSequence;

use crate::error::{IoContext, PipelineError, Result};
use crate::image_io;
use crate::ply;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFrame {
    pub file_path: String,
    pub mask_path: String,
    /// Camera-to-world, row-major, OpenGL axes (camera looks down −z, +y up).
    pub transform_matrix: [[f64; 4]; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraManifest {
    /// Vertical field of view in radians.
    pub camera_angle_y: f64,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<ManifestFrame>,
    pub loop_closed: bool,
    pub reference_attached: bool,
    pub label: usize,
    pub seed: u64,
}

const GL_FLIP: [f64; 3] = [1.0, -1.0, -1.0];

/// Camera-to-world matrix in OpenGL axes for a world-to-camera OpenCV pose.
pub fn pose_to_transform(pose: &CameraPose) -> [[f64; 4]; 4] {
    let rt = pose.rotation.transpose();
    let c = pose.position();
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().take(3).enumerate() {
        for (j, flip) in GL_FLIP.iter().enumerate() {
            row[j] = rt.0[i][j] * flip;
        }
        row[3] = c[i];
    }
    m[3][3] = 1.0;
    m
}

pub fn transform_to_pose(m: &[[f64; 4]; 4], fov_y_rad: f64, width: usize, height: usize) -> Result<CameraPose> {
    let mut rt = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rt[i][j] = m[i][j] * GL_FLIP[j];
        }
    }
    let rotation = Mat3(rt).transpose();
    let c = Vec3::new(m[0][3], m[1][3], m[2][3]);
    let translation = -rotation.mul_vec(c);
    Ok(CameraPose::new(rotation, translation, fov_y_rad.to_degrees(), width, height)?)
}

fn frame_name(i: usize) -> String {
    format!("{i:03}")
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).at(path)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).at(path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| PipelineError::format(path, e.to_string()))
}

/// Writes images under `dir` as `NNN.png` plus `NNN.f32`.
pub fn write_images(images: &[Image], dir: &Path) -> Result<()> {
    mkdir(dir)?;
    for (i, img) in images.iter().enumerate() {
        image_io::write_png(img, &dir.join(format!("{}.png", frame_name(i))))?;
        image_io::write_raw(img, &dir.join(format!("{}.f32", frame_name(i))))?;
    }
    Ok(())
}

pub fn write_masks(masks: &[MaskImage], dir: &Path) -> Result<()> {
    mkdir(dir)?;
    for (i, m) in masks.iter().enumerate() {
        image_io::write_mask_png(m, &dir.join(format!("{}.png", frame_name(i))))?;
        image_io::write_mask_raw(m, &dir.join(format!("{}.f32", frame_name(i))))?;
    }
    Ok(())
}

/// Reads an image, preferring the lossless `.f32` sibling of a PNG path.
pub fn read_image(png_path: &Path) -> Result<Image> {
    let raw = png_path.with_extension("f32");
    if raw.exists() {
        image_io::read_raw(&raw)
    } else {
        image_io::read_png(png_path)
    }
}

pub fn read_mask(png_path: &Path) -> Result<MaskImage> {
    let raw = png_path.with_extension("f32");
    if raw.exists() {
        image_io::read_mask_raw(&raw)
    } else {
        image_io::read_mask_png(png_path)
    }
}

pub fn read_images(dir: &Path, count: usize) -> Result<Vec<Image>> {
    (0..count).map(|i| read_image(&dir.join(format!("{}.png", frame_name(i))))).collect()
}

/// Manifest for frames `frames/NNN.png` with masks `masks/NNN.png`.
pub fn make_manifest(poses: &[CameraPose], seq_flags: (bool, bool), label: usize, seed: u64) -> Result<CameraManifest> {
    let first = poses.first().ok_or_else(|| PipelineError::Config("manifest needs at least one camera".into()))?;
    Ok(CameraManifest {
        camera_angle_y: first.fov_y_deg.to_radians(),
        width: first.width,
        height: first.height,
        frames: poses
            .iter()
            .enumerate()
            .map(|(i, p)| ManifestFrame {
                file_path: format!("frames/{}.png", frame_name(i)),
                mask_path: format!("masks/{}.png", frame_name(i)),
                transform_matrix: pose_to_transform(p),
            })
            .collect(),
        loop_closed: seq_flags.0,
        reference_attached: seq_flags.1,
        label,
        seed,
    })
}

impl CameraManifest {
    pub fn poses(&self) -> Result<Vec<CameraPose>> {
        self.frames
            .iter()
            .map(|f| transform_to_pose(&f.transform_matrix, self.camera_angle_y, self.width, self.height))
            .collect()
    }
}

/// A bundle as it lives on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub sample: ObjectSample,
    pub carved: GaussianCloud,
    pub sequence: FrameSequence,
    pub targets: Vec<Image>,
}

pub fn write_bundle(bundle: &Bundle, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    let seq = &bundle.sequence;
    let poses: Vec<CameraPose> = seq
        .poses
        .iter()
        .map(|p| p.ok_or_else(|| PipelineError::Config("bundles cannot hold a reference slot".into())))
        .collect::<Result<_>>()?;
    let manifest = make_manifest(&poses, (seq.loop_closed, false), bundle.sample.label, bundle.sample.seed)?;
    write_json(&manifest, &dir.join("manifest.json"))?;
    ply::write_ply(&bundle.sample.full, &dir.join("full.ply"))?;
    ply::write_ply(&bundle.carved, &dir.join("carved.ply"))?;
    write_json(&bundle.sample.mask, &dir.join("mask.json"))?;
    write_images(&seq.frames, &dir.join("frames"))?;
    write_masks(&seq.masks, &dir.join("masks"))?;
    write_images(&bundle.targets, &dir.join("targets"))
}

pub fn read_manifest(dir: &Path) -> Result<CameraManifest> {
    read_json(&dir.join("manifest.json"))
}

pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let manifest = read_manifest(dir)?;
    let poses = manifest.poses()?;
    let mut frames = Vec::with_capacity(poses.len());
    let mut masks = Vec::with_capacity(poses.len());
    for f in &manifest.frames {
        frames.push(read_image(&dir.join(&f.file_path))?);
        masks.push(read_mask(&dir.join(&f.mask_path))?);
    }
    let targets = read_images(&dir.join("targets"), poses.len())?;
    let mask: Mask3D = read_json(&dir.join("mask.json"))?;
    mask.validate().map_err(|e| PipelineError::format(&dir.join("mask.json"), e.to_string()))?;
    let sample = ObjectSample { full: ply::read_ply(&dir.join("full.ply"))?, mask, label: manifest.label, seed: manifest.seed };
    let sequence = FrameSequence {
        frames,
        masks,
        poses: poses.into_iter().map(Some).collect(),
        loop_closed: manifest.loop_closed,
        reference_attached: manifest.reference_attached,
        label: manifest.label,
    };
    Ok(Bundle { sample, carved: ply::read_ply(&dir.join("carved.ply"))?, sequence, targets })
}

/// Sorted subdirectories of `dir` that contain a manifest.
pub fn list_bundles(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.join("manifest.json").is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
