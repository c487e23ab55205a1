//! Binary little-endian PLY for Gaussian clouds.
//!
//! One `vertex` element per splat with fourteen float properties. Colors are
//! plain RGB in `[0, 1]` and opacity is stored without any activation.

use std::fs;
use std::io::Write;
use std::path::Path;

use loopfill_core::geometry::{GaussianCloud, Splat};
use loopfill_core::math::{Quat, Vec3};

use crate::error::{IoContext, PipelineError, Result};

pub const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z", "scale_x", "scale_y", "scale_z", "opacity", "red", "green",
    "blue",
];

/// Bytes per vertex record.
pub const RECORD_BYTES: usize = PROPERTIES.len() * 4;

pub fn header(count: usize) -> String {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    h.push_str(&format!("element vertex {count}\n"));
    for p in PROPERTIES {
        h.push_str(&format!("property float {p}\n"));
    }
    h.push_str("end_header\n");
    h
}

pub fn encode(cloud: &GaussianCloud) -> Vec<u8> {
    let mut out = header(cloud.len()).into_bytes();
    out.reserve(cloud.len() * RECORD_BYTES);
    for s in cloud.splats() {
        let fields = [
            s.mean[0],
            s.mean[1],
            s.mean[2],
            s.rotation.0[0],
            s.rotation.0[1],
            s.rotation.0[2],
            s.rotation.0[3],
            s.scale[0],
            s.scale[1],
            s.scale[2],
            s.opacity,
            s.color[0],
            s.color[1],
            s.color[2],
        ];
        for v in fields {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<GaussianCloud> {
    let bad = |m: &str| PipelineError::format(path, m);
    let end = find(bytes, b"end_header\n").ok_or_else(|| bad("missing end_header"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("not a PLY file"));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, _] => return Err(bad(&format!("unsupported format {other}"))),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["element", other, ..] => return Err(bad(&format!("unexpected element {other}"))),
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ty, name] => return Err(bad(&format!("property {name} has type {ty}, expected float"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(bad(&format!("unrecognised header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let index: Vec<usize> = PROPERTIES
        .iter()
        .map(|want| props.iter().position(|p| p == want).ok_or_else(|| bad(&format!("missing property {want}"))))
        .collect::<Result<_>>()?;
    let stride = props.len() * 4;
    let body = &bytes[end + b"end_header\n".len()..];
    if body.len() < count * stride {
        return Err(bad(&format!("truncated: {} vertex bytes for {count} vertices", body.len())));
    }
    let mut cloud = GaussianCloud::with_capacity(count);
    for i in 0..count {
        let rec = &body[i * stride..(i + 1) * stride];
        let f = |k: usize| {
            let o = index[k] * 4;
            f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]) as f64
        };
        cloud.push(Splat {
            mean: Vec3::new(f(0), f(1), f(2)),
            rotation: Quat([f(3), f(4), f(5), f(6)]),
            scale: Vec3::new(f(7), f(8), f(9)),
            opacity: f(10),
            color: Vec3::new(f(11), f(12), f(13)),
        });
    }
    Ok(cloud)
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

pub fn write_ply(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(&encode(cloud)).at(path)
}

pub fn read_ply(path: &Path) -> Result<GaussianCloud> {
    decode(&fs::read(path).at(path)?, path)
}
