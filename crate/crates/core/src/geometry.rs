//! Gaussian clouds, procedural objects, and the three 3D mask families.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Quat, Vec3};

/// Number of procedural shape families, and therefore of condition labels.
pub const SHAPE_FAMILIES: usize = 4;

pub const MIN_COMPLEXITY: usize = 8;
pub const MAX_COMPLEXITY: usize = 512;

/// Splat footprints are treated as ending at this many standard deviations.
pub const FOOTPRINT_SIGMAS: f64 = 3.0;

/// Surface masks must contain strictly less than this fraction of splats.
pub const SURFACE_MAX_FRACTION: f64 = 0.25;

/// Range of the dilation applied to the object bounds by volume masks.
pub const VOLUME_MARGIN_RANGE: (f64, f64) = (0.05, 0.15);

/// One Gaussian primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub mean: Vec3,
    pub rotation: Quat,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
}

/// Struct-of-arrays Gaussian cloud.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GaussianCloud {
    pub means: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub scales: Vec<Vec3>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vec3>,
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        GaussianCloud {
            means: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            scales: Vec::with_capacity(n),
            opacities: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        }
    }

    pub fn from_splats(splats: impl IntoIterator<Item = Splat>) -> Self {
        let mut cloud = GaussianCloud::new();
        for s in splats {
            cloud.push(s);
        }
        cloud
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, s: Splat) {
        self.means.push(s.mean);
        self.rotations.push(s.rotation);
        self.scales.push(s.scale);
        self.opacities.push(s.opacity);
        self.colors.push(s.color);
    }

    pub fn splat(&self, i: usize) -> Splat {
        Splat {
            mean: self.means[i],
            rotation: self.rotations[i],
            scale: self.scales[i],
            opacity: self.opacities[i],
            color: self.colors[i],
        }
    }

    pub fn splats(&self) -> impl Iterator<Item = Splat> + '_ {
        (0..self.len()).map(|i| self.splat(i))
    }

    /// Keeps the splats at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> GaussianCloud {
        GaussianCloud::from_splats(indices.iter().map(|&i| self.splat(i)))
    }

    pub fn extend(&mut self, other: &GaussianCloud) {
        for s in other.splats() {
            self.push(s);
        }
    }

    /// Checks every structural invariant of the cloud.
    pub fn validate(&self) -> Result<()> {
        let n = self.means.len();
        if self.rotations.len() != n
            || self.scales.len() != n
            || self.opacities.len() != n
            || self.colors.len() != n
        {
            return Err(Error::param("cloud fields have different lengths"));
        }
        for i in 0..n {
            if !self.means[i].is_finite() {
                return Err(Error::param(format!("splat {i}: non-finite mean")));
            }
            if (self.rotations[i].norm() - 1.0).abs() > 1e-6 {
                return Err(Error::param(format!("splat {i}: quaternion not unit")));
            }
            if !self.scales[i].0.iter().all(|s| *s > 0.0 && s.is_finite()) {
                return Err(Error::param(format!("splat {i}: scale must be positive")));
            }
            let o = self.opacities[i];
            if !(o > 0.0 && o < 1.0) {
                return Err(Error::param(format!("splat {i}: opacity {o} outside (0,1)")));
            }
            if !self.colors[i].0.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::param(format!("splat {i}: color outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds of the means, `None` for an empty cloud.
    pub fn mean_bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.means.first()?;
        Some(
            self.means
                .iter()
                .fold((first, first), |(lo, hi), m| (lo.component_min(*m), hi.component_max(*m))),
        )
    }

    /// Axis-aligned bounds of the splat footprints (means ± 3σ per axis).
    pub fn footprint_bounds(&self) -> Option<(Vec3, Vec3)> {
        if self.is_empty() {
            return None;
        }
        let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for s in self.splats() {
            let r = s.rotation.normalized().to_rotation();
            let ext = Vec3(core::array::from_fn(|a| {
                let var: f64 = (0..3).map(|k| { let v = r.0[a][k] * s.scale[k]; v * v }).sum();
                FOOTPRINT_SIGMAS * math::sqrt(var)
            }));
            lo = lo.component_min(s.mean - ext);
            hi = hi.component_max(s.mean + ext);
        }
        Some((lo, hi))
    }
}

/// Uniformly rescales and recenters so the mean bounds are centred at the
/// origin with longest side 2. Scales follow the same factor.
pub fn normalize_cloud(cloud: &GaussianCloud) -> Result<GaussianCloud> {
    let (lo, hi) = cloud
        .mean_bounds()
        .ok_or_else(|| Error::param("cannot normalize an empty cloud"))?;
    let center = (lo + hi) * 0.5;
    let extent = hi - lo;
    let longest = extent.x().max(extent.y()).max(extent.z());
    let factor = if longest > 0.0 { 2.0 / longest } else { 1.0 };
    let mut out = cloud.clone();
    for m in &mut out.means {
        *m = (*m - center) * factor;
    }
    for s in &mut out.scales {
        *s = *s * factor;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum MaskVariant {
    ConvexHull,
    Surface,
    Volume,
}

impl MaskVariant {
    pub const ALL: [MaskVariant; 3] = [MaskVariant::ConvexHull, MaskVariant::Surface, MaskVariant::Volume];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskVariant::ConvexHull => "convexhull",
            MaskVariant::Surface => "surface",
            MaskVariant::Volume => "volume",
        }
    }
}

impl fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convexhull" => Ok(MaskVariant::ConvexHull),
            "surface" => Ok(MaskVariant::Surface),
            "volume" => Ok(MaskVariant::Volume),
            other => Err(Error::param(format!("unknown mask variant {other:?}"))),
        }
    }
}

/// A convex solid in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    Box { min: Vec3, max: Vec3 },
}

impl Primitive {
    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            Primitive::Sphere { center, radius } => {
                let d = p - center;
                d.dot(d) <= radius * radius
            }
            Primitive::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
        }
    }

    /// Whether the half-line `origin + t·dir`, `t > 0`, meets the solid.
    pub fn ray_hits(&self, origin: Vec3, dir: Vec3) -> bool {
        match *self {
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.dot(dir);
                let b = oc.dot(dir);
                let c = oc.dot(oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return false;
                }
                let t_far = (-b + math::sqrt(disc)) / a;
                t_far > 0.0
            }
            Primitive::Box { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for a in 0..3 {
                    if dir[a] == 0.0 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return false;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[a];
                    let (t0, t1) = {
                        let t0 = (min[a] - origin[a]) * inv;
                        let t1 = (max[a] - origin[a]) * inv;
                        if t0 <= t1 { (t0, t1) } else { (t1, t0) }
                    };
                    t_near = t_near.max(t0);
                    t_far = t_far.min(t1);
                }
                t_near <= t_far && t_far > 0.0
            }
        }
    }

    fn intersects_canonical_cube(&self) -> bool {
        match *self {
            Primitive::Sphere { center, radius } => {
                let nearest = Vec3(center.0.map(|c| c.clamp(-1.0, 1.0)));
                let d = center - nearest;
                radius > 0.0 && d.dot(d) <= radius * radius
            }
            Primitive::Box { min, max } => {
                (0..3).all(|a| min[a] <= max[a] && max[a] >= -1.0 && min[a] <= 1.0)
            }
        }
    }

    /// Uniform sample inside the solid.
    pub fn sample_interior<R: Rng>(&self, rng: &mut R) -> Vec3 {
        match *self {
            Primitive::Sphere { center, radius } => loop {
                let p = Vec3(core::array::from_fn(|_| rng.random_range(-1.0..=1.0)));
                if p.dot(p) <= 1.0 {
                    return center + p * radius;
                }
            },
            Primitive::Box { min, max } => Vec3(core::array::from_fn(|a| {
                if max[a] > min[a] { rng.random_range(min[a]..=max[a]) } else { min[a] }
            })),
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius, .. } => 4.0 / 3.0 * core::f64::consts::PI * radius * radius * radius,
            Primitive::Box { min, max } => (0..3).map(|a| (max[a] - min[a]).max(0.0)).product(),
        }
    }
}

/// A 3D mask: a union of convex primitives tagged with its family.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Mask3D {
    pub variant: MaskVariant,
    pub primitives: Vec<Primitive>,
}

impl Mask3D {
    pub fn new(variant: MaskVariant, primitives: Vec<Primitive>) -> Result<Self> {
        let mask = Mask3D { variant, primitives };
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::param("mask has no primitives"));
        }
        if let Some(p) = self.primitives.iter().find(|p| !p.intersects_canonical_cube()) {
            return Err(Error::param(format!("mask primitive {p:?} misses the canonical cube")));
        }
        Ok(())
    }

    pub fn contains(&self, p: Vec3) -> bool {
        point_in_mask(p, self)
    }
}

/// True iff `p` lies inside the union of the mask primitives.
pub fn point_in_mask(p: Vec3, mask: &Mask3D) -> bool {
    mask.primitives.iter().any(|prim| prim.contains(p))
}

/// A ground-truth object together with the region to remove from it.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ObjectSample {
    pub full: GaussianCloud,
    pub mask: Mask3D,
    pub label: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    StackedBoxes,
    EllipsoidCluster,
    Ring,
    Tower,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; SHAPE_FAMILIES] =
        [ShapeFamily::StackedBoxes, ShapeFamily::EllipsoidCluster, ShapeFamily::Ring, ShapeFamily::Tower];

    pub fn label(self) -> usize {
        self as usize
    }

    fn palette(self) -> &'static [[f64; 3]] {
        match self {
            ShapeFamily::StackedBoxes => &[[0.85, 0.2, 0.15], [0.95, 0.55, 0.1], [0.6, 0.1, 0.1]],
            ShapeFamily::EllipsoidCluster => &[[0.15, 0.6, 0.25], [0.1, 0.35, 0.75], [0.2, 0.7, 0.7]],
            ShapeFamily::Ring => &[[0.9, 0.75, 0.15], [0.75, 0.55, 0.1]],
            ShapeFamily::Tower => &[[0.45, 0.5, 0.6], [0.8, 0.15, 0.2]],
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3(core::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal)));
        let n = v.norm();
        if n > 1e-9 {
            return v * (1.0 / n);
        }
    }
}

fn random_quat<R: Rng>(rng: &mut R) -> Quat {
    loop {
        let q = Quat(core::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal)));
        if q.norm() > 1e-9 {
            return q.normalized();
        }
    }
}

/// A surface patch from which splat centres are drawn.
struct Part {
    weight: f64,
    color: [f64; 3],
    kind: PartKind,
}

enum PartKind {
    Box { center: Vec3, half: Vec3 },
    Ellipsoid { center: Vec3, radii: Vec3 },
    Torus { major: f64, minor: f64, tilt: f64 },
    Cylinder { radius: f64, z0: f64, z1: f64 },
}

impl PartKind {
    fn sample<R: Rng>(&self, rng: &mut R) -> Vec3 {
        match *self {
            PartKind::Box { center, half } => {
                let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 2;
                for (a, area) in areas.iter().enumerate() {
                    if pick < *area {
                        axis = a;
                        break;
                    }
                    pick -= area;
                }
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let p = Vec3(core::array::from_fn(|a| {
                    if a == axis { sign * half[a] } else { rng.random_range(-half[a]..=half[a]) }
                }));
                center + p
            }
            PartKind::Ellipsoid { center, radii } => {
                let d = random_unit(rng);
                center + Vec3(core::array::from_fn(|a| d[a] * radii[a]))
            }
            PartKind::Torus { major, minor, tilt } => {
                let u = rng.random_range(0.0..core::f64::consts::TAU);
                let v = rng.random_range(0.0..core::f64::consts::TAU);
                let ring = major + minor * math::cos(v);
                let p = Vec3::new(ring * math::cos(u), ring * math::sin(u), minor * math::sin(v));
                Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), tilt).to_rotation().mul_vec(p)
            }
            PartKind::Cylinder { radius, z0, z1 } => {
                let u = rng.random_range(0.0..core::f64::consts::TAU);
                Vec3::new(radius * math::cos(u), radius * math::sin(u), rng.random_range(z0..=z1))
            }
        }
    }
}

fn family_parts<R: Rng>(family: ShapeFamily, rng: &mut R) -> Vec<Part> {
    let palette = family.palette();
    let mut parts = Vec::new();
    match family {
        ShapeFamily::StackedBoxes => {
            let count = rng.random_range(2..=3);
            let mut z = 0.0;
            let mut width = rng.random_range(0.7..1.0);
            for i in 0..count {
                let half = Vec3::new(
                    width * rng.random_range(0.8..1.0),
                    width * rng.random_range(0.6..1.0),
                    rng.random_range(0.2..0.4),
                );
                let center = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), z + half[2]);
                z += 2.0 * half[2];
                width *= rng.random_range(0.6..0.85);
                let area = 8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2]);
                parts.push(Part { weight: area, color: palette[i % palette.len()], kind: PartKind::Box { center, half } });
            }
        }
        ShapeFamily::EllipsoidCluster => {
            let count = rng.random_range(3..=5);
            for i in 0..count {
                let center = Vec3(core::array::from_fn(|_| rng.random_range(-0.7..0.7)));
                let radii = Vec3(core::array::from_fn(|_| rng.random_range(0.25..0.55)));
                let area = 4.0 * core::f64::consts::PI * (radii[0] * radii[1] + radii[1] * radii[2] + radii[0] * radii[2]) / 3.0;
                parts.push(Part { weight: area, color: palette[i % palette.len()], kind: PartKind::Ellipsoid { center, radii } });
            }
        }
        ShapeFamily::Ring => {
            let minor = rng.random_range(0.2..0.35);
            let tilt = rng.random_range(-0.5..0.5);
            parts.push(Part { weight: 0.7, color: palette[0], kind: PartKind::Torus { major: 1.0, minor, tilt } });
            let accent = rng.random_range(0.12..0.2);
            parts.push(Part {
                weight: 0.3,
                color: palette[1],
                kind: PartKind::Ellipsoid { center: Vec3::new(1.0, 0.0, 0.0), radii: Vec3::new(accent, accent, minor + accent) },
            });
        }
        ShapeFamily::Tower => {
            let radius = rng.random_range(0.3..0.45);
            let height = rng.random_range(1.6..2.4);
            parts.push(Part { weight: 0.72, color: palette[0], kind: PartKind::Cylinder { radius, z0: 0.0, z1: height } });
            let cap = radius * rng.random_range(1.1..1.5);
            parts.push(Part {
                weight: 0.28,
                color: palette[1],
                kind: PartKind::Ellipsoid { center: Vec3::new(0.0, 0.0, height + 0.5 * cap), radii: Vec3::new(cap, cap, cap) },
            });
        }
    }
    parts
}

fn nearest_neighbor_distances(means: &[Vec3]) -> Vec<f64> {
    means
        .iter()
        .enumerate()
        .map(|(i, a)| {
            means
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| (*a - *b).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Mean nearest-neighbour distance of a point set; `None` with fewer than two points.
pub fn mean_nearest_neighbor_distance(means: &[Vec3]) -> Option<f64> {
    if means.len() < 2 {
        return None;
    }
    let d = nearest_neighbor_distances(means);
    Some(d.iter().sum::<f64>() / d.len() as f64)
}

/// Procedural shape with `complexity` splats; deterministic in `seed` and
/// already normalized into the canonical cube.
pub fn generate_shape(seed: u64, complexity: usize) -> Result<(GaussianCloud, ShapeFamily)> {
    if !(MIN_COMPLEXITY..=MAX_COMPLEXITY).contains(&complexity) {
        return Err(Error::param(format!(
            "complexity {complexity} outside [{MIN_COMPLEXITY}, {MAX_COMPLEXITY}]"
        )));
    }
    let mut rng = rng_for(seed, 1);
    let family = ShapeFamily::ALL[rng.random_range(0..SHAPE_FAMILIES)];
    let parts = family_parts(family, &mut rng);
    let total_weight: f64 = parts.iter().map(|p| p.weight).sum();

    let mut counts: Vec<usize> = parts
        .iter()
        .map(|p| libm::floor((p.weight / total_weight) * complexity as f64).max(1.0) as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    if assigned < complexity {
        counts[0] += complexity - assigned;
    } else {
        let mut extra = assigned - complexity;
        for c in counts.iter_mut().rev() {
            let take = extra.min(c.saturating_sub(1));
            *c -= take;
            extra -= take;
        }
    }

    let mut means = Vec::with_capacity(complexity);
    let mut colors = Vec::with_capacity(complexity);
    for (part, &count) in parts.iter().zip(&counts) {
        for _ in 0..count {
            means.push(part.kind.sample(&mut rng));
            colors.push(Vec3(core::array::from_fn(|c| {
                (part.color[c] + rng.random_range(-0.05..0.05)).clamp(0.02, 0.98)
            })));
        }
    }

    let spacing = mean_nearest_neighbor_distance(&means).unwrap_or(0.1).max(1e-3);
    let mut cloud = GaussianCloud::with_capacity(complexity);
    for (mean, color) in means.into_iter().zip(colors) {
        let base = 0.9 * spacing;
        cloud.push(Splat {
            mean,
            rotation: random_quat(&mut rng),
            scale: Vec3(core::array::from_fn(|_| base * rng.random_range(0.75..1.25))),
            opacity: rng.random_range(0.7..0.95),
            color,
        });
    }
    Ok((normalize_cloud(&cloud)?, family))
}

/// Procedural object with a mask whose variant is drawn from the seed.
pub fn generate_object(seed: u64, complexity: usize) -> Result<ObjectSample> {
    let mut rng = rng_for(seed, 2);
    let variant = MaskVariant::ALL[rng.random_range(0..MaskVariant::ALL.len())];
    generate_object_with_variant(seed, complexity, variant)
}

pub fn generate_object_with_variant(seed: u64, complexity: usize, variant: MaskVariant) -> Result<ObjectSample> {
    let (full, family) = generate_shape(seed, complexity)?;
    let mask = generate_mask(&full, variant, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1))?;
    Ok(ObjectSample { full, mask, label: family.label(), seed })
}

/// How strict [`carve_object_with`] is about removing everything.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CarveOptions {
    /// Minimum acceptable fraction of surviving splats. `None` requires at
    /// least one survivor; `Some(0.0)` accepts an empty result.
    pub keep_fraction_floor: Option<f64>,
}

pub fn carve_object(sample: &ObjectSample) -> Result<GaussianCloud> {
    carve_object_with(sample, CarveOptions::default())
}

/// Removes every splat whose mean lies inside the mask, preserving order.
pub fn carve_object_with(sample: &ObjectSample, options: CarveOptions) -> Result<GaussianCloud> {
    let keep: Vec<usize> = (0..sample.full.len())
        .filter(|&i| !point_in_mask(sample.full.means[i], &sample.mask))
        .collect();
    let total = sample.full.len();
    let ok = match options.keep_fraction_floor {
        None => !keep.is_empty(),
        Some(floor) => total == 0 || keep.len() as f64 >= floor * total as f64,
    };
    if !ok {
        return Err(Error::DegenerateCarve { total: total - keep.len() });
    }
    Ok(sample.full.select(&keep))
}

fn k_radius(distances: &mut [f64], k: usize) -> f64 {
    distances.sort_by(f64::total_cmp);
    let inside = distances[k - 1];
    match distances.get(k) {
        Some(next) if *next > inside => 0.5 * (inside + next),
        _ => inside * (1.0 + 1e-9) + 1e-12,
    }
}

fn centroid(cloud: &GaussianCloud) -> Vec3 {
    let sum = cloud.means.iter().fold(Vec3::ZERO, |acc, m| acc + *m);
    sum * (1.0 / cloud.len() as f64)
}

/// Splats at least as far from the centroid as the median splat.
fn shell_indices(cloud: &GaussianCloud) -> Vec<usize> {
    let c = centroid(cloud);
    let mut d: Vec<f64> = cloud.means.iter().map(|m| (*m - c).norm()).collect();
    let dist = d.clone();
    d.sort_by(f64::total_cmp);
    let median = d[d.len() / 2];
    (0..cloud.len()).filter(|&i| dist[i] >= median).collect()
}

/// Places a mask of the requested family on a normalized cloud.
pub fn generate_mask(cloud: &GaussianCloud, variant: MaskVariant, seed: u64) -> Result<Mask3D> {
    if cloud.is_empty() {
        return Err(Error::param("cannot place a mask on an empty cloud"));
    }
    let mut rng = rng_for(seed, 3);
    let n = cloud.len();
    match variant {
        MaskVariant::ConvexHull => {
            let anchor = cloud.means[rng.random_range(0..n)];
            let fraction = rng.random_range(0.15..0.35);
            let k = (libm::round(fraction * n as f64) as usize).clamp(1, n - 1);
            let primitive = if rng.random_bool(0.5) {
                let mut d: Vec<f64> = cloud.means.iter().map(|m| (*m - anchor).norm()).collect();
                Primitive::Sphere { center: anchor, radius: k_radius(&mut d, k) }
            } else {
                let mut d: Vec<f64> = cloud
                    .means
                    .iter()
                    .map(|m| (0..3).map(|a| (m[a] - anchor[a]).abs()).fold(0.0, f64::max))
                    .collect();
                let h = k_radius(&mut d, k);
                let half = Vec3::new(h, h, h);
                Primitive::Box { min: anchor - half, max: anchor + half }
            };
            Mask3D::new(variant, alloc::vec![primitive])
        }
        MaskVariant::Surface => {
            let c = centroid(cloud);
            let shell = shell_indices(cloud);
            for _ in 0..64 {
                let dir = random_unit(&mut rng);
                let anchor_idx = (0..n)
                    .max_by(|&a, &b| (cloud.means[a] - c).dot(dir).total_cmp(&(cloud.means[b] - c).dot(dir)))
                    .unwrap_or(0);
                if !shell.contains(&anchor_idx) {
                    continue;
                }
                let anchor = cloud.means[anchor_idx];
                let fraction = rng.random_range(0.05..0.15);
                let cap = (libm::ceil(SURFACE_MAX_FRACTION * n as f64) as usize).saturating_sub(1).max(1);
                let k = (libm::round(fraction * n as f64) as usize).clamp(1, cap);
                let mut d: Vec<f64> = cloud.means.iter().map(|m| (*m - anchor).norm()).collect();
                let mask = Mask3D::new(variant, alloc::vec![Primitive::Sphere { center: anchor, radius: k_radius(&mut d, k) }])?;
                if validate_mask(&mask, cloud).passed {
                    return Ok(mask);
                }
            }
            Err(Error::Numerical("could not place a surface mask on the cloud shell".into()))
        }
        MaskVariant::Volume => {
            let (lo, hi) = cloud.footprint_bounds().expect("non-empty");
            let (mlo, mhi) = cloud.mean_bounds().expect("non-empty");
            let ext = mhi - mlo;
            let half_longest = 0.5 * ext.x().max(ext.y()).max(ext.z()).max(1e-9);
            let margin = rng.random_range(VOLUME_MARGIN_RANGE.0..=VOLUME_MARGIN_RANGE.1);
            let pad = Vec3::new(1.0, 1.0, 1.0) * (margin * half_longest);
            Mask3D::new(variant, alloc::vec![Primitive::Box { min: lo - pad, max: hi + pad }])
        }
    }
}

/// Containment summary produced by [`validate_mask`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MaskReport {
    pub variant: MaskVariant,
    pub passed: bool,
    pub contained: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Checks the family-specific predicate of a mask against a cloud.
///
/// * convexhull: the mask takes a proper, non-empty part of the object;
/// * surface: it touches the outer shell and holds under 25% of splats;
/// * volume: it holds every splat.
pub fn validate_mask(mask: &Mask3D, cloud: &GaussianCloud) -> MaskReport {
    let inside: Vec<usize> = (0..cloud.len()).filter(|&i| point_in_mask(cloud.means[i], mask)).collect();
    let total = cloud.len();
    let fraction = if total == 0 { 0.0 } else { inside.len() as f64 / total as f64 };
    let passed = total > 0
        && match mask.variant {
            MaskVariant::ConvexHull => !inside.is_empty() && inside.len() < total,
            MaskVariant::Surface => {
                let shell = shell_indices(cloud);
                fraction < SURFACE_MAX_FRACTION && inside.iter().any(|i| shell.contains(i))
            }
            MaskVariant::Volume => inside.len() == total,
        };
    MaskReport { variant: mask.variant, passed, contained: inside.len(), total, fraction }
}
