//! Scene representation, procedural room generation, augmentation and cropping.
//!
//! A scene is a set of oriented, colored points with a semantic class and an
//! instance id per point. Background classes (floor, wall) carry instance id
//! `-1`; every object point carries the id of the primitive it was sampled from.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};
use crate::geom::{self, Vec3};

pub const FLOOR: usize = 0;
pub const WALL: usize = 1;
pub const BOX: usize = 2;
pub const SPHERE: usize = 3;
pub const CYLINDER: usize = 4;
pub const NUM_CLASSES: usize = 5;
pub const OBJECT_CLASSES: [usize; 3] = [BOX, SPHERE, CYLINDER];
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["floor", "wall", "box", "sphere", "cylinder"];

pub fn is_object_class(class: usize) -> bool {
    OBJECT_CLASSES.contains(&class)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePoint {
    pub position: Vec3,
    pub normal: Vec3,
    /// RGB in `[0, 1]`.
    pub color: Vec3,
    pub semantic: usize,
    /// `-1` for background points.
    pub instance: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub points: Vec<ScenePoint>,
}

/// Ground-truth geometry of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGt {
    pub id: i32,
    pub class: usize,
    /// Axis-aligned bounding-box center of the instance's points.
    pub center: Vec3,
    /// Radius of the smallest sphere around `center` holding every point.
    pub radius: f64,
    pub points: Vec<usize>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.points.iter().map(|p| p.position)
    }

    /// Checks the per-point invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, p) in self.points.iter().enumerate() {
            let n = geom::norm(p.normal);
            if (n - 1.0).abs() > 1e-5 {
                return Err(MpaError::InvalidScene(format!("point {i}: normal length {n}")));
            }
            if p.semantic >= NUM_CLASSES {
                return Err(MpaError::InvalidScene(format!("point {i}: class {}", p.semantic)));
            }
            match (p.instance >= 0, is_object_class(p.semantic)) {
                (true, true) | (false, false) if p.instance >= -1 => {}
                _ => {
                    return Err(MpaError::InvalidScene(format!(
                        "point {i}: instance {} with class {}",
                        p.instance, p.semantic
                    )))
                }
            }
            if p.instance >= 0 {
                let class = *seen.entry(p.instance).or_insert(p.semantic);
                if class != p.semantic {
                    return Err(MpaError::InvalidScene(format!(
                        "instance {} mixes classes {class} and {}",
                        p.instance, p.semantic
                    )));
                }
            }
        }
        Ok(())
    }

    /// Instances present in the scene, ordered by id.
    pub fn instances(&self) -> Vec<InstanceGt> {
        let mut groups: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.points.iter().enumerate() {
            if p.instance >= 0 {
                groups.entry(p.instance).or_default().push(i);
            }
        }
        groups
            .into_iter()
            .map(|(id, points)| {
                let (lo, hi) = geom::aabb(points.iter().map(|&i| self.points[i].position)).unwrap();
                let center = geom::scale(geom::add(lo, hi), 0.5);
                let radius = points
                    .iter()
                    .map(|&i| geom::dist(self.points[i].position, center))
                    .fold(0.0, f64::max);
                InstanceGt { id, class: self.points[points[0]].semantic, center, radius, points }
            })
            .collect()
    }

    pub fn object_point_count(&self) -> usize {
        self.points.iter().filter(|p| p.instance >= 0).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Scene {
        Scene {
            scene_id: self.scene_id.clone(),
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Box,
    Sphere,
    Cylinder,
}

impl ObjectKind {
    pub fn class(self) -> usize {
        match self {
            ObjectKind::Box => BOX,
            ObjectKind::Sphere => SPHERE,
            ObjectKind::Cylinder => CYLINDER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGenParams {
    pub seed: u64,
    /// Room size (x, y, height) in meters.
    pub room_extent: Vec3,
    /// Inclusive range of object counts.
    pub objects_per_scene: (usize, usize),
    pub object_classes: Vec<ObjectKind>,
    /// Surface sampling density, points per square meter.
    pub points_per_m2: f64,
    /// Standard deviation of the along-normal position noise, meters.
    pub noise_sigma: f64,
}

impl Default for SceneGenParams {
    fn default() -> Self {
        Self {
            seed: 0,
            room_extent: [6.0, 6.0, 3.0],
            objects_per_scene: (4, 12),
            object_classes: vec![ObjectKind::Box, ObjectKind::Sphere, ObjectKind::Cylinder],
            points_per_m2: 400.0,
            noise_sigma: 0.005,
        }
    }
}

impl SceneGenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MpaError::Invalid(m.to_string()));
        if self.room_extent.iter().any(|v| !(*v > 0.0)) {
            return bad("room extent must be positive");
        }
        if self.objects_per_scene.0 > self.objects_per_scene.1 {
            return bad("objects_per_scene range is reversed");
        }
        if self.objects_per_scene.1 > 0 && self.object_classes.is_empty() {
            return bad("objects requested but no object classes enabled");
        }
        if !(self.points_per_m2 > 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("density must be positive and noise non-negative");
        }
        Ok(())
    }
}

/// Geometry of a generated object, in room coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Box resting on the floor, rotated by `yaw` about the vertical axis.
    Box { center: Vec3, half: Vec3, yaw: f64 },
    Sphere { center: Vec3, radius: f64 },
    /// Upright cylinder standing on the floor at `base`.
    Cylinder { base: Vec3, radius: f64, height: f64 },
}

impl Primitive {
    pub fn kind(&self) -> ObjectKind {
        match self {
            Primitive::Box { .. } => ObjectKind::Box,
            Primitive::Sphere { .. } => ObjectKind::Sphere,
            Primitive::Cylinder { .. } => ObjectKind::Cylinder,
        }
    }

    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        match *self {
            Primitive::Box { center, half, .. } => (center, geom::norm(half)),
            Primitive::Sphere { center, radius } => (center, radius),
            Primitive::Cylinder { base, radius, height } => (
                [base[0], base[1], base[2] + 0.5 * height],
                (radius * radius + 0.25 * height * height).sqrt(),
            ),
        }
    }

    /// Unsigned distance from `p` to the primitive's surface.
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        match *self {
            Primitive::Box { center, half, yaw } => {
                let local = geom::mat_vec(&geom::rot_z(-yaw), geom::sub(p, center));
                let q = [local[0].abs() - half[0], local[1].abs() - half[1], local[2].abs() - half[2]];
                let outside = geom::norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                (outside + inside).abs()
            }
            Primitive::Sphere { center, radius } => (geom::dist(p, center) - radius).abs(),
            Primitive::Cylinder { base, radius, height } => {
                let r = ((p[0] - base[0]).powi(2) + (p[1] - base[1]).powi(2)).sqrt();
                let h = p[2] - base[2] - 0.5 * height;
                let q = [r - radius, h.abs() - 0.5 * height];
                let outside = (q[0].max(0.0).powi(2) + q[1].max(0.0).powi(2)).sqrt();
                let inside = q[0].max(q[1]).min(0.0);
                (outside + inside).abs()
            }
        }
    }

    /// Whether the primitive covers the floor point `(x, y)`.
    fn covers_floor(&self, x: f64, y: f64) -> bool {
        match *self {
            Primitive::Box { center, half, yaw } => {
                let local = geom::mat_vec(&geom::rot_z(-yaw), [x - center[0], y - center[1], 0.0]);
                local[0].abs() <= half[0] && local[1].abs() <= half[1]
            }
            Primitive::Sphere { .. } => false,
            Primitive::Cylinder { base, radius, .. } => {
                (x - base[0]).powi(2) + (y - base[1]).powi(2) <= radius * radius
            }
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Generates a room with floor, four walls and non-overlapping objects.
pub fn generate_scene(params: &SceneGenParams) -> Result<Scene> {
    generate_scene_with_layout(params).map(|(scene, _)| scene)
}

/// Like [`generate_scene`], also returning the primitive behind each instance id.
pub fn generate_scene_with_layout(params: &SceneGenParams) -> Result<(Scene, Vec<Primitive>)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let [w, d, h] = params.room_extent;
    let (lo, hi) = params.objects_per_scene;
    let count = rng.random_range(lo..=hi);

    let mut prims: Vec<Primitive> = Vec::with_capacity(count);
    let mut attempts = 0;
    while prims.len() < count {
        if attempts >= MAX_PLACEMENT_ATTEMPTS {
            return Err(MpaError::SceneTooCrowded { attempts });
        }
        attempts += 1;
        let kind = params.object_classes[rng.random_range(0..params.object_classes.len())];
        let prim = sample_primitive(kind, w, d, &mut rng);
        let (c, r) = prim.bounding_sphere();
        let inside = c[0] - r >= 0.0 && c[0] + r <= w && c[1] - r >= 0.0 && c[1] + r <= d && c[2] + r <= h;
        let clear = prims.iter().all(|o| {
            let (oc, or) = o.bounding_sphere();
            geom::dist(c, oc) >= r + or
        });
        if inside && clear {
            prims.push(prim);
        }
    }

    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut sampler = SurfaceSampler { rng: &mut rng, noise, sigma: params.noise_sigma, points: Vec::new() };
    let density = params.points_per_m2;

    let floor_n = (w * d * density).round() as usize;
    for _ in 0..floor_n {
        let x = sampler.rng.random_range(0.0..w);
        let y = sampler.rng.random_range(0.0..d);
        if prims.iter().any(|p| p.covers_floor(x, y)) {
            continue;
        }
        let color = sampler.jitter([0.55, 0.5, 0.45], 0.04);
        sampler.push([x, y, 0.0], [0.0, 0.0, 1.0], color, FLOOR, -1);
    }
    let walls: [(Vec3, Vec3, Vec3, f64); 4] = [
        ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], d),
        ([w, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], d),
        ([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], w),
        ([0.0, d, 0.0], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0], w),
    ];
    for (origin, normal, along, length) in walls {
        let n = (length * h * density).round() as usize;
        for _ in 0..n {
            let s = sampler.rng.random_range(0.0..length);
            let z = sampler.rng.random_range(0.0..h);
            let p = geom::add(origin, [along[0] * s, along[1] * s, z]);
            let color = sampler.jitter([0.8, 0.8, 0.75], 0.04);
            sampler.push(p, normal, color, WALL, -1);
        }
    }

    for (id, prim) in prims.iter().enumerate() {
        let base = match prim.kind() {
            ObjectKind::Box => [0.75, 0.35, 0.25],
            ObjectKind::Sphere => [0.3, 0.7, 0.35],
            ObjectKind::Cylinder => [0.3, 0.4, 0.8],
        };
        let object_color = sampler.jitter(base, 0.15);
        sampler.sample_primitive(prim, density, object_color, id as i32);
    }

    let scene = Scene { scene_id: format!("scene_{:06}", params.seed), points: sampler.points };
    Ok((scene, prims))
}

fn sample_primitive(kind: ObjectKind, w: f64, d: f64, rng: &mut ChaCha8Rng) -> Primitive {
    let x = rng.random_range(0.0..w);
    let y = rng.random_range(0.0..d);
    match kind {
        ObjectKind::Box => {
            let half = [rng.random_range(0.2..0.5), rng.random_range(0.2..0.5), rng.random_range(0.15..0.45)];
            Primitive::Box { center: [x, y, half[2]], half, yaw: rng.random_range(0.0..PI / 2.0) }
        }
        ObjectKind::Sphere => {
            let radius = rng.random_range(0.2..0.45);
            Primitive::Sphere { center: [x, y, radius], radius }
        }
        ObjectKind::Cylinder => Primitive::Cylinder {
            base: [x, y, 0.0],
            radius: rng.random_range(0.15..0.4),
            height: rng.random_range(0.3..1.0),
        },
    }
}

struct SurfaceSampler<'a> {
    rng: &'a mut ChaCha8Rng,
    noise: Normal<f64>,
    sigma: f64,
    points: Vec<ScenePoint>,
}

impl SurfaceSampler<'_> {
    fn jitter(&mut self, base: Vec3, amount: f64) -> Vec3 {
        base.map(|c| (c + self.rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
    }

    /// Pushes a point displaced along its normal by noise truncated at 3σ.
    fn push(&mut self, p: Vec3, normal: Vec3, color: Vec3, semantic: usize, instance: i32) {
        let offset = if self.sigma > 0.0 {
            self.noise.sample(self.rng).clamp(-3.0 * self.sigma, 3.0 * self.sigma)
        } else {
            0.0
        };
        let position = geom::add(p, geom::scale(normal, offset));
        let color = self.jitter(color, 0.03);
        self.points.push(ScenePoint { position, normal, color, semantic, instance });
    }

    fn count(&mut self, area: f64, density: f64) -> usize {
        (area * density).round() as usize
    }

    fn sample_primitive(&mut self, prim: &Primitive, density: f64, color: Vec3, id: i32) {
        let class = prim.kind().class();
        match *prim {
            Primitive::Box { center, half, yaw } => {
                let rot = geom::rot_z(yaw);
                // top face plus four sides; the bottom rests on the floor
                let faces: [(usize, f64); 5] = [(2, 1.0), (0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)];
                for (axis, sign) in faces {
                    let (u, v) = match axis {
                        0 => (1, 2),
                        1 => (0, 2),
                        _ => (0, 1),
                    };
                    let n = self.count(4.0 * half[u] * half[v], density);
                    for _ in 0..n {
                        let mut local = [0.0; 3];
                        local[axis] = sign * half[axis];
                        local[u] = self.rng.random_range(-half[u]..half[u]);
                        local[v] = self.rng.random_range(-half[v]..half[v]);
                        let mut normal = [0.0; 3];
                        normal[axis] = sign;
                        let p = geom::add(center, geom::mat_vec(&rot, local));
                        self.push(p, geom::mat_vec(&rot, normal), color, class, id);
                    }
                }
            }
            Primitive::Sphere { center, radius } => {
                let n = self.count(4.0 * PI * radius * radius, density);
                for _ in 0..n {
                    let z: f64 = self.rng.random_range(-1.0..1.0);
                    let t: f64 = self.rng.random_range(0.0..2.0 * PI);
                    let s = (1.0 - z * z).sqrt();
                    let dir = [s * t.cos(), s * t.sin(), z];
                    self.push(geom::add(center, geom::scale(dir, radius)), dir, color, class, id);
                }
            }
            Primitive::Cylinder { base, radius, height } => {
                let side = self.count(2.0 * PI * radius * height, density);
                for _ in 0..side {
                    let t: f64 = self.rng.random_range(0.0..2.0 * PI);
                    let z = self.rng.random_range(0.0..height);
                    let dir = [t.cos(), t.sin(), 0.0];
                    let p = [base[0] + radius * dir[0], base[1] + radius * dir[1], base[2] + z];
                    self.push(p, dir, color, class, id);
                }
                let top = self.count(PI * radius * radius, density);
                for _ in 0..top {
                    let r = radius * self.rng.random_range(0.0f64..1.0).sqrt();
                    let t: f64 = self.rng.random_range(0.0..2.0 * PI);
                    let p = [base[0] + r * t.cos(), base[1] + r * t.sin(), base[2] + height];
                    self.push(p, [0.0, 0.0, 1.0], color, class, id);
                }
            }
        }
    }
}

/// Random similarity transform used as training-time augmentation.
///
/// Rotates about the vertical axis by U[−180°, 180°] and about both
/// horizontal axes by U[−10°, 10°], flips each horizontal axis with
/// probability 0.5 and scales uniformly by U[0.9, 1.1]. The transform pivots
/// on the center of the scene's horizontal footprint.
pub fn augment(scene: &Scene, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tilt = 10f64.to_radians();
    let yaw = rng.random_range(-PI..=PI);
    let ax = rng.random_range(-tilt..=tilt);
    let ay = rng.random_range(-tilt..=tilt);
    let flip_x = rng.random_bool(0.5);
    let flip_y = rng.random_bool(0.5);
    let s = rng.random_range(0.9..=1.1);

    let flip = [
        [if flip_x { -1.0 } else { 1.0 }, 0.0, 0.0],
        [0.0, if flip_y { -1.0 } else { 1.0 }, 0.0],
        [0.0, 0.0, 1.0],
    ];
    let linear = geom::mat_mul(&geom::rot_z(yaw), &geom::mat_mul(&geom::rot_y(ay), &geom::mat_mul(&geom::rot_x(ax), &flip)));

    let pivot = match geom::aabb(scene.positions()) {
        Some((lo, hi)) => [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.0],
        None => [0.0; 3],
    };
    let points = scene
        .points
        .iter()
        .map(|p| {
            let local = geom::sub(p.position, pivot);
            let position = geom::add(pivot, geom::scale(geom::mat_vec(&linear, local), s));
            let normal = geom::normalize(geom::mat_vec(&linear, p.normal));
            ScenePoint { position, normal, ..p.clone() }
        })
        .collect();
    Scene { scene_id: scene.scene_id.clone(), points }
}

/// Points whose `(x, y)` fall in the half-open square `[c − size/2, c + size/2)`.
pub fn crop_window(scene: &Scene, center_xy: [f64; 2], size: f64) -> Scene {
    let half = 0.5 * size;
    let (x0, x1) = (center_xy[0] - half, center_xy[0] + half);
    let (y0, y1) = (center_xy[1] - half, center_xy[1] + half);
    let points = scene
        .points
        .iter()
        .filter(|p| {
            let [x, y, _] = p.position;
            x >= x0 && x < x1 && y >= y0 && y < y1
        })
        .cloned()
        .collect();
    Scene { scene_id: scene.scene_id.clone(), points }
}

/// [`crop_window`] for training: fails with [`MpaError::EmptyCrop`] when the
/// window holds no object point, so the caller can resample.
pub fn crop(scene: &Scene, center_xy: [f64; 2], size: f64) -> Result<Scene> {
    if !(size > 0.0) {
        return Err(MpaError::Invalid(format!("crop size must be positive, got {size}")));
    }
    let cropped = crop_window(scene, center_xy, size);
    if !cropped.points.iter().any(|p| p.instance >= 0) {
        return Err(MpaError::EmptyCrop);
    }
    Ok(cropped)
}
