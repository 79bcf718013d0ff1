//! Deterministic procedural scene generator. Objects are analytic
//! primitives (box, capsule, two-box truck, ellipsoid) rendered by
//! ray-primitive intersection with flat shading, giving exact object masks,
//! occluder masks, sky/road masks and first-hit depth.

use crate::camera::{add3, cross3, dot3, norm3, normalize3, scale3, sub3, Camera, Vec3};
use crate::dataset::{save_dataset, ManifestMetadata};
use crate::error::{Error, Result};
use crate::nn::{stream, Rng};
use crate::sample::{DepthMap, FeatureMap, Mask, ObjectSample, RgbImage, TimeOfDay};
use rand::Rng as _;
use std::path::Path;

/// Occluders are painted with this exact unlit albedo so tests can locate
/// them in rendered images.
pub const OCCLUDER_ALBEDO: [f64; 3] = [0.85, 0.10, 0.80];

const LIGHT_DIR: Vec3 = [0.449_421_8, 0.349_328_1, 0.822_119_4];
const AMBIENT: f64 = 0.35;

/// Lighting at or above this value is labeled day.
pub const DAY_THRESHOLD: f64 = 0.65;

/// Default class mixture over the four object kinds.
pub const CLASS_MIX: [f64; 4] = [0.4, 0.2, 0.2, 0.2];

pub const CLASS_NAMES: [&str; 4] = ["box", "capsule", "truck", "ellipsoid"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Box,
    Capsule,
    Truck,
    Ellipsoid,
}

impl ObjectKind {
    pub fn from_class(label: usize) -> ObjectKind {
        match label {
            0 => ObjectKind::Box,
            1 => ObjectKind::Capsule,
            2 => ObjectKind::Truck,
            _ => ObjectKind::Ellipsoid,
        }
    }

    pub fn class(self) -> usize {
        match self {
            ObjectKind::Box => 0,
            ObjectKind::Capsule => 1,
            ObjectKind::Truck => 2,
            ObjectKind::Ellipsoid => 3,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum OccluderShape {
    /// Flat disk perpendicular to the camera-to-origin axis.
    Disk,
    Sphere,
}

#[derive(Clone, Debug)]
pub struct Occluder {
    pub shape: OccluderShape,
    /// Position along the camera-to-origin segment, fraction in (0,1).
    pub along: f64,
    /// Offset from the segment, in the camera image plane (meters).
    pub offset: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, Copy)]
pub struct OrbitRange {
    pub azimuth: (f64, f64),
    pub elevation: (f64, f64),
    pub radius: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub object_kind: ObjectKind,
    pub texture_seed: u64,
    /// Box extents in meters, each in [0.5, 6].
    pub scale: [f64; 3],
    pub occluders: Vec<Occluder>,
    pub camera_orbit: OrbitRange,
    /// Brightness in [0.3, 1.0]; the day/night label derives from it.
    pub lighting: f64,
}

impl SceneSpec {
    pub fn class_label(&self) -> usize {
        self.object_kind.class()
    }

    pub fn time_of_day(&self) -> TimeOfDay {
        if self.lighting >= DAY_THRESHOLD {
            TimeOfDay::Day
        } else {
            TimeOfDay::Night
        }
    }

    /// Radius of the bounding sphere of the object box.
    pub fn circumradius(&self) -> f64 {
        0.5 * norm3(self.scale)
    }
}

struct Hit {
    t: f64,
    normal: Vec3,
    /// Object-local coordinates in [0,1]^3 (for texturing).
    local: Vec3,
}

fn ray_box(o: Vec3, d: Vec3, center: Vec3, half: Vec3) -> Option<Hit> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    let mut axis = 0usize;
    let mut sign = 1.0;
    for i in 0..3 {
        let lo = center[i] - half[i];
        let hi = center[i] + half[i];
        if d[i].abs() < 1e-12 {
            if o[i] < lo || o[i] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[i];
        let (mut t0, mut t1) = ((lo - o[i]) * inv, (hi - o[i]) * inv);
        let mut s = -1.0;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            s = 1.0;
        }
        if t0 > tmin {
            tmin = t0;
            axis = i;
            sign = s;
        }
        tmax = tmax.min(t1);
        if tmin > tmax {
            return None;
        }
    }
    if tmin <= 1e-9 {
        return None; // inside or behind
    }
    let p = add3(o, scale3(d, tmin));
    let mut normal = [0.0; 3];
    normal[axis] = sign;
    let local = [
        (p[0] - center[0] + half[0]) / (2.0 * half[0]),
        (p[1] - center[1] + half[1]) / (2.0 * half[1]),
        (p[2] - center[2] + half[2]) / (2.0 * half[2]),
    ];
    Some(Hit { t: tmin, normal, local })
}

fn ray_ellipsoid(o: Vec3, d: Vec3, radii: Vec3) -> Option<Hit> {
    let os = [o[0] / radii[0], o[1] / radii[1], o[2] / radii[2]];
    let ds = [d[0] / radii[0], d[1] / radii[1], d[2] / radii[2]];
    let a = dot3(ds, ds);
    let b = 2.0 * dot3(os, ds);
    let c = dot3(os, os) - 1.0;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    if t <= 1e-9 {
        return None;
    }
    let p = add3(o, scale3(d, t));
    let normal = normalize3([
        p[0] / (radii[0] * radii[0]),
        p[1] / (radii[1] * radii[1]),
        p[2] / (radii[2] * radii[2]),
    ]);
    let local = [
        p[0] / (2.0 * radii[0]) + 0.5,
        p[1] / (2.0 * radii[1]) + 0.5,
        p[2] / (2.0 * radii[2]) + 0.5,
    ];
    Some(Hit { t, normal, local })
}

fn ray_sphere(o: Vec3, d: Vec3, center: Vec3, r: f64) -> Option<f64> {
    let oc = sub3(o, center);
    let b = 2.0 * dot3(oc, d);
    let c = dot3(oc, oc) - r * r;
    let disc = b * b - 4.0 * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / 2.0;
    if t <= 1e-9 {
        None
    } else {
        Some(t)
    }
}

fn ray_capsule(o: Vec3, d: Vec3, half_height: f64, r: f64, scale: Vec3) -> Option<Hit> {
    // Vertical capsule: cylinder part for |z| <= c, sphere caps at z = +/-c.
    let c = (half_height - r).max(0.0);
    let mut best: Option<f64> = None;
    // Infinite cylinder x^2 + y^2 = r^2.
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 1e-14 {
        let b = 2.0 * (o[0] * d[0] + o[1] * d[1]);
        let cc = o[0] * o[0] + o[1] * o[1] - r * r;
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / (2.0 * a);
            if t > 1e-9 {
                let z = o[2] + t * d[2];
                if z.abs() <= c {
                    best = Some(t);
                }
            }
        }
    }
    for zc in [-c, c] {
        if let Some(t) = ray_sphere(o, d, [0.0, 0.0, zc], r) {
            let z = o[2] + t * d[2];
            if (zc > 0.0 && z >= c) || (zc < 0.0 && z <= -c) {
                best = Some(best.map_or(t, |b: f64| b.min(t)));
            }
        }
    }
    let t = best?;
    let p = add3(o, scale3(d, t));
    let normal = if p[2].abs() <= c + 1e-12 {
        normalize3([p[0], p[1], 0.0])
    } else {
        let zc = if p[2] > 0.0 { c } else { -c };
        normalize3(sub3(p, [0.0, 0.0, zc]))
    };
    let local = [
        p[0] / scale[0] + 0.5,
        p[1] / scale[1] + 0.5,
        p[2] / scale[2] + 0.5,
    ];
    Some(Hit { t, normal, local })
}

fn object_hit(spec: &SceneSpec, o: Vec3, d: Vec3) -> Option<Hit> {
    let half = scale3(spec.scale, 0.5);
    match spec.object_kind {
        ObjectKind::Box => ray_box(o, d, [0.0; 3], half),
        ObjectKind::Ellipsoid => ray_ellipsoid(o, d, half),
        ObjectKind::Capsule => {
            let r = 0.5 * spec.scale[0].min(spec.scale[1]);
            ray_capsule(o, d, half[2], r, spec.scale)
        }
        ObjectKind::Truck => {
            // Body: full footprint, lower 55% of the height. Cab: rear 45%
            // of the length, full height.
            let body_half = [half[0], half[1], half[2] * 0.55];
            let body_center = [0.0, 0.0, -half[2] * 0.45];
            let cab_half = [half[0] * 0.45, half[1], half[2]];
            let cab_center = [-half[0] * 0.55, 0.0, 0.0];
            let a = ray_box(o, d, body_center, body_half);
            let b = ray_box(o, d, cab_center, cab_half);
            match (a, b) {
                (Some(x), Some(y)) => Some(if x.t <= y.t { x } else { y }),
                (x, None) => x,
                (None, y) => y,
            }
        }
    }
}

fn hash64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

fn unit(seed: u64, idx: u64) -> f64 {
    (hash64(seed.wrapping_add(idx.wrapping_mul(0x9e37_79b9_7f4a_7c15))) >> 11) as f64
        / (1u64 << 53) as f64
}

/// Seeded procedural albedo from object-local coordinates.
fn albedo(seed: u64, local: Vec3) -> [f64; 3] {
    let base = [
        0.15 + 0.7 * unit(seed, 1),
        0.15 + 0.7 * unit(seed, 2),
        0.15 + 0.7 * unit(seed, 3),
    ];
    let accent = [
        0.15 + 0.7 * unit(seed, 4),
        0.15 + 0.7 * unit(seed, 5),
        0.15 + 0.7 * unit(seed, 6),
    ];
    let freq = (2.0 + 5.0 * unit(seed, 7)).floor();
    let cell = (local[0] * freq).floor() + (local[1] * freq).floor() + (local[2] * freq).floor();
    if (cell as i64).rem_euclid(2) == 0 {
        base
    } else {
        accent
    }
}

fn shade(alb: [f64; 3], normal: Vec3, lighting: f64) -> [f64; 3] {
    let diffuse = dot3(normal, LIGHT_DIR).max(0.0);
    let k = lighting * (AMBIENT + (1.0 - AMBIENT) * diffuse);
    [
        (alb[0] * k).clamp(0.0, 1.0),
        (alb[1] * k).clamp(0.0, 1.0),
        (alb[2] * k).clamp(0.0, 1.0),
    ]
}

fn sky_color(lighting: f64, dir: Vec3) -> [f64; 3] {
    let t = 0.5 * (dir[2] + 1.0);
    [
        (lighting * (0.45 + 0.15 * t)).clamp(0.0, 1.0),
        (lighting * (0.60 + 0.15 * t)).clamp(0.0, 1.0),
        (lighting * (0.85 + 0.10 * t)).clamp(0.0, 1.0),
    ]
}

fn ground_color(lighting: f64, p: Vec3) -> [f64; 3] {
    let checker = ((p[0].floor() + p[1].floor()) as i64).rem_euclid(2) == 0;
    let g = if checker { 0.40 } else { 0.32 };
    [
        (lighting * g).clamp(0.0, 1.0),
        (lighting * (g - 0.03)).clamp(0.0, 1.0),
        (lighting * (g - 0.06)).clamp(0.0, 1.0),
    ]
}

/// Position of an occluder in world coordinates for a given camera.
fn occluder_center(occ: &Occluder, cam: &Camera) -> Vec3 {
    let toward = scale3(cam.position, 1.0 - occ.along); // lerp camera->origin
    let axis = normalize3(scale3(cam.position, -1.0));
    let side = normalize3(cross3(axis, [0.0, 0.0, 1.0]));
    let up = cross3(side, axis);
    add3(add3(toward, scale3(side, occ.offset[0])), scale3(up, occ.offset[1]))
}

fn occluder_hit(occ: &Occluder, cam: &Camera, o: Vec3, d: Vec3) -> Option<f64> {
    let center = occluder_center(occ, cam);
    match occ.shape {
        OccluderShape::Sphere => ray_sphere(o, d, center, occ.radius),
        OccluderShape::Disk => {
            let n = normalize3(cam.position); // faces the camera
            let denom = dot3(d, n);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = dot3(sub3(center, o), n) / denom;
            if t <= 1e-9 {
                return None;
            }
            let p = add3(o, scale3(d, t));
            if norm3(sub3(p, center)) <= occ.radius {
                Some(t)
            } else {
                None
            }
        }
    }
}

/// Deterministic semantic feature of an object surface point: a small
/// sin/cos basis over local coordinates plus the normal, instance-invariant
/// by construction.
fn semantic_feature(local: Vec3, normal: Vec3, channels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(channels);
    let basis = [
        local[0],
        local[1],
        local[2],
        0.5 * (normal[2] + 1.0),
        0.5 * ((std::f64::consts::TAU * local[0]).sin() + 1.0),
        0.5 * ((std::f64::consts::TAU * local[1]).sin() + 1.0),
        0.5 * ((std::f64::consts::TAU * local[2]).cos() + 1.0),
        0.5 * (normal[0] + 1.0),
    ];
    for i in 0..channels {
        out.push(basis[i % basis.len()]);
    }
    out
}

pub struct RenderedSample {
    pub sample: ObjectSample,
    pub occluder_mask: Mask,
    /// Object silhouette ignoring occluders.
    pub full_silhouette: Mask,
}

/// Analytic rasterization of one view. Bit-deterministic in all inputs.
/// `d_sem = 0` skips the semantic map; `with_depth` controls the depth map.
pub fn render_sample(
    spec: &SceneSpec,
    cam: &Camera,
    id: &str,
    d_sem: usize,
    with_depth: bool,
) -> Result<RenderedSample> {
    if norm3(cam.position) < 1e-9 {
        return Err(Error::Render("degenerate camera at the origin".into()));
    }
    if spec.scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::Render(format!("non-positive scale {:?}", spec.scale)));
    }
    let (h, w) = (cam.height, cam.width);
    let mut image = RgbImage::new(h, w);
    let mut object_mask = Mask::new(h, w);
    let mut skyroad_mask = Mask::new(h, w);
    let mut occluder_mask = Mask::new(h, w);
    let mut full_silhouette = Mask::new(h, w);
    let mut depth = DepthMap::invalid(h, w);
    let mut semantic = if d_sem > 0 {
        Some(FeatureMap { h, w, channels: d_sem, data: vec![0.0; h * w * d_sem] })
    } else {
        None
    };
    let ground_z = -spec.scale[2] * 0.5;
    for py in 0..h {
        for px in 0..w {
            let d = cam.ray_dir(px, py);
            let o = cam.position;
            let obj = object_hit(spec, o, d);
            if obj.is_some() {
                full_silhouette.set(py, px, true);
            }
            let t_occ = spec
                .occluders
                .iter()
                .filter_map(|occ| occluder_hit(occ, cam, o, d))
                .fold(f64::INFINITY, f64::min);
            let t_ground = if d[2] < -1e-12 {
                let t = (ground_z - o[2]) / d[2];
                if t > 1e-9 {
                    t
                } else {
                    f64::INFINITY
                }
            } else {
                f64::INFINITY
            };
            let t_obj = obj.as_ref().map_or(f64::INFINITY, |hit| hit.t);
            let first = t_obj.min(t_occ).min(t_ground);
            if first.is_infinite() {
                // Sky.
                skyroad_mask.set(py, px, true);
                image.set(py, px, sky_color(spec.lighting, d));
            } else if first == t_occ {
                occluder_mask.set(py, px, true);
                image.set(py, px, OCCLUDER_ALBEDO);
            } else if first == t_obj {
                let hit = obj.unwrap();
                object_mask.set(py, px, true);
                image.set(
                    py,
                    px,
                    shade(albedo(spec.texture_seed, hit.local), hit.normal, spec.lighting),
                );
                if with_depth {
                    depth.values[py * w + px] = hit.t;
                    depth.valid[py * w + px] = true;
                }
                if let Some(sem) = &mut semantic {
                    let f = semantic_feature(hit.local, hit.normal, d_sem);
                    let base = (py * w + px) * d_sem;
                    sem.data[base..base + d_sem].copy_from_slice(&f);
                }
            } else {
                // Ground plane.
                skyroad_mask.set(py, px, true);
                let p = add3(o, scale3(d, t_ground));
                image.set(py, px, ground_color(spec.lighting, p));
            }
        }
    }
    let visible = object_mask.count();
    let full = full_silhouette.count().max(1);
    let sample = ObjectSample {
        id: id.to_string(),
        image,
        object_mask,
        skyroad_mask,
        camera: cam.clone(),
        scale: spec.scale,
        depth: if with_depth { Some(depth) } else { None },
        semantic,
        class_label: spec.class_label(),
        time_of_day: spec.time_of_day(),
        visibility: visible as f64 / full as f64,
    };
    Ok(RenderedSample { sample, occluder_mask, full_silhouette })
}

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub resolution: usize,
    pub d_sem: usize,
    pub with_depth: bool,
    /// Probability that a sample receives one occluder.
    pub occlusion_prob: f64,
    /// Samples are re-drawn until at least this fraction of the silhouette
    /// stays visible (spec floor of 0.10 always applies).
    pub min_visibility: f64,
    pub class_mix: [f64; 4],
}

impl GenOptions {
    pub fn new(resolution: usize) -> GenOptions {
        GenOptions {
            resolution,
            d_sem: 0,
            with_depth: true,
            occlusion_prob: 0.3,
            min_visibility: 0.5,
            class_mix: CLASS_MIX,
        }
    }
}

fn draw_class(rng: &mut Rng, mix: &[f64; 4]) -> usize {
    let total: f64 = mix.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, &p) in mix.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    3
}

fn draw_scale(rng: &mut Rng, kind: ObjectKind) -> [f64; 3] {
    let r = |rng: &mut Rng, lo: f64, hi: f64| rng.gen_range(lo..hi);
    match kind {
        ObjectKind::Box => [r(rng, 3.5, 5.0), r(rng, 1.6, 2.1), r(rng, 1.2, 1.8)],
        ObjectKind::Capsule => {
            let d = r(rng, 0.5, 0.8);
            [d, d, r(rng, 1.5, 1.9)]
        }
        ObjectKind::Truck => [r(rng, 4.5, 6.0), r(rng, 1.9, 2.5), r(rng, 2.2, 3.2)],
        ObjectKind::Ellipsoid => [r(rng, 1.0, 4.0), r(rng, 1.0, 3.0), r(rng, 0.8, 2.5)],
    }
}

/// Draws one scene spec and camera; retries occluder placement until the
/// visibility floor holds.
pub fn draw_sample(seed: u64, index: u64, opts: &GenOptions) -> Result<RenderedSample> {
    let mut rng = stream(seed, "synthetic", index);
    let kind = ObjectKind::from_class(draw_class(&mut rng, &opts.class_mix));
    let scale = draw_scale(&mut rng, kind);
    let lighting = rng.gen_range(0.3..1.0);
    let texture_seed = rng.gen::<u64>();
    let orbit = OrbitRange {
        azimuth: (0.0, std::f64::consts::TAU),
        elevation: (0.15, 0.7),
        radius: (2.2, 3.0),
    };
    let mut spec = SceneSpec {
        object_kind: kind,
        texture_seed,
        scale,
        occluders: Vec::new(),
        camera_orbit: orbit,
        lighting,
    };
    let circum = spec.circumradius();
    let az = rng.gen_range(orbit.azimuth.0..orbit.azimuth.1);
    let el = rng.gen_range(orbit.elevation.0..orbit.elevation.1);
    let radius = circum * rng.gen_range(orbit.radius.0..orbit.radius.1);
    let cam = Camera::orbit(az, el, radius, opts.resolution, circum, 0.7);

    let want_occluder = rng.gen::<f64>() < opts.occlusion_prob;
    let floor = opts.min_visibility.max(0.10);
    let id = format!("{index:06}");
    if !want_occluder {
        return render_sample(&spec, &cam, &id, opts.d_sem, opts.with_depth);
    }
    for _attempt in 0..20 {
        let shape = if rng.gen::<f64>() < 0.5 {
            OccluderShape::Disk
        } else {
            OccluderShape::Sphere
        };
        let occ = Occluder {
            shape,
            along: rng.gen_range(0.35..0.7),
            offset: [
                rng.gen_range(-0.4..0.4) * circum,
                rng.gen_range(-0.3..0.3) * circum,
            ],
            radius: rng.gen_range(0.15..0.45) * circum,
        };
        spec.occluders = vec![occ];
        let rendered = render_sample(&spec, &cam, &id, opts.d_sem, opts.with_depth)?;
        if rendered.sample.visibility >= floor && rendered.occluder_mask.count() > 0 {
            return render_sample(&spec, &cam, &id, opts.d_sem, opts.with_depth);
        }
    }
    // Could not place a compliant occluder; emit unoccluded.
    spec.occluders.clear();
    render_sample(&spec, &cam, &id, opts.d_sem, opts.with_depth)
}

/// Renders `n` samples and writes a dataset directory.
pub fn generate_dataset(n: usize, seed: u64, opts: &GenOptions, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(Error::Dataset("generate_dataset needs n >= 1".into()));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        samples.push(draw_sample(seed, i as u64, opts)?.sample);
    }
    let metadata = ManifestMetadata {
        image_resolution: opts.resolution,
        d_sem: opts.d_sem,
        seed,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    save_dataset(out, &samples, metadata)
}
