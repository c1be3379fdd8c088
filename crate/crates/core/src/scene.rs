//! Synthetic scenes: analytic SDF shapes inside the unit ball, sparse camera
//! rigs looking at the origin, sphere-traced ground-truth depths and
//! deterministic per-ray features.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    camera_to_ray_bundle, ray_endpoint, Camera, Intrinsics, Pixel, RayBundle, Vec3,
};

/// Per-ray feature width.
pub const FEATURE_DIM: usize = 16;

pub type Feature = [f64; FEATURE_DIM];

/// Maximum sphere-tracing iterations.
pub const TRACE_MAX_STEPS: usize = 512;

/// Hit tolerance used when generating ground-truth depths.
pub const TRACE_TOL: f64 = 1e-8;

/// Endpoint-on-surface tolerance enforced on every stored ray.
pub const SURFACE_TOL: f64 = 1e-5;

/// Side of the square image, in pixels.
pub const IMAGE_SIZE: f64 = 32.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    #[serde(rename = "box")]
    Cuboid {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Ring of radius `major` around `axis`, tube radius `minor`.
    Torus {
        center: [f64; 3],
        axis: [f64; 3],
        major: f64,
        minor: f64,
    },
    Union {
        a: Box<Shape>,
        b: Box<Shape>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Box,
    Torus,
    Union,
}

impl Shape {
    pub fn unit_sphere() -> Self {
        Shape::Sphere {
            center: [0.0; 3],
            radius: 1.0,
        }
    }

    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Sphere { .. } => ShapeKind::Sphere,
            Shape::Cuboid { .. } => ShapeKind::Box,
            Shape::Torus { .. } => ShapeKind::Torus,
            Shape::Union { .. } => ShapeKind::Union,
        }
    }

    /// Radius of a ball around the origin containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { center, radius } => Vec3::from(*center).norm() + radius,
            Shape::Cuboid {
                center,
                half_extents,
            } => Vec3::from(*center).norm() + Vec3::from(*half_extents).norm(),
            Shape::Torus {
                center,
                major,
                minor,
                ..
            } => Vec3::from(*center).norm() + major + minor,
            Shape::Union { a, b } => a.bounding_radius().max(b.bounding_radius()),
        }
    }

    /// Draws a random shape of `kind` that fits inside the ball of radius 0.95.
    pub fn random(kind: ShapeKind, rng: &mut impl Rng) -> Self {
        match kind {
            ShapeKind::Sphere => Shape::Sphere {
                center: random_in_ball(rng, 0.1).into(),
                radius: rng.random_range(0.5..0.8),
            },
            ShapeKind::Box => Shape::Cuboid {
                center: random_in_ball(rng, 0.05).into(),
                half_extents: [
                    rng.random_range(0.25..0.5),
                    rng.random_range(0.25..0.5),
                    rng.random_range(0.25..0.5),
                ],
            },
            ShapeKind::Torus => Shape::Torus {
                center: random_in_ball(rng, 0.05).into(),
                axis: random_unit(rng).into(),
                major: rng.random_range(0.45..0.6),
                minor: rng.random_range(0.15..0.25),
            },
            ShapeKind::Union => {
                let dir = random_unit(rng);
                let ball_offset = rng.random_range(0.3..0.45);
                let sphere = Shape::Sphere {
                    center: (dir * ball_offset).into(),
                    radius: rng.random_range(0.3..0.45),
                };
                let cuboid = Shape::Cuboid {
                    center: (-dir * rng.random_range(0.1..0.2)).into(),
                    half_extents: [
                        rng.random_range(0.2..0.35),
                        rng.random_range(0.2..0.35),
                        rng.random_range(0.2..0.35),
                    ],
                };
                Shape::Union {
                    a: Box::new(sphere),
                    b: Box::new(cuboid),
                }
            }
        }
    }
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if let Some(u) = v.try_normalize(1e-9) {
            return u;
        }
    }
}

fn random_in_ball(rng: &mut impl Rng, radius: f64) -> Vec3 {
    random_unit(rng) * radius * rng.random::<f64>().cbrt()
}

/// Exact signed distance (negative inside); unions take the minimum.
pub fn analytic_sdf(shape: &Shape, x: &Vec3) -> f64 {
    match shape {
        Shape::Sphere { center, radius } => (x - Vec3::from(*center)).norm() - radius,
        Shape::Cuboid {
            center,
            half_extents,
        } => {
            let q = (x - Vec3::from(*center)).abs() - Vec3::from(*half_extents);
            let outside = q.map(|c| c.max(0.0)).norm();
            let inside = q.max().min(0.0);
            outside + inside
        }
        Shape::Torus {
            center,
            axis,
            major,
            minor,
        } => {
            let a = Vec3::from(*axis).normalize();
            let p = x - Vec3::from(*center);
            let h = p.dot(&a);
            let radial = (p - a * h).norm();
            ((radial - major).powi(2) + h * h).sqrt() - minor
        }
        Shape::Union { a, b } => analytic_sdf(a, x).min(analytic_sdf(b, x)),
    }
}

/// Unit outward normal from central differences of the analytic field.
pub fn analytic_normal(shape: &Shape, x: &Vec3) -> Vec3 {
    let h = 1e-6;
    let mut g = Vec3::zeros();
    for i in 0..3 {
        let mut e = Vec3::zeros();
        e[i] = h;
        g[i] = (analytic_sdf(shape, &(x + e)) - analytic_sdf(shape, &(x - e))) / (2.0 * h);
    }
    g.try_normalize(1e-12).unwrap_or_else(Vec3::zeros)
}

/// Marches from `origin` along unit `dir`, stepping by the field value.
///
/// Returns the first range with `|sdf| < tol`, or `None` past `max_t` or after
/// [`TRACE_MAX_STEPS`] steps.
pub fn sphere_trace(shape: &Shape, origin: &Vec3, dir: &Vec3, max_t: f64, tol: f64) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..TRACE_MAX_STEPS {
        let s = analytic_sdf(shape, &(origin + dir * t));
        if s.abs() < tol {
            return Some(t);
        }
        t += s;
        if t > max_t {
            return None;
        }
    }
    None
}

/// Fixed 32×32 unit-focal intrinsics used by every synthetic camera.
pub fn rig_intrinsics() -> Intrinsics {
    Intrinsics::square(IMAGE_SIZE)
}

/// Cameras on a spherical shell looking at the origin.
///
/// Up vectors are jittered by less than 15° around +y and every pair of camera
/// directions is separated by at least 15°.
pub fn sample_camera_rig(
    n_views: usize,
    rng: &mut impl Rng,
    radius_range: (f64, f64),
) -> Result<Vec<Camera>> {
    if !(2..=6).contains(&n_views) {
        return Err(Error::Configuration(format!(
            "n_views = {n_views} is outside [2, 6]"
        )));
    }
    let (r_lo, r_hi) = radius_range;
    if !(r_lo > 1.0 && r_lo <= r_hi) {
        return Err(Error::Configuration(format!(
            "invalid radius range [{r_lo}, {r_hi}]"
        )));
    }
    let min_sep = 15f64.to_radians().cos();
    let max_jitter = 15f64.to_radians();
    'attempt: for _ in 0..1000 {
        let mut cams: Vec<Camera> = Vec::with_capacity(n_views);
        let mut dirs: Vec<Vec3> = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            let dir = random_unit(rng);
            let radius = if r_hi > r_lo {
                rng.random_range(r_lo..=r_hi)
            } else {
                r_lo
            };
            if dirs.iter().any(|d| d.dot(&dir) > min_sep) {
                continue 'attempt;
            }
            let jitter_axis = {
                let a = random_unit(rng);
                (a - Vec3::y() * a.y).try_normalize(1e-9).unwrap_or(Vec3::x())
            };
            let angle = rng.random_range(0.0..max_jitter);
            let up = Rotation3::from_axis_angle(&Unit::new_unchecked(jitter_axis), angle) * Vec3::y();
            // view axis nearly parallel to up leaves the roll undefined
            if dir.dot(&up).abs() > 0.99 {
                continue 'attempt;
            }
            cams.push(Camera::look_at(
                rig_intrinsics(),
                dir * radius,
                Vec3::zeros(),
                up,
            )?);
            dirs.push(dir);
        }
        return Ok(cams);
    }
    Err(Error::Configuration(format!(
        "could not place {n_views} cameras with 15° separation in 1000 tries"
    )))
}

/// Result of tracing one pixel.
#[derive(Debug, Clone, Copy)]
struct Trace {
    pixel: Pixel,
    range: Option<f64>,
    normal_cam: Vec3,
}

fn trace_pixel(shape: &Shape, camera: &Camera, pixel: &Pixel) -> Trace {
    let dir = camera.ray_direction(pixel);
    let range = sphere_trace(shape, &camera.center, &dir, 2.0 * camera.center.norm() + 2.0, TRACE_TOL);
    let normal_cam = match range {
        Some(t) => {
            camera.rotation.transpose() * analytic_normal(shape, &(camera.center + dir * t))
        }
        None => Vec3::zeros(),
    };
    Trace {
        pixel: *pixel,
        range,
        normal_cam,
    }
}

fn feature_from_trace(intr: &Intrinsics, tr: &Trace) -> Feature {
    let px = tr.pixel.x / intr.width * 2.0 - 1.0;
    let py = tr.pixel.y / intr.height * 2.0 - 1.0;
    let mut full = Vec::with_capacity(22);
    full.extend_from_slice(&[px, py]);
    full.extend_from_slice(tr.normal_cam.as_slice());
    full.push(tr.range.map_or(0.0, |t| 1.0 / t));
    for k in 0..4 {
        let f = (1u32 << k) as f64 * PI;
        full.extend_from_slice(&[(f * px).sin(), (f * px).cos(), (f * py).sin(), (f * py).cos()]);
    }
    let mut out = [0.0; FEATURE_DIM];
    let n = full.len().min(FEATURE_DIM);
    out[..n].copy_from_slice(&full[..n]);
    out
}

/// Deterministic per-ray features: normalized pixel coordinates, camera-frame
/// surface normal (zeros on a miss), inverse range (0 on a miss) and a
/// 4-band positional encoding of the pixel, truncated to [`FEATURE_DIM`].
pub fn make_features(shape: &Shape, camera: &Camera, pixels: &[Pixel]) -> Vec<Feature> {
    pixels
        .iter()
        .map(|p| feature_from_trace(&camera.intrinsics, &trace_pixel(shape, camera, p)))
        .collect()
}

/// One synthetic multi-view scene with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub shape: Shape,
    pub cameras: Vec<Camera>,
    pub bundles: Vec<RayBundle>,
    pub features: Vec<Vec<Feature>>,
}

impl Scene {
    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }

    /// Checks ray invariants and that every endpoint lies on the surface.
    pub fn audit(&self) -> Result<()> {
        if self.bundles.len() != self.cameras.len() || self.features.len() != self.cameras.len() {
            return Err(Error::Validation("camera/bundle/feature counts differ".into()));
        }
        for (i, (b, f)) in self.bundles.iter().zip(&self.features).enumerate() {
            if b.rays.len() != b.pixels.len() || b.rays.len() != f.len() {
                return Err(Error::Validation(format!("image {i}: ragged bundle")));
            }
            for (k, ray) in b.rays.iter().enumerate() {
                if !ray.is_canonical(1e-9) {
                    return Err(Error::Validation(format!(
                        "image {i} ray {k} violates the Plücker constraints"
                    )));
                }
                let s = analytic_sdf(&self.shape, &ray_endpoint(ray));
                if !(s.abs() < SURFACE_TOL) {
                    return Err(Error::Validation(format!(
                        "image {i} ray {k}: endpoint is {s:e} off the surface"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Builds one scene. Miss rays are dropped; the pixel grid is refined until
/// `rays_per_image` hits are available, then that many are taken at an even
/// stride through the hits.
pub fn build_scene(
    shape: Shape,
    n_views: usize,
    rays_per_image: usize,
    rng: &mut impl Rng,
) -> Result<Scene> {
    if shape.bounding_radius() > 1.0 {
        return Err(Error::Configuration(format!(
            "shape does not fit in the unit ball (radius {})",
            shape.bounding_radius()
        )));
    }
    let cameras = sample_camera_rig(n_views, rng, (1.8, 2.2))?;
    let mut bundles = Vec::with_capacity(n_views);
    let mut features = Vec::with_capacity(n_views);
    for (i, cam) in cameras.iter().enumerate() {
        let mut g = (rays_per_image as f64).sqrt().ceil() as usize;
        let hits = loop {
            let hits: Vec<Trace> = cam
                .intrinsics
                .pixel_grid(g)
                .iter()
                .map(|p| trace_pixel(&shape, cam, p))
                .filter(|t| t.range.is_some())
                .collect();
            if hits.len() >= rays_per_image {
                break hits;
            }
            g += 1;
            if g > 512 {
                return Err(Error::Configuration(format!(
                    "image {i}: shape covers too few pixels for {rays_per_image} rays"
                )));
            }
        };
        let picked: Vec<Trace> = (0..rays_per_image)
            .map(|k| hits[k * hits.len() / rays_per_image])
            .collect();
        let pixels: Vec<Pixel> = picked.iter().map(|t| t.pixel).collect();
        let ranges: Vec<f64> = picked.iter().map(|t| t.range.unwrap()).collect();
        bundles.push(camera_to_ray_bundle(cam, &pixels, Some(&ranges), i)?);
        features.push(
            picked
                .iter()
                .map(|t| feature_from_trace(&cam.intrinsics, t))
                .collect(),
        );
    }
    let scene = Scene {
        shape,
        cameras,
        bundles,
        features,
    };
    scene.audit()?;
    Ok(scene)
}

/// Dataset generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub min_views: usize,
    pub max_views: usize,
    pub rays_per_image: usize,
    pub shape_mix: Vec<ShapeKind>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 200,
            n_eval: 50,
            min_views: 2,
            max_views: 6,
            rays_per_image: 256,
            shape_mix: vec![ShapeKind::Union, ShapeKind::Box, ShapeKind::Torus],
        }
    }
}

impl DatasetConfig {
    pub fn n_scenes(&self) -> usize {
        self.n_train + self.n_eval
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scenes() == 0 {
            return Err(Error::Configuration("dataset has no scenes".into()));
        }
        if !(2 <= self.min_views && self.min_views <= self.max_views && self.max_views <= 6) {
            return Err(Error::Configuration(format!(
                "view range [{}, {}] must lie in [2, 6]",
                self.min_views, self.max_views
            )));
        }
        if self.rays_per_image < crate::geometry::MIN_BUNDLE_RAYS {
            return Err(Error::Configuration(format!(
                "rays_per_image must be at least {}",
                crate::geometry::MIN_BUNDLE_RAYS
            )));
        }
        if self.shape_mix.is_empty() {
            return Err(Error::Configuration("shape_mix is empty".into()));
        }
        Ok(())
    }
}

/// Seed of scene `index` derived from the dataset seed.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates scene `index` of a dataset; a pure function of `(config, seed, index)`.
pub fn generate_scene(config: &DatasetConfig, seed: u64, index: usize) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, index));
    let kind = config.shape_mix[index % config.shape_mix.len()];
    let shape = Shape::random(kind, &mut rng);
    let n_views = rng.random_range(config.min_views..=config.max_views);
    build_scene(shape, n_views, config.rays_per_image, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;

    fn box_shape() -> Shape {
        Shape::Cuboid {
            center: [0.0; 3],
            half_extents: [0.5; 3],
        }
    }

    #[test]
    fn sdf_examples() {
        let s = Shape::unit_sphere();
        assert_eq!(analytic_sdf(&s, &Vec3::zeros()), -1.0);
        assert_eq!(analytic_sdf(&s, &Vec3::new(0.0, 0.0, 2.0)), 1.0);
        assert_eq!(analytic_sdf(&box_shape(), &Vec3::new(1.0, 0.0, 0.0)), 0.5);
        assert_eq!(analytic_sdf(&box_shape(), &Vec3::zeros()), -0.5);
        let torus = Shape::Torus {
            center: [0.0; 3],
            axis: [0.0, 0.0, 1.0],
            major: 0.5,
            minor: 0.1,
        };
        assert!((analytic_sdf(&torus, &Vec3::new(0.5, 0.0, 0.0)) + 0.1).abs() < 1e-15);
        assert!((analytic_sdf(&torus, &Vec3::new(0.0, 0.0, 0.0)) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn trace_hits_and_misses() {
        let s = Shape::unit_sphere();
        let t = sphere_trace(&s, &Vec3::new(0.0, 0.0, -2.0), &Vec3::z(), 10.0, 1e-9).unwrap();
        assert!((t - 1.0).abs() < 1e-9);
        assert!(sphere_trace(&s, &Vec3::new(0.0, 0.0, -2.0), &Vec3::y(), 10.0, 1e-9).is_none());
    }

    #[test]
    fn trace_matches_closed_form_sphere_and_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape::unit_sphere();
        let b = box_shape();
        for _ in 0..200 {
            let origin = random_unit(&mut rng) * 2.5;
            let target = random_in_ball(&mut rng, 0.4);
            let dir = (target - origin).normalize();
            let tol = 1e-6;
            // sphere: |o + t d| = 1
            let bq = origin.dot(&dir);
            let cq = origin.norm_squared() - 1.0;
            let t_sphere = -bq - (bq * bq - cq).sqrt();
            let t = sphere_trace(&s, &origin, &dir, 10.0, tol).unwrap();
            assert!((t - t_sphere).abs() < 2.0 * tol);
            assert!(((origin + dir * t).norm() - 1.0).abs() < tol);
            // box: slab test
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for i in 0..3 {
                let a = (-0.5 - origin[i]) / dir[i];
                let c = (0.5 - origin[i]) / dir[i];
                t0 = t0.max(a.min(c));
                t1 = t1.min(a.max(c));
            }
            assert!(t0 <= t1);
            let t = sphere_trace(&b, &origin, &dir, 10.0, tol).unwrap();
            // range error is bounded by tol over the incidence cosine
            assert!((t - t0).abs() < 1e-3, "{t} vs {t0}");
            assert!(analytic_sdf(&b, &(origin + dir * t)).abs() < tol);
        }
    }

    #[test]
    fn rig_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cams = sample_camera_rig(2, &mut rng, (1.8, 2.2)).unwrap();
        assert_eq!(cams.len(), 2);
        for c in &cams {
            let r = c.center.norm();
            assert!((1.8..=2.2).contains(&r));
            let rt = c.rotation.transpose() * c.rotation;
            assert!((rt - Mat3::identity()).abs().max() < 1e-9);
            assert!((c.rotation.determinant() - 1.0).abs() < 1e-9);
        }
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cams = sample_camera_rig(6, &mut rng, (1.8, 2.2)).unwrap();
            for i in 0..6 {
                for j in (i + 1)..6 {
                    let cos = cams[i].center.normalize().dot(&cams[j].center.normalize());
                    assert!(cos.acos().to_degrees() >= 15.0);
                }
            }
        }
        let a = sample_camera_rig(4, &mut ChaCha8Rng::seed_from_u64(9), (1.8, 2.2)).unwrap();
        let b = sample_camera_rig(4, &mut ChaCha8Rng::seed_from_u64(9), (1.8, 2.2)).unwrap();
        assert_eq!(a, b);
        assert!(sample_camera_rig(7, &mut rng, (1.8, 2.2)).is_err());
    }

    #[test]
    fn principal_ray_feature_of_sphere() {
        let k = rig_intrinsics();
        let cam = Camera::new(k, Mat3::identity(), Vec3::new(0.0, 0.0, -2.0)).unwrap();
        let f = make_features(&Shape::unit_sphere(), &cam, &[Pixel::new(16.0, 16.0)])[0];
        assert_eq!(&f[0..2], &[0.0, 0.0]);
        assert!((Vec3::new(f[2], f[3], f[4]) - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
        assert!((f[5] - 1.0).abs() < 1e-6);
        let again = make_features(&Shape::unit_sphere(), &cam, &[Pixel::new(16.0, 16.0)])[0];
        assert_eq!(f, again);
    }

    #[test]
    fn miss_ray_feature_has_zero_geometry() {
        let k = rig_intrinsics();
        let cam = Camera::new(k, Mat3::identity(), Vec3::new(0.0, 0.0, -2.0)).unwrap();
        let small = Shape::Sphere {
            center: [0.0; 3],
            radius: 0.2,
        };
        let f = make_features(&small, &cam, &[Pixel::new(1.0, 1.0)])[0];
        assert_eq!(&f[2..6], &[0.0; 4]);
    }

    #[test]
    fn scenes_satisfy_invariants_for_every_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Torus, ShapeKind::Union] {
            for _ in 0..3 {
                let shape = Shape::random(kind, &mut rng);
                assert!(shape.bounding_radius() <= 0.95 + 1e-12);
                let scene = build_scene(shape, 3, 64, &mut rng).unwrap();
                assert_eq!(scene.bundles.len(), 3);
                assert!(scene.bundles.iter().all(|b| b.len() == 64));
                scene.audit().unwrap();
            }
        }
    }

    #[test]
    fn endpoint_equals_center_plus_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scene = build_scene(Shape::unit_sphere(), 2, 32, &mut rng).unwrap();
        for (cam, b) in scene.cameras.iter().zip(&scene.bundles) {
            for ray in &b.rays {
                let t = (ray_endpoint(ray) - cam.center).dot(&ray.v);
                assert!((ray_endpoint(ray) - (cam.center + ray.v * t)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = DatasetConfig {
            n_train: 2,
            n_eval: 0,
            rays_per_image: 32,
            ..Default::default()
        };
        let a = generate_scene(&cfg, 42, 1).unwrap();
        let b = generate_scene(&cfg, 42, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(&cfg, 43, 1).unwrap());
    }
}
