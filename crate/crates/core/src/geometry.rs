//! Plücker-plus-depth ray bundles.
//!
//! A [`Ray`] is the 7-vector `(v, m, d)`: unit direction `v`, moment
//! `m = p × v` for any point `p` on the line, and a signed depth `d` measured
//! along `v` from the line's closest point to the origin (`v × m`). The ray's
//! endpoint `v × m + d·v` is where it meets the surface.
//!
//! Cameras are pinhole with known intrinsics, a camera-to-world rotation and an
//! explicit center. Pixel `(u, w)` unprojects to the camera-frame direction
//! `normalize(((u - cx)/fx, (w - cy)/fy, 1))`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Pixel = Vector2<f64>;

/// Number of scalars in one flattened ray.
pub const RAY_DIM: usize = 7;

/// Minimum number of rays [`recover_camera`] accepts.
pub const MIN_BUNDLE_RAYS: usize = 6;

/// Relative singular-value floor below which a recovery system is rank deficient.
const RANK_TOL: f64 = 1e-8;

/// Rays already canonical to round-off are returned unchanged, which makes
/// [`canonicalize`] a bit-exact fixpoint.
const FIXPOINT_TOL: f64 = 1e-14;

/// Tolerance used when validating rotations and canonical rays.
pub const GEOMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub v: Vec3,
    pub m: Vec3,
    pub d: f64,
}

impl Ray {
    /// Closest point of the line to the origin.
    pub fn base_point(&self) -> Vec3 {
        self.v.cross(&self.m)
    }

    pub fn endpoint(&self) -> Vec3 {
        ray_endpoint(self)
    }

    pub fn to_array(&self) -> [f64; RAY_DIM] {
        [
            self.v.x, self.v.y, self.v.z, self.m.x, self.m.y, self.m.z, self.d,
        ]
    }

    /// True when `‖v‖ = 1` and `v·m = 0` within `tol`.
    pub fn is_canonical(&self, tol: f64) -> bool {
        (self.v.norm() - 1.0).abs() <= tol && self.v.dot(&self.m).abs() <= tol
    }
}

/// Unconstrained 7-vector, e.g. a row of a diffusion state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRay {
    pub coeffs: [f64; RAY_DIM],
}

impl From<[f64; RAY_DIM]> for RawRay {
    fn from(coeffs: [f64; RAY_DIM]) -> Self {
        RawRay { coeffs }
    }
}

impl From<Ray> for RawRay {
    fn from(ray: Ray) -> Self {
        RawRay {
            coeffs: ray.to_array(),
        }
    }
}

/// `v × m + d·v`.
pub fn ray_endpoint(ray: &Ray) -> Vec3 {
    ray.base_point() + ray.v * ray.d
}

/// Projects an arbitrary 7-vector onto a valid Plücker ray.
///
/// The direction is normalized, the moment is divided by the same norm and its
/// component along the direction removed. Depth passes through unchanged.
pub fn canonicalize(raw: &RawRay) -> Result<Ray> {
    let c = &raw.coeffs;
    let v_raw = Vec3::new(c[0], c[1], c[2]);
    let m_raw = Vec3::new(c[3], c[4], c[5]);
    let norm = v_raw.norm();
    if !(norm > 1e-8) {
        return Err(Error::DegenerateRay { norm });
    }
    if (v_raw.norm_squared() - 1.0).abs() <= FIXPOINT_TOL
        && v_raw.dot(&m_raw).abs() <= FIXPOINT_TOL * m_raw.norm().max(1.0)
    {
        return Ok(Ray { v: v_raw, m: m_raw, d: c[6] });
    }
    let v = v_raw / norm;
    let m = (m_raw - v * m_raw.dot(&v)) / norm;
    Ok(Ray { v, m, d: c[6] })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Intrinsics {
    /// Square image with focal length equal to its side and a centered principal point.
    pub fn square(size: f64) -> Self {
        Intrinsics {
            fx: size,
            fy: size,
            cx: size / 2.0,
            cy: size / 2.0,
            width: size,
            height: size,
        }
    }

    pub fn contains(&self, pixel: &Pixel) -> bool {
        pixel.x.is_finite()
            && pixel.y.is_finite()
            && (0.0..=self.width).contains(&pixel.x)
            && (0.0..=self.height).contains(&pixel.y)
    }

    /// Unit camera-frame direction through `pixel`.
    pub fn unproject(&self, pixel: &Pixel) -> Vec3 {
        Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
        .normalize()
    }

    /// `g × g` pixel centers in row-major order.
    pub fn pixel_grid(&self, g: usize) -> Vec<Pixel> {
        let mut out = Vec::with_capacity(g * g);
        for row in 0..g {
            for col in 0..g {
                out.push(Pixel::new(
                    (col as f64 + 0.5) * self.width / g as f64,
                    (row as f64 + 0.5) * self.height / g as f64,
                ));
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InputDomain(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::InputDomain("image size must be positive".into()));
        }
        Ok(())
    }
}

/// Pinhole camera: intrinsics, camera-to-world rotation and center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub rotation: Mat3,
    pub center: Vec3,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Mat3, center: Vec3) -> Result<Self> {
        intrinsics.validate()?;
        let orth = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det = rotation.determinant();
        if !(orth <= GEOMETRY_TOL && (det - 1.0).abs() <= GEOMETRY_TOL) {
            return Err(Error::InputDomain(format!(
                "rotation is not in SO(3) (|RᵀR - I| = {orth:e}, det = {det})"
            )));
        }
        if !center.iter().all(|c| c.is_finite()) {
            return Err(Error::InputDomain("camera center is not finite".into()));
        }
        Ok(Camera {
            intrinsics,
            rotation,
            center,
        })
    }

    /// Camera at `center` whose optical axis points at `target`.
    ///
    /// The camera y axis points "down", i.e. against the projection of `up`.
    pub fn look_at(intrinsics: Intrinsics, center: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let z = (target - center)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InputDomain("camera center coincides with target".into()))?;
        let down = -(up - z * up.dot(&z));
        let y = down
            .try_normalize(1e-9)
            .ok_or_else(|| Error::InputDomain("up vector is parallel to the view axis".into()))?;
        let x = y.cross(&z);
        let rotation = Mat3::from_columns(&[x, y, z]);
        Camera::new(intrinsics, rotation, center)
    }

    /// World-to-camera extrinsics `[Rᵀ | -Rᵀc]`.
    pub fn world_to_camera(&self) -> (Mat3, Vec3) {
        let rt = self.rotation.transpose();
        (rt, -(rt * self.center))
    }

    /// World-frame unit direction through `pixel`.
    pub fn ray_direction(&self, pixel: &Pixel) -> Vec3 {
        self.rotation * self.intrinsics.unproject(pixel)
    }
}

/// The rays of one image, aligned with the pixels they pass through.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBundle {
    pub rays: Vec<Ray>,
    pub pixels: Vec<Pixel>,
    pub image_index: usize,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn endpoints(&self) -> Vec<Vec3> {
        self.rays.iter().map(ray_endpoint).collect()
    }
}

/// Builds the ray bundle of `camera` through `pixels`.
///
/// With `ranges` (distances from the camera center along each ray) the stored
/// depth is `t + c·v`, so the endpoint equals `c + t·v`. Without ranges the
/// depth is zero and the endpoint is the line's closest point to the origin.
pub fn camera_to_ray_bundle(
    camera: &Camera,
    pixels: &[Pixel],
    ranges: Option<&[f64]>,
    image_index: usize,
) -> Result<RayBundle> {
    if let Some(r) = ranges {
        if r.len() != pixels.len() {
            return Err(Error::InputDomain(format!(
                "{} ranges supplied for {} pixels",
                r.len(),
                pixels.len()
            )));
        }
    }
    let mut rays = Vec::with_capacity(pixels.len());
    for (k, px) in pixels.iter().enumerate() {
        if !camera.intrinsics.contains(px) {
            return Err(Error::InputDomain(format!(
                "pixel ({}, {}) lies outside the {}x{} image",
                px.x, px.y, camera.intrinsics.width, camera.intrinsics.height
            )));
        }
        let v = camera.ray_direction(px);
        let m = camera.center.cross(&v);
        let d = match ranges {
            Some(r) => {
                let t = r[k];
                if !(t.is_finite() && t > 0.0) {
                    return Err(Error::InputDomain(format!(
                        "range {t} for pixel {k} must be finite and positive"
                    )));
                }
                t + camera.center.dot(&v)
            }
            None => 0.0,
        };
        rays.push(Ray { v, m, d });
    }
    Ok(RayBundle {
        rays,
        pixels: pixels.to_vec(),
        image_index,
    })
}

/// Recovers the camera that produced `bundle`, given its intrinsics.
///
/// The center is the least-squares intersection of all rays; the rotation is
/// the orthogonal Procrustes fit of unprojected pixel directions onto the ray
/// directions.
pub fn recover_camera(bundle: &RayBundle, intrinsics: &Intrinsics) -> Result<Camera> {
    if bundle.rays.len() != bundle.pixels.len() {
        return Err(Error::shape(
            format!("{} pixels", bundle.rays.len()),
            format!("{} pixels", bundle.pixels.len()),
        ));
    }
    if bundle.rays.len() < MIN_BUNDLE_RAYS {
        return Err(Error::DegenerateBundle(format!(
            "{} rays, at least {MIN_BUNDLE_RAYS} required",
            bundle.rays.len()
        )));
    }

    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    let mut h = Mat3::zeros();
    for (ray, px) in bundle.rays.iter().zip(&bundle.pixels) {
        let proj = Mat3::identity() - ray.v * ray.v.transpose();
        a += proj;
        b += proj * ray.base_point();
        h += intrinsics.unproject(px) * ray.v.transpose();
    }

    let svd_a = a.svd(true, true);
    let (s_max, s_min) = (svd_a.singular_values.max(), svd_a.singular_values.min());
    if !(s_min > RANK_TOL * s_max) {
        return Err(Error::DegenerateBundle(format!(
            "rays are (nearly) parallel: singular values of the intersection system {:?}",
            svd_a.singular_values.as_slice()
        )));
    }
    let center = svd_a
        .solve(&b, 0.0)
        .map_err(|e| Error::DegenerateBundle(e.to_string()))?;

    let rotation = procrustes_rotation(&h)?;
    Camera::new(*intrinsics, rotation, center)
}

/// Rotation `R` maximizing `tr(R H)` for a correlation `H = Σ a bᵀ`, i.e. the best
/// map of the `a` vectors onto the `b` vectors.
pub(crate) fn procrustes_rotation(h: &Mat3) -> Result<Mat3> {
    let svd = h.svd(true, true);
    let mut s = svd.singular_values.as_slice().to_vec();
    s.sort_by(|x, y| y.total_cmp(x));
    if !(s[1] > RANK_TOL * s[0]) {
        return Err(Error::DegenerateBundle(format!(
            "direction correlation has rank < 2 (singular values {s:?})"
        )));
    }
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested Vᵀ").transpose();
    let det = (v * u.transpose()).determinant();
    let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, det.signum()));
    let r = v * fix * u.transpose();
    Ok(orthonormalize(&r))
}

/// Removes floating-point drift from a near-rotation.
fn orthonormalize(r: &Mat3) -> Mat3 {
    let x = r.column(0).normalize();
    let y = (r.column(1) - x * x.dot(&r.column(1))).normalize();
    let z = x.cross(&y);
    Mat3::from_columns(&[x, y, z])
}

/// Geodesic angle between two rotations in degrees.
pub fn rotation_angle_deg(a: &Mat3, b: &Mat3) -> f64 {
    let r = a * b.transpose();
    let cos = (r.trace() - 1.0) / 2.0;
    let sin = Vec3::new(r.m32 - r.m23, r.m13 - r.m31, r.m21 - r.m12).norm() / 2.0;
    sin.atan2(cos).to_degrees()
}

/// Row-major `M × 7` layout: row `k` is `(v_k, m_k, d_k)`.
pub fn bundle_to_flat(bundle: &RayBundle) -> Vec<[f64; RAY_DIM]> {
    bundle.rays.iter().map(Ray::to_array).collect()
}

/// Inverse of [`bundle_to_flat`]; every row is canonicalized.
pub fn flat_to_bundle(
    rows: &[[f64; RAY_DIM]],
    pixels: &[Pixel],
    image_index: usize,
) -> Result<RayBundle> {
    if rows.len() != pixels.len() {
        return Err(Error::shape(
            format!("{}x{RAY_DIM}", pixels.len()),
            format!("{}x{RAY_DIM}", rows.len()),
        ));
    }
    let rays = rows
        .iter()
        .map(|r| canonicalize(&RawRay::from(*r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RayBundle {
        rays,
        pixels: pixels.to_vec(),
        image_index,
    })
}
