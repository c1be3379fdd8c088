//! Pose and surface evaluation: relative rotation accuracy, similarity-aligned
//! translation accuracy, and Chamfer / Hausdorff / normal consistency / F-score.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{procrustes_rotation, rotation_angle_deg, Camera, Mat3, Vec3};
use crate::mesh::Mesh;

pub const ROTATION_THRESHOLD_DEG: f64 = 15.0;
pub const TRANSLATION_THRESHOLD: f64 = 0.1;
pub const DEFAULT_SURFACE_SAMPLES: usize = 10_000;
pub const F_SCORE_TAU_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub i: usize,
    pub j: usize,
    pub error_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationAccuracy {
    pub fraction: f64,
    pub pairs: Vec<PairError>,
}

fn check_counts(est: usize, gt: usize, min: usize) -> Result<()> {
    if est != gt {
        return Err(Error::shape(format!("{gt} cameras"), format!("{est} cameras")));
    }
    if gt < min {
        return Err(Error::InputDomain(format!("need at least {min} cameras, got {gt}")));
    }
    Ok(())
}

/// Fraction of camera pairs whose relative rotation is within `threshold_deg`.
///
/// Rotations are camera-to-world; relative rotations are formed from the
/// world-to-camera matrices `W = Rᵀ` as `W_j W_iᵀ`, which is unchanged when the
/// whole estimated rig is rotated about the world origin.
pub fn rotation_accuracy(est: &[Mat3], gt: &[Mat3], threshold_deg: f64) -> Result<RotationAccuracy> {
    check_counts(est.len(), gt.len(), 2)?;
    let mut pairs = Vec::new();
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            let rel_est = est[j].transpose() * est[i];
            let rel_gt = gt[j].transpose() * gt[i];
            pairs.push(PairError {
                i,
                j,
                error_deg: rotation_angle_deg(&rel_est, &rel_gt),
            });
        }
    }
    let hits = pairs.iter().filter(|p| p.error_deg < threshold_deg).count();
    Ok(RotationAccuracy {
        fraction: hits as f64 / pairs.len() as f64,
        pairs,
    })
}

/// Best global rotation `Q` with `Q est_i ≈ gt_i`.
fn align_rotations(est: &[Mat3], gt: &[Mat3]) -> Result<Mat3> {
    let h: Mat3 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| e * g.transpose())
        .sum();
    procrustes_rotation(&h)
}

/// Per-camera rotation errors after removing the best global rotation.
pub fn absolute_rotation_accuracy(est: &[Mat3], gt: &[Mat3], threshold_deg: f64) -> Result<(f64, Vec<f64>)> {
    check_counts(est.len(), gt.len(), 1)?;
    let q = align_rotations(est, gt)?;
    let errors: Vec<f64> = est
        .iter()
        .zip(gt)
        .map(|(e, g)| rotation_angle_deg(&(q * e), g))
        .collect();
    let hits = errors.iter().filter(|e| **e < threshold_deg).count();
    Ok((hits as f64 / errors.len() as f64, errors))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// Least-squares similarity `dst ≈ s R src + t` in closed form.
pub fn umeyama_align(src: &[Vec3], dst: &[Vec3]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::shape(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "{} points; similarity alignment needs 3",
            src.len()
        )));
    }
    let (mu_s, mu_d) = (centroid(src), centroid(dst));
    let n = src.len() as f64;
    let mut cov = Mat3::zeros();
    let mut scatter = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        scatter += a * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let mut spread = scatter.symmetric_eigenvalues().as_slice().to_vec();
    spread.sort_by(|x, y| y.total_cmp(x));
    if !(spread[1] > 1e-10 * spread[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateConfiguration(
            "source points are collinear or coincident".into(),
        ));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Vec3::repeat(1.0);
    if (u * v_t).determinant() < 0.0 {
        // flip the direction of least variance
        let k = svd.singular_values.imin();
        d[k] = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&d) * v_t;
    let scale = svd.singular_values.component_mul(&d).sum() / var_s;
    let translation = mu_d - scale * rotation * mu_s;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationAccuracy {
    pub fraction: f64,
    pub errors: Vec<f64>,
    pub alignment: Similarity,
    /// Set when a full similarity fit was impossible (two cameras, or collinear
    /// estimated centers) and the gauge was fixed from rotations and baseline.
    pub fallback: bool,
}

/// Gauge from the best global rotation of the camera orientations, the scale
/// of the first baseline, and matched centroids.
fn rotation_gauge(est: &[Camera], gt: &[Camera]) -> Result<Similarity> {
    let er: Vec<Mat3> = est.iter().map(|c| c.rotation).collect();
    let gr: Vec<Mat3> = gt.iter().map(|c| c.rotation).collect();
    let rotation = align_rotations(&er, &gr)?;
    let base_est = (est[1].center - est[0].center).norm();
    let base_gt = (gt[1].center - gt[0].center).norm();
    let scale = if base_est > 1e-12 { base_gt / base_est } else { 1.0 };
    let ec: Vec<Vec3> = est.iter().map(|c| c.center).collect();
    let gc: Vec<Vec3> = gt.iter().map(|c| c.center).collect();
    let translation = centroid(&gc) - scale * rotation * centroid(&ec);
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Fraction of cameras whose center lies within `threshold` of ground truth
/// after similarity alignment of the estimated centers.
pub fn translation_accuracy(est: &[Camera], gt: &[Camera], threshold: f64) -> Result<TranslationAccuracy> {
    check_counts(est.len(), gt.len(), 2)?;
    let ec: Vec<Vec3> = est.iter().map(|c| c.center).collect();
    let gc: Vec<Vec3> = gt.iter().map(|c| c.center).collect();
    let (alignment, fallback) = match umeyama_align(&ec, &gc) {
        Ok(s) if gt.len() >= 3 => (s, false),
        _ => (rotation_gauge(est, gt)?, true),
    };
    let errors: Vec<f64> = ec
        .iter()
        .zip(&gc)
        .map(|(e, g)| (alignment.apply(e) - g).norm())
        .collect();
    let hits = errors.iter().filter(|e| **e < threshold).count();
    Ok(TranslationAccuracy {
        fraction: hits as f64 / errors.len() as f64,
        errors,
        alignment,
        fallback,
    })
}

/// [`rotation_accuracy`] over the cameras that were estimated; every pair
/// involving a missing camera counts as a miss.
pub fn rotation_accuracy_partial(est: &[Option<Mat3>], gt: &[Mat3], threshold_deg: f64) -> Result<RotationAccuracy> {
    check_counts(est.len(), gt.len(), 2)?;
    let total = gt.len() * (gt.len() - 1) / 2;
    let present: Vec<usize> = (0..est.len()).filter(|&i| est[i].is_some()).collect();
    if present.len() < 2 {
        return Ok(RotationAccuracy {
            fraction: 0.0,
            pairs: Vec::new(),
        });
    }
    let sub_est: Vec<Mat3> = present.iter().map(|&i| est[i].unwrap()).collect();
    let sub_gt: Vec<Mat3> = present.iter().map(|&i| gt[i]).collect();
    let mut acc = rotation_accuracy(&sub_est, &sub_gt, threshold_deg)?;
    let hits = acc.pairs.iter().filter(|p| p.error_deg < threshold_deg).count();
    for p in &mut acc.pairs {
        p.i = present[p.i];
        p.j = present[p.j];
    }
    acc.fraction = hits as f64 / total as f64;
    Ok(acc)
}

/// [`translation_accuracy`] over the cameras that were estimated; missing
/// cameras count as misses and have no error entry.
pub fn translation_accuracy_partial(
    est: &[Option<Camera>],
    gt: &[Camera],
    threshold: f64,
) -> Result<(f64, Vec<Option<f64>>, bool)> {
    check_counts(est.len(), gt.len(), 2)?;
    let present: Vec<usize> = (0..est.len()).filter(|&i| est[i].is_some()).collect();
    let mut errors = vec![None; gt.len()];
    if present.len() < 2 {
        return Ok((0.0, errors, true));
    }
    let sub_est: Vec<Camera> = present.iter().map(|&i| est[i].unwrap()).collect();
    let sub_gt: Vec<Camera> = present.iter().map(|&i| gt[i]).collect();
    let acc = translation_accuracy(&sub_est, &sub_gt, threshold)?;
    for (k, &i) in present.iter().enumerate() {
        errors[i] = Some(acc.errors[k]);
    }
    let hits = acc.errors.iter().filter(|e| **e < threshold).count();
    Ok((hits as f64 / gt.len() as f64, errors, acc.fallback))
}

/// Exact nearest-neighbour queries over a static 3D point set.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Implicit balanced tree: the median of `order[lo..hi]` is the node.
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        Self::build(points, &mut order, &mut axes, 0, points.len());
        KdTree {
            points: points.to_vec(),
            order,
            axes,
        }
    }

    fn build(points: &[Vec3], order: &mut [usize], axes: &mut [u8], lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        let slice = &order[lo..hi];
        let (mut min, mut max) = (points[slice[0]], points[slice[0]]);
        for &i in slice {
            min = min.inf(&points[i]);
            max = max.sup(&points[i]);
        }
        let axis = (max - min).imax();
        let mid = (lo + hi) / 2;
        order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        axes[mid] = axis as u8;
        Self::build(points, order, axes, lo, mid);
        Self::build(points, order, axes, mid + 1, hi);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.points.len(), &mut best);
        Some(best)
    }

    fn search(&self, q: &Vec3, lo: usize, hi: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

/// Area-weighted uniform samples on the mesh with interpolated unit normals.
pub fn sample_surface(mesh: &Mesh, n: usize, rng: &mut impl Rng) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        let (a, b, c) = (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
        total += 0.5 * (b - a).cross(&(c - a)).norm();
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::EmptyMesh);
    }
    let has_normals = mesh.normals.len() == mesh.vertices.len();
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.random::<f64>() * total;
        let k = cumulative.partition_point(|c| *c <= r).min(cumulative.len() - 1);
        let t = mesh.triangles[k];
        let (u, v): (f64, f64) = (rng.random(), rng.random());
        let su = u.sqrt();
        let w = [1.0 - su, su * (1.0 - v), su * v];
        let p = mesh.vertices[t[0]] * w[0] + mesh.vertices[t[1]] * w[1] + mesh.vertices[t[2]] * w[2];
        let face = (mesh.vertices[t[1]] - mesh.vertices[t[0]])
            .cross(&(mesh.vertices[t[2]] - mesh.vertices[t[0]]))
            .normalize();
        let nrm = if has_normals {
            (mesh.normals[t[0]] * w[0] + mesh.normals[t[1]] * w[1] + mesh.normals[t[2]] * w[2])
                .try_normalize(1e-12)
                .unwrap_or(face)
        } else {
            face
        };
        points.push(p);
        normals.push(nrm);
    }
    Ok((points, normals))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    pub cd: f64,
    pub hd: f64,
    pub nc: f64,
    pub f_score: f64,
    pub precision: f64,
    pub recall: f64,
    pub tau: f64,
}

struct Directed {
    mean: f64,
    max: f64,
    normal_agreement: f64,
    within_tau: f64,
}

fn directed(from: &[Vec3], from_n: &[Vec3], to: &KdTree, to_n: &[Vec3], tau: f64) -> Directed {
    let (mut sum, mut max, mut agree, mut hits) = (0.0, 0.0f64, 0.0, 0usize);
    for (p, n) in from.iter().zip(from_n) {
        let (j, d2) = to.nearest(p).expect("nonempty target");
        let d = d2.sqrt();
        sum += d;
        max = max.max(d);
        agree += n.dot(&to_n[j]).abs();
        if d <= tau {
            hits += 1;
        }
    }
    let k = from.len() as f64;
    Directed {
        mean: sum / k,
        max,
        normal_agreement: agree / k,
        within_tau: hits as f64 / k,
    }
}

/// Metrics between two oriented point samples.
pub fn point_metrics(
    pred: &[Vec3],
    pred_normals: &[Vec3],
    gt: &[Vec3],
    gt_normals: &[Vec3],
    tau: f64,
) -> Result<SurfaceMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if pred.len() != pred_normals.len() || gt.len() != gt_normals.len() {
        return Err(Error::shape("one normal per sample", "mismatched normal count"));
    }
    let (pred_tree, gt_tree) = (KdTree::new(pred), KdTree::new(gt));
    let fwd = directed(pred, pred_normals, &gt_tree, gt_normals, tau);
    let bwd = directed(gt, gt_normals, &pred_tree, pred_normals, tau);
    let (precision, recall) = (fwd.within_tau, bwd.within_tau);
    let f_score = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(SurfaceMetrics {
        cd: 0.5 * (fwd.mean + bwd.mean),
        hd: fwd.max.max(bwd.max),
        nc: 0.5 * (fwd.normal_agreement + bwd.normal_agreement),
        f_score,
        precision,
        recall,
        tau,
    })
}

/// Samples both meshes with generators seeded by `seed` and compares them. The
/// F-score threshold is `tau_fraction` of the ground-truth bounding-box diagonal.
pub fn surface_metrics<R: Rng + rand::SeedableRng>(
    pred: &Mesh,
    gt: &Mesh,
    n: usize,
    tau_fraction: f64,
    seed: u64,
) -> Result<SurfaceMetrics> {
    let (pp, pn) = sample_surface(pred, n, &mut R::seed_from_u64(seed))?;
    let (gp, gn) = sample_surface(gt, n, &mut R::seed_from_u64(seed))?;
    let (lo, hi) = gt.bounding_box().ok_or(Error::EmptyMesh)?;
    point_metrics(&pp, &pn, &gp, &gn, tau_fraction * (hi - lo).norm())
}

/// Evaluation of one scene. Pose fields are absent when no cameras were
/// estimated; surface fields when no mesh was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub n_views: usize,
    pub rotation_accuracy_at_15: Option<f64>,
    pub translation_accuracy_at_0_1: Option<f64>,
    pub translation_fallback: bool,
    pub cd: Option<f64>,
    pub hd: Option<f64>,
    pub nc: Option<f64>,
    pub f_score: Option<f64>,
    pub rotation_pairs: Vec<PairError>,
    pub translation_errors: Vec<Option<f64>>,
}

/// Means over the scenes where each metric is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub label: String,
    pub scenes: usize,
    pub rotation_accuracy_at_15: Option<f64>,
    pub translation_accuracy_at_0_1: Option<f64>,
    pub cd: Option<f64>,
    pub hd: Option<f64>,
    pub nc: Option<f64>,
    pub f_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenes: Vec<SceneMetrics>,
    /// Per view count, in increasing order.
    pub by_views: Vec<AggregateMetrics>,
    pub overall: AggregateMetrics,
}

fn aggregate(label: String, rows: &[&SceneMetrics]) -> AggregateMetrics {
    let mean = |f: &dyn Fn(&SceneMetrics) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    AggregateMetrics {
        label,
        scenes: rows.len(),
        rotation_accuracy_at_15: mean(&|r| r.rotation_accuracy_at_15),
        translation_accuracy_at_0_1: mean(&|r| r.translation_accuracy_at_0_1),
        cd: mean(&|r| r.cd),
        hd: mean(&|r| r.hd),
        nc: mean(&|r| r.nc),
        f_score: mean(&|r| r.f_score),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl MetricsReport {
    pub fn new(scenes: Vec<SceneMetrics>) -> Self {
        let mut views: Vec<usize> = scenes.iter().map(|s| s.n_views).collect();
        views.sort_unstable();
        views.dedup();
        let by_views = views
            .iter()
            .map(|&v| {
                let rows: Vec<&SceneMetrics> = scenes.iter().filter(|s| s.n_views == v).collect();
                aggregate(format!("views={v}"), &rows)
            })
            .collect();
        let all: Vec<&SceneMetrics> = scenes.iter().collect();
        let overall = aggregate("all".into(), &all);
        MetricsReport {
            scenes,
            by_views,
            overall,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per scene, then one per view count, then the overall row.
    /// Absent metrics are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scene,n_views,rotation_accuracy_at_15,translation_accuracy_at_0_1,cd,hd,nc,f_score\n",
        );
        let rows = self
            .scenes
            .iter()
            .map(|s| {
                (
                    &s.scene,
                    s.n_views,
                    [s.rotation_accuracy_at_15, s.translation_accuracy_at_0_1, s.cd, s.hd, s.nc, s.f_score],
                )
            })
            .chain(self.by_views.iter().chain(std::iter::once(&self.overall)).map(|a| {
                (
                    &a.label,
                    a.scenes,
                    [a.rotation_accuracy_at_15, a.translation_accuracy_at_0_1, a.cd, a.hd, a.nc, a.f_score],
                )
            }));
        for (name, n, vals) in rows {
            let cells: Vec<String> = vals.iter().map(|v| cell(*v)).collect();
            let _ = writeln!(out, "{name},{n},{}", cells.join(","));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use crate::field::FnField;
    use crate::mesh::{marching_cubes, Bounds};
    use crate::scene::Shape;
    use nalgebra::{Rotation3, Unit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Mat3 {
        let axis = Unit::new_normalize(Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        Rotation3::from_axis_angle(&axis, rng.random_range(0.0..3.1)).into_inner()
    }

    fn random_cameras(n: usize, rng: &mut impl Rng) -> Vec<Camera> {
        (0..n)
            .map(|_| {
                let c = Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0));
                Camera::new(Intrinsics::square(32.0), random_rotation(rng), c).unwrap()
            })
            .collect()
    }

    fn rz(deg: f64) -> Mat3 {
        Rotation3::from_axis_angle(&Vec3::z_axis(), deg.to_radians()).into_inner()
    }

    #[test]
    fn identical_rotations_are_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rots: Vec<Mat3> = (0..5).map(|_| random_rotation(&mut rng)).collect();
        let acc = rotation_accuracy(&rots, &rots, 15.0).unwrap();
        assert_eq!(acc.fraction, 1.0);
        assert_eq!(acc.pairs.len(), 10);
        assert!(acc.pairs.iter().all(|p| p.error_deg < 1e-6));
    }

    #[test]
    fn one_perturbed_camera_spoils_its_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<Mat3> = (0..3).map(|_| random_rotation(&mut rng)).collect();
        for perturbed in [gt[0] * rz(20.0), rz(20.0) * gt[0]] {
            let est = vec![perturbed, gt[1], gt[2]];
            let acc = rotation_accuracy(&est, &gt, 15.0).unwrap();
            assert!((acc.fraction - 1.0 / 3.0).abs() < 1e-12);
            for p in &acc.pairs {
                let expected = if p.i == 0 { 20.0 } else { 0.0 };
                assert!((p.error_deg - expected).abs() < 1e-6, "{p:?}");
            }
        }
    }

    #[test]
    fn rotation_accuracy_ignores_global_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let gt: Vec<Mat3> = (0..5).map(|_| random_rotation(&mut rng)).collect();
            let est: Vec<Mat3> = gt.iter().map(|r| r * rz(rng.random_range(0.0..25.0))).collect();
            let q = random_rotation(&mut rng);
            let moved: Vec<Mat3> = est.iter().map(|r| q * r).collect();
            let a = rotation_accuracy(&est, &gt, 15.0).unwrap();
            let b = rotation_accuracy(&moved, &gt, 15.0).unwrap();
            assert_eq!(a.fraction, b.fraction);
            for (x, y) in a.pairs.iter().zip(&b.pairs) {
                assert!((x.error_deg - y.error_deg).abs() < 1e-6);
            }
            let (abs_a, _) = absolute_rotation_accuracy(&est, &gt, 15.0).unwrap();
            let (abs_b, _) = absolute_rotation_accuracy(&moved, &gt, 15.0).unwrap();
            assert_eq!(abs_a, abs_b);
        }
        assert!(rotation_accuracy(&[Mat3::identity()], &[Mat3::identity()], 15.0).is_err());
        assert!(rotation_accuracy(&[Mat3::identity(); 2], &[Mat3::identity(); 3], 15.0).is_err());
    }

    #[test]
    fn umeyama_recovers_known_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src: Vec<Vec3> = (0..10).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let id = umeyama_align(&src, &src).unwrap();
        assert!((id.scale - 1.0).abs() < 1e-12);
        assert!((id.rotation - Mat3::identity()).abs().max() < 1e-12);
        assert!(id.translation.norm() < 1e-12);

        let r = random_rotation(&mut rng);
        let t = Vec3::new(0.3, -1.2, 2.0);
        let dst: Vec<Vec3> = src.iter().map(|p| 2.0 * (r * p) + t).collect();
        let s = umeyama_align(&src, &dst).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-9);
        assert!((s.rotation - r).abs().max() < 1e-9);
        assert!((s.translation - t).norm() < 1e-9);

        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.5)).collect();
        assert!(matches!(umeyama_align(&line, &line), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn translation_accuracy_is_similarity_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_cameras(5, &mut rng);
        assert_eq!(translation_accuracy(&gt, &gt, 0.1).unwrap().fraction, 1.0);
        let r = random_rotation(&mut rng);
        let moved: Vec<Camera> = gt
            .iter()
            .map(|c| Camera::new(c.intrinsics, r * c.rotation, 3.0 * (r * c.center) + Vec3::new(1.0, 2.0, 3.0)).unwrap())
            .collect();
        let acc = translation_accuracy(&moved, &gt, 0.1).unwrap();
        assert_eq!(acc.fraction, 1.0);
        assert!(!acc.fallback);
        assert!(acc.errors.iter().all(|e| *e < 1e-9));
    }

    fn displaced_fraction(seed: u64, offset: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = crate::scene::sample_camera_rig(4, &mut rng, (1.8, 2.2)).unwrap();
        let mut est = gt.clone();
        let c = est[2].center;
        est[2].center += offset * c.normalize();
        translation_accuracy(&est, &gt, 0.1).unwrap().fraction
    }

    #[test]
    fn displaced_center_regression() {
        // a 0.2 offset is partly absorbed by the similarity fit
        let realized: Vec<f64> = (0..8).map(|s| displaced_fraction(s, 0.2)).collect();
        assert_eq!(realized, [1.0, 0.75, 1.0, 0.75, 1.0, 0.75, 1.0, 0.75]);
        for seed in 0..8 {
            assert!(displaced_fraction(seed, 0.5) <= 0.75);
        }
    }

    #[test]
    fn two_cameras_use_fallback_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_cameras(2, &mut rng);
        let acc = translation_accuracy(&gt, &gt, 0.1).unwrap();
        assert!(acc.fallback);
        assert_eq!(acc.fraction, 1.0);
        let r = random_rotation(&mut rng);
        let moved: Vec<Camera> = gt
            .iter()
            .map(|c| Camera::new(c.intrinsics, r * c.rotation, 0.5 * (r * c.center) - Vec3::x()).unwrap())
            .collect();
        let acc = translation_accuracy(&moved, &gt, 0.1).unwrap();
        assert!(acc.errors.iter().all(|e| *e < 1e-9), "{acc:?}");
    }

    #[test]
    fn missing_cameras_count_as_misses() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gt = random_cameras(4, &mut rng);
        let rots: Vec<Mat3> = gt.iter().map(|c| c.rotation).collect();
        let mut est: Vec<Option<Mat3>> = rots.iter().copied().map(Some).collect();
        assert_eq!(rotation_accuracy_partial(&est, &rots, 15.0).unwrap().fraction, 1.0);
        est[1] = None;
        let acc = rotation_accuracy_partial(&est, &rots, 15.0).unwrap();
        assert_eq!(acc.fraction, 0.5);
        assert!(acc.pairs.iter().all(|p| p.i != 1 && p.j != 1));
        est[2] = None;
        est[3] = None;
        assert_eq!(rotation_accuracy_partial(&est, &rots, 15.0).unwrap().fraction, 0.0);

        let mut cams: Vec<Option<Camera>> = gt.iter().copied().map(Some).collect();
        cams[0] = None;
        let (frac, errors, fallback) = translation_accuracy_partial(&cams, &gt, 0.1).unwrap();
        assert_eq!(frac, 0.75);
        assert!(errors[0].is_none() && errors[1].unwrap() < 1e-9);
        assert!(!fallback);
    }

    #[test]
    fn kd_tree_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3> = (0..500).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let tree = KdTree::new(&pts);
        for _ in 0..200 {
            let q = Vec3::from_fn(|_, _| rng.random_range(-1.5..1.5));
            let (i, d2) = tree.nearest(&q).unwrap();
            let best = pts.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min);
            assert_eq!(d2, best);
            assert_eq!((pts[i] - q).norm_squared(), best);
        }
        assert!(KdTree::new(&[]).nearest(&Vec3::zeros()).is_none());
    }

    fn unit_triangle() -> Mesh {
        let s = (2.0f64).sqrt();
        Mesh {
            vertices: vec![Vec3::zeros(), Vec3::new(s, 0.0, 0.0), Vec3::new(0.0, s, 0.0)],
            triangles: vec![[0, 1, 2]],
            normals: vec![Vec3::z(); 3],
        }
    }

    #[test]
    fn samples_stay_inside_triangle() {
        let mesh = unit_triangle();
        assert!((mesh.surface_area() - 1.0).abs() < 1e-12);
        let (pts, nrm) = sample_surface(&mesh, 1000, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let s = (2.0f64).sqrt();
        for (p, n) in pts.iter().zip(&nrm) {
            assert!(p.x >= -1e-12 && p.y >= -1e-12 && p.x + p.y <= s + 1e-12 && p.z == 0.0);
            assert_eq!(*n, Vec3::z());
        }
        let again = sample_surface(&mesh, 1000, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(pts, again.0);
        assert!(matches!(sample_surface(&Mesh::default(), 10, &mut ChaCha8Rng::seed_from_u64(8)), Err(Error::EmptyMesh)));
    }

    #[test]
    fn sphere_samples_center_on_centroid() {
        let mesh = marching_cubes(&Shape::unit_sphere(), 32, &Bounds::default(), 0.0).unwrap();
        let (pts, _) = sample_surface(&mesh, 10_000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(centroid(&pts).norm() < 0.02);
    }

    #[test]
    fn identical_meshes_score_perfectly() {
        let mesh = marching_cubes(&Shape::unit_sphere(), 32, &Bounds::default(), 0.0).unwrap();
        let m = surface_metrics::<ChaCha8Rng>(&mesh, &mesh, 5000, F_SCORE_TAU_FRACTION, 10).unwrap();
        assert_eq!((m.cd, m.hd, m.f_score), (0.0, 0.0, 1.0));
        assert!((m.nc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concentric_spheres() {
        let bounds = Bounds {
            min: Vec3::repeat(-1.2),
            max: Vec3::repeat(1.2),
        };
        let inner = marching_cubes(&FnField(|p: &Vec3| p.norm() - 1.0), 64, &bounds, 0.0).unwrap();
        let outer = marching_cubes(&FnField(|p: &Vec3| p.norm() - 1.1), 64, &bounds, 0.0).unwrap();
        let m = surface_metrics::<ChaCha8Rng>(&outer, &inner, 10_000, F_SCORE_TAU_FRACTION, 11).unwrap();
        assert!((m.cd - 0.1).abs() < 0.01, "{m:?}");
        assert!(m.nc > 0.99);
        assert!(m.cd <= m.hd);
        let swapped = surface_metrics::<ChaCha8Rng>(&inner, &outer, 10_000, F_SCORE_TAU_FRACTION, 11).unwrap();
        assert_eq!(m.cd, swapped.cd);
        assert_eq!(m.hd, swapped.hd);
    }

    #[test]
    fn precision_and_recall_swap_with_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a: Vec<Vec3> = (0..300).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let b: Vec<Vec3> = (0..200).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let (na, nb) = (vec![Vec3::z(); 300], vec![Vec3::x(); 200]);
        let ab = point_metrics(&a, &na, &b, &nb, 0.2).unwrap();
        let ba = point_metrics(&b, &nb, &a, &na, 0.2).unwrap();
        assert_eq!(ab.precision, ba.recall);
        assert_eq!(ab.recall, ba.precision);
        assert_eq!(ab.cd, ba.cd);
        assert_eq!(ab.nc, 0.0);
    }

    #[test]
    fn report_csv_orders_rows() {
        let row = |name: &str, v: usize, rot: f64| SceneMetrics {
            scene: name.into(),
            n_views: v,
            rotation_accuracy_at_15: Some(rot),
            translation_accuracy_at_0_1: if v == 2 { None } else { Some(1.0) },
            translation_fallback: false,
            cd: Some(0.01),
            hd: Some(0.05),
            nc: Some(0.99),
            f_score: Some(1.0),
            rotation_pairs: vec![],
            translation_errors: vec![],
        };
        let report = MetricsReport::new(vec![row("s1", 3, 1.0), row("s0", 2, 0.0), row("s2", 3, 0.5)]);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 2 + 1);
        assert!(lines[4].starts_with("views=2,1,0,,0.01,"));
        assert!(lines[5].starts_with("views=3,2,0.75,1,"));
        assert!(lines[6].starts_with("all,3,0.5,1,"));
        assert!(lines[2].starts_with("s0,2,0,,"));
        let json: MetricsReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(json, report);
    }
}
