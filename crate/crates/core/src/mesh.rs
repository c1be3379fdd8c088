//! Marching-cubes isosurface extraction and Wavefront OBJ input/output.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::field::SdfField;
use crate::geometry::Vec3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// Unit per-vertex normals, parallel to `vertices`.
    pub normals: Vec<Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            min: Vec3::repeat(-1.0),
            max: Vec3::repeat(1.0),
        }
    }
}

pub const DEFAULT_RESOLUTION: usize = 64;
pub const MIN_RESOLUTION: usize = 8;
const DEGENERATE_AREA: f64 = 1e-12;
const INTERP_CLAMP: f64 = 1e-6;

/// Corner offsets of a cell.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs of the twelve cell edges.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Cell faces as corner cycles, counter-clockwise seen from outside the cell.
const FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [3, 7, 6, 2],
    [0, 4, 7, 3],
    [1, 2, 6, 5],
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("adjacent corners")
}

/// Triangles (as cell-edge triples) for a corner sign pattern. Bit `i` of `case`
/// is set when corner `i` is below the iso value.
///
/// On every face, walking the corner cycle counter-clockwise from outside, each
/// crossing from a corner above the iso value to one below is joined to the next
/// crossing. This keeps below-iso corners of an ambiguous face apart, depends only
/// on the face's own signs (so neighbouring cells agree), and orients each segment
/// with the above-iso side on its left. Chaining the segments gives closed loops
/// that are fanned into triangles whose normals point toward increasing values.
fn triangulate_case(case: u8) -> Vec<[usize; 3]> {
    let below = |c: usize| case & (1 << c) != 0;
    let mut next = [usize::MAX; 12];
    for face in FACES {
        let crossings: Vec<(usize, bool)> = (0..4)
            .filter_map(|k| {
                let (a, b) = (face[k], face[(k + 1) % 4]);
                (below(a) != below(b)).then(|| (edge_between(a, b), below(b)))
            })
            .collect();
        for (k, &(edge, enters_below)) in crossings.iter().enumerate() {
            if enters_below {
                next[edge] = crossings[(k + 1) % crossings.len()].0;
            }
        }
    }
    let mut visited = [false; 12];
    let mut triangles = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || visited[start] {
            continue;
        }
        let mut polygon = Vec::new();
        let mut e = start;
        while !visited[e] {
            visited[e] = true;
            polygon.push(e);
            e = next[e];
        }
        for i in 1..polygon.len() - 1 {
            triangles.push([polygon[0], polygon[i], polygon[i + 1]]);
        }
    }
    triangles
}

fn case_table() -> &'static [Vec<[usize; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..=255u8).map(triangulate_case).collect())
}

/// Extracts the `iso` level set of `field` sampled on a `(resolution + 1)³` grid
/// spanning `bounds`.
pub fn marching_cubes(field: &dyn SdfField, resolution: usize, bounds: &Bounds, iso: f64) -> Result<Mesh> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::InputDomain(format!(
            "marching cubes resolution {resolution} < {MIN_RESOLUTION}"
        )));
    }
    let extent = bounds.max - bounds.min;
    if !extent.iter().all(|e| *e > 0.0) {
        return Err(Error::InputDomain(format!("empty bounds {bounds:?}")));
    }
    let n = resolution + 1;
    let step = extent / resolution as f64;
    let node = |i: usize, j: usize, k: usize| {
        bounds.min + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z)
    };
    let index = |i: usize, j: usize, k: usize| (i * n + j) * n + k;

    let mut values = Vec::with_capacity(n * n * n);
    let mut slab = Vec::with_capacity(n * n);
    for i in 0..n {
        slab.clear();
        for j in 0..n {
            for k in 0..n {
                slab.push(node(i, j, k));
            }
        }
        values.extend(field.sdf_batch(&slab));
    }
    if values.iter().all(|v| *v < iso) || values.iter().all(|v| *v >= iso) {
        return Err(Error::EmptySurface);
    }

    let table = case_table();
    let node_key = 3 * n * n * n;
    let mut vertex_of_edge: HashMap<usize, usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for i in 0..resolution {
        for j in 0..resolution {
            for k in 0..resolution {
                let corner = |c: usize| {
                    let o = CORNERS[c];
                    (i + o[0], j + o[1], k + o[2])
                };
                let mut case = 0u8;
                for c in 0..8 {
                    let (a, b, d) = corner(c);
                    if values[index(a, b, d)] < iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let mut local = [usize::MAX; 12];
                for tri in &table[case as usize] {
                    for &e in tri {
                        if local[e] != usize::MAX {
                            continue;
                        }
                        let (p, q) = (corner(EDGES[e][0]), corner(EDGES[e][1]));
                        let (lo, hi) = if index(p.0, p.1, p.2) < index(q.0, q.1, q.2) { (p, q) } else { (q, p) };
                        let axis = (0..3)
                            .find(|&a| [hi.0, hi.1, hi.2][a] != [lo.0, lo.1, lo.2][a])
                            .unwrap();
                        let (ia, ib) = (index(lo.0, lo.1, lo.2), index(hi.0, hi.1, hi.2));
                        let (va, vb) = (values[ia], values[ib]);
                        let t = (iso - va) / (vb - va);
                        let (pa, pb) = (node(lo.0, lo.1, lo.2), node(hi.0, hi.1, hi.2));
                        // crossings that would be clamped onto a grid node are welded there
                        let (key, pos) = if t <= INTERP_CLAMP {
                            (node_key + ia, pa)
                        } else if t >= 1.0 - INTERP_CLAMP {
                            (node_key + ib, pb)
                        } else {
                            (ia * 3 + axis, pa + (pb - pa) * t)
                        };
                        local[e] = *vertex_of_edge.entry(key).or_insert_with(|| {
                            vertices.push(pos);
                            vertices.len() - 1
                        });
                    }
                    let t = [local[tri[0]], local[tri[1]], local[tri[2]]];
                    if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] && triangle_area(&vertices, &t) >= DEGENERATE_AREA {
                        triangles.push(t);
                    }
                }
            }
        }
    }
    if triangles.is_empty() {
        return Err(Error::EmptySurface);
    }
    let h = 0.1 * step.min();
    let normals = gradient_normals(field, &vertices, h, &triangles);
    Ok(Mesh {
        vertices,
        triangles,
        normals,
    })
}

fn triangle_area(vertices: &[Vec3], t: &[usize; 3]) -> f64 {
    let (a, b, c) = (vertices[t[0]], vertices[t[1]], vertices[t[2]]);
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Normalized central-difference gradients; falls back to the area-weighted
/// face normal where the gradient vanishes.
fn gradient_normals(field: &dyn SdfField, vertices: &[Vec3], h: f64, triangles: &[[usize; 3]]) -> Vec<Vec3> {
    let mut probes = Vec::with_capacity(6 * vertices.len());
    for v in vertices {
        for axis in 0..3 {
            let mut e = Vec3::zeros();
            e[axis] = h;
            probes.push(v + e);
            probes.push(v - e);
        }
    }
    let s = field.sdf_batch(&probes);
    let fallback = face_normals(vertices, triangles);
    (0..vertices.len())
        .map(|i| {
            let g = Vec3::from_fn(|a, _| s[6 * i + 2 * a] - s[6 * i + 2 * a + 1]);
            g.try_normalize(1e-300).unwrap_or(fallback[i])
        })
        .collect()
}

/// Area-weighted vertex normals from triangle orientation.
pub fn face_normals(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for t in triangles {
        let (a, b, c) = (vertices[t[0]], vertices[t[1]], vertices[t[2]]);
        let n = (b - a).cross(&(c - a));
        for &i in t {
            acc[i] += n;
        }
    }
    acc.into_iter()
        .map(|n| n.try_normalize(1e-300).unwrap_or(Vec3::z()))
        .collect()
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| triangle_area(&self.vertices, t))
            .sum()
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// `V − E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        self.triangles.iter().flatten().for_each(|&i| used[i] = true);
        let v = used.iter().filter(|u| **u).count() as i64;
        v - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::Validation(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if self.normals.len() != n {
            return Err(Error::shape(n, self.normals.len()));
        }
        Ok(())
    }
}

/// Shortest decimal form with nine significant digits.
fn fmt_coord(x: f64) -> String {
    let s = format!("{x:.8e}");
    let v: f64 = s.parse().expect("formatted float parses");
    format!("{v}")
}

/// Writes `v`, `vn` and `f` records with 1-based indices.
pub fn save_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    mesh.validate()?;
    std::fs::write(path, obj_string(mesh)).map_err(|e| Error::io(path, e))
}

pub fn obj_string(mesh: &Mesh) -> String {
    let mut out = String::with_capacity(64 * (mesh.vertices.len() + mesh.triangles.len()));
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", fmt_coord(v.x), fmt_coord(v.y), fmt_coord(v.z));
    }
    for n in &mesh.normals {
        let _ = writeln!(out, "vn {} {} {}", fmt_coord(n.x), fmt_coord(n.y), fmt_coord(n.z));
    }
    let with_normals = !mesh.normals.is_empty();
    for t in &mesh.triangles {
        let (a, b, c) = (t[0] + 1, t[1] + 1, t[2] + 1);
        if with_normals {
            let _ = writeln!(out, "f {a}//{a} {b}//{b} {c}//{c}");
        } else {
            let _ = writeln!(out, "f {a} {b} {c}");
        }
    }
    out
}

pub fn load_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

/// Parses `v`, `vn` and `f` records; polygons are fanned into triangles. Normals
/// are kept when there is one per vertex, otherwise recomputed from faces.
pub fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces: Vec<(usize, Vec<i64>)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = no + 1;
        let mut parts = raw.split_whitespace();
        let Some(tag) = parts.next() else { continue };
        match tag {
            "v" | "vn" => {
                let nums: Vec<f64> = parts
                    .take(3)
                    .map(|p| p.parse::<f64>().map_err(|e| err(line, format!("bad number {p:?}: {e}"))))
                    .collect::<Result<_>>()?;
                if nums.len() != 3 {
                    return Err(err(line, format!("`{tag}` needs three coordinates")));
                }
                let p = Vec3::new(nums[0], nums[1], nums[2]);
                if tag == "v" {
                    vertices.push(p);
                } else {
                    normals.push(p);
                }
            }
            "f" => {
                let idx: Vec<i64> = parts
                    .map(|p| {
                        let head = p.split('/').next().unwrap_or("");
                        head.parse::<i64>()
                            .map_err(|e| err(line, format!("bad face index {p:?}: {e}")))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(err(line, "face needs at least three vertices".into()));
                }
                faces.push((line, idx));
            }
            _ => {}
        }
    }
    let n = vertices.len() as i64;
    let mut triangles = Vec::new();
    for (line, idx) in faces {
        let resolved: Vec<usize> = idx
            .iter()
            .map(|&i| {
                if i >= 1 && i <= n {
                    Ok((i - 1) as usize)
                } else {
                    Err(err(line, format!("vertex index {i} out of range 1..={n}")))
                }
            })
            .collect::<Result<_>>()?;
        for k in 1..resolved.len() - 1 {
            triangles.push([resolved[0], resolved[k], resolved[k + 1]]);
        }
    }
    let normals = if normals.len() == vertices.len() {
        normals
    } else {
        face_normals(&vertices, &triangles)
    };
    Ok(Mesh {
        vertices,
        triangles,
        normals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FnField;
    use crate::scene::{analytic_normal, analytic_sdf, Shape, ShapeKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_radial_deviation(mesh: &Mesh) -> f64 {
        mesh.vertices
            .iter()
            .map(|v| (v.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn table_covers_every_case_consistently() {
        let table = case_table();
        assert!(table[0].is_empty() && table[255].is_empty());
        for case in 1..255usize {
            assert!(!table[case].is_empty(), "case {case}");
            for tri in &table[case] {
                for &e in tri {
                    let [a, b] = EDGES[e];
                    assert_ne!(case & (1 << a) != 0, case & (1 << b) != 0);
                }
            }
        }
    }

    #[test]
    fn unit_sphere_mesh() {
        let sphere = Shape::unit_sphere();
        let mesh = marching_cubes(&sphere, 64, &Bounds::default(), 0.0).unwrap();
        let diag = 3f64.sqrt() * 2.0 / 64.0;
        assert!(max_radial_deviation(&mesh) < 2.0 * diag);
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!(mesh.is_watertight());
        mesh.validate().unwrap();
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!(n.dot(&v.normalize()) > 0.99);
        }
    }

    #[test]
    fn triangles_face_outward() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [ShapeKind::Box, ShapeKind::Torus, ShapeKind::Union] {
            let shape = Shape::random(kind, &mut rng);
            let mesh = marching_cubes(&shape, 32, &Bounds::default(), 0.0).unwrap();
            let mut agree = 0;
            for t in &mesh.triangles {
                let (a, b, c) = (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
                let n = (b - a).cross(&(c - a));
                if n.dot(&analytic_normal(&shape, &((a + b + c) / 3.0))) > 0.0 {
                    agree += 1;
                }
            }
            assert!(agree as f64 > 0.99 * mesh.triangles.len() as f64, "{kind:?}");
            assert!(mesh.is_watertight(), "{kind:?}");
        }
    }

    #[test]
    fn torus_has_genus_one() {
        let torus = Shape::Torus {
            center: [0.0; 3],
            axis: Vec3::new(0.3, 1.0, 0.2).normalize().into(),
            major: 0.55,
            minor: 0.2,
        };
        let mesh = marching_cubes(&torus, 48, &Bounds::default(), 0.0).unwrap();
        assert!(mesh.is_watertight());
        assert_eq!(mesh.euler_characteristic(), 0);
    }

    #[test]
    fn surface_through_grid_nodes_stays_closed() {
        let sphere = Shape::Sphere {
            center: [0.0; 3],
            radius: 0.5,
        };
        let mesh = marching_cubes(&sphere, 16, &Bounds::default(), 0.0).unwrap();
        assert!(mesh.is_watertight());
        assert_eq!(mesh.euler_characteristic(), 2);
    }

    #[test]
    fn doubling_resolution_converges() {
        let sphere = Shape::Sphere {
            center: [0.0; 3],
            radius: 0.8,
        };
        let dev = |res| {
            let m = marching_cubes(&sphere, res, &Bounds::default(), 0.0).unwrap();
            m.vertices.iter().map(|v| (v.norm() - 0.8).abs()).fold(0.0, f64::max)
        };
        let (coarse, fine) = (dev(32), dev(64));
        assert!(coarse / fine >= 1.8, "{coarse} -> {fine}");
    }

    #[test]
    fn vertices_lie_on_sign_changing_edges() {
        let shape = Shape::random(ShapeKind::Union, &mut ChaCha8Rng::seed_from_u64(3));
        let res = 16;
        let mesh = marching_cubes(&shape, res, &Bounds::default(), 0.0).unwrap();
        let step = 2.0 / res as f64;
        for v in &mesh.vertices {
            let g = (v + Vec3::repeat(1.0)) / step;
            let on_grid: Vec<usize> = (0..3).filter(|&a| (g[a] - g[a].round()).abs() < 1e-9).collect();
            if on_grid.len() == 3 {
                let s = analytic_sdf(&shape, v);
                assert!(s.abs() < 1e-6 * step);
                continue;
            }
            assert_eq!(on_grid.len(), 2);
            let axis = (0..3).find(|a| !on_grid.contains(a)).unwrap();
            let mut lo = g.map(|u| u.round());
            lo[axis] = g[axis].floor();
            let mut hi = lo;
            hi[axis] += 1.0;
            let to_world = |p: Vec3| p * step - Vec3::repeat(1.0);
            let (a, b) = (analytic_sdf(&shape, &to_world(lo)), analytic_sdf(&shape, &to_world(hi)));
            assert!((a < 0.0) != (b < 0.0));
        }
    }

    #[test]
    fn constant_field_is_empty() {
        let field = FnField(|_: &Vec3| 1.0);
        assert!(matches!(
            marching_cubes(&field, 16, &Bounds::default(), 0.0),
            Err(Error::EmptySurface)
        ));
        assert!(marching_cubes(&field, 4, &Bounds::default(), 0.0).is_err());
    }

    #[test]
    fn deterministic_extraction() {
        let sphere = Shape::unit_sphere();
        let a = marching_cubes(&sphere, 16, &Bounds::default(), 0.0).unwrap();
        let b = marching_cubes(&sphere, 16, &Bounds::default(), 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn obj_single_triangle_round_trip() {
        let mesh = Mesh {
            vertices: vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.5, -0.25, 0.125), Vec3::new(0.1, 0.2, 0.3)],
            triangles: vec![[0, 1, 2]],
            normals: vec![Vec3::z(); 3],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.obj");
        save_obj(&mesh, &path).unwrap();
        let back = load_obj(&path).unwrap();
        assert_eq!(back, mesh);
    }

    #[test]
    fn obj_round_trip_is_fixed_point() {
        let mesh = marching_cubes(&Shape::unit_sphere(), 16, &Bounds::default(), 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.obj"), dir.path().join("b.obj"));
        save_obj(&mesh, &p1).unwrap();
        let once = load_obj(&p1).unwrap();
        assert_eq!(once.vertices.len(), mesh.vertices.len());
        assert_eq!(once.triangles, mesh.triangles);
        save_obj(&once, &p2).unwrap();
        let twice = load_obj(&p2).unwrap();
        assert_eq!(once, twice);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn obj_errors_name_the_line() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\nf 1 2 9\n";
        match parse_obj(text, Path::new("bad.obj")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_obj("v 0 0 x\n", Path::new("bad.obj")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn obj_without_normals_and_quads() {
        let text = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n";
        let mesh = parse_obj(text, Path::new("quad.obj")).unwrap();
        assert_eq!(mesh.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(mesh.normals.iter().all(|n| (n - Vec3::z()).norm() < 1e-12));
    }
}
