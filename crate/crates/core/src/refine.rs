//! Plane-cut refinement of single elements, cutting-plane strategies and the
//! uniform and adaptive mesh drivers.
//!
//! An element is refined by repeatedly slicing pieces with a plane. Each
//! plane is first snapped onto vertices closer than the tolerance, then the
//! cut is checked for topological and small-feature problems; rejected cuts
//! are retried with small random perturbations of the plane.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{interior_grid_points, kmeans_cutting_plane, KMeansConfig, KMeansInit};
use crate::cnn::{CnnModel, Label};
use crate::geometry::{clip_by_plane, convex_hull, CuttingPlane, ElementId, Point3, Polyhedron, PLANE_BAND};
use crate::mesh::{ComplexityStats, Mesh, MeshError, RefineTimer};
use crate::voxel::voxelize;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("element {id} cannot be refined: {reason}")]
    Unrefinable { id: ElementId, reason: String },
    #[error("invalid refinement configuration: {0}")]
    Config(String),
    #[error("the cnn strategy needs a trained model")]
    MissingModel,
    #[error("reference shape: {0}")]
    Reference(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Shapes with a tailored subdivision pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Tetrahedron,
    Prism,
    Cube,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Tetrahedron, Shape::Prism, Shape::Cube];

    pub fn num_vertices(self) -> usize {
        match self {
            Shape::Tetrahedron => 4,
            Shape::Prism => 6,
            Shape::Cube => 8,
        }
    }

    pub fn num_quads(self) -> usize {
        match self {
            Shape::Tetrahedron => 0,
            Shape::Prism => 3,
            Shape::Cube => 6,
        }
    }

    pub fn from_label(label: Label) -> Option<Shape> {
        match label {
            Label::Tetrahedron => Some(Shape::Tetrahedron),
            Label::Prism => Some(Shape::Prism),
            Label::Cube => Some(Shape::Cube),
            Label::Other => None,
        }
    }

    fn short_name(self) -> &'static str {
        match self {
            Shape::Tetrahedron => "tet",
            Shape::Prism => "prism",
            Shape::Cube => "cube",
        }
    }
}

/// Where cutting planes come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    /// Plane through the midpoint of the diameter, orthogonal to it.
    Diameter,
    /// Bisector of two-means cluster centroids of interior points.
    KMeans,
    /// Classifier picks a shape pattern, or k-means for "other".
    Cnn,
    /// Fixed shape pattern computed on a reference shape.
    Classical(Shape),
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Diameter,
        Strategy::KMeans,
        Strategy::Cnn,
        Strategy::Classical(Shape::Tetrahedron),
        Strategy::Classical(Shape::Prism),
        Strategy::Classical(Shape::Cube),
    ];

    pub fn name(self) -> String {
        match self {
            Strategy::Diameter => "diameter".into(),
            Strategy::KMeans => "kmeans".into(),
            Strategy::Cnn => "cnn".into(),
            Strategy::Classical(s) => format!("classical:{}", s.short_name()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<String> = Strategy::ALL.iter().map(|s| s.name()).collect();
                format!("unknown strategy '{s}', expected one of {}", names.join(", "))
            })
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.name()
    }
}

impl TryFrom<String> for Strategy {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Per-element refinement parameters. `tol` and `target_h` are fractions of
/// the diameter of the element being refined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub tol: f64,
    pub nmax: usize,
    pub target_h: f64,
    pub strategy: Strategy,
    pub emergency_attempts: usize,
    /// Lattice size for the k-means strategy.
    pub kmeans_points: usize,
    pub rng_seed: u64,
    /// Largest child diameter, as a fraction of the parent's, accepted from
    /// a pattern chosen by the classifier. A correctly recognised shape
    /// gives exactly one half; larger children mean the shape was
    /// misread, and the element is split with k-means instead.
    #[serde(default = "default_pattern_max_ratio")]
    pub pattern_max_ratio: f64,
}

fn default_pattern_max_ratio() -> f64 {
    0.7
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            nmax: 8,
            target_h: 0.5,
            strategy: Strategy::Cnn,
            emergency_attempts: 50,
            kmeans_points: 20 * 20 * 20,
            rng_seed: 0,
            pattern_max_ratio: default_pattern_max_ratio(),
        }
    }
}

impl RefineConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(RefineError::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.nmax < 2 {
            return Err(RefineError::Config(format!("nmax must be at least 2, got {}", self.nmax)));
        }
        if !(self.pattern_max_ratio > 0.0) {
            return Err(RefineError::Config(format!(
                "pattern_max_ratio must be positive, got {}",
                self.pattern_max_ratio
            )));
        }
        if !(self.target_h > 0.0 && self.target_h.is_finite()) {
            return Err(RefineError::Config(format!(
                "target_h must be positive, got {}",
                self.target_h
            )));
        }
        Ok(())
    }
}

/// Moves `plane` onto the vertices of `p` closer than `tol`: one vertex is
/// reached by translation, two by rotating about their connecting line,
/// three or more by the (least-squares) plane through them.
pub fn snap_plane(plane: &CuttingPlane, p: &Polyhedron, tol: f64) -> CuttingPlane {
    let band = PLANE_BAND * p.diam();
    let near: Vec<Point3> = p
        .vertices()
        .iter()
        .filter(|v| plane.signed_distance(v).abs() < tol)
        .copied()
        .collect();
    if near.iter().all(|v| plane.signed_distance(v).abs() <= band) {
        return *plane;
    }
    let n = plane.normal();
    let snapped = match near.len() {
        1 => CuttingPlane::new(near[0], n).ok(),
        2 => through_line(near[0], near[1], n),
        3 => CuttingPlane::through_points(near[0], near[1], near[2], n).or_else(|| best_fit(&near, n)),
        _ => best_fit(&near, n),
    };
    snapped.unwrap_or(*plane)
}

/// Plane containing the line `ab` whose normal is closest to `n`.
fn through_line(a: Point3, b: Point3, n: Point3) -> Option<CuttingPlane> {
    let axis = (b - a).try_normalize(0.0)?;
    let m = n - axis * n.dot(&axis);
    if m.norm() <= 1e-12 {
        return None;
    }
    CuttingPlane::new((a + b) * 0.5, m).ok()
}

/// Least-squares plane through `pts`, oriented along `n`. Collinear points
/// fall back to the plane through their extreme pair.
fn best_fit(pts: &[Point3], n: Point3) -> Option<CuttingPlane> {
    let c = pts.iter().sum::<Point3>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for q in pts {
        let d = q - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let spread = eig.eigenvalues[order[2]];
    if eig.eigenvalues[order[1]] <= 1e-18 * spread.max(f64::MIN_POSITIVE) {
        let mut best = (0, 1, -1.0);
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let d = (pts[i] - pts[j]).norm_squared();
                if d > best.2 {
                    best = (i, j, d);
                }
            }
        }
        return through_line(pts[best.0], pts[best.1], n);
    }
    let normal: Point3 = eig.eigenvectors.column(order[0]).into();
    let normal = if normal.dot(&n) < 0.0 { -normal } else { normal };
    CuttingPlane::new(c, normal).ok()
}

fn edge_key(a: &Point3, b: &Point3) -> [u64; 6] {
    let ka = a.map(f64::to_bits);
    let kb = b.map(f64::to_bits);
    let (lo, hi) = if (ka.x, ka.y, ka.z) <= (kb.x, kb.y, kb.z) { (ka, kb) } else { (kb, ka) };
    [lo.x, lo.y, lo.z, hi.x, hi.y, hi.z]
}

fn face_key(p: &Polyhedron, face: &[usize]) -> Vec<[u64; 3]> {
    let mut k: Vec<[u64; 3]> = face
        .iter()
        .map(|&i| {
            let v = p.vertices()[i];
            [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()]
        })
        .collect();
    k.sort_unstable();
    k
}

/// True when the cut produced at least two children, each closed, oriented,
/// genus 0 with positive volume, and none of the edges or faces created by
/// the cut is smaller than `tol` (faces: `tol²`). Features copied from the
/// parent are not judged.
pub fn validity_check(parent: &Polyhedron, children: &[Polyhedron], tol: f64) -> bool {
    if children.len() < 2 {
        return false;
    }
    let old_edges: HashSet<[u64; 6]> = parent
        .edges()
        .iter()
        .map(|&(a, b)| edge_key(&parent.vertices()[a], &parent.vertices()[b]))
        .collect();
    let old_faces: HashSet<Vec<[u64; 3]>> = parent.faces().iter().map(|f| face_key(parent, f)).collect();
    children.iter().all(|c| {
        if c.check_invariants().is_err() {
            return false;
        }
        let v = c.vertices();
        let edges_ok = c.edges().iter().all(|&(a, b)| {
            (v[a] - v[b]).norm() >= tol || old_edges.contains(&edge_key(&v[a], &v[b]))
        });
        edges_ok
            && (0..c.num_faces())
                .all(|f| c.face_area(f) >= tol * tol || old_faces.contains(&face_key(c, &c.faces()[f])))
    })
}

/// Clips `p` and returns the children when the cut passes the validity check.
fn try_cut(p: &Polyhedron, plane: &CuttingPlane, tol: f64) -> Option<Vec<Polyhedron>> {
    let res = clip_by_plane(p, plane).ok()?;
    let children: Vec<Polyhedron> = res.negative.into_iter().chain(res.positive).collect();
    validity_check(p, &children, tol).then_some(children)
}

/// Outcome of a successful perturbed cut.
#[derive(Debug, Clone)]
pub struct EmergencyCut {
    pub plane: CuttingPlane,
    pub children: Vec<Polyhedron>,
    /// Perturbations tried, including the successful one.
    pub attempts: usize,
}

fn random_unit(rng: &mut impl Rng) -> Point3 {
    loop {
        let v = Point3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Tries up to `attempts` perturbations of `plane`: origin moved by up to 2%
/// of the diameter along the normal, normal tilted by up to 5 degrees.
pub fn emergency_strategy(
    p: &Polyhedron,
    plane: &CuttingPlane,
    tol: f64,
    attempts: usize,
    rng: &mut impl Rng,
) -> Result<EmergencyCut, RefineError> {
    let diam = p.diam();
    let max_tilt = 5f64.to_radians();
    for k in 1..=attempts {
        let shift = rng.gen_range(-0.02..=0.02) * diam;
        let axis = Unit::new_normalize(random_unit(rng));
        let tilt = rng.gen_range(0.0..=max_tilt);
        let normal = Rotation3::from_axis_angle(&axis, tilt) * plane.normal();
        let Ok(candidate) = CuttingPlane::new(plane.origin() + plane.normal() * shift, normal) else {
            continue;
        };
        if let Some(children) = try_cut(p, &candidate, tol) {
            return Ok(EmergencyCut {
                plane: candidate,
                children,
                attempts: k,
            });
        }
    }
    Err(RefineError::Unrefinable {
        id: p.id(),
        reason: format!("no valid cut after {attempts} perturbations"),
    })
}

/// Plane through the midpoint of the diameter-attaining vertex pair,
/// orthogonal to it.
pub fn diameter_plane(p: &Polyhedron) -> Result<CuttingPlane, RefineError> {
    let d = p.diameter().map_err(|e| RefineError::Unrefinable {
        id: p.id(),
        reason: e.to_string(),
    })?;
    let (a, b) = (p.vertices()[d.pair.0], p.vertices()[d.pair.1]);
    CuttingPlane::new((a + b) * 0.5, b - a).map_err(|e| RefineError::Unrefinable {
        id: p.id(),
        reason: e.to_string(),
    })
}

/// Simplified hull of a few far-apart vertices of an element, used to place
/// the planes of a shape pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceShape {
    pub shape: Shape,
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
    pub quads: Vec<[usize; 4]>,
}

/// Farthest-first traversal: starts at the vertex farthest from the
/// centroid, then repeatedly adds the vertex farthest from the chosen set and
/// the centroid. Ties go to the lowest index.
fn farthest_first(points: &[Point3], centroid: Point3, n: usize) -> Vec<usize> {
    let mut dist: Vec<f64> = points.iter().map(|q| (q - centroid).norm()).collect();
    let mut chosen = Vec::with_capacity(n);
    while chosen.len() < n.min(points.len()) {
        let mut best = usize::MAX;
        for i in 0..points.len() {
            if !chosen.contains(&i) && (best == usize::MAX || dist[i] > dist[best]) {
                best = i;
            }
        }
        chosen.push(best);
        for (i, q) in points.iter().enumerate() {
            dist[i] = dist[i].min((q - points[best]).norm());
        }
    }
    chosen
}

fn unit_normal(pts: &[Point3]) -> Point3 {
    let mut a = Point3::zeros();
    for k in 0..pts.len() {
        a += pts[k].cross(&pts[(k + 1) % pts.len()]);
    }
    a.try_normalize(0.0).unwrap_or(a)
}

fn mean(pts: impl IntoIterator<Item = Point3>) -> Point3 {
    let mut s = Point3::zeros();
    let mut n = 0;
    for q in pts {
        s += q;
        n += 1;
    }
    s / n.max(1) as f64
}

/// Reference shape of `p` for `shape`: the hull of the farthest-first
/// vertices, with the most nearly coplanar neighbouring triangle pairs merged
/// into quadrilaterals.
pub fn reference_shape(p: &Polyhedron, shape: Shape) -> Result<ReferenceShape, RefineError> {
    let degenerate = |msg: String| RefineError::Reference(msg);
    let n = shape.num_vertices();
    if p.num_vertices() < n {
        return Err(degenerate(format!("{} vertices, {n} needed", p.num_vertices())));
    }
    let centroid = p.centroid().map_err(|e| degenerate(e.to_string()))?;
    let picks: Vec<Point3> = farthest_first(p.vertices(), centroid, n)
        .into_iter()
        .map(|i| p.vertices()[i])
        .collect();
    let hull = convex_hull(&picks).map_err(|e| degenerate(e.to_string()))?;
    if hull.num_vertices() != n || hull.num_faces() != 2 * n - 4 {
        return Err(degenerate(format!(
            "hull of the picked vertices has {} vertices",
            hull.num_vertices()
        )));
    }
    let tris: Vec<[usize; 3]> = hull.faces().iter().map(|f| [f[0], f[1], f[2]]).collect();
    let verts = hull.vertices().to_vec();
    let normals: Vec<Point3> = tris.iter().map(|t| unit_normal(&t.map(|i| verts[i]))).collect();

    // Neighbouring pairs as (score, t1, t2, shared directed edge of t1).
    let mut pairs = Vec::new();
    for (i, a) in tris.iter().enumerate() {
        for k in 0..3 {
            let (u, v) = (a[k], a[(k + 1) % 3]);
            for (j, b) in tris.iter().enumerate().skip(i + 1) {
                if (0..3).any(|m| b[m] == v && b[(m + 1) % 3] == u) {
                    pairs.push((normals[i].dot(&normals[j]), i, j, k));
                }
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut used = vec![false; tris.len()];
    let mut quads = Vec::new();
    for &(_, i, j, k) in &pairs {
        if quads.len() == shape.num_quads() {
            break;
        }
        if used[i] || used[j] {
            continue;
        }
        used[i] = true;
        used[j] = true;
        let (a, b, c) = (tris[i][k], tris[i][(k + 1) % 3], tris[i][(k + 2) % 3]);
        let d = *tris[j].iter().find(|&&x| x != a && x != b).expect("triangle pair");
        quads.push([a, d, b, c]);
    }
    if quads.len() != shape.num_quads() {
        return Err(degenerate("not enough neighbouring triangle pairs".into()));
    }
    let triangles = (0..tris.len()).filter(|&i| !used[i]).map(|i| tris[i]).collect();
    Ok(ReferenceShape {
        shape,
        vertices: verts,
        triangles,
        quads,
    })
}

/// Cutting planes of the shape pattern, in application order.
///
/// Cube: three planes between opposite quadrilaterals. Prism: the plane
/// between the two triangles, then three planes parallel to the axis through
/// pairs of mid-section edge midpoints. Tetrahedron: four corner planes
/// through edge midpoints, then one plane through the two shortest
/// diagonals of the central octahedron.
pub fn classical_planes(r: &ReferenceShape) -> Vec<CuttingPlane> {
    let v = &r.vertices;
    let quad_pts = |q: &[usize; 4]| q.map(|i| v[i]);
    let tri_pts = |t: &[usize; 3]| t.map(|i| v[i]);
    let mut planes = Vec::new();
    match r.shape {
        Shape::Cube => {
            let normals: Vec<Point3> = r.quads.iter().map(|q| unit_normal(&quad_pts(q))).collect();
            let centers: Vec<Point3> = r.quads.iter().map(|q| mean(quad_pts(q))).collect();
            let mut pairs = Vec::new();
            for i in 0..r.quads.len() {
                for j in i + 1..r.quads.len() {
                    pairs.push((normals[i].dot(&normals[j]), i, j));
                }
            }
            pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
            let mut used = vec![false; r.quads.len()];
            for (_, i, j) in pairs {
                if used[i] || used[j] {
                    continue;
                }
                used[i] = true;
                used[j] = true;
                if let Ok(pl) = CuttingPlane::new((centers[i] + centers[j]) * 0.5, normals[i] - normals[j]) {
                    planes.push(pl);
                }
            }
        }
        Shape::Prism => {
            let [ta, tb] = [r.triangles[0], r.triangles[1]];
            let (a, b) = (tri_pts(&ta), tri_pts(&tb));
            let (ca, cb) = (mean(a), mean(b));
            let axis = cb - ca;
            if let Ok(pl) = CuttingPlane::new((ca + cb) * 0.5, unit_normal(&a) - unit_normal(&b)) {
                planes.push(pl);
            }
            let mid: Vec<Point3> = a
                .iter()
                .map(|&ai| {
                    let partner = b
                        .iter()
                        .min_by(|x, y| (*x - ai - axis).norm().total_cmp(&(*y - ai - axis).norm()))
                        .expect("triangle");
                    (ai + partner) * 0.5
                })
                .collect();
            for i in 0..3 {
                let m1 = (mid[i] + mid[(i + 1) % 3]) * 0.5;
                let m2 = (mid[i] + mid[(i + 2) % 3]) * 0.5;
                let n = (m2 - m1).cross(&axis);
                let n = if (mid[i] - m1).dot(&n) < 0.0 { -n } else { n };
                if let Ok(pl) = CuttingPlane::new(m1, n) {
                    planes.push(pl);
                }
            }
        }
        Shape::Tetrahedron => {
            let m = |i: usize, j: usize| (v[i] + v[j]) * 0.5;
            for i in 0..4 {
                let o: Vec<usize> = (0..4).filter(|&j| j != i).collect();
                if let Some(pl) = CuttingPlane::through_points(m(i, o[0]), m(i, o[1]), m(i, o[2]), v[i] - mean(v.iter().copied())) {
                    planes.push(pl);
                }
            }
            let mut diagonals: Vec<(f64, Point3)> = [((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))]
                .iter()
                .map(|&((a, b), (c, d))| {
                    let dir = m(a, b) - m(c, d);
                    (dir.norm(), dir)
                })
                .collect();
            diagonals.sort_by(|x, y| x.0.total_cmp(&y.0));
            if let Ok(pl) = CuttingPlane::new(mean(v.iter().copied()), diagonals[0].1.cross(&diagonals[1].1)) {
                planes.push(pl);
            }
        }
    }
    planes
}

/// Children of one element and how they were obtained.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub children: Vec<Polyhedron>,
    /// Classifier output, for the cnn strategy.
    pub label: Option<Label>,
    /// Plane source actually used ("kmeans", "classical:cube", ...).
    pub method: String,
    pub cuts: usize,
    pub emergency_attempts: usize,
    /// Planes that could not be applied even after perturbation.
    pub failed_cuts: usize,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Plane sources inside one element refinement.
enum Planes {
    Pattern(Vec<CuttingPlane>),
    Diameter,
    KMeans,
}

/// Refines elements with a fixed configuration and optional classifier.
#[derive(Debug, Clone, Copy)]
pub struct Refiner<'a> {
    cfg: RefineConfig,
    model: Option<&'a CnnModel>,
}

impl<'a> Refiner<'a> {
    pub fn new(cfg: RefineConfig, model: Option<&'a CnnModel>) -> Result<Self, RefineError> {
        cfg.validate()?;
        if cfg.strategy == Strategy::Cnn && model.is_none() {
            return Err(RefineError::MissingModel);
        }
        Ok(Self { cfg, model })
    }

    pub fn config(&self) -> &RefineConfig {
        &self.cfg
    }

    /// Splits `p` into at most `nmax` children. Fails only when not a
    /// single valid cut could be made.
    pub fn refine_element(&self, p: &Polyhedron) -> Result<Refinement, RefineError> {
        let (planes, label, method) = match self.cfg.strategy {
            Strategy::Diameter => (Planes::Diameter, None, "diameter".to_string()),
            Strategy::KMeans => (Planes::KMeans, None, "kmeans".to_string()),
            Strategy::Classical(shape) => self.pattern_or_kmeans(p, shape, None),
            Strategy::Cnn => {
                let model = self.model.ok_or(RefineError::MissingModel)?;
                match voxelize(p) {
                    Ok(img) => {
                        let label = model.predict(&img);
                        match Shape::from_label(label) {
                            Some(shape) => self.pattern_or_kmeans(p, shape, Some(label)),
                            None => (Planes::KMeans, Some(label), "kmeans".to_string()),
                        }
                    }
                    Err(_) => (Planes::KMeans, None, "kmeans".to_string()),
                }
            }
        };
        let mut method = method;
        let mut out = match planes {
            Planes::Pattern(list) => {
                let out = self.run_pattern(p, &list)?;
                let largest = out.children.iter().map(|c| c.diam()).fold(0.0, f64::max);
                if label.is_some() && largest > self.cfg.pattern_max_ratio * p.diam() {
                    log::debug!("element {}: {method} left a child of {:.3} diam; using k-means", p.id(), largest / p.diam());
                    method = "kmeans".to_string();
                    self.run_worklist(p, &Planes::KMeans)?
                } else {
                    out
                }
            }
            other => self.run_worklist(p, &other)?,
        };
        out.label = label;
        out.method = method;
        Ok(out)
    }

    fn pattern_or_kmeans(&self, p: &Polyhedron, shape: Shape, label: Option<Label>) -> (Planes, Option<Label>, String) {
        match reference_shape(p, shape) {
            Ok(r) => (
                Planes::Pattern(classical_planes(&r)),
                label,
                Strategy::Classical(shape).name(),
            ),
            Err(e) => {
                log::debug!("element {}: {e}; using k-means", p.id());
                (Planes::KMeans, label, "kmeans".to_string())
            }
        }
    }

    fn rng_for(&self, id: ElementId, cut: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix(self.cfg.rng_seed ^ splitmix(id) ^ splitmix(cut as u64).rotate_left(17)))
    }

    /// Snaps, cuts and validates, perturbing on failure. Returns the children
    /// and the number of perturbations used.
    fn cut(&self, piece: &Polyhedron, plane: &CuttingPlane, tol: f64, rng: &mut ChaCha8Rng) -> Option<(Vec<Polyhedron>, usize)> {
        let snapped = snap_plane(plane, piece, tol);
        if let Some(children) = try_cut(piece, &snapped, tol) {
            return Some((children, 0));
        }
        emergency_strategy(piece, &snapped, tol, self.cfg.emergency_attempts, rng)
            .ok()
            .map(|e| (e.children, e.attempts))
    }

    fn too_small(&self, piece: &Polyhedron, target: f64) -> bool {
        piece.diam() <= target * (1.0 + 1e-9)
    }

    /// Cuts pieces first in, first out until none is larger than the target
    /// or the child budget is spent.
    fn run_worklist(&self, p: &Polyhedron, source: &Planes) -> Result<Refinement, RefineError> {
        let diam = p.diam();
        let (tol, target) = (self.cfg.tol * diam, self.cfg.target_h * diam);
        let mut queue = VecDeque::from([p.clone()]);
        let mut done = Vec::new();
        let mut out = Refinement {
            children: Vec::new(),
            label: None,
            method: String::new(),
            cuts: 0,
            emergency_attempts: 0,
            failed_cuts: 0,
        };
        let mut count = 1;
        while let Some(piece) = queue.pop_front() {
            if count >= self.cfg.nmax || self.too_small(&piece, target) {
                done.push(piece);
                continue;
            }
            let seq = out.cuts + out.failed_cuts;
            let plane = match source {
                Planes::KMeans => {
                    let km = KMeansConfig {
                        n_grid_points: self.cfg.kmeans_points,
                        max_iterations: 100,
                        rng_seed: splitmix(self.cfg.rng_seed ^ splitmix(p.id()) ^ seq as u64),
                        init: KMeansInit::Random,
                    };
                    match kmeans_cutting_plane(&piece, &km) {
                        Ok(pl) => Ok(pl),
                        Err(_) => diameter_plane(&piece),
                    }
                }
                _ => diameter_plane(&piece),
            };
            let mut rng = self.rng_for(p.id(), seq);
            let result = plane.ok().and_then(|pl| self.cut(&piece, &pl, tol, &mut rng));
            match result {
                Some((children, attempts)) if count - 1 + children.len() <= self.cfg.nmax => {
                    count += children.len() - 1;
                    out.cuts += 1;
                    out.emergency_attempts += attempts;
                    queue.extend(children);
                }
                _ => {
                    out.failed_cuts += 1;
                    done.push(piece);
                }
            }
        }
        self.finish(p, done, out)
    }

    /// Applies each pattern plane to every piece it strictly crosses.
    fn run_pattern(&self, p: &Polyhedron, planes: &[CuttingPlane]) -> Result<Refinement, RefineError> {
        let diam = p.diam();
        let (tol, target) = (self.cfg.tol * diam, self.cfg.target_h * diam);
        let mut pieces = vec![p.clone()];
        let mut out = Refinement {
            children: Vec::new(),
            label: None,
            method: String::new(),
            cuts: 0,
            emergency_attempts: 0,
            failed_cuts: 0,
        };
        for plane in planes {
            let mut next = Vec::with_capacity(pieces.len() * 2);
            let mut count = pieces.len();
            for piece in pieces {
                let crosses = {
                    let d: Vec<f64> = piece.vertices().iter().map(|v| plane.signed_distance(v)).collect();
                    d.iter().any(|&x| x < -tol) && d.iter().any(|&x| x > tol)
                };
                if !crosses || count >= self.cfg.nmax || self.too_small(&piece, target) {
                    next.push(piece);
                    continue;
                }
                let mut rng = self.rng_for(p.id(), out.cuts + out.failed_cuts);
                match self.cut(&piece, plane, tol, &mut rng) {
                    Some((children, attempts)) if count - 1 + children.len() <= self.cfg.nmax => {
                        count += children.len() - 1;
                        out.cuts += 1;
                        out.emergency_attempts += attempts;
                        next.extend(children);
                    }
                    _ => {
                        out.failed_cuts += 1;
                        next.push(piece);
                    }
                }
            }
            pieces = next;
        }
        if pieces.len() == 1 {
            // Nothing of the pattern applied; fall back to a diameter cut so
            // the element is still split.
            return self.run_worklist(p, &Planes::Diameter);
        }
        self.finish(p, pieces, out)
    }

    fn finish(&self, p: &Polyhedron, children: Vec<Polyhedron>, mut out: Refinement) -> Result<Refinement, RefineError> {
        if children.len() < 2 {
            return Err(RefineError::Unrefinable {
                id: p.id(),
                reason: format!("{} cut attempts failed", out.failed_cuts),
            });
        }
        out.children = children;
        Ok(out)
    }
}

/// Scalar target fields for adaptive refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    /// `(1 - exp(-10x))(x - 1) sin(πy) sin(πz)`, steep near `x = 0`.
    BoundaryLayer,
}

impl Field {
    pub fn eval(self, q: &Point3) -> f64 {
        use std::f64::consts::PI;
        match self {
            Field::BoundaryLayer => (1.0 - (-10.0 * q.x).exp()) * (q.x - 1.0) * (PI * q.y).sin() * (PI * q.z).sin(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::BoundaryLayer => "boundary_layer",
        }
    }
}

impl FromStr for Field {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "boundary_layer" => Ok(Field::BoundaryLayer),
            _ => Err(format!("unknown field '{s}', expected boundary_layer")),
        }
    }
}

/// `sqrt(vol · variance)` of `field` over a 5³ interior lattice (the
/// vertices when no lattice point falls inside).
pub fn error_indicator(p: &Polyhedron, field: impl Fn(&Point3) -> f64) -> f64 {
    let samples = interior_grid_points(p, 125).unwrap_or_else(|_| p.vertices().to_vec());
    let values: Vec<f64> = samples.iter().map(&field).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n;
    (p.volume().unwrap_or(0.0) * var).sqrt()
}

/// One line of the refinement log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub element_id: ElementId,
    pub strategy: String,
    pub method: String,
    pub label: Option<Label>,
    pub children: usize,
    pub emergency_attempts: usize,
    pub wall_time: Duration,
}

/// Summary of one refinement step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: usize,
    pub marked: usize,
    pub unrefinable: usize,
    pub elements_before: usize,
    /// Counts after the step; timing accumulated over all steps so far.
    pub stats: ComplexityStats,
    pub log: Vec<LogRecord>,
}

/// Refines the elements `ids` in parallel and commits the children in id
/// order.
fn refine_marked(
    mesh: &mut Mesh,
    refiner: &Refiner<'_>,
    ids: &[ElementId],
    step: usize,
    timer: &mut RefineTimer,
) -> Result<StepReport, RefineError> {
    let elements_before = mesh.len();
    let results: Vec<(ElementId, Result<Refinement, RefineError>, Duration)> = ids
        .par_iter()
        .map(|&id| {
            let p = mesh.get(id).expect("marked element exists");
            let t = Instant::now();
            let r = refiner.refine_element(p);
            (id, r, t.elapsed())
        })
        .collect();
    let strategy = refiner.cfg.strategy.name();
    let mut log = Vec::with_capacity(results.len());
    let mut unrefinable = 0;
    for (id, r, elapsed) in results {
        match r {
            Ok(r) => {
                timer.record(&r.method, elapsed);
                log.push(LogRecord {
                    step,
                    element_id: id,
                    strategy: strategy.clone(),
                    method: r.method,
                    label: r.label,
                    children: r.children.len(),
                    emergency_attempts: r.emergency_attempts,
                    wall_time: elapsed,
                });
                mesh.replace_element(id, r.children)?;
            }
            Err(RefineError::Unrefinable { reason, .. }) => {
                log::warn!("step {step}: element {id} left intact: {reason}");
                unrefinable += 1;
                timer.record("unrefinable", elapsed);
                log.push(LogRecord {
                    step,
                    element_id: id,
                    strategy: strategy.clone(),
                    method: "none".into(),
                    label: None,
                    children: 1,
                    emergency_attempts: refiner.cfg.emergency_attempts,
                    wall_time: elapsed,
                });
            }
            Err(e) => return Err(e),
        }
    }
    mesh.advance_generation();
    Ok(StepReport {
        step,
        marked: ids.len(),
        unrefinable,
        elements_before,
        stats: mesh.complexity_stats(timer),
        log,
    })
}

/// Refines every element, `steps` times.
pub fn uniform_refine(mesh: &mut Mesh, refiner: &Refiner<'_>, steps: usize) -> Result<Vec<StepReport>, RefineError> {
    let mut timer = RefineTimer::default();
    (1..=steps)
        .map(|step| {
            let ids = mesh.ids();
            refine_marked(mesh, refiner, &ids, step, &mut timer)
        })
        .collect()
}

/// Number of elements marked out of `n` for fraction `r`, `ceil(r·n)`.
pub fn marked_count(r: f64, n: usize) -> usize {
    // The small offset keeps exact products such as 0.4·40 from rounding up.
    ((r * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Each step refines the `ceil(r·N)` elements with the largest error
/// indicator; ties go to the lower id.
pub fn adaptive_refine(
    mesh: &mut Mesh,
    refiner: &Refiner<'_>,
    field: Field,
    r: f64,
    steps: usize,
) -> Result<Vec<StepReport>, RefineError> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(RefineError::Config(format!("refinement fraction must be in (0, 1], got {r}")));
    }
    let mut timer = RefineTimer::default();
    (1..=steps)
        .map(|step| {
            let mut scored: Vec<(f64, ElementId)> = mesh
                .ids()
                .par_iter()
                .map(|&id| (error_indicator(mesh.get(id).expect("id"), |q| field.eval(q)), id))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut ids: Vec<ElementId> = scored[..marked_count(r, scored.len())].iter().map(|s| s.1).collect();
            ids.sort_unstable();
            refine_marked(mesh, refiner, &ids, step, &mut timer)
        })
        .collect()
}
