//! Polyhedron representation, predicates and constructions.
//!
//! A [`Polyhedron`] is a closed surface given by a vertex array and faces stored
//! as vertex-index loops, counter-clockwise when seen from outside. Every other
//! module of the crate works on this type.

mod clip;
mod containment;
mod hull;
mod inscribed;
pub mod shapes;
mod topology;

use nalgebra::Vector3;
use thiserror::Error;

pub use clip::{clip_by_plane, ClipResult};
pub use containment::{contains_point, PointLocator};
pub use hull::{convex_hull, convex_polyhedron, merge_coplanar_faces};
pub use inscribed::inscribed_radius;
pub use topology::{chain_loops, Topology};

/// Point or vector in R³.
pub type Point3 = Vector3<f64>;

/// Element identifier, unique within a mesh for its whole lifetime.
pub type ElementId = u64;

/// Relative width of the band in which a vertex counts as lying on a plane.
pub const PLANE_BAND: f64 = 1e-12;

/// Angle below which two adjacent faces are considered coplanar.
pub const COPLANAR_ANGLE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("degenerate element: {0}")]
    Degenerate(String),
    #[error("inconsistent face orientation")]
    Orientation,
    #[error("plane does not cut the element interior")]
    NoCut,
    #[error("degenerate hull: input points are coplanar or collinear")]
    DegenerateHull,
}

/// Plane given by a point and a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CuttingPlane {
    origin: Point3,
    normal: Point3,
}

impl CuttingPlane {
    /// Builds a plane, normalizing `normal`.
    pub fn new(origin: Point3, normal: Point3) -> Result<Self, GeometryError> {
        let len = normal.norm();
        if !len.is_finite() || len < 1e-300 || !origin.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::Malformed(format!(
                "invalid plane origin {origin:?} normal {normal:?}"
            )));
        }
        Ok(Self {
            origin,
            normal: normal / len,
        })
    }

    /// Plane through three points, oriented so that its normal has a
    /// non-negative component along `hint`.
    pub fn through_points(a: Point3, b: Point3, c: Point3, hint: Point3) -> Option<Self> {
        let n = (b - a).cross(&(c - a));
        let scale = (b - a).norm().max((c - a).norm()).max(1e-300);
        if n.norm() <= 1e-12 * scale * scale {
            return None;
        }
        let n = if n.dot(&hint) < 0.0 { -n } else { n };
        let centroid = (a + b + c) / 3.0;
        Self::new(centroid, n).ok()
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn normal(&self) -> Point3 {
        self.normal
    }

    pub fn signed_distance(&self, p: &Point3) -> f64 {
        (p - self.origin).dot(&self.normal)
    }

    pub fn flipped(&self) -> Self {
        Self {
            origin: self.origin,
            normal: -self.normal,
        }
    }

    /// Orthonormal basis `(u, w)` of the plane with `u × w = normal`.
    pub fn basis(&self) -> (Point3, Point3) {
        plane_basis(&self.normal)
    }
}

pub(crate) fn plane_basis(n: &Point3) -> (Point3, Point3) {
    let helper = if n.x.abs() < 0.6 {
        Point3::x()
    } else if n.y.abs() < 0.6 {
        Point3::y()
    } else {
        Point3::z()
    };
    let u = n.cross(&helper).normalize();
    let w = n.cross(&u);
    (u, w)
}

/// Vertices attaining the diameter of a polyhedron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diameter {
    pub length: f64,
    pub pair: (usize, usize),
}

/// Closed polyhedral element.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyhedron {
    vertices: Vec<Point3>,
    faces: Vec<Vec<usize>>,
    id: ElementId,
}

impl Polyhedron {
    /// Builds a polyhedron after checking the face loops are well formed.
    ///
    /// Watertightness, orientation and the Euler characteristic are not
    /// checked here; see [`Polyhedron::check_invariants`].
    pub fn new(vertices: Vec<Point3>, faces: Vec<Vec<usize>>) -> Result<Self, GeometryError> {
        if let Some(v) = vertices.iter().find(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::Malformed(format!("non-finite vertex {v:?}")));
        }
        if faces.is_empty() {
            return Err(GeometryError::Malformed("no faces".into()));
        }
        for (fi, face) in faces.iter().enumerate() {
            if face.len() < 3 {
                return Err(GeometryError::Malformed(format!(
                    "face {fi} has fewer than 3 vertices"
                )));
            }
            if let Some(&bad) = face.iter().find(|&&i| i >= vertices.len()) {
                return Err(GeometryError::Malformed(format!(
                    "face {fi} references missing vertex {bad}"
                )));
            }
            for k in 0..face.len() {
                if face[k] == face[(k + 1) % face.len()] {
                    return Err(GeometryError::Malformed(format!(
                        "face {fi} repeats vertex {} consecutively",
                        face[k]
                    )));
                }
            }
            let mut distinct = face.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 3 {
                return Err(GeometryError::Malformed(format!(
                    "face {fi} has fewer than 3 distinct vertices"
                )));
            }
        }
        Ok(Self {
            vertices,
            faces,
            id: 0,
        })
    }

    pub(crate) fn from_parts_unchecked(vertices: Vec<Point3>, faces: Vec<Vec<usize>>) -> Self {
        Self {
            vertices,
            faces,
            id: 0,
        }
    }

    pub fn with_id(mut self, id: ElementId) -> Self {
        self.id = id;
        self
    }

    pub fn id(&self) -> ElementId {
        self.id
    }

    pub fn set_id(&mut self, id: ElementId) {
        self.id = id;
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[Vec<usize>] {
        &self.faces
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Undirected edges as sorted index pairs, in first-seen order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for face in &self.faces {
            for k in 0..face.len() {
                let a = face[k];
                let b = face[(k + 1) % face.len()];
                let key = (a.min(b), a.max(b));
                if seen.insert(key) {
                    out.push(key);
                }
            }
        }
        out
    }

    /// Applies `f` to every vertex. `f` must preserve orientation.
    pub fn map_vertices(&self, f: impl Fn(&Point3) -> Point3) -> Self {
        Self {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
            id: self.id,
        }
    }

    pub fn translated(&self, t: Point3) -> Self {
        self.map_vertices(|v| v + t)
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map_vertices(|v| v * s)
    }

    /// Reverses all face loops; used after an orientation-reversing map.
    pub fn with_reversed_faces(mut self) -> Self {
        for f in &mut self.faces {
            f.reverse();
        }
        self
    }

    /// Largest vertex-to-vertex distance; ties go to the lexicographically
    /// smallest index pair.
    pub fn diameter(&self) -> Result<Diameter, GeometryError> {
        if self.vertices.len() < 2 {
            return Err(GeometryError::Malformed(
                "diameter needs at least two vertices".into(),
            ));
        }
        let mut best = Diameter {
            length: -1.0,
            pair: (0, 1),
        };
        let mut best_sq = -1.0;
        for i in 0..self.vertices.len() {
            for j in (i + 1)..self.vertices.len() {
                let d = (self.vertices[i] - self.vertices[j]).norm_squared();
                if d > best_sq {
                    best_sq = d;
                    best.pair = (i, j);
                }
            }
        }
        best.length = best_sq.sqrt();
        Ok(best)
    }

    /// Diameter length, `0` for fewer than two vertices.
    pub fn diam(&self) -> f64 {
        self.diameter().map(|d| d.length).unwrap_or(0.0)
    }

    pub fn bounding_box(&self) -> (Point3, Point3) {
        let mut lo = Point3::repeat(f64::INFINITY);
        let mut hi = Point3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Area vector (Newell) of a face: normal direction times area.
    pub fn face_area_vector(&self, face: usize) -> Point3 {
        polygon_area_vector(self.faces[face].iter().map(|&i| self.vertices[i]))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        self.face_area_vector(face).norm()
    }

    /// Unit outward normal of a face, `None` for a zero-area face.
    pub fn face_normal(&self, face: usize) -> Option<Point3> {
        let a = self.face_area_vector(face);
        let n = a.norm();
        (n > 0.0).then(|| a / n)
    }

    /// Mean of the face vertices (not the area centroid).
    pub fn face_center(&self, face: usize) -> Point3 {
        let f = &self.faces[face];
        f.iter().map(|&i| self.vertices[i]).sum::<Point3>() / f.len() as f64
    }

    /// Signed volume by the divergence theorem over fan-triangulated faces.
    pub fn signed_volume(&self) -> f64 {
        let o = self.vertices.first().copied().unwrap_or_else(Point3::zeros);
        let mut vol = 0.0;
        for face in &self.faces {
            let a = self.vertices[face[0]] - o;
            for k in 1..face.len() - 1 {
                let b = self.vertices[face[k]] - o;
                let c = self.vertices[face[k + 1]] - o;
                vol += a.dot(&b.cross(&c));
            }
        }
        vol / 6.0
    }

    /// Volume; fails when face orientations are inconsistent or inverted.
    pub fn volume(&self) -> Result<f64, GeometryError> {
        if !self.topology().oriented {
            return Err(GeometryError::Orientation);
        }
        let v = self.signed_volume();
        if v < 0.0 {
            return Err(GeometryError::Orientation);
        }
        Ok(v)
    }

    /// Center of mass by signed-tetrahedron decomposition.
    pub fn centroid(&self) -> Result<Point3, GeometryError> {
        let o = self.vertices.first().copied().unwrap_or_else(Point3::zeros);
        let mut vol = 0.0;
        let mut moment = Point3::zeros();
        for face in &self.faces {
            let a = self.vertices[face[0]] - o;
            for k in 1..face.len() - 1 {
                let b = self.vertices[face[k]] - o;
                let c = self.vertices[face[k + 1]] - o;
                let v = a.dot(&b.cross(&c));
                vol += v;
                moment += (a + b + c) * v;
            }
        }
        let scale = self.diam().max(1e-300);
        if vol.abs() <= 1e-14 * scale.powi(3) {
            return Err(GeometryError::Degenerate("zero volume".into()));
        }
        Ok(o + moment / (4.0 * vol))
    }

    /// True when every vertex lies behind (or within `rel_eps·diam` of) every
    /// face plane.
    pub fn is_convex(&self) -> bool {
        let eps = 1e-9 * self.diam();
        (0..self.faces.len()).all(|f| {
            let Some(n) = self.face_normal(f) else {
                return true;
            };
            let c = self.face_center(f);
            self.vertices.iter().all(|v| (v - c).dot(&n) <= eps)
        })
    }

    /// Checks every edge length is at least `threshold` and every face area
    /// at least `threshold²`.
    pub fn small_feature_check(&self, threshold: f64) -> bool {
        self.edges()
            .iter()
            .all(|&(a, b)| (self.vertices[a] - self.vertices[b]).norm() >= threshold)
            && (0..self.faces.len()).all(|f| self.face_area(f) >= threshold * threshold)
    }

    pub fn inscribed_radius(&self) -> Result<f64, GeometryError> {
        inscribed_radius(self)
    }

    pub fn contains(&self, q: &Point3) -> bool {
        contains_point(self, q)
    }

    pub fn topology(&self) -> Topology {
        Topology::of(self)
    }

    /// Watertight, consistently oriented, single genus-0 component with
    /// positive volume.
    pub fn check_invariants(&self) -> Result<(), GeometryError> {
        let t = self.topology();
        if !t.watertight {
            return Err(GeometryError::Degenerate("surface is not watertight".into()));
        }
        if !t.oriented {
            return Err(GeometryError::Orientation);
        }
        if t.components != 1 {
            return Err(GeometryError::Degenerate(format!(
                "{} surface components",
                t.components
            )));
        }
        if t.euler_characteristic() != 2 {
            return Err(GeometryError::Degenerate(format!(
                "Euler characteristic {} (holes)",
                t.euler_characteristic()
            )));
        }
        let v = self.signed_volume();
        if v <= 1e-14 * self.diam().powi(3) {
            return Err(GeometryError::Degenerate(format!("volume {v}")));
        }
        Ok(())
    }

    /// Drops unreferenced vertices, keeping the relative vertex order.
    pub fn compacted(&self) -> Self {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &i in f {
                used[i] = true;
            }
        }
        if used.iter().all(|&u| u) {
            return self.clone();
        }
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        for (i, v) in self.vertices.iter().enumerate() {
            if used[i] {
                remap[i] = vertices.len();
                vertices.push(*v);
            }
        }
        let faces = self
            .faces
            .iter()
            .map(|f| f.iter().map(|&i| remap[i]).collect())
            .collect();
        Self {
            vertices,
            faces,
            id: self.id,
        }
    }
}

/// Newell area vector of a closed polygon.
pub(crate) fn polygon_area_vector(points: impl Iterator<Item = Point3>) -> Point3 {
    let pts: Vec<Point3> = points.collect();
    let mut n = Point3::zeros();
    if pts.len() < 3 {
        return n;
    }
    let o = pts[0];
    for k in 1..pts.len() - 1 {
        n += (pts[k] - o).cross(&(pts[k + 1] - o));
    }
    n * 0.5
}
