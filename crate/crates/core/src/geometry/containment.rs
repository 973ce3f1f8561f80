//! Point-in-polyhedron queries.

use super::clip::point_in_polygon_2d;
use super::{plane_basis, Point3, Polyhedron};

/// Absolute distance within which a point on the boundary counts as inside.
const BOUNDARY_TOL: f64 = 1e-12;

struct FacePlane {
    normal: Point3,
    offset: f64,
    u: Point3,
    w: Point3,
    outline: Vec<(f64, f64)>,
    corners: Vec<Point3>,
}

impl FacePlane {
    fn distance_to(&self, q: &Point3) -> f64 {
        let h = self.normal.dot(q) - self.offset;
        let proj = (q.dot(&self.u), q.dot(&self.w));
        if point_in_polygon_2d(proj, &self.outline) {
            return h.abs();
        }
        edge_distance(q, &self.corners)
    }
}

fn edge_distance(q: &Point3, corners: &[Point3]) -> f64 {
    let n = corners.len();
    (0..n)
        .map(|k| segment_distance(q, &corners[k], &corners[(k + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

fn segment_distance(q: &Point3, a: &Point3, b: &Point3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((q - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (q - (a + ab * t)).norm()
}

/// Polyhedron prepared for repeated inside/outside and boundary-distance
/// queries.
pub struct PointLocator {
    faces: Vec<FacePlane>,
    convex: bool,
    lo: Point3,
    hi: Point3,
    tol: f64,
}

impl PointLocator {
    pub fn new(p: &Polyhedron) -> Self {
        let faces = (0..p.num_faces())
            .filter_map(|f| {
                let normal = p.face_normal(f)?;
                let (u, w) = plane_basis(&normal);
                let corners: Vec<Point3> = p.faces()[f].iter().map(|&i| p.vertices()[i]).collect();
                Some(FacePlane {
                    normal,
                    offset: normal.dot(&p.face_center(f)),
                    u,
                    w,
                    outline: corners.iter().map(|c| (c.dot(&u), c.dot(&w))).collect(),
                    corners,
                })
            })
            .collect();
        let (lo, hi) = p.bounding_box();
        Self {
            faces,
            convex: p.is_convex(),
            lo,
            hi,
            tol: BOUNDARY_TOL,
        }
    }

    /// Unsigned distance from `q` to the surface.
    pub fn boundary_distance(&self, q: &Point3) -> f64 {
        self.faces
            .iter()
            .map(|f| f.distance_to(q))
            .fold(f64::INFINITY, f64::min)
    }

    /// True when `q` is inside or within the boundary tolerance.
    pub fn contains(&self, q: &Point3) -> bool {
        let t = self.tol;
        if (0..3).any(|i| q[i] < self.lo[i] - t || q[i] > self.hi[i] + t) {
            return false;
        }
        if self.convex {
            return self
                .faces
                .iter()
                .all(|f| f.normal.dot(q) - f.offset <= t);
        }
        if self.boundary_distance(q) <= t {
            return true;
        }
        self.ray_parity(q)
    }

    fn ray_parity(&self, q: &Point3) -> bool {
        let scale = (self.hi - self.lo).norm().max(1e-300);
        let graze = 1e-9 * scale;
        for attempt in 0..64u32 {
            let d = ray_direction(attempt);
            let mut crossings = 0u32;
            let mut clean = true;
            for f in &self.faces {
                let denom = f.normal.dot(&d);
                let h = f.offset - f.normal.dot(q);
                if denom.abs() < 1e-9 {
                    if h.abs() <= graze {
                        clean = false;
                        break;
                    }
                    continue;
                }
                let t = h / denom;
                if t <= 0.0 {
                    continue;
                }
                let x = q + d * t;
                if edge_distance(&x, &f.corners) <= graze {
                    clean = false;
                    break;
                }
                if point_in_polygon_2d((x.dot(&f.u), x.dot(&f.w)), &f.outline) {
                    crossings += 1;
                }
            }
            if clean {
                return crossings % 2 == 1;
            }
        }
        false
    }
}

/// Deterministic sequence of well-spread, axis-avoiding unit directions.
fn ray_direction(k: u32) -> Point3 {
    let golden = 0.618_033_988_749_894_9;
    let a = (0.1234 + k as f64 * golden).fract();
    let b = (0.3779 + k as f64 * golden * golden).fract();
    let z = 1.0 - 2.0 * b;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = 2.0 * std::f64::consts::PI * a;
    Point3::new(r * phi.cos(), r * phi.sin(), z).normalize()
}

/// True when `q` is inside `p` or within 1e-12 of its boundary.
pub fn contains_point(p: &Polyhedron, q: &Point3) -> bool {
    PointLocator::new(p).contains(q)
}
