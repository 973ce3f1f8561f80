//! Splitting a polyhedron with a plane.
//!
//! Vertices within `PLANE_BAND·diam` of the plane count as lying on it, so a
//! cut never creates a vertex next to an existing one. Each side is closed
//! with section faces rebuilt from the unmatched half-edges, split into
//! connected components, and coplanar neighbouring faces are merged.
//! Section polygons with holes are joined into one loop by a bridge edge;
//! such a piece is not genus 0 and fails [`Polyhedron::check_invariants`]
//! when the hole goes through it.

use std::collections::HashMap;

use super::hull::merge_coplanar_faces;
use super::topology::{cancel_opposite, chain_loops, face_components};
use super::{polygon_area_vector, CuttingPlane, GeometryError, Point3, Polyhedron, PLANE_BAND};

/// Pieces on the negative (`signed_distance < 0`) and positive side.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipResult {
    pub negative: Vec<Polyhedron>,
    pub positive: Vec<Polyhedron>,
}

impl ClipResult {
    pub fn len(&self) -> usize {
        self.negative.len() + self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_pieces(self) -> Vec<Polyhedron> {
        let mut out = self.negative;
        out.extend(self.positive);
        out
    }
}

struct Workspace<'a> {
    plane: &'a CuttingPlane,
    vertices: Vec<Point3>,
    dist: Vec<f64>,
    on_plane: Vec<bool>,
    cuts: HashMap<(usize, usize), usize>,
}

impl Workspace<'_> {
    fn intersection(&mut self, a: usize, b: usize) -> usize {
        let key = (a.min(b), a.max(b));
        if let Some(&i) = self.cuts.get(&key) {
            return i;
        }
        let (lo, hi) = key;
        let t = self.dist[lo] / (self.dist[lo] - self.dist[hi]);
        let p = self.vertices[lo] + (self.vertices[hi] - self.vertices[lo]) * t;
        let idx = self.vertices.len();
        self.vertices.push(p);
        self.dist.push(0.0);
        self.on_plane.push(true);
        self.cuts.insert(key, idx);
        idx
    }
}

pub fn clip_by_plane(p: &Polyhedron, plane: &CuttingPlane) -> Result<ClipResult, GeometryError> {
    let diam = p.diameter()?.length;
    let band = PLANE_BAND * diam;
    let dist: Vec<f64> = p.vertices().iter().map(|v| plane.signed_distance(v)).collect();
    let sign: Vec<i8> = dist
        .iter()
        .map(|&d| if d.abs() <= band { 0 } else if d < 0.0 { -1 } else { 1 })
        .collect();
    if !sign.contains(&-1) || !sign.contains(&1) {
        return Err(GeometryError::NoCut);
    }

    let mut ws = Workspace {
        plane,
        vertices: p.vertices().to_vec(),
        on_plane: sign.iter().map(|&s| s == 0).collect(),
        dist,
        cuts: HashMap::new(),
    };
    let mut side_faces: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];

    for (fi, face) in p.faces().iter().enumerate() {
        if face.iter().all(|&i| sign[i] == 0) {
            let side = if p.face_area_vector(fi).dot(&plane.normal()) > 0.0 { 0 } else { 1 };
            side_faces[side].push(face.clone());
            continue;
        }
        let face_normal = p.face_area_vector(fi);
        for (side, s) in [(0usize, -1i8), (1, 1)] {
            let mut lp = Vec::with_capacity(face.len() + 2);
            for k in 0..face.len() {
                let a = face[k];
                let b = face[(k + 1) % face.len()];
                if sign[a] == 0 || sign[a] == s {
                    lp.push(a);
                }
                if sign[a] * sign[b] == -1 {
                    lp.push(ws.intersection(a, b));
                }
            }
            dedup_cyclic(&mut lp);
            if lp.len() < 3 || lp.iter().all(|&i| ws.on_plane[i]) {
                continue;
            }
            if lp.iter().filter(|&&i| ws.on_plane[i]).count() <= 2 {
                side_faces[side].push(lp);
            } else {
                side_faces[side].extend(resolve_loop(&lp, &ws, &face_normal));
            }
        }
    }

    let negative = close_side(&ws, std::mem::take(&mut side_faces[0]), plane.normal(), p.id());
    let positive = close_side(&ws, std::mem::take(&mut side_faces[1]), -plane.normal(), p.id());
    Ok(ClipResult { negative, positive })
}

fn dedup_cyclic(lp: &mut Vec<usize>) {
    lp.dedup();
    while lp.len() > 1 && lp.first() == lp.last() {
        lp.pop();
    }
}

/// Splits a clipped face loop whose on-plane stretches overlap (non-convex
/// faces) into simple loops.
fn resolve_loop(lp: &[usize], ws: &Workspace<'_>, face_normal: &Point3) -> Vec<Vec<usize>> {
    let dir = ws.plane.normal().cross(face_normal);
    let dir = if dir.norm() > 0.0 { dir.normalize() } else { dir };
    let param = |i: usize| (ws.vertices[i] - ws.plane.origin()).dot(&dir);
    let mut on_line: Vec<usize> = lp.iter().copied().filter(|&i| ws.on_plane[i]).collect();
    on_line.sort_unstable();
    on_line.dedup();

    let mut edges = Vec::new();
    for k in 0..lp.len() {
        let a = lp[k];
        let b = lp[(k + 1) % lp.len()];
        if ws.on_plane[a] && ws.on_plane[b] {
            let (ta, tb) = (param(a), param(b));
            let (lo, hi) = (ta.min(tb), ta.max(tb));
            let span = (hi - lo).max(1e-300);
            let mut inner: Vec<(f64, usize)> = on_line
                .iter()
                .copied()
                .filter(|&i| i != a && i != b)
                .map(|i| (param(i), i))
                .filter(|&(t, _)| t > lo + 1e-12 * span && t < hi - 1e-12 * span)
                .collect();
            inner.sort_by(|x, y| x.0.total_cmp(&y.0));
            if tb < ta {
                inner.reverse();
            }
            let mut prev = a;
            for (_, i) in inner {
                edges.push((prev, i));
                prev = i;
            }
            edges.push((prev, b));
        } else {
            edges.push((a, b));
        }
    }
    let remaining = cancel_opposite(&edges);
    let n = face_normal.normalize();
    chain_loops(&remaining, &ws.vertices, &n)
        .into_iter()
        .filter(|l| {
            let area = polygon_area_vector(l.iter().map(|&i| ws.vertices[i])).dot(&n);
            area > 0.0 && l.iter().any(|&i| !ws.on_plane[i])
        })
        .collect()
}

/// Closes the faces of one side with section faces and splits the result
/// into connected pieces.
fn close_side(ws: &Workspace<'_>, mut faces: Vec<Vec<usize>>, outward: Point3, id: u64) -> Vec<Polyhedron> {
    if faces.is_empty() {
        return Vec::new();
    }
    let directed: Vec<(usize, usize)> = faces
        .iter()
        .flat_map(|f| (0..f.len()).map(move |k| (f[k], f[(k + 1) % f.len()])))
        .collect();
    let section: Vec<(usize, usize)> = cancel_opposite(&directed)
        .into_iter()
        .map(|(a, b)| (b, a))
        .collect();
    if !section.is_empty() {
        faces.extend(section_faces(&section, &ws.vertices, &outward));
    }

    let labels = face_components(&faces);
    let n_comp = labels.iter().max().map_or(0, |m| m + 1);
    let mut pieces = Vec::with_capacity(n_comp);
    for c in 0..n_comp {
        let comp_faces: Vec<Vec<usize>> = faces
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == c)
            .map(|(f, _)| f.clone())
            .collect();
        let piece = Polyhedron::from_parts_unchecked(ws.vertices.clone(), comp_faces)
            .compacted()
            .with_id(id);
        pieces.push(merge_coplanar_faces(&piece));
    }
    pieces
}

/// Builds section faces on the cutting plane. Outer loops run
/// counter-clockwise about `outward`; holes are bridged into their
/// enclosing outer loop.
fn section_faces(edges: &[(usize, usize)], vertices: &[Point3], outward: &Point3) -> Vec<Vec<usize>> {
    let loops = chain_loops(edges, vertices, outward);
    let (u, w) = super::plane_basis(outward);
    let to2d = |i: usize| (vertices[i].dot(&u), vertices[i].dot(&w));
    let area = |l: &[usize]| polygon_area_vector(l.iter().map(|&i| vertices[i])).dot(outward);

    let mut outers: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut holes: Vec<Vec<usize>> = Vec::new();
    for l in loops {
        let a = area(&l);
        if a > 0.0 {
            outers.push((l, a));
        } else if a < 0.0 {
            holes.push(l);
        }
    }
    let mut assigned: Vec<Vec<Vec<usize>>> = vec![Vec::new(); outers.len()];
    let mut orphans = Vec::new();
    for h in holes {
        let (ax, ay) = to2d(h[0]);
        let (bx, by) = to2d(h[1]);
        let probe = ((ax + bx) / 2.0, (ay + by) / 2.0);
        let host = outers
            .iter()
            .enumerate()
            .filter(|(_, (o, _))| {
                let poly: Vec<(f64, f64)> = o.iter().map(|&i| to2d(i)).collect();
                point_in_polygon_2d(probe, &poly)
            })
            .min_by(|x, y| x.1 .1.total_cmp(&y.1 .1))
            .map(|(i, _)| i);
        match host {
            Some(i) => assigned[i].push(h),
            None => orphans.push(h),
        }
    }

    let mut out = Vec::with_capacity(outers.len() + orphans.len());
    for ((outer, _), hs) in outers.into_iter().zip(assigned) {
        let mut merged = outer;
        for h in hs {
            merged = bridge(&merged, &h, vertices);
        }
        out.push(merged);
    }
    out.extend(orphans);
    out
}

/// Joins `hole` into `outer` through the closest vertex pair.
fn bridge(outer: &[usize], hole: &[usize], vertices: &[Point3]) -> Vec<usize> {
    let mut best = (f64::INFINITY, 0, 0);
    for (i, &a) in outer.iter().enumerate() {
        for (j, &b) in hole.iter().enumerate() {
            let d = (vertices[a] - vertices[b]).norm_squared();
            if d < best.0 {
                best = (d, i, j);
            }
        }
    }
    let (_, i, j) = best;
    let mut out = Vec::with_capacity(outer.len() + hole.len() + 2);
    out.extend_from_slice(&outer[..=i]);
    out.extend(hole[j..].iter().chain(&hole[..j]));
    out.push(hole[j]);
    out.extend_from_slice(&outer[i..]);
    out
}

pub(crate) fn point_in_polygon_2d(q: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > q.1) != (yj > q.1) && q.0 < (xj - xi) * (q.1 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}
