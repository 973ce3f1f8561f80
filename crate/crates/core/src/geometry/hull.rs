//! Quickhull in 3D and coplanar face merging.

use std::collections::HashMap;

use super::topology::{cancel_opposite, chain_loops, cluster_faces};
use super::{GeometryError, Point3, Polyhedron, COPLANAR_ANGLE};

struct HullFace {
    v: [usize; 3],
    normal: Point3,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
}

impl HullFace {
    fn new(points: &[Point3], v: [usize; 3]) -> Self {
        let n = (points[v[1]] - points[v[0]]).cross(&(points[v[2]] - points[v[0]]));
        let normal = n.normalize();
        Self {
            v,
            normal,
            offset: normal.dot(&points[v[0]]),
            outside: Vec::new(),
            alive: true,
        }
    }

    fn distance(&self, p: &Point3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Triangulated convex hull with outward faces. Only hull vertices are kept,
/// in input order.
pub fn convex_hull(points: &[Point3]) -> Result<Polyhedron, GeometryError> {
    if points.len() < 4 {
        return Err(GeometryError::DegenerateHull);
    }
    let (lo, hi) = points.iter().fold(
        (Point3::repeat(f64::INFINITY), Point3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    );
    let scale = (hi - lo).norm();
    if !scale.is_finite() || scale == 0.0 {
        return Err(GeometryError::DegenerateHull);
    }
    let eps = 1e-12 * scale;

    // Initial simplex from extreme points.
    let i0 = (0..points.len())
        .min_by(|&a, &b| points[a].x.total_cmp(&points[b].x))
        .unwrap();
    let i1 = (0..points.len())
        .max_by(|&a, &b| {
            (points[a] - points[i0])
                .norm_squared()
                .total_cmp(&(points[b] - points[i0]).norm_squared())
        })
        .unwrap();
    let axis = (points[i1] - points[i0]).normalize();
    let line_dist = |p: &Point3| {
        let d = p - points[i0];
        (d - axis * d.dot(&axis)).norm()
    };
    let i2 = (0..points.len())
        .max_by(|&a, &b| line_dist(&points[a]).total_cmp(&line_dist(&points[b])))
        .unwrap();
    if line_dist(&points[i2]) <= 1e-9 * scale {
        return Err(GeometryError::DegenerateHull);
    }
    let n = (points[i1] - points[i0]).cross(&(points[i2] - points[i0])).normalize();
    let plane_dist = |p: &Point3| (p - points[i0]).dot(&n);
    let i3 = (0..points.len())
        .max_by(|&a, &b| plane_dist(&points[a]).abs().total_cmp(&plane_dist(&points[b]).abs()))
        .unwrap();
    if plane_dist(&points[i3]).abs() <= 1e-9 * scale {
        return Err(GeometryError::DegenerateHull);
    }

    let mut faces: Vec<HullFace> = Vec::new();
    let tris = if plane_dist(&points[i3]) < 0.0 {
        [[i0, i1, i2], [i0, i3, i1], [i1, i3, i2], [i2, i3, i0]]
    } else {
        [[i0, i2, i1], [i0, i1, i3], [i1, i2, i3], [i2, i0, i3]]
    };
    for t in tris {
        faces.push(HullFace::new(points, t));
    }
    let simplex = [i0, i1, i2, i3];
    for (pi, p) in points.iter().enumerate() {
        if simplex.contains(&pi) {
            continue;
        }
        if let Some(f) = faces.iter_mut().find(|f| f.distance(p) > eps) {
            f.outside.push(pi);
        }
    }

    loop {
        let Some(fi) = faces.iter().position(|f| f.alive && !f.outside.is_empty()) else {
            break;
        };
        let eye = *faces[fi]
            .outside
            .iter()
            .max_by(|&&a, &&b| faces[fi].distance(&points[a]).total_cmp(&faces[fi].distance(&points[b])))
            .unwrap();
        let visible: Vec<usize> = (0..faces.len())
            .filter(|&f| faces[f].alive && faces[f].distance(&points[eye]) > eps)
            .collect();
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for &f in &visible {
            let v = faces[f].v;
            for k in 0..3 {
                directed.insert((v[k], v[(k + 1) % 3]), f);
            }
        }
        let mut horizon: Vec<(usize, usize)> = Vec::new();
        for &f in &visible {
            let v = faces[f].v;
            for k in 0..3 {
                let (a, b) = (v[k], v[(k + 1) % 3]);
                if !directed.contains_key(&(b, a)) {
                    horizon.push((a, b));
                }
            }
        }
        let mut orphans = Vec::new();
        for &f in &visible {
            faces[f].alive = false;
            orphans.append(&mut faces[f].outside);
        }
        let first_new = faces.len();
        for (a, b) in horizon {
            faces.push(HullFace::new(points, [a, b, eye]));
        }
        for pi in orphans {
            if pi == eye {
                continue;
            }
            if let Some(f) = faces[first_new..]
                .iter_mut()
                .find(|f| f.distance(&points[pi]) > eps)
            {
                f.outside.push(pi);
            }
        }
    }

    let tri_faces: Vec<Vec<usize>> = faces.iter().filter(|f| f.alive).map(|f| f.v.to_vec()).collect();
    Ok(Polyhedron::from_parts_unchecked(points.to_vec(), tri_faces).compacted())
}

/// Convex hull with coplanar triangles merged into polygons.
pub fn convex_polyhedron(points: &[Point3]) -> Result<Polyhedron, GeometryError> {
    convex_hull(points).map(|h| merge_coplanar_faces(&h))
}

/// Merges edge-adjacent faces whose normals differ by less than
/// [`COPLANAR_ANGLE`] and drops vertices left in the middle of a straight
/// edge.
pub fn merge_coplanar_faces(p: &Polyhedron) -> Polyhedron {
    let normals: Vec<Option<Point3>> = (0..p.num_faces()).map(|f| p.face_normal(f)).collect();
    let cos_tol = COPLANAR_ANGLE.cos();
    let roots = cluster_faces(p.faces(), |a, b| match (normals[a], normals[b]) {
        (Some(na), Some(nb)) => na.dot(&nb) >= cos_tol,
        _ => false,
    });
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); p.num_faces()];
    for (f, &r) in roots.iter().enumerate() {
        members[r].push(f);
    }
    if members.iter().all(|m| m.len() <= 1) {
        return p.clone();
    }
    let mut faces = Vec::with_capacity(p.num_faces());
    for (f, &r) in roots.iter().enumerate() {
        let group = &members[r];
        if group.len() <= 1 {
            faces.push(p.faces()[f].clone());
            continue;
        }
        if group[0] != f {
            continue;
        }
        let edges: Vec<(usize, usize)> = group
            .iter()
            .flat_map(|&g| {
                let face = &p.faces()[g];
                (0..face.len()).map(move |k| (face[k], face[(k + 1) % face.len()]))
            })
            .collect();
        let normal = normals[f].unwrap();
        let loops = chain_loops(&cancel_opposite(&edges), p.vertices(), &normal);
        if loops.len() == 1 {
            faces.push(loops.into_iter().next().unwrap());
        } else {
            faces.extend(group.iter().map(|&g| p.faces()[g].clone()));
        }
    }
    let merged = Polyhedron::from_parts_unchecked(p.vertices().to_vec(), faces).with_id(p.id());
    remove_collinear_vertices(&merged).compacted()
}

/// Removes vertices shared by exactly two faces that sit on a straight line
/// between their neighbours in both.
fn remove_collinear_vertices(p: &Polyhedron) -> Polyhedron {
    let mut uses = vec![0usize; p.num_vertices()];
    for f in p.faces() {
        for &i in f {
            uses[i] += 1;
        }
    }
    let v = p.vertices();
    let straight = |a: usize, b: usize, c: usize| {
        let d1 = v[b] - v[a];
        let d2 = v[c] - v[b];
        let (l1, l2) = (d1.norm(), d2.norm());
        l1 > 0.0 && l2 > 0.0 && d1.cross(&d2).norm() <= 1e-12 * l1 * l2 && d1.dot(&d2) > 0.0
    };
    let mut removable = vec![true; p.num_vertices()];
    for f in p.faces() {
        for k in 0..f.len() {
            let b = f[k];
            let a = f[(k + f.len() - 1) % f.len()];
            let c = f[(k + 1) % f.len()];
            if uses[b] != 2 || !straight(a, b, c) {
                removable[b] = false;
            }
        }
    }
    for (i, &u) in uses.iter().enumerate() {
        if u != 2 {
            removable[i] = false;
        }
    }
    if !removable.iter().any(|&r| r) {
        return p.clone();
    }
    let faces: Vec<Vec<usize>> = p
        .faces()
        .iter()
        .map(|f| f.iter().copied().filter(|&i| !removable[i]).collect::<Vec<_>>())
        .collect();
    if faces.iter().any(|f| f.len() < 3) {
        return p.clone();
    }
    Polyhedron::from_parts_unchecked(p.vertices().to_vec(), faces).with_id(p.id())
}
