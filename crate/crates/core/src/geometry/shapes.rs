//! Constructors for the reference solids used by the grid generators, the
//! dataset and the tests.

use super::{Point3, Polyhedron};

/// Flips faces of a convex solid so that each normal points away from the
/// vertex average.
pub fn orient_outward(vertices: Vec<Point3>, mut faces: Vec<Vec<usize>>) -> Polyhedron {
    let center = vertices.iter().sum::<Point3>() / vertices.len() as f64;
    for f in &mut faces {
        let n = super::polygon_area_vector(f.iter().map(|&i| vertices[i]));
        let c = f.iter().map(|&i| vertices[i]).sum::<Point3>() / f.len() as f64;
        if n.dot(&(c - center)) < 0.0 {
            f.reverse();
        }
    }
    Polyhedron::from_parts_unchecked(vertices, faces)
}

/// Axis-aligned box `[lo, hi]`. Vertex `i` has coordinates selected by the
/// bits of the corner table below (bottom ring then top ring).
pub fn box_solid(lo: Point3, hi: Point3) -> Polyhedron {
    let v = |x: f64, y: f64, z: f64| Point3::new(x, y, z);
    let vertices = vec![
        v(lo.x, lo.y, lo.z),
        v(hi.x, lo.y, lo.z),
        v(hi.x, hi.y, lo.z),
        v(lo.x, hi.y, lo.z),
        v(lo.x, lo.y, hi.z),
        v(hi.x, lo.y, hi.z),
        v(hi.x, hi.y, hi.z),
        v(lo.x, hi.y, hi.z),
    ];
    let faces = vec![
        vec![0, 3, 2, 1],
        vec![4, 5, 6, 7],
        vec![0, 1, 5, 4],
        vec![1, 2, 6, 5],
        vec![2, 3, 7, 6],
        vec![0, 4, 7, 3],
    ];
    Polyhedron::from_parts_unchecked(vertices, faces)
}

pub fn unit_cube() -> Polyhedron {
    box_solid(Point3::zeros(), Point3::repeat(1.0))
}

/// Regular tetrahedron with the given edge length, built on alternate
/// corners of a cube so that all edge lengths are bitwise equal.
pub fn regular_tetrahedron(edge: f64) -> Polyhedron {
    let s = edge / 2f64.sqrt();
    let vertices = vec![
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(s, s, 0.0),
        Point3::new(s, 0.0, s),
        Point3::new(0.0, s, s),
    ];
    let faces = vec![vec![1, 3, 2], vec![0, 2, 3], vec![0, 3, 1], vec![0, 1, 2]];
    Polyhedron::from_parts_unchecked(vertices, faces)
}

/// Tetrahedron from four points, oriented outward.
pub fn tetrahedron(a: Point3, b: Point3, c: Point3, d: Point3) -> Polyhedron {
    orient_outward(
        vec![a, b, c, d],
        vec![vec![1, 2, 3], vec![0, 3, 2], vec![0, 1, 3], vec![0, 2, 1]],
    )
}

/// Extrudes a counter-clockwise simple polygon in the xy-plane between `z0`
/// and `z1`.
pub fn extrude_polygon(polygon: &[(f64, f64)], z0: f64, z1: f64) -> Polyhedron {
    let n = polygon.len();
    let mut vertices: Vec<Point3> = polygon.iter().map(|&(x, y)| Point3::new(x, y, z0)).collect();
    vertices.extend(polygon.iter().map(|&(x, y)| Point3::new(x, y, z1)));
    let mut faces = Vec::with_capacity(n + 2);
    faces.push((0..n).rev().collect());
    faces.push((n..2 * n).collect());
    for i in 0..n {
        let j = (i + 1) % n;
        faces.push(vec![i, j, n + j, n + i]);
    }
    Polyhedron::from_parts_unchecked(vertices, faces)
}

/// Right prism over an equilateral triangle with unit side, unit height.
pub fn unit_prism() -> Polyhedron {
    extrude_polygon(&[(0.0, 0.0), (1.0, 0.0), (0.5, 3f64.sqrt() / 2.0)], 0.0, 1.0)
}

/// Triangular prism from a bottom triangle `a` and a top triangle `b`, with
/// `a[i]` joined to `b[i]`.
pub fn triangular_prism(a: [Point3; 3], b: [Point3; 3]) -> Polyhedron {
    let vertices = vec![a[0], a[1], a[2], b[0], b[1], b[2]];
    let faces = vec![
        vec![0, 1, 2],
        vec![3, 4, 5],
        vec![0, 1, 4, 3],
        vec![1, 2, 5, 4],
        vec![2, 0, 3, 5],
    ];
    orient_outward(vertices, faces)
}

/// Unit cube minus the column `[0.5,1]×[0.5,1]×[0,1]`.
pub fn l_prism() -> Polyhedron {
    extrude_polygon(
        &[
            (0.0, 0.0),
            (1.0, 0.0),
            (1.0, 0.5),
            (0.5, 0.5),
            (0.5, 1.0),
            (0.0, 1.0),
        ],
        0.0,
        1.0,
    )
}

/// Unit cube with a square pyramid removed from its top face: base
/// `[0.25,0.75]²` at `z = 1`, apex `(0.5, 0.5, 0.4)`. A horizontal cut through
/// the pit leaves a ring-shaped upper piece.
pub fn pitted_cube() -> Polyhedron {
    let (a, b) = (0.25, 0.75);
    let mut vertices = unit_cube().vertices().to_vec();
    vertices.extend([
        Point3::new(a, a, 1.0),
        Point3::new(b, a, 1.0),
        Point3::new(b, b, 1.0),
        Point3::new(a, b, 1.0),
        Point3::new(0.5, 0.5, 0.4),
    ]);
    let faces = vec![
        vec![0, 3, 2, 1],
        vec![0, 1, 5, 4],
        vec![1, 2, 6, 5],
        vec![2, 3, 7, 6],
        vec![0, 4, 7, 3],
        vec![4, 5, 9, 8],
        vec![5, 6, 10, 9],
        vec![6, 7, 11, 10],
        vec![7, 4, 8, 11],
        vec![8, 9, 12],
        vec![9, 10, 12],
        vec![10, 11, 12],
        vec![11, 8, 12],
    ];
    Polyhedron::from_parts_unchecked(vertices, faces)
}
