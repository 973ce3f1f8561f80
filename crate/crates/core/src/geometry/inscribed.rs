//! Radius of the largest ball inside a polyhedron.

use super::containment::PointLocator;
use super::{GeometryError, Point3, Polyhedron};

/// Samples per axis for the non-convex approximation.
const SAMPLES: usize = 20;

/// Exact Chebyshev radius for convex input, otherwise the largest
/// boundary distance over a regular grid of interior samples.
pub fn inscribed_radius(p: &Polyhedron) -> Result<f64, GeometryError> {
    let center = p.centroid()?;
    if p.is_convex() {
        chebyshev_radius(p, &center)
    } else {
        Ok(sampled_radius(p))
    }
}

fn chebyshev_radius(p: &Polyhedron, center: &Point3) -> Result<f64, GeometryError> {
    // Ball center x = center + y⁺ − y⁻ keeps all variables non-negative and
    // every right-hand side b_f − n_f·center non-negative.
    let mut rows = Vec::with_capacity(p.num_faces());
    for f in 0..p.num_faces() {
        let Some(n) = p.face_normal(f) else { continue };
        let b = n.dot(&p.face_center(f)) - n.dot(center);
        rows.push((
            [n.x, n.y, n.z, -n.x, -n.y, -n.z, 1.0],
            b.max(0.0),
        ));
    }
    let mut objective = [0.0; 7];
    objective[6] = 1.0;
    let solution = maximize(&rows, &objective)
        .ok_or_else(|| GeometryError::Degenerate("inscribed ball LP did not converge".into()))?;
    Ok(solution[6])
}

/// Dense tableau simplex for `max c·x` subject to `A x ≤ b`, `x ≥ 0`,
/// `b ≥ 0`, using Bland's rule. Returns `None` if unbounded or stalled.
fn maximize<const N: usize>(rows: &[([f64; N], f64)], c: &[f64; N]) -> Option<[f64; N]> {
    let m = rows.len();
    let width = N + m + 1;
    let mut t = vec![0.0; (m + 1) * width];
    for (i, (a, b)) in rows.iter().enumerate() {
        t[i * width..i * width + N].copy_from_slice(a);
        t[i * width + N + i] = 1.0;
        t[i * width + width - 1] = *b;
    }
    // Reduced costs in the last row, stored negated.
    for j in 0..N {
        t[m * width + j] = -c[j];
    }
    let mut basis: Vec<usize> = (N..N + m).collect();
    let eps = 1e-12;
    for _ in 0..10_000 {
        let Some(col) = (0..N + m).find(|&j| t[m * width + j] < -eps) else {
            let mut x = [0.0; N];
            for (i, &bv) in basis.iter().enumerate() {
                if bv < N {
                    x[bv] = t[i * width + width - 1];
                }
            }
            return Some(x);
        };
        let mut pivot: Option<(usize, f64)> = None;
        for i in 0..m {
            let a = t[i * width + col];
            if a > eps {
                let ratio = t[i * width + width - 1] / a;
                let better = match pivot {
                    None => true,
                    Some((r, best)) => ratio < best - eps || (ratio <= best + eps && basis[i] < basis[r]),
                };
                if better {
                    pivot = Some((i, ratio));
                }
            }
        }
        let (row, _) = pivot?;
        let pv = t[row * width + col];
        for j in 0..width {
            t[row * width + j] /= pv;
        }
        for i in 0..=m {
            if i == row {
                continue;
            }
            let factor = t[i * width + col];
            if factor != 0.0 {
                for j in 0..width {
                    t[i * width + j] -= factor * t[row * width + j];
                }
            }
        }
        basis[row] = col;
    }
    None
}

fn sampled_radius(p: &Polyhedron) -> f64 {
    let loc = PointLocator::new(p);
    let (lo, hi) = p.bounding_box();
    let step = (hi - lo) / SAMPLES as f64;
    let mut best = 0.0f64;
    for i in 0..SAMPLES {
        for j in 0..SAMPLES {
            for k in 0..SAMPLES {
                let q = lo
                    + Point3::new(
                        (i as f64 + 0.5) * step.x,
                        (j as f64 + 0.5) * step.y,
                        (k as f64 + 0.5) * step.z,
                    );
                if loc.contains(&q) {
                    best = best.max(loc.boundary_distance(&q));
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::super::shapes::*;
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn boxes() {
        assert_relative_eq!(inscribed_radius(&unit_cube()).unwrap(), 0.5, epsilon = 1e-12);
        let b = box_solid(Point3::zeros(), Point3::new(2.0, 1.0, 1.0));
        assert_relative_eq!(inscribed_radius(&b).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn regular_tetrahedron_matches_insphere() {
        // Insphere radius = 3·volume / surface area.
        let t = regular_tetrahedron(1.0);
        let area: f64 = (0..4).map(|f| t.face_area(f)).sum();
        let oracle = 3.0 * t.volume().unwrap() / area;
        assert_relative_eq!(oracle, 1.0 / (2.0 * 6f64.sqrt()), epsilon = 1e-14);
        assert_relative_eq!(inscribed_radius(&t).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn off_center_wedge() {
        // Right prism over the triangle (0,0),(4,0),(0,3): incircle radius 1,
        // height 10 so the triangle is the binding cross-section.
        let p = extrude_polygon(&[(0.0, 0.0), (4.0, 0.0), (0.0, 3.0)], 0.0, 10.0);
        assert_relative_eq!(inscribed_radius(&p).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn l_prism_sampled_radius() {
        // The best ball sits on the diagonal of the corner square, touching
        // x = 0, y = 0 and the re-entrant edge: r = √2(0.5 − r).
        let exact = 1.0 - 1.0 / 2f64.sqrt();
        let r = inscribed_radius(&l_prism()).unwrap();
        assert!(r <= exact + 1e-12 && r >= exact - 0.05, "{r}");
    }

    #[test]
    fn flat_solid_is_degenerate() {
        let flat = box_solid(Point3::zeros(), Point3::new(1.0, 1.0, 0.0));
        assert!(inscribed_radius(&flat).is_err());
    }
}
