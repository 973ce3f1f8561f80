//! Two-means clustering of interior lattice points, used to pick a cutting
//! plane that splits an element into two compact halves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{CuttingPlane, Point3, Polyhedron, PointLocator};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusteringError {
    #[error("only {0} lattice points fall inside the element; resolution too coarse")]
    TooCoarse(usize),
    #[error("cluster centroids coincide")]
    Coincident,
}

/// How the two initial centroids are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KMeansInit {
    /// Two distinct points drawn with the seeded generator.
    Random,
    /// The two lattice points farthest apart.
    FarthestPair,
    /// Fixed positions.
    Given([Point3; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    /// Lattice points before filtering.
    pub n_grid_points: usize,
    pub max_iterations: usize,
    pub rng_seed: u64,
    pub init: KMeansInit,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            n_grid_points: 20 * 20 * 20,
            max_iterations: 100,
            rng_seed: 0,
            init: KMeansInit::Random,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: [Point3; 2],
    pub labels: Vec<u8>,
    pub sizes: [usize; 2],
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
    pub reseeded: bool,
}

/// Smallest `m` with `m³ ≥ n`.
fn lattice_side(n: usize) -> usize {
    let mut m = (n as f64).cbrt().round().max(1.0) as usize;
    while m.pow(3) < n {
        m += 1;
    }
    while m > 1 && (m - 1).pow(3) >= n {
        m -= 1;
    }
    m
}

/// Cell-centered lattice of about `n` points over the bounding box, keeping
/// those inside `p`.
pub fn interior_grid_points(p: &Polyhedron, n: usize) -> Result<Vec<Point3>, ClusteringError> {
    let m = lattice_side(n);
    let loc = PointLocator::new(p);
    let (lo, hi) = p.bounding_box();
    let step = (hi - lo) / m as f64;
    let mut out = Vec::new();
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                let q = lo
                    + Point3::new(
                        (i as f64 + 0.5) * step.x,
                        (j as f64 + 0.5) * step.y,
                        (k as f64 + 0.5) * step.z,
                    );
                if loc.contains(&q) {
                    out.push(q);
                }
            }
        }
    }
    if out.len() < 2 {
        return Err(ClusteringError::TooCoarse(out.len()));
    }
    Ok(out)
}

fn farthest_from(points: &[Point3], c: &Point3) -> usize {
    let mut best = 0;
    let mut best_d = -1.0;
    for (i, p) in points.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Lloyd iteration with two clusters. An emptied cluster is re-seeded at the
/// point farthest from the other centroid. Once assignments stop changing,
/// single points are moved between clusters while that lowers the objective
/// and Lloyd resumes.
pub fn two_means(points: &[Point3], init: KMeansInit, max_iterations: usize, rng_seed: u64) -> KMeansResult {
    assert!(points.len() >= 2, "two_means needs at least two points");
    let mut c = match init {
        KMeansInit::Given(c) => c,
        KMeansInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let a = rng.gen_range(0..points.len());
            let mut b = rng.gen_range(0..points.len() - 1);
            if b >= a {
                b += 1;
            }
            [points[a], points[b]]
        }
        KMeansInit::FarthestPair => {
            // Double sweep: exact for the lattice extremes we feed it.
            let a = farthest_from(points, &points[0]);
            let b = farthest_from(points, &points[a]);
            [points[a], points[b]]
        }
    };
    let mut labels = vec![u8::MAX; points.len()];
    let mut objective = Vec::new();
    let mut reseeded = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let mut changed = false;
        let mut sse = 0.0;
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            let d0 = (p - c[0]).norm_squared();
            let d1 = (p - c[1]).norm_squared();
            let new = u8::from(d1 < d0);
            sse += d0.min(d1);
            if new != *l {
                *l = new;
                changed = true;
            }
        }
        objective.push(sse);
        // A Lloyd fixed point can keep points that sit on the bisector in
        // the larger cluster; single-point moves get past it.
        if !changed && !hartigan_pass(points, &mut labels, &mut c) {
            break;
        }
        if !changed {
            continue;
        }
        let mut sum = [Point3::zeros(); 2];
        let mut count = [0usize; 2];
        for (p, &l) in points.iter().zip(&labels) {
            sum[l as usize] += p;
            count[l as usize] += 1;
        }
        for k in 0..2 {
            if count[k] > 0 {
                c[k] = sum[k] / count[k] as f64;
            }
        }
        for k in 0..2 {
            if count[k] == 0 {
                c[k] = points[farthest_from(points, &c[1 - k])];
                reseeded = true;
            }
        }
    }
    let mut sizes = [0usize; 2];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    KMeansResult {
        centroids: c,
        labels,
        sizes,
        iterations,
        objective,
        reseeded,
    }
}

/// Moves single points between clusters whenever that lowers the sum of
/// squared distances to the means, updating the means as it goes. Returns
/// whether anything moved.
fn hartigan_pass(points: &[Point3], labels: &mut [u8], c: &mut [Point3; 2]) -> bool {
    let mut n = [0usize; 2];
    let mut sum = [Point3::zeros(); 2];
    for (p, &l) in points.iter().zip(labels.iter()) {
        n[l as usize] += 1;
        sum[l as usize] += p;
    }
    if n[0] == 0 || n[1] == 0 {
        return false;
    }
    let mut mean = [sum[0] / n[0] as f64, sum[1] / n[1] as f64];
    let mut moved = false;
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        let i = *l as usize;
        let j = 1 - i;
        if n[i] == 1 {
            continue;
        }
        let (ni, nj) = (n[i] as f64, n[j] as f64);
        let stay = ni / (ni - 1.0) * (p - mean[i]).norm_squared();
        let go = nj / (nj + 1.0) * (p - mean[j]).norm_squared();
        // Relative margin keeps rounding noise from moving points back and forth.
        if go < stay * (1.0 - 1e-9) {
            mean[i] = (mean[i] * ni - p) / (ni - 1.0);
            mean[j] = (mean[j] * nj + p) / (nj + 1.0);
            n[i] -= 1;
            n[j] += 1;
            *l = j as u8;
            moved = true;
        }
    }
    if moved {
        *c = mean;
    }
    moved
}

/// Interior points of `p`, retried once at eight times the density when too
/// few survive.
pub fn sample_interior(p: &Polyhedron, n: usize) -> Result<Vec<Point3>, ClusteringError> {
    match interior_grid_points(p, n) {
        Err(ClusteringError::TooCoarse(_)) => interior_grid_points(p, n * 8),
        other => other,
    }
}

/// Plane bisecting the two final cluster centroids.
pub fn kmeans_cutting_plane(p: &Polyhedron, cfg: &KMeansConfig) -> Result<CuttingPlane, ClusteringError> {
    kmeans_details(p, cfg).map(|(plane, _)| plane)
}

pub fn kmeans_details(p: &Polyhedron, cfg: &KMeansConfig) -> Result<(CuttingPlane, KMeansResult), ClusteringError> {
    let points = sample_interior(p, cfg.n_grid_points)?;
    let res = two_means(&points, cfg.init, cfg.max_iterations, cfg.rng_seed);
    let [c1, c2] = res.centroids;
    let plane = CuttingPlane::new((c1 + c2) * 0.5, c2 - c1).map_err(|_| ClusteringError::Coincident)?;
    Ok((plane, res))
}
