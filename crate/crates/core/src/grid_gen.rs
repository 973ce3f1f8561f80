//! Test grids on the unit cube: structured cubes, prisms and tetrahedra,
//! random-seed Voronoi tessellations and centroidal Voronoi tessellations.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::shapes::{box_solid, tetrahedron, triangular_prism, unit_cube};
use crate::geometry::{clip_by_plane, CuttingPlane, GeometryError, Point3, Polyhedron, PLANE_BAND};
use crate::mesh::Mesh;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("resolution must be at least {min}, got {got}")]
    Resolution { min: usize, got: usize },
    #[error("seeds {0} and {1} coincide; choose another rng seed")]
    DuplicateSeeds(usize, usize),
    #[error("{0} is not a structured grid kind")]
    NotStructured(GridKind),
    #[error("voronoi cell of seed {seed}: {source}")]
    Cell { seed: usize, source: GeometryError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Tetrahedra,
    Cubes,
    Prisms,
    Voronoi,
    Cvt,
}

impl GridKind {
    pub const ALL: [GridKind; 5] = [
        GridKind::Tetrahedra,
        GridKind::Cubes,
        GridKind::Prisms,
        GridKind::Voronoi,
        GridKind::Cvt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GridKind::Tetrahedra => "tetrahedra",
            GridKind::Cubes => "cubes",
            GridKind::Prisms => "prisms",
            GridKind::Voronoi => "voronoi",
            GridKind::Cvt => "cvt",
        }
    }
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GridKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GridKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown grid kind '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub kind: GridKind,
    /// Boxes per axis for structured kinds, seed count otherwise.
    pub resolution: usize,
    pub rng_seed: u64,
    pub cvt_iterations: usize,
}

impl GridSpec {
    pub fn new(kind: GridKind, resolution: usize, rng_seed: u64) -> Self {
        Self {
            kind,
            resolution,
            rng_seed,
            cvt_iterations: 50,
        }
    }
}

/// Builds any grid kind.
pub fn generate(spec: &GridSpec) -> Result<Mesh, GridError> {
    match spec.kind {
        GridKind::Voronoi => voronoi_grid(spec),
        GridKind::Cvt => cvt_grid(spec),
        _ => structured_grid(spec),
    }
}

/// n³ boxes, each kept whole, split into two prisms or into six Kuhn
/// tetrahedra.
pub fn structured_grid(spec: &GridSpec) -> Result<Mesh, GridError> {
    let n = spec.resolution;
    if n < 1 {
        return Err(GridError::Resolution { min: 1, got: n });
    }
    let h = 1.0 / n as f64;
    let mut mesh = Mesh::unit_box();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let lo = Point3::new(i as f64, j as f64, k as f64) * h;
                let hi = if i + 1 == n && j + 1 == n && k + 1 == n {
                    Point3::repeat(1.0)
                } else {
                    Point3::new((i + 1) as f64, (j + 1) as f64, (k + 1) as f64) * h
                };
                match spec.kind {
                    GridKind::Cubes => {
                        mesh.insert(box_solid(lo, hi));
                    }
                    GridKind::Prisms => {
                        for p in box_prisms(lo, hi, (i + j + k) % 2 == 1) {
                            mesh.insert(p);
                        }
                    }
                    GridKind::Tetrahedra => {
                        for t in kuhn_tetrahedra(lo, hi) {
                            mesh.insert(t);
                        }
                    }
                    other => return Err(GridError::NotStructured(other)),
                }
            }
        }
    }
    Ok(mesh)
}

/// Splits a box by a vertical diagonal plane into two triangular prisms.
fn box_prisms(lo: Point3, hi: Point3, flip: bool) -> [Polyhedron; 2] {
    let c = |x: f64, y: f64, z: f64| Point3::new(x, y, z);
    let (a, b, cc, d) = (
        (lo.x, lo.y),
        (hi.x, lo.y),
        (hi.x, hi.y),
        (lo.x, hi.y),
    );
    let tris = if flip {
        [[a, b, d], [b, cc, d]]
    } else {
        [[a, b, cc], [a, cc, d]]
    };
    tris.map(|t| {
        triangular_prism(
            t.map(|(x, y)| c(x, y, lo.z)),
            t.map(|(x, y)| c(x, y, hi.z)),
        )
    })
}

/// Six tetrahedra sharing the main diagonal, one per axis ordering.
fn kuhn_tetrahedra(lo: Point3, hi: Point3) -> Vec<Polyhedron> {
    const ORDERS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    ORDERS
        .iter()
        .map(|order| {
            let mut path = [lo; 4];
            for (s, &axis) in order.iter().enumerate() {
                path[s + 1] = path[s];
                path[s + 1][axis] = hi[axis];
            }
            tetrahedron(path[0], path[1], path[2], path[3])
        })
        .collect()
}

/// Uniform random seeds in the open unit cube.
pub fn random_seeds(count: usize, rng_seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..count)
        .map(|_| Point3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()))
        .collect()
}

pub fn voronoi_grid(spec: &GridSpec) -> Result<Mesh, GridError> {
    if spec.resolution < 2 {
        return Err(GridError::Resolution {
            min: 2,
            got: spec.resolution,
        });
    }
    let seeds = random_seeds(spec.resolution, spec.rng_seed);
    Ok(Mesh::from_elements(
        (Point3::zeros(), Point3::repeat(1.0)),
        voronoi_cells(&seeds)?,
    ))
}

/// Voronoi cells of `seeds` clipped to the unit cube, in seed order.
pub fn voronoi_cells(seeds: &[Point3]) -> Result<Vec<Polyhedron>, GridError> {
    for i in 0..seeds.len() {
        for j in i + 1..seeds.len() {
            if (seeds[i] - seeds[j]).norm() < 1e-9 {
                return Err(GridError::DuplicateSeeds(i, j));
            }
        }
    }
    (0..seeds.len())
        .into_par_iter()
        .map(|i| voronoi_cell(seeds, i).map_err(|source| GridError::Cell { seed: i, source }))
        .collect()
}

/// Clips the unit cube by bisector planes against the other seeds, nearest
/// first. A seed farther than twice the current cell radius cannot cut.
fn voronoi_cell(seeds: &[Point3], i: usize) -> Result<Polyhedron, GeometryError> {
    let s = seeds[i];
    let mut others: Vec<(f64, usize)> = (0..seeds.len())
        .filter(|&j| j != i)
        .map(|j| ((seeds[j] - s).norm(), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut cell = unit_cube();
    for (dist, j) in others {
        let radius = cell
            .vertices()
            .iter()
            .map(|v| (v - s).norm())
            .fold(0.0, f64::max);
        if dist > 2.0 * radius {
            break;
        }
        let plane = CuttingPlane::new((s + seeds[j]) * 0.5, seeds[j] - s)?;
        let band = PLANE_BAND * cell.diam();
        if cell.vertices().iter().all(|v| plane.signed_distance(v) <= band) {
            continue;
        }
        let pieces = clip_by_plane(&cell, &plane)?;
        cell = pieces
            .negative
            .into_iter()
            .max_by(|a, b| a.signed_volume().total_cmp(&b.signed_volume()))
            .ok_or_else(|| GeometryError::Degenerate("empty voronoi cell".into()))?;
    }
    Ok(cell)
}

pub fn cvt_grid(spec: &GridSpec) -> Result<Mesh, GridError> {
    if spec.resolution < 1 {
        return Err(GridError::Resolution {
            min: 1,
            got: spec.resolution,
        });
    }
    let seeds = random_seeds(spec.resolution, spec.rng_seed);
    let (cells, _) = lloyd(seeds, spec.cvt_iterations, 1e-4)?;
    Ok(Mesh::from_elements((Point3::zeros(), Point3::repeat(1.0)), cells))
}

/// Lloyd iteration: rebuild the cells and move each seed to its cell
/// centroid until the largest move is below `tol` or `iterations` steps are
/// done. Returns the cells of the final seeds and the seeds themselves.
pub fn lloyd(
    mut seeds: Vec<Point3>,
    iterations: usize,
    tol: f64,
) -> Result<(Vec<Polyhedron>, Vec<Point3>), GridError> {
    let mut cells = voronoi_cells(&seeds)?;
    for _ in 0..iterations {
        let centroids: Vec<Point3> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| c.centroid().map_err(|source| GridError::Cell { seed: i, source }))
            .collect::<Result<_, _>>()?;
        let moved = seeds
            .iter()
            .zip(&centroids)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        seeds = centroids;
        cells = voronoi_cells(&seeds)?;
        if moved < tol {
            break;
        }
    }
    Ok((cells, seeds))
}
