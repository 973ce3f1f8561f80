//! Element container with id bookkeeping and size statistics.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use thiserror::Error;

use crate::geometry::{ElementId, GeometryError, Point3, Polyhedron};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh has no elements")]
    Empty,
    #[error("unknown element {0}")]
    UnknownElement(ElementId),
    #[error("refinement rejected: children volume {got} differs from element volume {expected}")]
    VolumeMismatch { expected: f64, got: f64 },
    #[error("duplicate element id {0}")]
    DuplicateId(ElementId),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Non-overlapping polyhedra covering a box domain. Neighbours of a refined
/// element are left untouched, so interfaces may be non-matching.
#[derive(Debug, Clone)]
pub struct Mesh {
    elements: BTreeMap<ElementId, Polyhedron>,
    parents: BTreeMap<ElementId, ElementId>,
    domain: (Point3, Point3),
    generation: u32,
    next_id: ElementId,
}

impl Mesh {
    pub fn new(domain: (Point3, Point3)) -> Self {
        Self {
            elements: BTreeMap::new(),
            parents: BTreeMap::new(),
            domain,
            generation: 0,
            next_id: 0,
        }
    }

    pub fn unit_box() -> Self {
        Self::new((Point3::zeros(), Point3::repeat(1.0)))
    }

    pub fn from_elements(domain: (Point3, Point3), elements: impl IntoIterator<Item = Polyhedron>) -> Self {
        let mut m = Self::new(domain);
        for e in elements {
            m.insert(e);
        }
        m
    }

    /// Adds an element under a fresh id and returns that id.
    pub fn insert(&mut self, mut p: Polyhedron) -> ElementId {
        let id = self.next_id;
        self.next_id += 1;
        p.set_id(id);
        self.elements.insert(id, p);
        id
    }

    /// Rebuilds a mesh with known ids and parents, as read back from disk.
    /// `next_id` is raised above every id present.
    pub fn restore(
        domain: (Point3, Point3),
        generation: u32,
        next_id: ElementId,
        elements: impl IntoIterator<Item = (Polyhedron, Option<ElementId>)>,
    ) -> Result<Self, MeshError> {
        let mut m = Self::new(domain);
        m.generation = generation;
        m.next_id = next_id;
        for (p, parent) in elements {
            let id = p.id();
            if m.elements.insert(id, p).is_some() {
                return Err(MeshError::DuplicateId(id));
            }
            if let Some(parent) = parent {
                m.parents.insert(id, parent);
            }
            m.next_id = m.next_id.max(id + 1);
        }
        Ok(m)
    }

    /// Id the next inserted element will receive.
    pub fn next_id(&self) -> ElementId {
        self.next_id
    }

    pub fn domain(&self) -> (Point3, Point3) {
        self.domain
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    /// Marks the end of a refinement step.
    pub fn advance_generation(&mut self) {
        self.generation += 1;
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, id: ElementId) -> Option<&Polyhedron> {
        self.elements.get(&id)
    }

    /// Elements in increasing id order.
    pub fn elements(&self) -> impl Iterator<Item = &Polyhedron> {
        self.elements.values()
    }

    pub fn ids(&self) -> Vec<ElementId> {
        self.elements.keys().copied().collect()
    }

    pub fn parent_of(&self, id: ElementId) -> Option<ElementId> {
        self.parents.get(&id).copied()
    }

    /// Largest element diameter.
    pub fn mesh_size(&self) -> Result<f64, MeshError> {
        if self.elements.is_empty() {
            return Err(MeshError::Empty);
        }
        Ok(self.elements.values().map(|p| p.diam()).fold(0.0, f64::max))
    }

    pub fn total_volume(&self) -> f64 {
        self.elements.values().map(|p| p.signed_volume()).sum()
    }

    /// Replaces element `id` by `children`, which must have the same total
    /// volume within 1e-9 relative. Returns the ids given to the children.
    pub fn replace_element(
        &mut self,
        id: ElementId,
        children: Vec<Polyhedron>,
    ) -> Result<Vec<ElementId>, MeshError> {
        let parent = self.elements.get(&id).ok_or(MeshError::UnknownElement(id))?;
        let expected = parent.volume()?;
        let mut got = 0.0;
        for c in &children {
            got += c.volume()?;
        }
        if (got - expected).abs() > 1e-9 * expected.abs().max(f64::MIN_POSITIVE) {
            return Err(MeshError::VolumeMismatch { expected, got });
        }
        self.elements.remove(&id);
        Ok(children
            .into_iter()
            .map(|c| {
                let cid = self.insert(c);
                self.parents.insert(cid, id);
                cid
            })
            .collect())
    }

    /// Global counts with shared vertices, edges and faces counted once.
    pub fn complexity_stats(&self, timer: &RefineTimer) -> ComplexityStats {
        let mut registry = VertexRegistry::new(1e-9);
        let mut edges = std::collections::HashSet::new();
        let mut faces = std::collections::HashSet::new();
        for p in self.elements.values() {
            let global: Vec<usize> = p.vertices().iter().map(|v| registry.id_of(v)).collect();
            for face in p.faces() {
                let n = face.len();
                for k in 0..n {
                    let a = global[face[k]];
                    let b = global[face[(k + 1) % n]];
                    edges.insert((a.min(b), a.max(b)));
                }
                let mut key: Vec<usize> = face.iter().map(|&i| global[i]).collect();
                key.sort_unstable();
                faces.insert(key);
            }
        }
        let total = timer.total();
        let calls = timer.calls();
        ComplexityStats {
            n_vertices: registry.len(),
            n_edges: edges.len(),
            n_faces: faces.len(),
            n_elements: self.elements.len(),
            total_refine_time: total.as_secs_f64(),
            mean_time_per_element: if calls > 0 {
                total.as_secs_f64() / calls as f64
            } else {
                0.0
            },
        }
    }
}

/// Vertex deduplication on a quantized lattice; points closer than `tol`
/// share an id.
struct VertexRegistry {
    tol: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    points: Vec<Point3>,
}

impl VertexRegistry {
    fn new(tol: f64) -> Self {
        Self {
            tol,
            cells: HashMap::new(),
            points: Vec::new(),
        }
    }

    fn key(&self, v: &Point3) -> [i64; 3] {
        [0, 1, 2].map(|i| (v[i] / self.tol).floor() as i64)
    }

    fn id_of(&mut self, v: &Point3) -> usize {
        let k = self.key(v);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        if let Some(&id) = ids.iter().find(|&&i| (self.points[i] - v).norm() <= self.tol) {
                            return id;
                        }
                    }
                }
            }
        }
        let id = self.points.len();
        self.points.push(*v);
        self.cells.entry(k).or_default().push(id);
        id
    }

    fn len(&self) -> usize {
        self.points.len()
    }
}

/// Size and timing summary of a mesh.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ComplexityStats {
    pub n_vertices: usize,
    pub n_edges: usize,
    pub n_faces: usize,
    pub n_elements: usize,
    pub total_refine_time: f64,
    pub mean_time_per_element: f64,
}

/// Refinement wall time accumulated per strategy label.
#[derive(Debug, Clone, Default)]
pub struct RefineTimer {
    by_label: BTreeMap<String, (Duration, usize)>,
}

impl RefineTimer {
    pub fn record(&mut self, label: &str, elapsed: Duration) {
        let e = self.by_label.entry(label.to_string()).or_default();
        e.0 += elapsed;
        e.1 += 1;
    }

    pub fn merge(&mut self, other: &RefineTimer) {
        for (label, &(d, n)) in &other.by_label {
            let e = self.by_label.entry(label.clone()).or_default();
            e.0 += d;
            e.1 += n;
        }
    }

    pub fn total(&self) -> Duration {
        self.by_label.values().map(|e| e.0).sum()
    }

    pub fn calls(&self) -> usize {
        self.by_label.values().map(|e| e.1).sum()
    }

    pub fn per_label(&self) -> impl Iterator<Item = (&str, Duration, usize)> {
        self.by_label.iter().map(|(k, &(d, n))| (k.as_str(), d, n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes::{box_solid, regular_tetrahedron};
    use crate::geometry::{clip_by_plane, CuttingPlane};

    fn cube_grid(n: usize) -> Mesh {
        let h = 1.0 / n as f64;
        let mut m = Mesh::unit_box();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let lo = Point3::new(i as f64, j as f64, k as f64) * h;
                    m.insert(box_solid(lo, lo + Point3::repeat(h)));
                }
            }
        }
        m
    }

    fn octants(p: &Polyhedron) -> Vec<Polyhedron> {
        let c = p.centroid().unwrap();
        let mut pieces = vec![p.clone()];
        for axis in [Point3::x(), Point3::y(), Point3::z()] {
            let plane = CuttingPlane::new(c, axis).unwrap();
            pieces = pieces
                .iter()
                .flat_map(|q| clip_by_plane(q, &plane).unwrap().into_pieces())
                .collect();
        }
        pieces
    }

    #[test]
    fn mesh_size_of_cube_grid() {
        let m = cube_grid(2);
        approx::assert_relative_eq!(m.mesh_size().unwrap(), 3f64.sqrt() / 2.0, epsilon = 1e-15);
        let unit = Mesh::from_elements(m.domain(), [box_solid(Point3::zeros(), Point3::repeat(1.0))]);
        approx::assert_relative_eq!(unit.mesh_size().unwrap(), 3f64.sqrt(), epsilon = 1e-15);
        let tet = Mesh::from_elements(m.domain(), [regular_tetrahedron(1.0)]);
        approx::assert_relative_eq!(tet.mesh_size().unwrap(), 1.0, epsilon = 1e-12);
        assert!(matches!(Mesh::unit_box().mesh_size(), Err(MeshError::Empty)));
    }

    #[test]
    fn replace_by_octants() {
        let mut m = cube_grid(2);
        let h0 = m.mesh_size().unwrap();
        for id in m.ids() {
            let kids = octants(m.get(id).unwrap());
            let new = m.replace_element(id, kids).unwrap();
            assert_eq!(new.len(), 8);
            assert!(new.iter().all(|&c| m.parent_of(c) == Some(id)));
        }
        assert_eq!(m.len(), 64);
        approx::assert_relative_eq!(m.mesh_size().unwrap(), h0 / 2.0, epsilon = 1e-12);
        approx::assert_relative_eq!(m.total_volume(), 1.0, epsilon = 1e-12);
        let mut ids = m.ids();
        ids.dedup();
        assert_eq!(ids.len(), 64);
        assert!(ids.iter().all(|&i| i >= 8));
    }

    #[test]
    fn volume_violating_children_are_rejected() {
        let mut m = cube_grid(1);
        let half = box_solid(Point3::zeros(), Point3::new(0.5, 1.0, 1.0));
        assert!(matches!(
            m.replace_element(0, vec![half]),
            Err(MeshError::VolumeMismatch { .. })
        ));
        assert_eq!(m.len(), 1);
        assert!(matches!(m.replace_element(9, vec![]), Err(MeshError::UnknownElement(9))));
    }

    #[test]
    fn complexity_counts() {
        let t = RefineTimer::default();
        let s = cube_grid(1).complexity_stats(&t);
        assert_eq!((s.n_vertices, s.n_edges, s.n_faces, s.n_elements), (8, 12, 6, 1));
        let two = Mesh::from_elements(
            (Point3::zeros(), Point3::new(2.0, 1.0, 1.0)),
            [
                box_solid(Point3::zeros(), Point3::repeat(1.0)),
                box_solid(Point3::x(), Point3::new(2.0, 1.0, 1.0)),
            ],
        );
        let s = two.complexity_stats(&t);
        assert_eq!((s.n_vertices, s.n_edges, s.n_faces, s.n_elements), (12, 20, 11, 2));
        // Structured n³ grid: (n+1)³ vertices, 3n(n+1)² edges, 3n²(n+1) faces.
        let n = 4;
        let s = cube_grid(n).complexity_stats(&t);
        assert_eq!(
            (s.n_vertices, s.n_edges, s.n_faces, s.n_elements),
            ((n + 1).pow(3), 3 * n * (n + 1).pow(2), 3 * n * n * (n + 1), n.pow(3))
        );
    }

    #[test]
    fn refined_neighbour_leaves_non_matching_interface() {
        let mut m = Mesh::from_elements(
            (Point3::zeros(), Point3::new(2.0, 1.0, 1.0)),
            [
                box_solid(Point3::zeros(), Point3::repeat(1.0)),
                box_solid(Point3::x(), Point3::new(2.0, 1.0, 1.0)),
            ],
        );
        let kids = octants(m.get(0).unwrap());
        m.replace_element(0, kids).unwrap();
        let neighbour = m.get(1).unwrap();
        let on_interface = |p: &Polyhedron| {
            (0..p.num_faces())
                .filter(|&f| p.faces()[f].iter().all(|&i| (p.vertices()[i].x - 1.0).abs() < 1e-12))
                .count()
        };
        assert_eq!(on_interface(neighbour), 1);
        assert_eq!(neighbour.num_faces(), 6);
        let refined: usize = m.elements().filter(|p| p.id() != 1).map(on_interface).sum();
        assert_eq!(refined, 4);
    }

    #[test]
    fn timer_accumulates_by_label() {
        let mut t = RefineTimer::default();
        t.record("kmeans", Duration::from_millis(3));
        t.record("kmeans", Duration::from_millis(1));
        t.record("cnn", Duration::from_millis(2));
        assert_eq!(t.calls(), 3);
        assert_eq!(t.total(), Duration::from_millis(6));
        let s = cube_grid(1).complexity_stats(&t);
        approx::assert_relative_eq!(s.mean_time_per_element, 0.002, epsilon = 1e-12);
    }
}
