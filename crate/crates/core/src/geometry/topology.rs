use std::collections::{BTreeMap, HashMap};

use super::{Point3, Polyhedron};

/// Combinatorial summary of a polyhedron surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub vertices: usize,
    pub edges: usize,
    pub faces: usize,
    /// Every undirected edge is used by exactly two face sides.
    pub watertight: bool,
    /// Every edge is traversed once in each direction.
    pub oriented: bool,
    /// Face components connected through shared edges.
    pub components: usize,
}

impl Topology {
    pub fn of(p: &Polyhedron) -> Self {
        let mut directed: HashMap<(usize, usize), u32> = HashMap::new();
        let mut referenced = vec![false; p.num_vertices()];
        for face in p.faces() {
            for k in 0..face.len() {
                let a = face[k];
                let b = face[(k + 1) % face.len()];
                referenced[a] = true;
                *directed.entry((a, b)).or_default() += 1;
            }
        }
        let mut watertight = true;
        let mut oriented = true;
        let mut edges = 0;
        for (&(a, b), &n) in &directed {
            let back = directed.get(&(b, a)).copied().unwrap_or(0);
            if a < b || back == 0 {
                edges += 1;
                if n + back != 2 {
                    watertight = false;
                }
            }
            if n != 1 || back != 1 {
                oriented = false;
            }
        }
        Self {
            vertices: referenced.iter().filter(|&&r| r).count(),
            edges,
            faces: p.num_faces(),
            watertight,
            oriented,
            components: face_components(p.faces()).into_iter().max().map_or(0, |m| m + 1),
        }
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices as i64 - self.edges as i64 + self.faces as i64
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Labels each face with a component index; components are connected
/// through shared edges and numbered by their first face.
pub(crate) fn face_components(faces: &[Vec<usize>]) -> Vec<usize> {
    let mut uf = UnionFind::new(faces.len());
    let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
    for (fi, face) in faces.iter().enumerate() {
        for k in 0..face.len() {
            let a = face[k];
            let b = face[(k + 1) % face.len()];
            let key = (a.min(b), a.max(b));
            match owner.get(&key) {
                Some(&other) => uf.union(fi, other),
                None => {
                    owner.insert(key, fi);
                }
            }
        }
    }
    let mut labels = BTreeMap::new();
    (0..faces.len())
        .map(|f| {
            let r = uf.find(f);
            let next = labels.len();
            *labels.entry(r).or_insert(next)
        })
        .collect()
}

/// Groups faces into clusters using a caller-supplied adjacency predicate on
/// edge-sharing face pairs.
pub(crate) fn cluster_faces(
    faces: &[Vec<usize>],
    mut joinable: impl FnMut(usize, usize) -> bool,
) -> Vec<usize> {
    let mut uf = UnionFind::new(faces.len());
    let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
    for (fi, face) in faces.iter().enumerate() {
        for k in 0..face.len() {
            let a = face[k];
            let b = face[(k + 1) % face.len()];
            let key = (a.min(b), a.max(b));
            match owner.get(&key) {
                Some(&other) if other != fi => {
                    if joinable(fi, other) {
                        uf.union(fi, other);
                    }
                }
                Some(_) => {}
                None => {
                    owner.insert(key, fi);
                }
            }
        }
    }
    (0..faces.len()).map(|f| uf.find(f)).collect()
}

/// Removes pairs of opposite directed edges (multiset semantics).
pub(crate) fn cancel_opposite(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut count: HashMap<(usize, usize), i64> = HashMap::new();
    for &e in edges {
        *count.entry(e).or_default() += 1;
    }
    let mut out = Vec::new();
    for &(a, b) in edges {
        let fwd = count.get(&(a, b)).copied().unwrap_or(0);
        let back = count.get(&(b, a)).copied().unwrap_or(0);
        if fwd > 0 && back > 0 {
            *count.get_mut(&(a, b)).unwrap() -= 1;
            *count.get_mut(&(b, a)).unwrap() -= 1;
        } else if fwd > 0 {
            *count.get_mut(&(a, b)).unwrap() -= 1;
            out.push((a, b));
        }
    }
    out
}

/// Chains directed edges into closed loops. Where several continuations
/// leave a vertex, the one turning most to the left about `normal` is taken,
/// which separates loops that touch at a single vertex.
pub fn chain_loops(edges: &[(usize, usize)], positions: &[Point3], normal: &Point3) -> Vec<Vec<usize>> {
    let mut outgoing: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &(a, _)) in edges.iter().enumerate() {
        outgoing.entry(a).or_default().push(i);
    }
    let mut used = vec![false; edges.len()];
    let mut loops = Vec::new();
    for start in 0..edges.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let first = edges[start].0;
        let mut lp = vec![first];
        let (mut prev, mut cur) = edges[start];
        let mut closed = false;
        for _ in 0..edges.len() {
            if cur == first {
                closed = true;
                break;
            }
            lp.push(cur);
            let candidates: Vec<usize> = outgoing
                .get(&cur)
                .map(|v| v.iter().copied().filter(|&e| !used[e]).collect())
                .unwrap_or_default();
            let next = match candidates.len() {
                0 => break,
                1 => candidates[0],
                _ => {
                    let din = positions[cur] - positions[prev];
                    *candidates
                        .iter()
                        .max_by(|&&x, &&y| {
                            let tx = turn_angle(&din, &(positions[edges[x].1] - positions[cur]), normal);
                            let ty = turn_angle(&din, &(positions[edges[y].1] - positions[cur]), normal);
                            tx.total_cmp(&ty)
                        })
                        .unwrap()
                }
            };
            used[next] = true;
            prev = cur;
            cur = edges[next].1;
        }
        if closed && lp.len() >= 3 {
            loops.push(lp);
        }
    }
    loops
}

/// Signed turning angle from `a` to `b` about `normal`, in (-π, π].
fn turn_angle(a: &Point3, b: &Point3, normal: &Point3) -> f64 {
    let s = a.cross(b).dot(normal);
    let c = a.dot(b);
    s.atan2(c)
}

#[cfg(test)]
mod tests {
    use super::super::shapes::*;
    use super::*;

    #[test]
    fn cube_topology() {
        let t = unit_cube().topology();
        assert_eq!((t.vertices, t.edges, t.faces), (8, 12, 6));
        assert!(t.watertight && t.oriented);
        assert_eq!(t.components, 1);
        assert_eq!(t.euler_characteristic(), 2);
    }

    #[test]
    fn missing_face_breaks_watertightness() {
        let c = unit_cube();
        let p = Polyhedron::from_parts_unchecked(c.vertices().to_vec(), c.faces()[1..].to_vec());
        assert!(!p.topology().watertight);
    }

    #[test]
    fn two_squares_touching_at_corner_chain_separately() {
        let pos = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(2.0, 1.0, 0.0),
            Point3::new(2.0, 2.0, 0.0),
            Point3::new(1.0, 2.0, 0.0),
        ];
        let edges = vec![(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (4, 5), (5, 6), (6, 2)];
        let loops = chain_loops(&edges, &pos, &Point3::z());
        assert_eq!(loops.len(), 2);
        assert!(loops.iter().all(|l| l.len() == 4));
    }

    #[test]
    fn opposite_edges_cancel() {
        let out = cancel_opposite(&[(0, 1), (1, 2), (2, 1), (2, 0)]);
        assert_eq!(out, vec![(0, 1), (2, 0)]);
    }
}
