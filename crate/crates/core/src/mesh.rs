//! Shared-connectivity triangle meshes and the geometric quantities derived
//! from them: 1-ring adjacency, cotangent edge weights and normalized
//! edge-graph geodesic distances.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::sync::{Arc, RwLock};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::MeshError;

pub type Vec3 = Vector3<f64>;

/// Lower and upper clamp applied to every cotangent weight.
pub const COTAN_MIN: f64 = 1e-6;
pub const COTAN_MAX: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub positions: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    #[serde(default)]
    pub name: String,
}

impl TriangleMesh {
    pub fn new(positions: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Self {
        Self { positions, faces, name: String::new() }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Checks the structural invariants: non-empty, finite positions, face
    /// indices in range and no face repeating a vertex.
    pub fn validate(&self) -> Result<(), MeshError> {
        if self.positions.is_empty() {
            return Err(MeshError::EmptyMesh);
        }
        if let Some(vertex) = self.positions.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(MeshError::NonFinitePosition { vertex });
        }
        let v = self.positions.len();
        for (face, tri) in self.faces.iter().enumerate() {
            if let Some(&index) = tri.iter().find(|&&i| i >= v) {
                return Err(MeshError::IndexOutOfRange { index, vertex_count: v, line: None });
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::DegenerateFace { face });
            }
        }
        Ok(())
    }

    /// Same vertex count and identical face list.
    pub fn shares_connectivity(&self, other: &TriangleMesh) -> bool {
        self.positions.len() == other.positions.len() && self.faces == other.faces
    }

    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Axis-aligned bounding box diagonal length.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if self.positions.is_empty() {
            0.0
        } else {
            (hi - lo).norm()
        }
    }

    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.positions.iter().sum();
        sum / self.positions.len().max(1) as f64
    }
}

/// Checks that every mesh has the connectivity of the first one.
pub fn check_shared_connectivity(meshes: &[TriangleMesh]) -> Result<(), MeshError> {
    let Some(first) = meshes.first() else {
        return Ok(());
    };
    for (index, m) in meshes.iter().enumerate().skip(1) {
        if !first.shares_connectivity(m) {
            return Err(MeshError::ConnectivityMismatch { index });
        }
    }
    Ok(())
}

/// Symmetric 1-ring adjacency. Neighbor lists are sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn build(mesh: &TriangleMesh) -> Self {
        let mut neighbors = vec![Vec::new(); mesh.vertex_count()];
        for (a, b) in mesh.edges() {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Self { neighbors }
    }

    pub fn vertex_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.neighbors.iter().map(Vec::as_slice)
    }

    /// Breadth-first order from `root`; vertices unreachable from it are absent.
    pub fn bfs_order(&self, root: usize) -> Vec<usize> {
        let mut seen = vec![false; self.neighbors.len()];
        let mut order = Vec::with_capacity(self.neighbors.len());
        if root >= self.neighbors.len() {
            return order;
        }
        seen[root] = true;
        order.push(root);
        let mut head = 0;
        while head < order.len() {
            let v = order[head];
            head += 1;
            for &n in &self.neighbors[v] {
                if !seen[n] {
                    seen[n] = true;
                    order.push(n);
                }
            }
        }
        order
    }

    pub fn is_connected(&self) -> bool {
        self.neighbors.is_empty() || self.bfs_order(0).len() == self.neighbors.len()
    }

    /// First vertex not reachable from vertex 0, if any.
    pub fn first_unreachable(&self) -> Option<usize> {
        if self.neighbors.is_empty() {
            return None;
        }
        let mut reached = vec![false; self.neighbors.len()];
        for v in self.bfs_order(0) {
            reached[v] = true;
        }
        reached.iter().position(|r| !r)
    }
}

/// Symmetric cotangent weights `c_ij = cot(alpha_ij) + cot(beta_ij)`, one per
/// undirected mesh edge, clamped to `[COTAN_MIN, COTAN_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CotanWeights {
    weights: BTreeMap<(usize, usize), f64>,
}

impl CotanWeights {
    pub fn compute(mesh: &TriangleMesh) -> Result<Self, MeshError> {
        let mut raw: BTreeMap<(usize, usize), (f64, u8)> = BTreeMap::new();
        for tri in &mesh.faces {
            for corner in 0..3 {
                let o = tri[corner];
                let p = tri[(corner + 1) % 3];
                let q = tri[(corner + 2) % 3];
                let u = mesh.positions[p] - mesh.positions[o];
                let v = mesh.positions[q] - mesh.positions[o];
                let cot = u.dot(&v) / u.cross(&v).norm();
                let key = if p < q { (p, q) } else { (q, p) };
                let entry = raw.entry(key).or_insert((0.0, 0));
                entry.0 += cot;
                entry.1 += 1;
                if entry.1 > 2 {
                    return Err(MeshError::NonManifoldEdge { a: key.0, b: key.1 });
                }
            }
        }
        let weights = raw
            .into_iter()
            .map(|(k, (w, _))| (k, if w.is_nan() { COTAN_MIN } else { w.clamp(COTAN_MIN, COTAN_MAX) }))
            .collect();
        Ok(Self { weights })
    }

    /// Weight of edge `(i, j)`, in either order.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let key = if i < j { (i, j) } else { (j, i) };
        self.weights.get(&key).copied()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.weights.iter().map(|(&k, &w)| (k, w))
    }

    /// Weights laid out like `adj`'s neighbor lists.
    pub fn aligned(&self, adj: &Adjacency) -> Vec<Vec<f64>> {
        (0..adj.vertex_count())
            .map(|i| adj.neighbors(i).iter().map(|&j| self.get(i, j).unwrap_or(COTAN_MIN)).collect())
            .collect()
    }
}

/// Edge-graph distances from `source`, divided by the largest of them.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicField {
    pub source: usize,
    pub dist: Vec<f64>,
}

#[derive(Copy, Clone, PartialEq)]
struct HeapEntry {
    dist: f64,
    vertex: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(adj: &Adjacency, lengths: &[Vec<f64>], source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.vertex_count()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapEntry { dist: 0.0, vertex: source });
    while let Some(HeapEntry { dist: d, vertex }) = heap.pop() {
        if d > dist[vertex] {
            continue;
        }
        for (k, &n) in adj.neighbors(vertex).iter().enumerate() {
            let nd = d + lengths[vertex][k];
            if nd < dist[n] {
                dist[n] = nd;
                heap.push(HeapEntry { dist: nd, vertex: n });
            }
        }
    }
    dist
}

fn edge_lengths(mesh: &TriangleMesh, adj: &Adjacency) -> Vec<Vec<f64>> {
    (0..adj.vertex_count())
        .map(|i| adj.neighbors(i).iter().map(|&j| (mesh.positions[i] - mesh.positions[j]).norm()).collect())
        .collect()
}

fn normalized_field(adj: &Adjacency, lengths: &[Vec<f64>], source: usize) -> Result<GeodesicField, MeshError> {
    if source >= adj.vertex_count() {
        return Err(MeshError::IndexOutOfRange { index: source, vertex_count: adj.vertex_count(), line: None });
    }
    let mut dist = dijkstra(adj, lengths, source);
    if let Some(vertex) = dist.iter().position(|d| !d.is_finite()) {
        return Err(MeshError::Unreachable { from: source, vertex });
    }
    let max = dist.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for d in &mut dist {
            *d /= max;
        }
    }
    Ok(GeodesicField { source, dist })
}

/// Dijkstra distances over the edge graph with Euclidean edge lengths,
/// normalized by the maximum distance from `source`.
pub fn geodesic_distances(mesh: &TriangleMesh, source: usize) -> Result<GeodesicField, MeshError> {
    let adj = Adjacency::build(mesh);
    let lengths = edge_lengths(mesh, &adj);
    normalized_field(&adj, &lengths, source)
}

/// Memoizing provider of normalized geodesic fields on one (reference) mesh.
///
/// Fields are computed lazily per source vertex; safe to share across threads.
#[derive(Debug)]
pub struct GeodesicCache {
    adj: Adjacency,
    lengths: Vec<Vec<f64>>,
    fields: RwLock<HashMap<usize, Arc<GeodesicField>>>,
}

impl GeodesicCache {
    pub fn new(mesh: &TriangleMesh) -> Result<Self, MeshError> {
        let adj = Adjacency::build(mesh);
        if let Some(vertex) = adj.first_unreachable() {
            return Err(MeshError::Unreachable { from: 0, vertex });
        }
        let lengths = edge_lengths(mesh, &adj);
        Ok(Self { adj, lengths, fields: RwLock::new(HashMap::new()) })
    }

    pub fn vertex_count(&self) -> usize {
        self.adj.vertex_count()
    }

    pub fn field(&self, source: usize) -> Arc<GeodesicField> {
        if let Some(f) = self.fields.read().expect("geodesic cache poisoned").get(&source) {
            return Arc::clone(f);
        }
        // connectivity was checked on construction
        let field = Arc::new(normalized_field(&self.adj, &self.lengths, source).expect("source vertex in range"));
        self.fields.write().expect("geodesic cache poisoned").entry(source).or_insert(field).clone()
    }

    /// Normalized distance from `source` to `vertex`.
    pub fn distance(&self, source: usize, vertex: usize) -> f64 {
        self.field(source).dist[vertex]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cube() -> TriangleMesh {
        let positions = [
            [0., 0., 0.],
            [1., 0., 0.],
            [1., 1., 0.],
            [0., 1., 0.],
            [0., 0., 1.],
            [1., 0., 1.],
            [1., 1., 1.],
            [0., 1., 1.],
        ]
        .iter()
        .map(|p| Vec3::new(p[0], p[1], p[2]))
        .collect();
        let faces = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [1, 2, 6],
            [1, 6, 5],
            [2, 3, 7],
            [2, 7, 6],
            [3, 0, 4],
            [3, 4, 7],
        ];
        TriangleMesh::new(positions, faces)
    }

    #[test]
    fn single_triangle_degrees() {
        let m = TriangleMesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![[0, 1, 2]]);
        let adj = Adjacency::build(&m);
        assert!((0..3).all(|i| adj.degree(i) == 2));
    }

    #[test]
    fn two_triangles_degrees() {
        let m = TriangleMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::new(1., 1., 0.)],
            vec![[0, 1, 2], [1, 3, 2]],
        );
        let adj = Adjacency::build(&m);
        let degrees: Vec<_> = (0..4).map(|i| adj.degree(i)).collect();
        assert_eq!(degrees, vec![2, 3, 3, 2]);
    }

    #[test]
    fn cube_degrees_match_edge_enumeration() {
        let m = cube();
        let adj = Adjacency::build(&m);
        // independent oracle: collect every directed face edge into a set
        let mut set = std::collections::HashSet::new();
        for t in &m.faces {
            for k in 0..3 {
                set.insert((t[k], t[(k + 1) % 3]));
                set.insert((t[(k + 1) % 3], t[k]));
            }
        }
        for i in 0..8 {
            let expected = set.iter().filter(|(a, _)| *a == i).count();
            assert_eq!(adj.degree(i), expected);
            for &j in adj.neighbors(i) {
                assert!(adj.neighbors(j).contains(&i));
            }
        }
        assert_eq!(m.edges().len(), 18);
    }

    #[test]
    fn equilateral_cotangents() {
        let h = 3f64.sqrt() / 2.0;
        let m = TriangleMesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::new(0.5, h, 0.)], vec![[0, 1, 2]]);
        let w = CotanWeights::compute(&m).unwrap();
        assert_eq!(w.len(), 3);
        for (_, c) in w.iter() {
            assert!((c - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn square_diagonal_clamped() {
        let m = TriangleMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::new(1., 1., 0.), Vec3::y()],
            vec![[0, 1, 2], [0, 2, 3]],
        );
        let w = CotanWeights::compute(&m).unwrap();
        assert_eq!(w.get(0, 2), Some(COTAN_MIN));
        assert_eq!(w.get(2, 0), Some(COTAN_MIN));
        // boundary edge (0,1): only the 45 degree corner at vertex 2 contributes
        assert!((w.get(0, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_manifold_edge_rejected() {
        let m = TriangleMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z(), -Vec3::y()],
            vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]],
        );
        assert!(matches!(CotanWeights::compute(&m), Err(MeshError::NonManifoldEdge { a: 0, b: 1 })));
    }

    #[test]
    fn geodesic_collinear_path() {
        // vertices 0..3 on a line 1 apart; each apex sits just off the
        // midpoint of its segment, so it never shortens a route and is
        // never the farthest vertex
        let positions = vec![
            Vec3::new(0., 0., 0.),
            Vec3::new(1., 0., 0.),
            Vec3::new(2., 0., 0.),
            Vec3::new(3., 0., 0.),
            Vec3::new(0.5, 1e-3, 0.),
            Vec3::new(1.5, 1e-3, 0.),
            Vec3::new(2.5, 1e-3, 0.),
        ];
        let m = TriangleMesh::new(positions, vec![[0, 1, 4], [1, 2, 5], [2, 3, 6]]);
        let g = geodesic_distances(&m, 0).unwrap();
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for i in 0..4 {
            assert!((g.dist[i] - expected[i]).abs() < 1e-12, "{i}: {}", g.dist[i]);
        }
        assert_eq!(g.dist.iter().copied().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn disconnected_mesh_unreachable() {
        let m = TriangleMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z(), Vec3::new(0., 1., 1.), Vec3::new(1., 0., 1.)],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        assert!(matches!(geodesic_distances(&m, 0), Err(MeshError::Unreachable { .. })));
        assert!(GeodesicCache::new(&m).is_err());
    }

    #[test]
    fn cache_matches_direct() {
        let m = cube();
        let cache = GeodesicCache::new(&m).unwrap();
        for s in 0..8 {
            assert_eq!(cache.field(s).dist, geodesic_distances(&m, s).unwrap().dist);
        }
        assert_eq!(cache.distance(0, 6), 1.0);
    }

    #[test]
    fn validate_rejects_bad_meshes() {
        let mut m = cube();
        m.faces.push([0, 0, 1]);
        assert!(matches!(m.validate(), Err(MeshError::DegenerateFace { face: 12 })));
        let mut m = cube();
        m.positions[3].x = f64::NAN;
        assert!(matches!(m.validate(), Err(MeshError::NonFinitePosition { vertex: 3 })));
        assert!(matches!(TriangleMesh::new(vec![], vec![]).validate(), Err(MeshError::EmptyMesh)));
    }
}
