//! Planar triangle meshes with tagged boundary loops.
//!
//! A [`TriMesh`] stores counterclockwise triangles and the boundary edges,
//! each oriented so the domain lies to its left. [`boundary_loops`] turns the
//! edges into ordered [`BoundaryCurve`]s carrying spacings and averaged node
//! normals, which is the representation every boundary operator works on.

pub mod io;

use std::collections::HashMap;

use thiserror::Error;

use crate::geometry::{orient, Vec2};
use crate::par::{ordered_sum, Execution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("triangle {triangle} references node {node}, mesh has {count} nodes")]
    IndexOutOfRange { triangle: usize, node: usize, count: usize },
    #[error("triangle {triangle} has non-positive signed area {area:e}")]
    NonPositiveArea { triangle: usize, area: f64 },
    #[error("boundary edge ({0}, {1}) is shared by {2} triangles, expected exactly one")]
    NonManifoldBoundary(usize, usize, usize),
    #[error("edge ({0}, {1}) lies on a single triangle but is not tagged as boundary")]
    UntaggedBoundary(usize, usize),
    #[error("boundary node {0} does not have exactly one incoming and one outgoing edge")]
    BoundaryBranch(usize),
    #[error("boundary loop {0} is not closed")]
    OpenLoop(usize),
    #[error("mesh has no boundary edges")]
    NoBoundary,
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("field has {got} entries, expected {expected}")]
    FieldLength { got: usize, expected: usize },
    #[error("node {0} has no adjacent triangle")]
    IsolatedNode(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    /// Oriented so the domain lies to the left of `nodes[0] -> nodes[1]`.
    pub nodes: [usize; 2],
    pub loop_id: usize,
    pub design: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    nodes: Vec<Vec2>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
}

impl TriMesh {
    /// Builds a mesh and checks every structural invariant. Boundary edges
    /// given against the orientation of their triangle are flipped.
    pub fn new(
        nodes: Vec<Vec2>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
    ) -> Result<Self, MeshError> {
        let mut mesh = Self::from_raw_parts(nodes, triangles, boundary_edges);
        mesh.validate_geometry()?;
        let directed = mesh.directed_edge_owner();
        let counts = mesh.edge_triangle_counts();
        for e in &mut mesh.boundary_edges {
            let [a, b] = e.nodes;
            let key = (a.min(b), a.max(b));
            let c = counts.get(&key).copied().unwrap_or(0);
            if c != 1 {
                return Err(MeshError::NonManifoldBoundary(a, b, c));
            }
            if !directed.contains_key(&(a, b)) {
                e.nodes = [b, a];
            }
        }
        let tagged: std::collections::HashSet<(usize, usize)> = mesh
            .boundary_edges
            .iter()
            .map(|e| (e.nodes[0].min(e.nodes[1]), e.nodes[0].max(e.nodes[1])))
            .collect();
        for (&(a, b), &c) in &counts {
            if c == 1 && !tagged.contains(&(a, b)) {
                return Err(MeshError::UntaggedBoundary(a, b));
            }
        }
        mesh.boundary_edges.sort_by_key(|e| (e.loop_id, e.nodes));
        boundary_loops(&mesh)?;
        Ok(mesh)
    }

    /// Builds a mesh whose boundary edges are derived from the triangles.
    /// Loops are numbered in order of their smallest node index; every edge
    /// starts as non-design.
    pub fn from_triangles(nodes: Vec<Vec2>, triangles: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let mesh = Self::from_raw_parts(nodes, triangles, Vec::new());
        mesh.validate_geometry()?;
        let counts = mesh.edge_triangle_counts();
        let mut next: HashMap<usize, usize> = HashMap::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                if counts[&(a.min(b), a.max(b))] == 1 && next.insert(a, b).is_some() {
                    return Err(MeshError::BoundaryBranch(a));
                }
            }
        }
        if next.is_empty() {
            return Err(MeshError::NoBoundary);
        }
        let mut starts: Vec<usize> = next.keys().copied().collect();
        starts.sort_unstable();
        let mut visited = std::collections::HashSet::new();
        let mut edges = Vec::with_capacity(next.len());
        let mut loop_id = 0;
        for s in starts {
            if visited.contains(&s) {
                continue;
            }
            let mut a = s;
            loop {
                visited.insert(a);
                let b = next[&a];
                edges.push(BoundaryEdge { nodes: [a, b], loop_id, design: false });
                a = b;
                if a == s {
                    break;
                }
                if visited.contains(&a) {
                    return Err(MeshError::BoundaryBranch(a));
                }
            }
            loop_id += 1;
        }
        Self::new(mesh.nodes, mesh.triangles, edges)
    }

    /// Assembles a mesh without checking any invariant.
    pub fn from_raw_parts(
        nodes: Vec<Vec2>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
    ) -> Self {
        Self { nodes, triangles, boundary_edges }
    }

    fn validate_geometry(&self) -> Result<(), MeshError> {
        for (i, p) in self.nodes.iter().enumerate() {
            if !p.is_finite() {
                return Err(MeshError::NonFinite { what: "node coordinate", index: i });
            }
        }
        let n = self.nodes.len();
        for (ti, t) in self.triangles.iter().enumerate() {
            for &v in t {
                if v >= n {
                    return Err(MeshError::IndexOutOfRange { triangle: ti, node: v, count: n });
                }
            }
            let area = self.signed_area(ti);
            if !(area > 0.0) {
                return Err(MeshError::NonPositiveArea { triangle: ti, area });
            }
        }
        Ok(())
    }

    /// Re-checks positivity of every triangle; used after displacement.
    pub fn check_positive_areas(&self) -> Result<(), MeshError> {
        for ti in 0..self.triangles.len() {
            let area = self.signed_area(ti);
            if !(area > 0.0) {
                return Err(MeshError::NonPositiveArea { triangle: ti, area });
            }
        }
        Ok(())
    }

    fn edge_triangle_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::with_capacity(self.triangles.len() * 2);
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    fn directed_edge_owner(&self) -> HashMap<(usize, usize), usize> {
        let mut owner = HashMap::with_capacity(self.triangles.len() * 3);
        for (ti, t) in self.triangles.iter().enumerate() {
            for k in 0..3 {
                owner.insert((t[k], t[(k + 1) % 3]), ti);
            }
        }
        owner
    }

    pub fn nodes(&self) -> &[Vec2] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertices(&self, t: usize) -> [Vec2; 3] {
        let [a, b, c] = self.triangles[t];
        [self.nodes[a], self.nodes[b], self.nodes[c]]
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.vertices(t);
        0.5 * orient(a, b, c)
    }

    pub fn centroid(&self, t: usize) -> Vec2 {
        let [a, b, c] = self.vertices(t);
        (a + b + c) / 3.0
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.signed_area(t)).sum()
    }

    /// Largest distance between two boundary nodes.
    pub fn diameter(&self) -> f64 {
        let mut ids: Vec<usize> = self.boundary_edges.iter().map(|e| e.nodes[0]).collect();
        if ids.is_empty() {
            ids = (0..self.nodes.len()).collect();
        }
        let mut d2: f64 = 0.0;
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                d2 = d2.max((self.nodes[a] - self.nodes[b]).norm_squared());
            }
        }
        d2.sqrt()
    }

    /// Sets the design flag of every boundary edge from a predicate on the
    /// edge and its midpoint.
    pub fn mark_design<F: Fn(&BoundaryEdge, Vec2) -> bool>(&mut self, pred: F) {
        for i in 0..self.boundary_edges.len() {
            let e = self.boundary_edges[i];
            let mid = (self.nodes[e.nodes[0]] + self.nodes[e.nodes[1]]) * 0.5;
            self.boundary_edges[i].design = pred(&e, mid);
        }
    }

    /// Triangles adjacent to each node, in ascending triangle order.
    pub fn node_triangles(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (ti, t) in self.triangles.iter().enumerate() {
            for &v in t {
                adj[v].push(ti);
            }
        }
        adj
    }

    /// Whether each node lies on the boundary.
    pub fn boundary_node_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        for e in &self.boundary_edges {
            mask[e.nodes[0]] = true;
            mask[e.nodes[1]] = true;
        }
        mask
    }

    /// Rigidly transforms the mesh: rotation by `angle` about the origin then
    /// translation. Topology and flags are preserved.
    pub fn transformed(&self, angle: f64, shift: Vec2) -> TriMesh {
        let nodes = self.nodes.iter().map(|p| p.rotated(angle) + shift).collect();
        Self::from_raw_parts(nodes, self.triangles.clone(), self.boundary_edges.clone())
    }
}

/// Values that can live in a [`NodeField`] or [`CellField`].
pub trait FieldValue:
    Copy
    + Default
    + Send
    + Sync
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<f64, Output = Self>
    + std::fmt::Debug
{
    fn is_finite_value(&self) -> bool;
    fn magnitude(&self) -> f64;
}

impl FieldValue for f64 {
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
    fn magnitude(&self) -> f64 {
        self.abs()
    }
}

impl FieldValue for Vec2 {
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeField<T> {
    pub values: Vec<T>,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellField<T> {
    pub values: Vec<T>,
    pub unit: String,
}

macro_rules! field_impl {
    ($name:ident, $what:literal) => {
        impl<T: FieldValue> $name<T> {
            pub fn new(values: Vec<T>, unit: impl Into<String>) -> Self {
                Self { values, unit: unit.into() }
            }

            pub fn zeros(len: usize, unit: impl Into<String>) -> Self {
                Self::new(vec![T::default(); len], unit)
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            pub fn check(&self, expected_len: usize) -> Result<(), MeshError> {
                if self.values.len() != expected_len {
                    return Err(MeshError::FieldLength { got: self.values.len(), expected: expected_len });
                }
                match self.values.iter().position(|v| !v.is_finite_value()) {
                    Some(index) => Err(MeshError::NonFinite { what: $what, index }),
                    None => Ok(()),
                }
            }

            pub fn max_magnitude(&self) -> f64 {
                self.values.iter().fold(0.0, |m, v| m.max(v.magnitude()))
            }
        }

        impl<T> std::ops::Index<usize> for $name<T> {
            type Output = T;
            fn index(&self, i: usize) -> &T {
                &self.values[i]
            }
        }
    };
}

field_impl!(NodeField, "node field value");
field_impl!(CellField, "cell field value");

/// An ordered closed boundary loop with the domain on its left.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCurve {
    pub loop_id: usize,
    /// Mesh node indices in loop order.
    pub nodes: Vec<usize>,
    pub points: Vec<Vec2>,
    /// `spacing[j]` is the distance from node `j - 1` to node `j`.
    pub spacing: Vec<f64>,
    /// Unit outward normal of edge `j -> j + 1`.
    pub edge_normals: Vec<Vec2>,
    /// Averaged (unnormalized) outward node normals.
    pub normals: Vec<Vec2>,
    /// Design flag of edge `j -> j + 1`.
    pub edge_design: Vec<bool>,
    /// A node is a design node when both adjacent edges are design edges;
    /// junction nodes belong to the fixed part.
    pub design: Vec<bool>,
}

impl BoundaryCurve {
    /// Builds a curve from an ordered closed polyline (domain on the left).
    pub fn from_polyline(loop_id: usize, nodes: Vec<usize>, points: Vec<Vec2>, edge_design: Vec<bool>) -> Self {
        let n = points.len();
        assert!(n >= 3 && nodes.len() == n && edge_design.len() == n, "degenerate boundary loop");
        let spacing: Vec<f64> = (0..n).map(|j| points[j].distance(points[(j + n - 1) % n])).collect();
        let edge_normals: Vec<Vec2> =
            (0..n).map(|j| (points[(j + 1) % n] - points[j]).perp_cw().normalized()).collect();
        let normals = (0..n).map(|j| (edge_normals[(j + n - 1) % n] + edge_normals[j]) * 0.5).collect();
        let design = (0..n).map(|j| edge_design[(j + n - 1) % n] && edge_design[j]).collect();
        Self { loop_id, nodes, points, spacing, edge_normals, normals, edge_design, design }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn next(&self, j: usize) -> usize {
        (j + 1) % self.len()
    }

    #[inline]
    pub fn prev(&self, j: usize) -> usize {
        (j + self.len() - 1) % self.len()
    }

    pub fn length(&self) -> f64 {
        self.spacing.iter().sum()
    }

    pub fn has_design(&self) -> bool {
        self.design.iter().any(|&d| d)
    }

    /// Scales every averaged normal to unit length.
    pub fn renormalize_normals(&mut self) {
        for n in &mut self.normals {
            *n = n.normalized();
        }
    }

    /// Gathers node-indexed values onto the loop.
    pub fn gather<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.nodes.iter().map(|&i| values[i]).collect()
    }

    /// Signed enclosed area (positive for counterclockwise loops).
    pub fn signed_area(&self) -> f64 {
        let n = self.len();
        0.5 * (0..n).map(|j| self.points[j].cross(self.points[(j + 1) % n])).sum::<f64>()
    }

    /// Exterior turning angle at node `j` in radians, signed (positive for
    /// left turns).
    pub fn turning_angle(&self, j: usize) -> f64 {
        let a = self.points[j] - self.points[self.prev(j)];
        let b = self.points[self.next(j)] - self.points[j];
        a.cross(b).atan2(a.dot(b))
    }
}

/// Averaged outward normal at loop position `j`: half the sum of the unit
/// normals of the two adjacent edges, without renormalization.
pub fn node_normal(curve: &BoundaryCurve, j: usize) -> Vec2 {
    let n = curve.len();
    (curve.edge_normals[(j + n - 1) % n] + curve.edge_normals[j]) * 0.5
}

/// Splits the boundary edges into closed loops ordered by loop id.
pub fn boundary_loops(mesh: &TriMesh) -> Result<Vec<BoundaryCurve>, MeshError> {
    if mesh.boundary_edges.is_empty() {
        return Err(MeshError::NoBoundary);
    }
    let counts = mesh.edge_triangle_counts();
    for e in &mesh.boundary_edges {
        let [a, b] = e.nodes;
        let c = counts.get(&(a.min(b), a.max(b))).copied().unwrap_or(0);
        if c != 1 {
            return Err(MeshError::NonManifoldBoundary(a, b, c));
        }
    }
    let mut loop_ids: Vec<usize> = mesh.boundary_edges.iter().map(|e| e.loop_id).collect();
    loop_ids.sort_unstable();
    loop_ids.dedup();
    let mut curves = Vec::with_capacity(loop_ids.len());
    for id in loop_ids {
        let edges: Vec<&BoundaryEdge> = mesh.boundary_edges.iter().filter(|e| e.loop_id == id).collect();
        let mut next: HashMap<usize, (usize, bool)> = HashMap::with_capacity(edges.len());
        let mut incoming: HashMap<usize, usize> = HashMap::with_capacity(edges.len());
        for e in &edges {
            if next.insert(e.nodes[0], (e.nodes[1], e.design)).is_some() {
                return Err(MeshError::BoundaryBranch(e.nodes[0]));
            }
            *incoming.entry(e.nodes[1]).or_insert(0) += 1;
        }
        if let Some((&v, _)) = incoming.iter().find(|(_, &c)| c != 1) {
            return Err(MeshError::BoundaryBranch(v));
        }
        let start = edges[0].nodes[0];
        let mut nodes = Vec::with_capacity(edges.len());
        let mut design = Vec::with_capacity(edges.len());
        let mut v = start;
        loop {
            let &(w, d) = next.get(&v).ok_or(MeshError::OpenLoop(id))?;
            nodes.push(v);
            design.push(d);
            v = w;
            if v == start {
                break;
            }
            if nodes.len() > edges.len() {
                return Err(MeshError::OpenLoop(id));
            }
        }
        if nodes.len() != edges.len() {
            return Err(MeshError::OpenLoop(id));
        }
        let points = nodes.iter().map(|&i| mesh.nodes[i]).collect();
        curves.push(BoundaryCurve::from_polyline(id, nodes, points, design));
    }
    Ok(curves)
}

/// One-point centroid rule: `sum_T f(centroid_T) * area_T`.
pub fn integrate_domain<F>(mesh: &TriMesh, f: F) -> Result<f64, MeshError>
where
    F: Fn(Vec2) -> f64 + Sync + Send,
{
    integrate_domain_with(Execution::default(), mesh, f)
}

pub fn integrate_domain_with<F>(exec: Execution, mesh: &TriMesh, f: F) -> Result<f64, MeshError>
where
    F: Fn(Vec2) -> f64 + Sync + Send,
{
    let terms = exec.map_range(mesh.triangle_count(), |t| f(mesh.centroid(t)) * mesh.signed_area(t));
    if let Some(index) = terms.iter().position(|v| !v.is_finite()) {
        return Err(MeshError::NonFinite { what: "integrand", index });
    }
    Ok(ordered_sum(&terms))
}

/// Smallest interior angle of triangle `(a, b, c)` in degrees; zero for
/// degenerate or inverted triangles.
pub fn triangle_min_angle(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    if !(orient(a, b, c) > 0.0) {
        return 0.0;
    }
    let angle = |p: Vec2, q: Vec2, r: Vec2| {
        let u = q - p;
        let v = r - p;
        u.cross(v).abs().atan2(u.dot(v))
    };
    let m = angle(a, b, c).min(angle(b, c, a)).min(angle(c, a, b));
    m.to_degrees()
}

/// Minimum interior angle over all triangles, in degrees.
pub fn min_quality(mesh: &TriMesh) -> f64 {
    (0..mesh.triangle_count())
        .map(|t| {
            let [a, b, c] = mesh.vertices(t);
            triangle_min_angle(a, b, c)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Moves every node by `alpha * theta`. Triangle validity is not rechecked.
pub fn displace(mesh: &TriMesh, theta: &NodeField<Vec2>, alpha: f64) -> TriMesh {
    assert_eq!(theta.len(), mesh.node_count(), "displacement field length");
    let nodes = mesh.nodes.iter().zip(&theta.values).map(|(&p, &t)| p + t * alpha).collect();
    TriMesh::from_raw_parts(nodes, mesh.triangles.clone(), mesh.boundary_edges.clone())
}

/// Moves every node by a precomputed displacement.
pub fn displace_by(mesh: &TriMesh, displacement: &[Vec2]) -> TriMesh {
    assert_eq!(displacement.len(), mesh.node_count(), "displacement field length");
    let nodes = mesh.nodes.iter().zip(displacement).map(|(&p, &d)| p + d).collect();
    TriMesh::from_raw_parts(nodes, mesh.triangles.clone(), mesh.boundary_edges.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShepardVariant {
    /// `(1/N) sum_c v_c (1 - d_c / sum_d d_d)`, which does not reproduce
    /// constants.
    Verbatim,
    /// Same weights divided by their sum.
    #[default]
    Normalized,
}

/// Inverse-distance (Shepard) transfer of cell-center values to nodes.
pub fn shepard_to_nodes<T: FieldValue>(
    mesh: &TriMesh,
    cells: &CellField<T>,
    variant: ShepardVariant,
) -> Result<NodeField<T>, MeshError> {
    cells.check(mesh.triangle_count())?;
    let adjacency = mesh.node_triangles();
    if let Some(i) = adjacency.iter().position(|a| a.is_empty()) {
        return Err(MeshError::IsolatedNode(i));
    }
    let centroids: Vec<Vec2> = (0..mesh.triangle_count()).map(|t| mesh.centroid(t)).collect();
    let mut out = Vec::with_capacity(mesh.node_count());
    for (i, adj) in adjacency.iter().enumerate() {
        let x = mesh.nodes[i];
        let dists: Vec<f64> = adj.iter().map(|&c| x.distance(centroids[c])).collect();
        let total: f64 = dists.iter().sum();
        let count = adj.len() as f64;
        let mut acc = T::default();
        let mut wsum = 0.0;
        for (&c, &d) in adj.iter().zip(&dists) {
            let w = 1.0 - d / total;
            acc = acc + cells.values[c] * w;
            wsum += w;
        }
        let value = match variant {
            ShepardVariant::Verbatim => {
                if adj.len() == 1 {
                    log::warn!("node {i} has a single adjacent cell; verbatim Shepard weight vanishes");
                }
                acc * (1.0 / count)
            }
            ShepardVariant::Normalized => {
                if adj.len() == 1 {
                    cells.values[adj[0]]
                } else {
                    acc * (1.0 / wsum)
                }
            }
        };
        out.push(value);
    }
    Ok(NodeField::new(out, cells.unit.clone()))
}

/// Structured triangulation of `[x0, x1] x [y0, y1]` with `nx * ny` cells,
/// each split along its rising diagonal. Boundary edges are non-design.
pub fn structured_rectangle(x0: f64, x1: f64, y0: f64, y1: f64, nx: usize, ny: usize) -> TriMesh {
    assert!(nx > 0 && ny > 0 && x1 > x0 && y1 > y0);
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = x0 + (x1 - x0) * i as f64 / nx as f64;
            let y = y0 + (y1 - y0) * j as f64 / ny as f64;
            nodes.push(Vec2::new(x, y));
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    TriMesh::from_triangles(nodes, triangles).expect("structured rectangle is valid")
}
