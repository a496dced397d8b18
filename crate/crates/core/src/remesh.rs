//! Initial meshes for the benchmark geometries and boundary-preserving
//! remeshing.
//!
//! Boundary loops are resampled at the target spacing (keeping sharp
//! vertices), triangulated with a constrained Delaunay triangulation and
//! refined until every triangle meets the angle and size goals.

use std::f64::consts::PI;

use spade::{AngleLimit, ConstrainedDelaunayTriangulation, Point2, RefinementParameters, Triangulation};
use thiserror::Error;

use crate::geometry::{point_segment_distance, segments_intersect, Vec2};
use crate::mesh::io::Polyline;
use crate::mesh::{min_quality, BoundaryCurve, MeshError, TriMesh};

/// Vertices whose turning angle exceeds this survive resampling.
pub const CORNER_ANGLE_DEG: f64 = 30.0;
/// Minimum interior angle every generated mesh must reach.
pub const MIN_ANGLE_DEG: f64 = 20.0;

// Refinement targets a few degrees above the acceptance floor.
const REFINE_ANGLE_DEG: f64 = 25.0;
// Area bound relative to an equilateral triangle of edge h; calibrated so the
// mean interior edge length lands near h.
const AREA_FACTOR: f64 = 1.6;

#[derive(Debug, Error)]
pub enum RemeshError {
    #[error("invalid mesh parameter: {0}")]
    InvalidParameter(String),
    #[error("boundary loop {0} intersects itself")]
    SelfIntersecting(usize),
    #[error("boundary loops {0} and {1} intersect")]
    LoopsIntersect(usize, usize),
    #[error("refinement reached minimum angle {achieved:.3} deg, goal {goal:.3} deg")]
    Infeasible { achieved: f64, goal: f64 },
    #[error("triangulation failed: {0}")]
    Triangulation(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone)]
pub struct MeshSpec {
    /// Target edge length.
    pub h: f64,
    pub loops: Vec<Polyline>,
    pub min_angle_deg: f64,
}

impl MeshSpec {
    pub fn new(h: f64, loops: Vec<Polyline>) -> Self {
        Self { h, loops, min_angle_deg: MIN_ANGLE_DEG }
    }
}

/// Regular polygon with the same area as the circle of `radius`.
fn circle(loop_id: usize, radius: f64, h: f64, design: bool) -> Polyline {
    let n = ((2.0 * PI * radius / h).round() as usize).max(3);
    let x = 2.0 * PI / n as f64;
    let r = radius * (x / x.sin()).sqrt();
    let points = (0..n).map(|k| Vec2::from_polar(r, x * k as f64)).collect();
    Polyline { loop_id, points, design: vec![design; n] }
}

/// Annulus with a design outer circle of radius `outer` and a fixed inner
/// circle of radius `inner`.
pub fn generate_annulus(outer: f64, inner: f64, h: f64) -> Result<TriMesh, RemeshError> {
    if !(inner > 0.0 && inner < outer) {
        return Err(RemeshError::InvalidParameter(format!("need 0 < r < R, got r={inner}, R={outer}")));
    }
    if !(h > 0.0 && h < outer - inner) {
        return Err(RemeshError::InvalidParameter(format!("need 0 < h < R - r, got h={h}")));
    }
    mesh_region(&MeshSpec::new(h, vec![circle(0, outer, h, true), circle(1, inner, h, false)]))
}

/// Square rotated by 45 degrees (corners on the axes) around a fixed inner
/// circle.
pub fn generate_diamond_annulus(circumradius: f64, inner: f64, h: f64) -> Result<TriMesh, RemeshError> {
    // the inscribed radius bounds the hole
    let inscribed = circumradius / 2f64.sqrt();
    if !(inner > 0.0 && inner < inscribed) {
        return Err(RemeshError::InvalidParameter(format!(
            "need 0 < r < circumradius/sqrt(2), got r={inner}, circumradius={circumradius}"
        )));
    }
    if !(h > 0.0 && h < inscribed - inner) {
        return Err(RemeshError::InvalidParameter(format!("h={h} too large for the diamond")));
    }
    let corners = [
        Vec2::new(circumradius, 0.0),
        Vec2::new(0.0, circumradius),
        Vec2::new(-circumradius, 0.0),
        Vec2::new(0.0, -circumradius),
    ];
    let per_side = ((circumradius * 2f64.sqrt() / h).round() as usize).max(1);
    let mut points = Vec::with_capacity(4 * per_side);
    for k in 0..4 {
        let (a, b) = (corners[k], corners[(k + 1) % 4]);
        for i in 0..per_side {
            points.push(a + (b - a) * (i as f64 / per_side as f64));
        }
    }
    let n = points.len();
    let outer = Polyline { loop_id: 0, points, design: vec![true; n] };
    mesh_region(&MeshSpec::new(h, vec![outer, circle(1, inner, h, false)]))
}

/// Remeshes the region bounded by `curves` at target spacing `h`.
pub fn remesh(curves: &[BoundaryCurve], h: f64) -> Result<TriMesh, RemeshError> {
    let polys: Vec<Polyline> = curves.iter().map(Polyline::from_curve).collect();
    remesh_polylines(&polys, h)
}

pub fn remesh_polylines(loops: &[Polyline], h: f64) -> Result<TriMesh, RemeshError> {
    if !(h > 0.0) {
        return Err(RemeshError::InvalidParameter(format!("h must be positive, got {h}")));
    }
    check_simple(loops)?;
    let resampled = loops.iter().map(|p| resample_loop(p, h)).collect();
    mesh_region(&MeshSpec::new(h, resampled))
}

/// Signed turning angle at each vertex of a closed polyline, in degrees.
pub fn turning_angles_deg(points: &[Vec2]) -> Vec<f64> {
    let n = points.len();
    (0..n)
        .map(|j| {
            let a = points[j] - points[(j + n - 1) % n];
            let b = points[(j + 1) % n] - points[j];
            a.cross(b).atan2(a.dot(b)).to_degrees()
        })
        .collect()
}

fn nearest_segment_design(p: Vec2, loops: &[Polyline]) -> bool {
    let mut best = (f64::INFINITY, false);
    for l in loops {
        let n = l.points.len();
        for j in 0..n {
            let d = point_segment_distance(p, l.points[j], l.points[(j + 1) % n]);
            if d < best.0 {
                best = (d, l.design[j]);
            }
        }
    }
    best.1
}

/// Resamples a closed polyline by arc length at spacing close to `h`,
/// keeping every vertex whose turning angle exceeds [`CORNER_ANGLE_DEG`].
pub fn resample_loop(poly: &Polyline, h: f64) -> Polyline {
    let n = poly.points.len();
    let turning = turning_angles_deg(&poly.points);
    let mut corners: Vec<usize> = (0..n).filter(|&j| turning[j].abs() > CORNER_ANGLE_DEG).collect();
    let closed_smooth = corners.is_empty();
    if closed_smooth {
        corners.push(0);
    }
    let seg_len = |j: usize| poly.points[j].distance(poly.points[(j + 1) % n]);
    let mut points = Vec::new();
    for (ci, &start) in corners.iter().enumerate() {
        let end = if closed_smooth { start + n } else { corners[(ci + 1) % corners.len()] + if ci + 1 == corners.len() { n } else { 0 } };
        // cumulative arc length along the path start..end (indices mod n)
        let mut cum = vec![0.0];
        for j in start..end {
            cum.push(cum.last().unwrap() + seg_len(j % n));
        }
        let length = *cum.last().unwrap();
        let min_pieces = if closed_smooth { 3 } else { 1 };
        let pieces = ((length / h).round() as usize).max(min_pieces);
        points.push(poly.points[start % n]);
        let mut seg = 0;
        for k in 1..pieces {
            let s = length * k as f64 / pieces as f64;
            while seg + 1 < cum.len() - 1 && cum[seg + 1] < s {
                seg += 1;
            }
            let t = ((s - cum[seg]) / (cum[seg + 1] - cum[seg])).clamp(0.0, 1.0);
            let a = poly.points[(start + seg) % n];
            let b = poly.points[(start + seg + 1) % n];
            points.push(a + (b - a) * t);
        }
    }
    let m = points.len();
    let source = std::slice::from_ref(poly);
    let design = (0..m).map(|j| nearest_segment_design((points[j] + points[(j + 1) % m]) * 0.5, source)).collect();
    Polyline { loop_id: poly.loop_id, points, design }
}

/// Rejects self-intersecting or mutually intersecting loops.
pub fn check_simple(loops: &[Polyline]) -> Result<(), RemeshError> {
    for l in loops {
        if l.points.len() < 3 {
            return Err(RemeshError::InvalidParameter(format!("loop {} has fewer than 3 points", l.loop_id)));
        }
    }
    match first_crossing(loops) {
        None => Ok(()),
        Some((a, b)) if a == b => Err(RemeshError::SelfIntersecting(loops[a].loop_id)),
        Some((a, b)) => Err(RemeshError::LoopsIntersect(loops[a].loop_id, loops[b].loop_id)),
    }
}

/// Sweep over segments sorted by their smallest x; returns the loop indices
/// of the first crossing pair found.
fn first_crossing(loops: &[Polyline]) -> Option<(usize, usize)> {
    struct Seg {
        l: usize,
        j: usize,
        a: Vec2,
        b: Vec2,
        lo: f64,
        hi: f64,
    }
    let mut segs = Vec::new();
    for (l, poly) in loops.iter().enumerate() {
        let n = poly.points.len();
        for j in 0..n {
            let (a, b) = (poly.points[j], poly.points[(j + 1) % n]);
            segs.push(Seg { l, j, a, b, lo: a.x.min(b.x), hi: a.x.max(b.x) });
        }
    }
    segs.sort_by(|p, q| p.lo.total_cmp(&q.lo).then(p.l.cmp(&q.l)).then(p.j.cmp(&q.j)));
    let adjacent = |p: &Seg, q: &Seg| {
        let n = loops[p.l].points.len();
        p.l == q.l && (p.j == q.j || (p.j + 1) % n == q.j || (q.j + 1) % n == p.j)
    };
    let mut active: Vec<usize> = Vec::new();
    for k in 0..segs.len() {
        let cur = &segs[k];
        active.retain(|&i| segs[i].hi >= cur.lo);
        for &i in &active {
            let other = &segs[i];
            if !adjacent(cur, other) && segments_intersect(cur.a, cur.b, other.a, other.b) {
                return Some((other.l.min(cur.l), other.l.max(cur.l)));
            }
        }
        active.push(k);
    }
    None
}

/// Constrained Delaunay triangulation of the region enclosed by the loops
/// (odd winding number) followed by quality refinement. Boundary design flags
/// come from the nearest input segment.
pub fn mesh_region(spec: &MeshSpec) -> Result<TriMesh, RemeshError> {
    let h = spec.h;
    if !(h > 0.0) {
        return Err(RemeshError::InvalidParameter(format!("h must be positive, got {h}")));
    }
    let mut vertices = Vec::new();
    let mut edges = Vec::new();
    for l in &spec.loops {
        let base = vertices.len();
        let n = l.points.len();
        vertices.extend(l.points.iter().map(|p| Point2::new(p.x, p.y)));
        edges.extend((0..n).map(|j| [base + j, base + (j + 1) % n]));
    }
    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> =
        ConstrainedDelaunayTriangulation::bulk_load_cdt(vertices, edges)
            .map_err(|e| RemeshError::Triangulation(format!("{e:?}")))?;
    let max_area = AREA_FACTOR * 3f64.sqrt() / 4.0 * h * h;
    let expected = spec.loops.iter().map(|l| l.points.len()).sum::<usize>();
    let params = RefinementParameters::<f64>::new()
        .exclude_outer_faces(true)
        .with_angle_limit(AngleLimit::from_deg(REFINE_ANGLE_DEG))
        .with_max_allowed_area(max_area)
        .with_max_additional_vertices(100 * expected + 1_000_000);
    let result = cdt.refine(params);
    if !result.refinement_complete {
        return Err(RemeshError::Triangulation("refinement ran out of vertices".into()));
    }
    let excluded: std::collections::HashSet<_> = result.excluded_faces.into_iter().collect();

    let mut index = vec![usize::MAX; cdt.num_vertices()];
    let mut nodes = Vec::new();
    let mut triangles = Vec::new();
    for face in cdt.inner_faces() {
        if excluded.contains(&face.fix()) {
            continue;
        }
        let mut tri = [0usize; 3];
        for (k, v) in face.vertices().iter().enumerate() {
            let vi = v.fix().index();
            if index[vi] == usize::MAX {
                index[vi] = nodes.len();
                let p = v.position();
                nodes.push(Vec2::new(p.x, p.y));
            }
            tri[k] = index[vi];
        }
        let [a, b, c] = tri;
        if crate::geometry::orient(nodes[a], nodes[b], nodes[c]) < 0.0 {
            tri.swap(1, 2);
        }
        triangles.push(tri);
    }
    let mut mesh = TriMesh::from_triangles(nodes, triangles)?;
    mesh.mark_design(|_, mid| nearest_segment_design(mid, &spec.loops));
    let q = min_quality(&mesh);
    if q < spec.min_angle_deg {
        return Err(RemeshError::Infeasible { achieved: q, goal: spec.min_angle_deg });
    }
    Ok(mesh)
}
