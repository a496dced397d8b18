//! The level-set benchmark: objective `J = int_Omega f`, its sensitivity
//! `s = f`, the analytic optimal boundary, and externally supplied
//! sensitivities.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::geometry::Vec2;
use crate::mesh::{
    integrate_domain_with, shepard_to_nodes, BoundaryCurve, CellField, MeshError, NodeField, ShepardVariant, TriMesh,
};
use crate::par::Execution;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IllustrativeProblem {
    /// Corner coefficient.
    pub c1: f64,
    /// High-frequency coefficient.
    pub c2: f64,
}

impl IllustrativeProblem {
    pub fn new(c1: f64, c2: f64) -> Self {
        Self { c1, c2 }
    }
}

/// `2x^4 + y^4 - x^2 - 4y^2 - 3 C1 |max(x, y)| + C2/10 (sin 50x + sin 50y)`.
#[inline]
pub fn f_eval(p: Vec2, problem: &IllustrativeProblem) -> f64 {
    let (x, y) = (p.x, p.y);
    let (x2, y2) = (x * x, y * y);
    2.0 * x2 * x2 + y2 * y2 - x2 - 4.0 * y2 - 3.0 * problem.c1 * x.max(y).abs()
        + problem.c2 / 10.0 * ((50.0 * x).sin() + (50.0 * y).sin())
}

pub fn objective(mesh: &TriMesh, problem: &IllustrativeProblem) -> Result<f64, MeshError> {
    objective_with(Execution::default(), mesh, problem)
}

pub fn objective_with(exec: Execution, mesh: &TriMesh, problem: &IllustrativeProblem) -> Result<f64, MeshError> {
    integrate_domain_with(exec, mesh, |p| f_eval(p, problem))
}

/// Nodes that touch a design edge; the sensitivity lives on these.
fn design_edge_nodes(mesh: &TriMesh, curves: &[BoundaryCurve]) -> Vec<bool> {
    let mut mask = vec![false; mesh.node_count()];
    for c in curves {
        for j in 0..c.len() {
            if c.edge_design[j] {
                mask[c.nodes[j]] = true;
                mask[c.nodes[c.next(j)]] = true;
            }
        }
    }
    mask
}

/// `s = f` on every node touching a design edge, zero elsewhere. Junction
/// nodes carry a value so edge quadratures see both endpoints, but every
/// update direction vanishes there.
pub fn sensitivity(mesh: &TriMesh, curves: &[BoundaryCurve], problem: &IllustrativeProblem) -> NodeField<f64> {
    let mask = design_edge_nodes(mesh, curves);
    let values = mesh.nodes().iter().zip(&mask).map(|(&p, &m)| if m { f_eval(p, problem) } else { 0.0 }).collect();
    NodeField::new(values, "objective density")
}

/// Smallest radius `t > 0.31` with `f(t cos phi, t sin phi) = 0`: sign-change
/// scan on a 1e-3 grid up to 4, then bisection to 1e-10.
pub fn levelset_oracle(phi: f64, problem: &IllustrativeProblem) -> Result<f64, ProblemError> {
    if problem.c2 != 0.0 {
        return Err(ProblemError::Oracle(format!("oracle needs C2 = 0, got {}", problem.c2)));
    }
    let dir = Vec2::from_polar(1.0, phi);
    let g = |t: f64| f_eval(dir * t, problem);
    let t0: f64 = 0.31;
    let steps = ((4.0 - t0) / 1e-3).round() as usize;
    let mut a = t0;
    let mut ga = g(a);
    if ga == 0.0 {
        return Ok(a);
    }
    for k in 1..=steps {
        let b = t0 + k as f64 * 1e-3;
        let gb = g(b);
        if gb == 0.0 {
            return Ok(b);
        }
        if ga.signum() != gb.signum() {
            let (mut lo, mut hi) = (a, b);
            while hi - lo > 1e-10 {
                let mid = 0.5 * (lo + hi);
                let gm = g(mid);
                if gm == 0.0 {
                    return Ok(mid);
                }
                if gm.signum() == ga.signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Ok(0.5 * (lo + hi));
        }
        a = b;
        ga = gb;
    }
    Err(ProblemError::Oracle(format!("no sign change of f on [0.31, 4] along phi = {phi}")))
}

/// `G = alpha / N sum_n |theta_n|` over every boundary node of every loop.
pub fn mean_boundary_displacement(theta: &NodeField<Vec2>, alpha: f64, curves: &[BoundaryCurve]) -> f64 {
    let count: usize = curves.iter().map(|c| c.len()).sum();
    if count == 0 {
        return 0.0;
    }
    let total: f64 = curves.iter().flat_map(|c| c.nodes.iter()).map(|&i| theta[i].norm()).sum();
    alpha * total / count as f64
}

/// Source of `J` and the boundary sensitivity for the descent driver.
pub trait SensitivityProvider: Send + Sync {
    fn objective(&self, mesh: &TriMesh) -> Result<f64, ProblemError>;
    /// Per-node sensitivity, nonzero only on nodes touching design edges.
    fn sensitivity(&self, mesh: &TriMesh, curves: &[BoundaryCurve]) -> Result<NodeField<f64>, ProblemError>;
    /// Whether `J` can be evaluated on arbitrary (trial or remeshed) domains.
    fn is_analytic(&self) -> bool;
}

impl SensitivityProvider for IllustrativeProblem {
    fn objective(&self, mesh: &TriMesh) -> Result<f64, ProblemError> {
        Ok(objective(mesh, self)?)
    }

    fn sensitivity(&self, mesh: &TriMesh, curves: &[BoundaryCurve]) -> Result<NodeField<f64>, ProblemError> {
        Ok(sensitivity(mesh, curves, self))
    }

    fn is_analytic(&self) -> bool {
        true
    }
}

/// Sensitivity computed elsewhere on the cells of a fixed mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalSensitivity {
    pub j: f64,
    pub cells: CellField<f64>,
    pub variant: ShepardVariant,
}

impl SensitivityProvider for ExternalSensitivity {
    fn objective(&self, _mesh: &TriMesh) -> Result<f64, ProblemError> {
        Ok(self.j)
    }

    fn sensitivity(&self, mesh: &TriMesh, curves: &[BoundaryCurve]) -> Result<NodeField<f64>, ProblemError> {
        let nodal = shepard_to_nodes(mesh, &self.cells, self.variant)?;
        let mask = design_edge_nodes(mesh, curves);
        let values = nodal.values.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        Ok(NodeField::new(values, nodal.unit))
    }

    fn is_analytic(&self) -> bool {
        false
    }
}

/// Parses `J,<value>` followed by `cell_index,s_value` rows, one per
/// triangle of `mesh`.
pub fn parse_external_sensitivity(text: &str, mesh: &TriMesh) -> Result<ExternalSensitivity, ProblemError> {
    let perr = |line: usize, message: String| ProblemError::Parse { line, message };
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut j = None;
    let mut values = vec![f64::NAN; mesh.triangle_count()];
    let mut seen = vec![false; mesh.triangle_count()];
    let mut rows = 0;
    let mut last_line = 1;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| perr(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        last_line = line;
        if rec.len() != 2 {
            return Err(perr(line, format!("expected 2 fields, got {}", rec.len())));
        }
        let value: f64 =
            rec[1].trim().parse().map_err(|_| perr(line, format!("bad number `{}`", rec[1].trim())))?;
        if !value.is_finite() {
            return Err(perr(line, "non-finite value".into()));
        }
        if j.is_none() {
            if rec[0].trim() != "J" {
                return Err(perr(line, "expected header `J,<value>`".into()));
            }
            j = Some(value);
            continue;
        }
        let idx: usize =
            rec[0].trim().parse().map_err(|_| perr(line, format!("bad cell index `{}`", rec[0].trim())))?;
        if idx >= values.len() {
            return Err(perr(line, format!("cell index {idx} but mesh has {} triangles", values.len())));
        }
        if seen[idx] {
            return Err(perr(line, format!("cell index {idx} repeated")));
        }
        seen[idx] = true;
        values[idx] = value;
        rows += 1;
    }
    let j = j.ok_or_else(|| perr(1, "missing `J,<value>` header".into()))?;
    if rows != values.len() {
        return Err(perr(last_line + 1, format!("{rows} sensitivity rows for {} triangles", values.len())));
    }
    Ok(ExternalSensitivity { j, cells: CellField::new(values, "external"), variant: ShepardVariant::Normalized })
}

pub fn load_external_sensitivity(path: &Path, mesh: &TriMesh) -> Result<ExternalSensitivity, ProblemError> {
    parse_external_sensitivity(&fs::read_to_string(path)?, mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{boundary_loops, structured_rectangle};
    use crate::remesh::generate_annulus;
    use std::f64::consts::PI;

    const PLAIN: IllustrativeProblem = IllustrativeProblem { c1: 0.0, c2: 0.0 };

    #[test]
    fn f_reference_values() {
        assert_eq!(f_eval(Vec2::ZERO, &IllustrativeProblem::new(1.0, 1.0)), 0.0);
        assert_eq!(f_eval(Vec2::new(1.0, 0.0), &PLAIN), 1.0);
        assert_eq!(f_eval(Vec2::new(0.0, 1.0), &PLAIN), -3.0);
        assert_eq!(f_eval(Vec2::new(1.0, 1.0), &IllustrativeProblem::new(1.0, 0.0)), -5.0);
    }

    #[test]
    fn objective_on_single_triangle() {
        let m = TriMesh::from_triangles(
            vec![Vec2::new(0.2, 0.1), Vec2::new(1.0, 0.3), Vec2::new(0.4, 0.9)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let p = IllustrativeProblem::new(1.0, 1.0);
        assert_eq!(objective(&m, &p).unwrap(), f_eval(m.centroid(0), &p) * m.signed_area(0));
    }

    #[test]
    fn objective_two_grid() {
        let a = objective(&generate_annulus(1.0, 0.3, 0.05).unwrap(), &PLAIN).unwrap();
        let b = objective(&generate_annulus(1.0, 0.3, 0.025).unwrap(), &PLAIN).unwrap();
        assert!(a < 0.0 && b < 0.0);
        assert!((a - b).abs() <= 1e-3, "J(h) {a} J(h/2) {b}");
    }

    #[test]
    fn sensitivity_matches_f_on_design_nodes() {
        let m = generate_annulus(1.0, 0.3, 0.1).unwrap();
        let curves = boundary_loops(&m).unwrap();
        let s = sensitivity(&m, &curves, &PLAIN);
        for c in &curves {
            for (j, &i) in c.nodes.iter().enumerate() {
                if c.design[j] {
                    assert_eq!(s[i].to_bits(), f_eval(m.nodes()[i], &PLAIN).to_bits());
                } else {
                    assert_eq!(s[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn oracle_axis_roots() {
        assert!((levelset_oracle(0.0, &PLAIN).unwrap() - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((levelset_oracle(PI / 2.0, &PLAIN).unwrap() - 2.0).abs() < 1e-9);
        assert!(levelset_oracle(0.0, &IllustrativeProblem::new(0.0, 1.0)).is_err());
    }

    #[test]
    fn oracle_diagonal_against_dense_scan() {
        let t = levelset_oracle(PI / 4.0, &PLAIN).unwrap();
        let dir = Vec2::from_polar(1.0, PI / 4.0);
        assert!(f_eval(dir * t, &PLAIN).abs() <= 1e-8);
        // first sign change on a 1e-6 grid
        let mut prev = f_eval(dir * 0.31, &PLAIN);
        let mut k = 1;
        let scan = loop {
            let r = 0.31 + k as f64 * 1e-6;
            let v = f_eval(dir * r, &PLAIN);
            if v.signum() != prev.signum() {
                break r;
            }
            prev = v;
            k += 1;
        };
        assert!((scan - t).abs() <= 1e-6);
    }

    #[test]
    fn oracle_symmetry() {
        for k in 0..12 {
            let phi = 0.1 + k as f64 * 0.25;
            let t = levelset_oracle(phi, &PLAIN).unwrap();
            assert!((levelset_oracle(PI - phi, &PLAIN).unwrap() - t).abs() < 1e-9);
            assert!((levelset_oracle(-phi, &PLAIN).unwrap() - t).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_displacement_cases() {
        let m = structured_rectangle(0.0, 1.0, 0.0, 1.0, 1, 1);
        let curves = boundary_loops(&m).unwrap();
        let zero = NodeField::zeros(4, "m");
        assert_eq!(mean_boundary_displacement(&zero, 1.0, &curves), 0.0);
        let ones = NodeField::new(vec![Vec2::new(0.0, 1.0); 4], "m");
        assert_eq!(mean_boundary_displacement(&ones, 0.5, &curves), 0.5);
        let half = NodeField::new(vec![Vec2::new(1.0, 0.0), Vec2::ZERO, Vec2::new(0.6, 0.8), Vec2::ZERO], "m");
        assert_eq!(mean_boundary_displacement(&half, 1.0, &curves), 0.5);
    }

    #[test]
    fn external_file_roundtrip() {
        let mut m = structured_rectangle(0.0, 1.0, 0.0, 1.0, 2, 2);
        m.mark_design(|_, _| true);
        let curves = boundary_loops(&m).unwrap();
        let mut text = String::from("J,1.0\n");
        for t in 0..m.triangle_count() {
            text.push_str(&format!("{t},1\n"));
        }
        let ext = parse_external_sensitivity(&text, &m).unwrap();
        assert_eq!(ext.objective(&m).unwrap(), 1.0);
        let s = ext.sensitivity(&m, &curves).unwrap();
        let mask = m.boundary_node_mask();
        for i in 0..m.node_count() {
            assert!((s[i] - if mask[i] { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
        let zeros = text.replace(",1\n", ",0\n");
        let ext = parse_external_sensitivity(&zeros, &m).unwrap();
        assert!(ext.sensitivity(&m, &curves).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn external_file_errors() {
        let m = structured_rectangle(0.0, 1.0, 0.0, 1.0, 1, 1);
        let short = "J,2\n0,1\n";
        assert!(matches!(parse_external_sensitivity(short, &m), Err(ProblemError::Parse { line: 3, .. })));
        let bad = "J,2\n0,1\n1,x\n";
        assert!(matches!(parse_external_sensitivity(bad, &m), Err(ProblemError::Parse { line: 3, .. })));
        let header = "K,2\n0,1\n1,1\n";
        assert!(matches!(parse_external_sensitivity(header, &m), Err(ProblemError::Parse { line: 1, .. })));
    }
}
