//! OFF, legacy VTK and boundary-polyline CSV files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{BoundaryCurve, MeshError, NodeField, TriMesh};
use crate::geometry::Vec2;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

fn parse_err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { line, message: message.into() }
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn off_string(mesh: &TriMesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "OFF");
    let _ = writeln!(s, "{} {} 0", mesh.node_count(), mesh.triangle_count());
    for p in mesh.nodes() {
        let _ = writeln!(s, "{} {} 0", fmt_f64(p.x), fmt_f64(p.y));
    }
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

pub fn write_off(path: &Path, mesh: &TriMesh) -> Result<(), IoError> {
    fs::write(path, off_string(mesh))?;
    Ok(())
}

/// Parses an ASCII OFF triangle mesh (z ignored). Boundary loops are derived
/// from the triangles and start out non-design.
pub fn parse_off(text: &str) -> Result<TriMesh, IoError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let (ln, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let mut counts_line = None;
    if header != "OFF" {
        if let Some(rest) = header.strip_prefix("OFF") {
            counts_line = Some((ln, rest.trim()));
        } else {
            return Err(parse_err(ln, "expected OFF header"));
        }
    }
    let (ln, counts) = match counts_line {
        Some(c) => c,
        None => lines.next().ok_or_else(|| parse_err(ln + 1, "missing counts line"))?,
    };
    let nums: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(ln, format!("bad count `{t}`"))))
        .collect::<Result<_, _>>()?;
    if nums.len() < 2 {
        return Err(parse_err(ln, "expected vertex and face counts"));
    }
    let (nv, nf) = (nums[0], nums[1]);
    let mut nodes = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(ln, "unexpected end of vertex list"))?;
        let c: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(ln, format!("bad coordinate `{t}`"))))
            .collect::<Result<_, _>>()?;
        if c.len() < 2 {
            return Err(parse_err(ln, "vertex needs at least two coordinates"));
        }
        nodes.push(Vec2::new(c[0], c[1]));
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(ln, "unexpected end of face list"))?;
        let v: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(ln, format!("bad index `{t}`"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 4 || v[0] != 3 {
            return Err(parse_err(ln, "only triangular faces are supported"));
        }
        triangles.push([v[1], v[2], v[3]]);
    }
    Ok(TriMesh::from_triangles(nodes, triangles)?)
}

pub fn read_off(path: &Path) -> Result<TriMesh, IoError> {
    parse_off(&fs::read_to_string(path)?)
}

/// Legacy VTK ASCII unstructured grid with optional per-node vector fields.
pub fn vtk_string(mesh: &TriMesh, vectors: &[(&str, &NodeField<Vec2>)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "shapedesc mesh");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", mesh.node_count());
    for p in mesh.nodes() {
        let _ = writeln!(s, "{} {} 0", fmt_f64(p.x), fmt_f64(p.y));
    }
    let nt = mesh.triangle_count();
    let _ = writeln!(s, "CELLS {} {}", nt, 4 * nt);
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        let _ = writeln!(s, "5");
    }
    if !vectors.is_empty() {
        let _ = writeln!(s, "POINT_DATA {}", mesh.node_count());
        for (name, field) in vectors {
            let _ = writeln!(s, "VECTORS {name} double");
            for v in &field.values {
                let _ = writeln!(s, "{} {} 0", fmt_f64(v.x), fmt_f64(v.y));
            }
        }
    }
    s
}

pub fn write_vtk(path: &Path, mesh: &TriMesh, vectors: &[(&str, &NodeField<Vec2>)]) -> Result<(), IoError> {
    fs::write(path, vtk_string(mesh, vectors))?;
    Ok(())
}

/// One boundary polyline read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub loop_id: usize,
    pub points: Vec<Vec2>,
    /// Design flag of segment `j -> j + 1`.
    pub design: Vec<bool>,
}

impl Polyline {
    pub fn from_curve(curve: &BoundaryCurve) -> Self {
        Self { loop_id: curve.loop_id, points: curve.points.clone(), design: curve.edge_design.clone() }
    }
}

/// Columns `x,y,loop,design`; `design` flags the segment leaving the row's
/// point.
pub fn boundary_csv_string(curves: &[BoundaryCurve]) -> String {
    let mut s = String::from("x,y,loop,design\n");
    for c in curves {
        for (p, &d) in c.points.iter().zip(&c.edge_design) {
            let _ = writeln!(s, "{},{},{},{}", fmt_f64(p.x), fmt_f64(p.y), c.loop_id, d as u8);
        }
    }
    s
}

pub fn write_boundary_csv(path: &Path, curves: &[BoundaryCurve]) -> Result<(), IoError> {
    fs::write(path, boundary_csv_string(curves))?;
    Ok(())
}

pub fn parse_boundary_csv(text: &str) -> Result<Vec<Polyline>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut out: Vec<Polyline> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() < 3 {
            return Err(parse_err(line, "expected x,y,loop[,design]"));
        }
        let num = |k: usize| -> Result<f64, IoError> {
            rec[k].trim().parse().map_err(|_| parse_err(line, format!("bad number `{}`", &rec[k])))
        };
        let (x, y) = (num(0)?, num(1)?);
        let loop_id: usize =
            rec[2].trim().parse().map_err(|_| parse_err(line, format!("bad loop id `{}`", &rec[2])))?;
        let design = match rec.get(3).map(str::trim) {
            None | Some("0") => false,
            Some("1") => true,
            Some(other) => return Err(parse_err(line, format!("bad design flag `{other}`"))),
        };
        match out.last_mut() {
            Some(p) if p.loop_id == loop_id => {
                p.points.push(Vec2::new(x, y));
                p.design.push(design);
            }
            _ => {
                if out.iter().any(|p| p.loop_id == loop_id) {
                    return Err(parse_err(line, format!("loop {loop_id} rows are not contiguous")));
                }
                out.push(Polyline { loop_id, points: vec![Vec2::new(x, y)], design: vec![design] });
            }
        }
    }
    Ok(out)
}

pub fn read_boundary_csv(path: &Path) -> Result<Vec<Polyline>, IoError> {
    parse_boundary_csv(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{boundary_loops, structured_rectangle};

    #[test]
    fn off_roundtrip_preserves_geometry() {
        let m = structured_rectangle(0.0, 2.0, -1.0, 0.5, 3, 2);
        let back = parse_off(&off_string(&m)).unwrap();
        assert_eq!(back.nodes(), m.nodes());
        assert_eq!(back.triangles(), m.triangles());
    }

    #[test]
    fn off_parse_error_reports_line() {
        let err = parse_off("OFF\n3 1 0\n0 0 0\n1 x 0\n0 1 0\n3 0 1 2\n").unwrap_err();
        assert!(matches!(err, IoError::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn boundary_csv_roundtrip() {
        let mut m = structured_rectangle(0.0, 1.0, 0.0, 1.0, 2, 2);
        m.mark_design(|_, mid| mid.y > 0.99);
        let curves = boundary_loops(&m).unwrap();
        let polys = parse_boundary_csv(&boundary_csv_string(&curves)).unwrap();
        assert_eq!(polys.len(), 1);
        assert_eq!(polys[0], Polyline::from_curve(&curves[0]));
    }

    #[test]
    fn vtk_has_vector_section() {
        let m = structured_rectangle(0.0, 1.0, 0.0, 1.0, 1, 1);
        let f = NodeField::new(vec![Vec2::new(1.0, 2.0); 4], "m");
        let s = vtk_string(&m, &[("theta", &f)]);
        assert!(s.contains("POINT_DATA 4\nVECTORS theta double\n"));
        assert!(s.contains("CELL_TYPES 2\n5\n5\n"));
    }
}
