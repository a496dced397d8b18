//! P1 assembly of diffusion and plane-strain elasticity systems and boundary
//! loads.
//!
//! Element matrices are computed independently (in parallel when enabled)
//! and scattered into a precomputed sparsity pattern in element order, so the
//! assembled values never depend on the thread count.

use crate::geometry::Vec2;
use crate::mesh::{BoundaryCurve, TriMesh};
use crate::par::Execution;

use super::sparse::{CsrMatrix, SparseSystem};
use super::FemError;

/// Gradients of the three barycentric basis functions and the area.
#[inline]
pub fn p1_gradients(p: [Vec2; 3]) -> ([Vec2; 3], f64) {
    let area2 = crate::geometry::orient(p[0], p[1], p[2]);
    let g = |j: usize, k: usize| Vec2::new(p[j].y - p[k].y, p[k].x - p[j].x) / area2;
    ([g(1, 2), g(2, 0), g(0, 1)], 0.5 * area2)
}

/// CSR structure of a P1 system plus, for every element, the value slot of
/// each local matrix entry.
#[derive(Debug, Clone)]
pub struct Pattern {
    pub dofs_per_node: usize,
    template: CsrMatrix,
    slots: Vec<usize>,
}

impl Pattern {
    pub fn new(mesh: &TriMesh, dofs_per_node: usize) -> Self {
        let d = dofs_per_node;
        let local = 3 * d;
        let dof = |t: &[usize; 3], i: usize| t[i / d] * d + i % d;
        let mut triplets = Vec::with_capacity(mesh.triangle_count() * local * local);
        for t in mesh.triangles() {
            for i in 0..local {
                for j in 0..local {
                    triplets.push((dof(t, i), dof(t, j), 0.0));
                }
            }
        }
        let template = CsrMatrix::from_triplets(mesh.node_count() * d, &triplets);
        let mut slots = Vec::with_capacity(triplets.len());
        for t in mesh.triangles() {
            for i in 0..local {
                let r = dof(t, i);
                let span = template.row_ptr[r]..template.row_ptr[r + 1];
                for j in 0..local {
                    let k = template.col_idx[span.clone()].binary_search(&dof(t, j)).expect("pattern entry");
                    slots.push(span.start + k);
                }
            }
        }
        Self { dofs_per_node, template, slots }
    }

    /// Scatters row-major element matrices (one per triangle, in order).
    pub fn scatter(&self, element_matrices: &[Vec<f64>]) -> CsrMatrix {
        let local = 3 * self.dofs_per_node;
        let mut m = self.template.clone();
        for (e, k) in element_matrices.iter().enumerate() {
            let slots = &self.slots[e * local * local..(e + 1) * local * local];
            for (s, v) in slots.iter().zip(k) {
                m.values[*s] += v;
            }
        }
        m
    }
}

/// Stiffness `sum_T kappa(centroid_T) grad(phi_a).grad(phi_b) area_T` plus
/// `mass_coeff` times the consistent mass matrix.
pub fn assemble_scalar_diffusion<F>(mesh: &TriMesh, conductivity: F, mass_coeff: f64) -> Result<SparseSystem, FemError>
where
    F: Fn(Vec2) -> f64 + Sync + Send,
{
    let exec = Execution::default();
    let kappa = exec.map_range(mesh.triangle_count(), |t| conductivity(mesh.centroid(t)));
    assemble_scalar_diffusion_cells(exec, mesh, &Pattern::new(mesh, 1), &kappa, mass_coeff)
}

/// Diffusion assembly from per-triangle conductivities.
pub fn assemble_scalar_diffusion_cells(
    exec: Execution,
    mesh: &TriMesh,
    pattern: &Pattern,
    kappa: &[f64],
    mass_coeff: f64,
) -> Result<SparseSystem, FemError> {
    assert_eq!(pattern.dofs_per_node, 1);
    if kappa.len() != mesh.triangle_count() {
        return Err(FemError::Assembly(format!(
            "{} conductivities for {} triangles",
            kappa.len(),
            mesh.triangle_count()
        )));
    }
    if let Some(t) = kappa.iter().position(|&k| !(k > 0.0 && k.is_finite())) {
        return Err(FemError::Assembly(format!("conductivity {} at triangle {t} is not positive", kappa[t])));
    }
    let locals = exec.map_range(mesh.triangle_count(), |t| {
        let (g, area) = p1_gradients(mesh.vertices(t));
        let mut k = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                let mass = if i == j { area / 6.0 } else { area / 12.0 };
                k[3 * i + j] = kappa[t] * g[i].dot(g[j]) * area + mass_coeff * mass;
            }
        }
        k
    });
    Ok(SparseSystem::new(pattern.scatter(&locals)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticityParams {
    pub lambda: f64,
    pub mu: f64,
}

impl Default for ElasticityParams {
    fn default() -> Self {
        Self { lambda: 0.0, mu: 1.0 }
    }
}

impl ElasticityParams {
    pub fn validate(&self) -> Result<(), FemError> {
        if !(self.mu > 0.0) || !(self.lambda + self.mu > 0.0) {
            return Err(FemError::Assembly(format!(
                "Lame constants need mu > 0 and lambda + mu > 0, got lambda={}, mu={}",
                self.lambda, self.mu
            )));
        }
        Ok(())
    }
}

pub fn assemble_elasticity(mesh: &TriMesh, params: ElasticityParams) -> Result<SparseSystem, FemError> {
    assemble_elasticity_with(Execution::default(), mesh, &Pattern::new(mesh, 2), params)
}

/// Plane-strain P1 stiffness; dof `2 i + c` is component `c` of node `i`.
pub fn assemble_elasticity_with(
    exec: Execution,
    mesh: &TriMesh,
    pattern: &Pattern,
    params: ElasticityParams,
) -> Result<SparseSystem, FemError> {
    assert_eq!(pattern.dofs_per_node, 2);
    params.validate()?;
    let (l, mu) = (params.lambda, params.mu);
    let d = [[l + 2.0 * mu, l, 0.0], [l, l + 2.0 * mu, 0.0], [0.0, 0.0, mu]];
    let locals = exec.map_range(mesh.triangle_count(), |t| {
        let (g, area) = p1_gradients(mesh.vertices(t));
        // strain rows (xx, yy, engineering xy)
        let mut b = [[0.0; 6]; 3];
        for a in 0..3 {
            b[0][2 * a] = g[a].x;
            b[1][2 * a + 1] = g[a].y;
            b[2][2 * a] = g[a].y;
            b[2][2 * a + 1] = g[a].x;
        }
        let mut db = [[0.0; 6]; 3];
        for r in 0..3 {
            for c in 0..6 {
                db[r][c] = (0..3).map(|k| d[r][k] * b[k][c]).sum();
            }
        }
        let mut k = vec![0.0; 36];
        for i in 0..6 {
            for j in 0..6 {
                k[6 * i + j] = area * (0..3).map(|r| b[r][i] * db[r][j]).sum::<f64>();
            }
        }
        k
    });
    Ok(SparseSystem::new(pattern.scatter(&locals)))
}

/// Nodal forces of `int_{design edges} s n v dGamma` with the trapezoidal rule
/// and the constant unit normal of each edge. `s` is indexed by mesh node.
pub fn neumann_nodal_loads(node_count: usize, curve: &BoundaryCurve, s: &[f64], design_only: bool) -> Vec<Vec2> {
    let mut f = vec![Vec2::ZERO; node_count];
    for j in 0..curve.len() {
        if design_only && !curve.edge_design[j] {
            continue;
        }
        let k = curve.next(j);
        let (a, b) = (curve.nodes[j], curve.nodes[k]);
        let half = 0.5 * curve.spacing[k];
        let n = curve.edge_normals[j];
        f[a] += n * (half * s[a]);
        f[b] += n * (half * s[b]);
    }
    f
}

/// Adds the traction load `s n` to a two-dof-per-node system.
pub fn apply_neumann_load(system: &mut SparseSystem, curve: &BoundaryCurve, s: &[f64], design_only: bool) {
    let nodes = system.dofs() / 2;
    for (i, f) in neumann_nodal_loads(nodes, curve, s, design_only).into_iter().enumerate() {
        system.rhs[2 * i] += f.x;
        system.rhs[2 * i + 1] += f.y;
    }
}

/// Consistent-mass load vector `M f_I` of the nodal interpolant of `f`.
pub fn mass_load<F: Fn(Vec2) -> f64>(mesh: &TriMesh, f: F) -> Vec<f64> {
    let fi: Vec<f64> = mesh.nodes().iter().map(|&p| f(p)).collect();
    let mut b = vec![0.0; mesh.node_count()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.signed_area(t);
        for i in 0..3 {
            for j in 0..3 {
                let m = if i == j { area / 6.0 } else { area / 12.0 };
                b[tri[i]] += m * fi[tri[j]];
            }
        }
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::sparse::{apply_dirichlet, solve_spd};
    use crate::mesh::{boundary_loops, structured_rectangle};

    fn sq(n: usize) -> TriMesh {
        structured_rectangle(0.0, 1.0, 0.0, 1.0, n, n)
    }

    #[test]
    fn gradients_sum_to_zero() {
        let (g, area) = p1_gradients([Vec2::new(0.1, 0.2), Vec2::new(1.3, -0.1), Vec2::new(0.4, 0.9)]);
        assert!(area > 0.0);
        assert!((g[0] + g[1] + g[2]).norm() < 1e-14);
    }

    #[test]
    fn diffusion_linear_in_kappa() {
        let m = sq(4);
        let a = assemble_scalar_diffusion(&m, |_| 1.0, 0.0).unwrap();
        let b = assemble_scalar_diffusion(&m, |_| 2.0, 0.0).unwrap();
        assert_eq!(b.matrix, a.matrix.scaled(2.0));
    }

    #[test]
    fn diffusion_rejects_nonpositive_conductivity() {
        assert!(matches!(assemble_scalar_diffusion(&sq(2), |p| p.x - 0.5, 0.0), Err(FemError::Assembly(_))));
    }

    #[test]
    fn mass_matrix_sums_to_area() {
        let m = sq(3);
        let s = assemble_scalar_diffusion(&m, |_| 1e-300, 1.0).unwrap();
        let total: f64 = s.matrix.values.iter().sum();
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn matrices_are_symmetric() {
        let m = crate::remesh::generate_annulus(1.0, 0.3, 0.2).unwrap();
        let d = assemble_scalar_diffusion(&m, |p| 1.0 + p.x * p.x, 0.3).unwrap();
        let e = assemble_elasticity(&m, ElasticityParams { lambda: 0.7, mu: 1.3 }).unwrap();
        assert!(d.matrix.asymmetry() < 1e-12);
        assert!(e.matrix.asymmetry() < 1e-12);
    }

    #[test]
    fn elasticity_kernel_contains_translations() {
        let m = sq(3);
        let k = assemble_elasticity(&m, ElasticityParams { lambda: 1.0, mu: 1.0 }).unwrap().matrix;
        for c in 0..2 {
            let t: Vec<f64> = (0..k.n).map(|i| if i % 2 == c { 1.0 } else { 0.0 }).collect();
            assert!(k.spmv(&t).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn patch_tests() {
        let m = sq(5);
        let mask = m.boundary_node_mask();
        let mut d = assemble_scalar_diffusion(&m, |_| 1.0, 0.0).unwrap();
        let lin = |p: Vec2| 0.3 + 2.0 * p.x - p.y;
        apply_dirichlet(&mut d, (0..m.node_count()).filter(|&i| mask[i]).map(|i| (i, lin(m.nodes()[i])))).unwrap();
        let u = solve_spd(&d, 1e-13).unwrap();
        for (i, p) in m.nodes().iter().enumerate() {
            assert!((u.values[i] - lin(*p)).abs() < 1e-10);
        }

        let mut e = assemble_elasticity(&m, ElasticityParams { lambda: 0.5, mu: 1.0 }).unwrap();
        let cons = (0..m.node_count()).filter(|&i| mask[i]).flat_map(|i| [(2 * i, m.nodes()[i].x), (2 * i + 1, 0.0)]);
        apply_dirichlet(&mut e, cons).unwrap();
        let u = solve_spd(&e, 1e-13).unwrap();
        for (i, p) in m.nodes().iter().enumerate() {
            assert!((u.values[2 * i] - p.x).abs() < 1e-10);
            assert!(u.values[2 * i + 1].abs() < 1e-10);
        }
    }

    #[test]
    fn full_circle_load_has_no_net_force() {
        let m = crate::remesh::generate_annulus(1.0, 0.3, 0.1).unwrap();
        let loops = boundary_loops(&m).unwrap();
        let s = vec![1.0; m.node_count()];
        let outer = loops.iter().find(|c| c.has_design()).unwrap();
        let f: Vec2 = neumann_nodal_loads(m.node_count(), outer, &s, true).into_iter().fold(Vec2::ZERO, |a, b| a + b);
        assert!(f.norm() < 1e-12);
    }

    #[test]
    fn half_circle_load_has_net_force_2r() {
        let mut m = crate::remesh::generate_annulus(1.0, 0.3, 0.05).unwrap();
        m.mark_design(|_, mid| mid.norm() > 0.6 && mid.y > 0.0);
        let loops = boundary_loops(&m).unwrap();
        let outer = loops.iter().find(|c| c.has_design()).unwrap();
        let s = vec![1.0; m.node_count()];
        let f: Vec2 = neumann_nodal_loads(m.node_count(), outer, &s, true).into_iter().fold(Vec2::ZERO, |a, b| a + b);
        // closed-form: the chord between the two half-circle endpoints
        assert!((f.norm() - 2.0).abs() < 0.01, "{f:?}");
        let zero = neumann_nodal_loads(m.node_count(), outer, &vec![0.0; m.node_count()], true);
        assert!(zero.iter().all(|v| *v == Vec2::ZERO));
    }
}
