//! P1 finite elements: diffusion, plane-strain elasticity, the p-Laplacian
//! and wall distance.

pub mod assembly;
pub mod plaplace;
pub mod sparse;

use std::collections::BTreeMap;

use thiserror::Error;

pub use assembly::{
    apply_neumann_load, assemble_elasticity, assemble_elasticity_with, assemble_scalar_diffusion,
    assemble_scalar_diffusion_cells, mass_load, neumann_nodal_loads, p1_gradients, ElasticityParams, Pattern,
};
pub use plaplace::{solve_p_laplacian, solve_p_laplacian_general, PLaplaceSolution, PicardConfig, PicardStage};
pub use sparse::{apply_dirichlet, solve_spd, solve_spd_with, CsrMatrix, Solution, SolverOptions, SparseSystem};

use crate::geometry::{point_segment_distance, Vec2};
use crate::mesh::{MeshError, NodeField, TriMesh};
use crate::par::Execution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("assembly: {0}")]
    Assembly(String),
    #[error("constraint: {0}")]
    Constraint(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("CG reached {iterations} iterations with relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("Picard iteration diverged at exponent {q} (iterate norm grew by {growth:e})")]
    Diverged { q: f64, growth: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Distance from every node to the nearest boundary segment.
pub fn wall_distance(mesh: &TriMesh) -> NodeField<f64> {
    wall_distance_with(Execution::default(), mesh)
}

pub fn wall_distance_with(exec: Execution, mesh: &TriMesh) -> NodeField<f64> {
    let nodes = mesh.nodes();
    let segs: Vec<(Vec2, Vec2)> =
        mesh.boundary_edges().iter().map(|e| (nodes[e.nodes[0]], nodes[e.nodes[1]])).collect();
    let values = exec.map_slice(nodes, |&p| {
        segs.iter().fold(f64::INFINITY, |m, &(a, b)| m.min(point_segment_distance(p, a, b)))
    });
    NodeField::new(values, "length")
}

/// Solves the same scalar matrix for both components of a vector field with
/// per-node loads and Dirichlet values. Components run concurrently when
/// parallel execution is enabled.
pub fn solve_componentwise(
    matrix: &CsrMatrix,
    loads: &[Vec2],
    dirichlet: &BTreeMap<usize, Vec2>,
    opts: &SolverOptions,
) -> Result<(Vec<Vec2>, [Solution; 2]), FemError> {
    let build = |c: usize| -> Result<Solution, FemError> {
        let mut sys = SparseSystem::new(matrix.clone());
        sys.rhs = loads.iter().map(|f| if c == 0 { f.x } else { f.y }).collect();
        apply_dirichlet(&mut sys, dirichlet.iter().map(|(&i, v)| (i, if c == 0 { v.x } else { v.y })))?;
        solve_spd_with(&sys, opts, None)
    };
    let (x, y) = opts.exec.join(|| build(0), || build(1));
    let (x, y) = (x?, y?);
    let u = x.values.iter().zip(&y.values).map(|(&a, &b)| Vec2::new(a, b)).collect();
    Ok((u, [x, y]))
}

/// Splits an interleaved two-dof-per-node vector into node vectors.
pub fn interleaved_to_vec2(values: &[f64]) -> Vec<Vec2> {
    values.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect()
}
