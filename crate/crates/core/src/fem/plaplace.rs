//! Vector p-Laplacian `div(|grad u|^(p-2) grad u) = 0` by Picard
//! linearization with an exponent continuation schedule.
//!
//! Each Picard step solves the frozen-weight diffusion problem for the
//! correction `d = K(w(u))^-1 (l - K(w(u)) u)`. Taking the full step diverges
//! for exponents above 2, so the step length is chosen by an exact line search
//! on the convex discrete energy `E(u) = sum_T area_T / q (|G_T|^2 + eps^2)^(q/2) - l.u`,
//! along which the correction is always a descent direction.

use std::collections::BTreeMap;

use crate::geometry::Vec2;
use crate::mesh::{BoundaryCurve, TriMesh};
use crate::par::{ordered_sum, Execution};

use super::assembly::{assemble_scalar_diffusion_cells, neumann_nodal_loads, p1_gradients, Pattern};
use super::sparse::{apply_dirichlet, solve_spd_with, SolverOptions, SparseSystem};
use super::FemError;

#[derive(Debug, Clone, PartialEq)]
pub struct PicardConfig {
    pub p: f64,
    /// Ascending exponents starting at 2 and ending at `p`.
    pub schedule: Vec<f64>,
    /// Gradient floor inside the weight.
    pub eps_g: f64,
    /// Picard iterations per stage.
    pub max_iterations: usize,
    /// Relative change `|u_new - u|_inf / |u_new|_inf` that ends a stage.
    pub tol: f64,
}

impl PicardConfig {
    /// Schedule 2, 2.5, ..., p and a gradient floor of `1e-8 / diameter`.
    pub fn new(p: f64, diameter: f64) -> Self {
        let mut schedule = Vec::new();
        let mut q = 2.0;
        while q < p - 1e-12 {
            schedule.push(q);
            q += 0.5;
        }
        schedule.push(p);
        Self { p, schedule, eps_g: 1e-8 / diameter, max_iterations: 200, tol: 1e-10 }
    }

    pub fn validate(&self) -> Result<(), FemError> {
        let bad = |m: String| Err(FemError::Precondition(m));
        if !(self.p >= 2.0) {
            return bad(format!("p must be at least 2, got {}", self.p));
        }
        if self.schedule.first() != Some(&2.0) || self.schedule.last() != Some(&self.p) {
            return bad("schedule must start at 2 and end at p".into());
        }
        if self.schedule.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("schedule must be strictly increasing".into());
        }
        if !(self.eps_g > 0.0) {
            return bad(format!("eps_g must be positive, got {}", self.eps_g));
        }
        if self.max_iterations == 0 || !(self.tol > 0.0) {
            return bad("need max_iterations > 0 and tol > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardStage {
    pub q: f64,
    pub iterations: usize,
    /// Relative change of the last step.
    pub change: f64,
    /// Nonlinear residual `|l - K(w(u)) u|` on free dofs, relative, per
    /// iteration (measured before each correction).
    pub residuals: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PLaplaceSolution {
    pub u: Vec<Vec2>,
    pub stages: Vec<PicardStage>,
}

impl PLaplaceSolution {
    pub fn final_residual(&self) -> f64 {
        self.stages.last().and_then(|s| s.residuals.last().copied()).unwrap_or(0.0)
    }
}

struct Geometry {
    grads: Vec<[Vec2; 3]>,
    areas: Vec<f64>,
}

fn element_gradient(tri: &[usize; 3], g: &[Vec2; 3], u: &[Vec2]) -> (Vec2, Vec2) {
    let mut gx = Vec2::ZERO;
    let mut gy = Vec2::ZERO;
    for a in 0..3 {
        gx += g[a] * u[tri[a]].x;
        gy += g[a] * u[tri[a]].y;
    }
    (gx, gy)
}

/// Solves the p-Laplacian for the traction `alpha s n` on design edges of
/// `curves`, with `u = 0` on every non-design boundary node. A warm start
/// skips the continuation and iterates at `p` directly.
pub fn solve_p_laplacian(
    mesh: &TriMesh,
    curves: &[BoundaryCurve],
    s: &[f64],
    alpha: f64,
    cfg: &PicardConfig,
    initial: Option<&[Vec2]>,
) -> Result<PLaplaceSolution, FemError> {
    let mut loads = vec![Vec2::ZERO; mesh.node_count()];
    let mut dirichlet = BTreeMap::new();
    for c in curves {
        for (f, l) in neumann_nodal_loads(mesh.node_count(), c, s, true).into_iter().zip(loads.iter_mut()) {
            *l += f * alpha;
        }
        for (j, &i) in c.nodes.iter().enumerate() {
            if !c.design[j] {
                dirichlet.insert(i, Vec2::ZERO);
            }
        }
    }
    if dirichlet.is_empty() {
        return Err(FemError::Precondition("p-Laplacian needs a fixed (non-design) boundary part".into()));
    }
    solve_p_laplacian_general(Execution::default(), mesh, cfg, &loads, &dirichlet, initial)
}

/// Picard solver for arbitrary nodal loads and Dirichlet node values.
pub fn solve_p_laplacian_general(
    exec: Execution,
    mesh: &TriMesh,
    cfg: &PicardConfig,
    loads: &[Vec2],
    dirichlet: &BTreeMap<usize, Vec2>,
    initial: Option<&[Vec2]>,
) -> Result<PLaplaceSolution, FemError> {
    cfg.validate()?;
    let n = mesh.node_count();
    assert_eq!(loads.len(), n, "load vector length");
    let tris = mesh.triangles();
    let geo = {
        let ga = exec.map_range(mesh.triangle_count(), |t| p1_gradients(mesh.vertices(t)));
        Geometry { grads: ga.iter().map(|x| x.0).collect(), areas: ga.iter().map(|x| x.1).collect() }
    };
    let pattern = Pattern::new(mesh, 1);
    let opts = SolverOptions { exec, ..SolverOptions::default() };
    let free: Vec<bool> = (0..n).map(|i| !dirichlet.contains_key(&i)).collect();
    let load_norm = loads.iter().zip(&free).filter(|(_, &f)| f).map(|(l, _)| l.norm_squared()).sum::<f64>().sqrt();

    let mut u: Vec<Vec2> = match initial {
        Some(init) => {
            assert_eq!(init.len(), n, "initial guess length");
            init.to_vec()
        }
        None => vec![Vec2::ZERO; n],
    };
    for (&i, &v) in dirichlet {
        u[i] = v;
    }
    let stages: Vec<f64> = if initial.is_some() { vec![cfg.p] } else { cfg.schedule.clone() };
    let eps2 = cfg.eps_g * cfg.eps_g;
    let mut reference_norm = 0.0f64;
    let mut report = Vec::with_capacity(stages.len());

    for &q in &stages {
        let expo = 0.5 * (q - 2.0);
        let mut stage = PicardStage { q, iterations: 0, change: f64::INFINITY, residuals: Vec::new(), converged: false };
        for it in 1..=cfg.max_iterations {
            stage.iterations = it;
            let grads_u = exec.map_range(tris.len(), |t| element_gradient(&tris[t], &geo.grads[t], &u));
            let weights: Vec<f64> =
                grads_u.iter().map(|(gx, gy)| (gx.norm_squared() + gy.norm_squared() + eps2).powf(expo)).collect();
            let sys = assemble_scalar_diffusion_cells(exec, mesh, &pattern, &weights, 0.0)?;

            // residual r = l - K u on free dofs
            let ux: Vec<f64> = u.iter().map(|v| v.x).collect();
            let uy: Vec<f64> = u.iter().map(|v| v.y).collect();
            let (kx, ky) = (sys.matrix.spmv(&ux), sys.matrix.spmv(&uy));
            let mut rx = vec![0.0; n];
            let mut ry = vec![0.0; n];
            let mut reaction = 0.0;
            for i in 0..n {
                if free[i] {
                    rx[i] = loads[i].x - kx[i];
                    ry[i] = loads[i].y - ky[i];
                } else {
                    reaction += kx[i] * kx[i] + ky[i] * ky[i];
                }
            }
            let rnorm = (ordered_sum(&rx.iter().map(|v| v * v).collect::<Vec<_>>())
                + ordered_sum(&ry.iter().map(|v| v * v).collect::<Vec<_>>()))
            .sqrt();
            let scale = if load_norm > 0.0 {
                load_norm
            } else if reaction > 0.0 {
                reaction.sqrt()
            } else {
                1.0
            };
            stage.residuals.push(rnorm / scale);
            if rnorm == 0.0 {
                stage.change = 0.0;
                stage.converged = true;
                break;
            }

            let solve = |rhs: Vec<f64>| -> Result<Vec<f64>, FemError> {
                let mut c = SparseSystem { matrix: sys.matrix.clone(), rhs, constraints: BTreeMap::new() };
                apply_dirichlet(&mut c, dirichlet.keys().map(|&i| (i, 0.0)))?;
                Ok(solve_spd_with(&c, &opts, None)?.values)
            };
            let (dx, dy) = exec.join(|| solve(rx), || solve(ry));
            let (dx, dy) = (dx?, dy?);
            let d: Vec<Vec2> = dx.iter().zip(&dy).map(|(&a, &b)| Vec2::new(a, b)).collect();
            let grads_d = exec.map_range(tris.len(), |t| element_gradient(&tris[t], &geo.grads[t], &d));
            let load_d = ordered_sum(&loads.iter().zip(&d).map(|(l, v)| l.dot(*v)).collect::<Vec<_>>());

            // derivative of the energy along d
            let dphi = |beta: f64| -> f64 {
                let terms: Vec<f64> = (0..tris.len())
                    .map(|t| {
                        let (ux, uy) = grads_u[t];
                        let (dx, dy) = grads_d[t];
                        let (gx, gy) = (ux + dx * beta, uy + dy * beta);
                        let w = (gx.norm_squared() + gy.norm_squared() + eps2).powf(expo);
                        geo.areas[t] * w * (gx.dot(dx) + gy.dot(dy))
                    })
                    .collect();
                ordered_sum(&terms) - load_d
            };
            let beta = energy_line_search(&dphi);
            if beta == 0.0 {
                stage.change = 0.0;
                stage.converged = true;
                break;
            }
            let mut step_max = 0.0f64;
            for (ui, di) in u.iter_mut().zip(&d) {
                *ui += *di * beta;
                step_max = step_max.max((*di * beta).norm());
            }
            let unorm = u.iter().fold(0.0f64, |m, v| m.max(v.norm()));
            if !unorm.is_finite() {
                return Err(FemError::Diverged { q, growth: f64::INFINITY });
            }
            if reference_norm == 0.0 {
                reference_norm = unorm;
            } else if unorm > 1e3 * reference_norm {
                return Err(FemError::Diverged { q, growth: unorm / reference_norm });
            }
            stage.change = if unorm > 0.0 { step_max / unorm } else { 0.0 };
            if stage.change <= cfg.tol {
                stage.converged = true;
                break;
            }
        }
        if !stage.converged {
            log::warn!(
                "Picard stage q={q} stopped after {} iterations with relative change {:e}",
                stage.iterations,
                stage.change
            );
        }
        report.push(stage);
    }
    Ok(PLaplaceSolution { u, stages: report })
}

/// Root of the increasing function `dphi` on `beta > 0`, starting from the
/// full step. Returns 0 when `dphi(0) >= 0` (no descent).
fn energy_line_search(dphi: &dyn Fn(f64) -> f64) -> f64 {
    let d0 = dphi(0.0);
    if !(d0 < 0.0) {
        return 0.0;
    }
    let (mut lo, mut flo) = (0.0, d0);
    let (mut hi, mut fhi) = (1.0, dphi(1.0));
    let mut expansions = 0;
    while fhi < 0.0 && expansions < 60 {
        lo = hi;
        flo = fhi;
        hi *= 2.0;
        fhi = dphi(hi);
        expansions += 1;
    }
    if fhi < 0.0 {
        return hi;
    }
    // Illinois false position
    let mut side = 0;
    let mut beta = hi;
    for _ in 0..100 {
        beta = (lo * fhi - hi * flo) / (fhi - flo);
        let fb = dphi(beta);
        if fb.abs() <= 1e-12 * d0.abs() || (hi - lo) <= 1e-14 * hi {
            break;
        }
        if fb < 0.0 {
            lo = beta;
            flo = fb;
            if side == -1 {
                fhi *= 0.5;
            }
            side = -1;
        } else {
            hi = beta;
            fhi = fb;
            if side == 1 {
                flo *= 0.5;
            }
            side = 1;
        }
    }
    beta
}
