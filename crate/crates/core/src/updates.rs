//! Turning a sensitivity into a domain update direction `theta`.
//!
//! Boundary methods (DS, FS, SLB, VLB) build `theta` on the design boundary
//! and extend it into the domain; the Steklov-Poincare variants (SP-SM,
//! SP-WD) and the p-harmonic descent (PHD) solve a domain problem loaded by
//! the traction `s n` directly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::boundary_ops::{self, BoundaryError, FilterConfig};
use crate::fem::{
    self, apply_dirichlet, apply_neumann_load, assemble_elasticity_with, assemble_scalar_diffusion_cells,
    interleaved_to_vec2, neumann_nodal_loads, solve_componentwise, solve_spd_with, ElasticityParams, FemError,
    Pattern, PicardConfig, PicardStage, SolverOptions,
};
use crate::geometry::Vec2;
use crate::mesh::{BoundaryCurve, MeshError, NodeField, TriMesh};
use crate::par::Execution;

#[derive(Debug, Error)]
pub enum UpdateError {
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid method `{0}`")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateMethod {
    /// Direct sensitivity `theta = -n s`.
    Ds,
    /// Gaussian boundary filter of width `sigma`.
    Fs { sigma: f64 },
    /// Scalar Laplace-Beltrami smoothing of `s` with conductivity `a`.
    Slb { a: f64 },
    /// Vector Laplace-Beltrami smoothing of `n s`.
    Vlb { a: f64 },
    /// Steklov-Poincare with plane-strain elasticity.
    SpSm,
    /// Steklov-Poincare with wall-distance diffusion.
    SpWd,
    /// p-harmonic descent.
    Phd { p: f64 },
}

impl UpdateMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            UpdateMethod::Ds => "DS",
            UpdateMethod::Fs { .. } => "FS",
            UpdateMethod::Slb { .. } => "SLB",
            UpdateMethod::Vlb { .. } => "VLB",
            UpdateMethod::SpSm => "SP-SM",
            UpdateMethod::SpWd => "SP-WD",
            UpdateMethod::Phd { .. } => "PHD",
        }
    }

    pub fn is_boundary_method(&self) -> bool {
        matches!(self, UpdateMethod::Ds | UpdateMethod::Fs { .. } | UpdateMethod::Slb { .. } | UpdateMethod::Vlb { .. })
    }

    pub fn validate(&self) -> Result<(), UpdateError> {
        let bad = |m: String| Err(UpdateError::Precondition(m));
        match *self {
            UpdateMethod::Fs { sigma } if !(sigma > 0.0 && sigma.is_finite()) => bad(format!("FS sigma={sigma}")),
            UpdateMethod::Slb { a } | UpdateMethod::Vlb { a } if !(a >= 0.0 && a.is_finite()) => {
                bad(format!("{} needs A >= 0, got {a}", self.tag()))
            }
            UpdateMethod::Phd { p } if !(p >= 2.0 && p.is_finite()) => bad(format!("PHD needs p >= 2, got {p}")),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for UpdateMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateMethod::Fs { sigma } => write!(f, "FS:sigma={sigma}"),
            UpdateMethod::Slb { a } => write!(f, "SLB:A={a}"),
            UpdateMethod::Vlb { a } => write!(f, "VLB:A={a}"),
            UpdateMethod::Phd { p } => write!(f, "PHD:p={p}"),
            other => f.write_str(other.tag()),
        }
    }
}

/// Accepts `DS`, `FS[:sigma=v]`, `SLB[:A=v]`, `VLB[:A=v]`, `SP-SM`, `SP-WD`
/// and `PHD[:p=v]`; omitted parameters take their defaults (sigma 0.1,
/// A 0.1, p 4).
impl FromStr for UpdateMethod {
    type Err = UpdateError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let err = || UpdateError::Parse(text.to_string());
        let (tag, param) = match text.trim().split_once(':') {
            Some((t, p)) => (t.trim(), Some(p.trim())),
            None => (text.trim(), None),
        };
        let value = |key: &str, default: f64| -> Result<f64, UpdateError> {
            match param {
                None => Ok(default),
                Some(p) => {
                    let (k, v) = p.split_once('=').ok_or_else(err)?;
                    if !k.trim().eq_ignore_ascii_case(key) {
                        return Err(err());
                    }
                    v.trim().parse().map_err(|_| err())
                }
            }
        };
        let no_param = |m: UpdateMethod| if param.is_some() { Err(err()) } else { Ok(m) };
        match tag.to_ascii_uppercase().as_str() {
            "DS" => no_param(UpdateMethod::Ds),
            "FS" => Ok(UpdateMethod::Fs { sigma: value("sigma", 0.1)? }),
            "SLB" => Ok(UpdateMethod::Slb { a: value("A", 0.1)? }),
            "VLB" => Ok(UpdateMethod::Vlb { a: value("A", 0.1)? }),
            "SP-SM" => no_param(UpdateMethod::SpSm),
            "SP-WD" => no_param(UpdateMethod::SpWd),
            "PHD" => Ok(UpdateMethod::Phd { p: value("p", 4.0)? }),
            _ => Err(err()),
        }
    }
}

/// Constitutive model used to extend boundary directions into the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Extension {
    Elasticity,
    #[default]
    WallDistance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateConfig {
    pub method: UpdateMethod,
    pub extension: Extension,
    /// Lame constants for SP-SM and the elasticity extension.
    pub elasticity: ElasticityParams,
    /// Wall-distance offset; `None` means `1e-3` times the domain diameter.
    pub epsilon: Option<f64>,
    /// Picard settings for PHD; `None` derives them from `p`.
    pub picard: Option<PicardConfig>,
    pub renormalize_normals: bool,
    pub exec: Execution,
}

impl UpdateConfig {
    pub fn new(method: UpdateMethod) -> Self {
        Self {
            method,
            extension: Extension::default(),
            elasticity: ElasticityParams::default(),
            epsilon: None,
            picard: None,
            renormalize_normals: false,
            exec: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<(), UpdateError> {
        self.method.validate()?;
        self.elasticity.validate()?;
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(UpdateError::Precondition(format!("epsilon must be positive, got {e}")));
            }
        }
        if let Some(p) = &self.picard {
            p.validate()?;
        }
        Ok(())
    }

    fn epsilon_for(&self, mesh: &TriMesh) -> f64 {
        self.epsilon.unwrap_or_else(|| 1e-3 * mesh.diameter())
    }

    fn picard_for(&self, mesh: &TriMesh, p: f64) -> PicardConfig {
        self.picard.clone().unwrap_or_else(|| PicardConfig::new(p, mesh.diameter()))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// Largest relative residual among the linear solves.
    pub solver_residual: f64,
    pub solver_iterations: usize,
    pub picard: Vec<PicardStage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult {
    /// Domain update direction on every node.
    pub theta: NodeField<Vec2>,
    /// First-order change of `J` per unit step.
    pub predicted_decrease: f64,
    pub diagnostics: Diagnostics,
    /// PHD only: the raw solution `u` for load `alpha_hint s n`.
    pub phd_state: Option<(f64, Vec<Vec2>)>,
}

impl UpdateResult {
    /// Boundary restriction `theta^Gamma` of one loop.
    pub fn theta_gamma(&self, curve: &BoundaryCurve) -> Vec<Vec2> {
        curve.gather(&self.theta.values)
    }
}

fn prepared_curves(curves: &[BoundaryCurve], renormalize: bool) -> Vec<BoundaryCurve> {
    let mut out = curves.to_vec();
    if renormalize {
        out.iter_mut().for_each(BoundaryCurve::renormalize_normals);
    }
    out
}

fn fixed_nodes(curves: &[BoundaryCurve]) -> Vec<usize> {
    let mut out: Vec<usize> =
        curves.iter().flat_map(|c| c.nodes.iter().zip(&c.design).filter(|(_, &d)| !d).map(|(&i, _)| i)).collect();
    out.sort_unstable();
    out
}

/// Computes the update direction for `s` (indexed by mesh node).
pub fn compute_update(
    mesh: &TriMesh,
    curves: &[BoundaryCurve],
    s: &NodeField<f64>,
    cfg: &UpdateConfig,
    alpha_hint: f64,
) -> Result<UpdateResult, UpdateError> {
    compute_update_from(mesh, curves, s, cfg, alpha_hint, None)
}

/// As [`compute_update`]; for PHD, `guess` (a p-Laplacian solution on the
/// same mesh topology) starts the nonlinear iteration at the target `p`.
pub fn compute_update_from(
    mesh: &TriMesh,
    curves: &[BoundaryCurve],
    s: &NodeField<f64>,
    cfg: &UpdateConfig,
    alpha_hint: f64,
    guess: Option<&[Vec2]>,
) -> Result<UpdateResult, UpdateError> {
    cfg.validate()?;
    s.check(mesh.node_count())?;
    let curves = prepared_curves(curves, cfg.renormalize_normals);
    let n = mesh.node_count();
    let mut diag = Diagnostics::default();
    let mut phd_state = None;
    let theta: Vec<Vec2> = if cfg.method.is_boundary_method() {
        let mut gamma = vec![Vec2::ZERO; n];
        for c in &curves {
            let sl = c.gather(&s.values);
            let tl = match cfg.method {
                UpdateMethod::Ds => boundary_ops::direct_sensitivity(c, &sl),
                UpdateMethod::Fs { sigma } => boundary_ops::filter_sensitivity(c, &sl, FilterConfig { sigma })?,
                UpdateMethod::Slb { a } => {
                    let u = boundary_ops::solve_slb(c, &sl, a)?;
                    (0..c.len()).map(|j| c.normals[j] * -u[j]).collect()
                }
                UpdateMethod::Vlb { a } => boundary_ops::solve_vlb(c, &sl, a)?.into_iter().map(|v| -v).collect(),
                _ => unreachable!(),
            };
            for (j, &i) in c.nodes.iter().enumerate() {
                gamma[i] = if c.design[j] { tl[j] } else { Vec2::ZERO };
            }
        }
        let (theta, d) = extend_to_domain_impl(mesh, &gamma, cfg)?;
        diag = d;
        theta
    } else {
        let fixed = fixed_nodes(&curves);
        if fixed.is_empty() {
            return Err(UpdateError::Precondition(format!(
                "{} needs a fixed (non-design) boundary part",
                cfg.method.tag()
            )));
        }
        match cfg.method {
            UpdateMethod::SpSm => {
                let mut sys = assemble_elasticity_with(cfg.exec, mesh, &Pattern::new(mesh, 2), cfg.elasticity)?;
                for c in &curves {
                    apply_neumann_load(&mut sys, c, &s.values, true);
                }
                apply_dirichlet(&mut sys, fixed.iter().flat_map(|&i| [(2 * i, 0.0), (2 * i + 1, 0.0)]))?;
                let sol = solve_spd_with(&sys, &SolverOptions { exec: cfg.exec, ..SolverOptions::default() }, None)?;
                diag.solver_residual = sol.residual;
                diag.solver_iterations = sol.iterations;
                interleaved_to_vec2(&sol.values).into_iter().map(|v| -v).collect()
            }
            UpdateMethod::SpWd => {
                let kappa = wall_conductivity(mesh, cfg.epsilon_for(mesh), cfg.exec);
                let sys = assemble_scalar_diffusion_cells(cfg.exec, mesh, &Pattern::new(mesh, 1), &kappa, 0.0)?;
                let mut loads = vec![Vec2::ZERO; n];
                for c in &curves {
                    for (l, f) in loads.iter_mut().zip(neumann_nodal_loads(n, c, &s.values, true)) {
                        *l += f;
                    }
                }
                let dir: BTreeMap<usize, Vec2> = fixed.iter().map(|&i| (i, Vec2::ZERO)).collect();
                let opts = SolverOptions { exec: cfg.exec, ..SolverOptions::default() };
                let (u, sols) = solve_componentwise(&sys.matrix, &loads, &dir, &opts)?;
                diag.solver_residual = sols[0].residual.max(sols[1].residual);
                diag.solver_iterations = sols[0].iterations + sols[1].iterations;
                u.into_iter().map(|v| -v).collect()
            }
            UpdateMethod::Phd { p } => {
                if !(alpha_hint > 0.0 && alpha_hint.is_finite()) {
                    return Err(UpdateError::Precondition(format!("alpha_hint must be positive, got {alpha_hint}")));
                }
                let picard = cfg.picard_for(mesh, p);
                let guess = guess.filter(|g| g.len() == n);
                let sol = fem::solve_p_laplacian(mesh, &curves, &s.values, alpha_hint, &picard, guess)?;
                diag.solver_residual = sol.final_residual();
                diag.picard = sol.stages.clone();
                let theta = sol.u.iter().map(|&v| v * (-1.0 / alpha_hint)).collect();
                phd_state = Some((alpha_hint, sol.u));
                theta
            }
            _ => unreachable!(),
        }
    };
    let theta = NodeField::new(theta, "length");
    theta.check(n)?;
    let predicted = predicted_decrease(&curves, &s.values, &theta.values);
    Ok(UpdateResult { theta, predicted_decrease: predicted, diagnostics: diag, phd_state })
}

/// PHD displacement for step `alpha`: `-u(alpha)` where `u(alpha)` solves the
/// p-Laplacian loaded by `alpha s n`. `previous` (a solution for another
/// step) is rescaled by homogeneity as the warm start.
pub fn phd_displacement(
    mesh: &TriMesh,
    curves: &[BoundaryCurve],
    s: &NodeField<f64>,
    cfg: &UpdateConfig,
    alpha: f64,
    previous: Option<(f64, &[Vec2])>,
) -> Result<Vec<Vec2>, UpdateError> {
    let UpdateMethod::Phd { p } = cfg.method else {
        return Err(UpdateError::Precondition("phd_displacement needs the PHD method".into()));
    };
    let curves = prepared_curves(curves, cfg.renormalize_normals);
    let picard = cfg.picard_for(mesh, p);
    let warm: Option<Vec<Vec2>> =
        previous.map(|(a0, u0)| u0.iter().map(|&v| v * (alpha / a0).powf(1.0 / (p - 1.0))).collect());
    let sol = fem::solve_p_laplacian(mesh, &curves, &s.values, alpha, &picard, warm.as_deref())?;
    Ok(sol.u.into_iter().map(|v| -v).collect())
}

/// Element conductivities `1 / (w + eps)` from the mean nodal wall distance.
pub fn wall_conductivity(mesh: &TriMesh, epsilon: f64, exec: Execution) -> Vec<f64> {
    let w = fem::wall_distance_with(exec, mesh);
    mesh.triangles().iter().map(|t| 1.0 / ((w[t[0]] + w[t[1]] + w[t[2]]) / 3.0 + epsilon)).collect()
}

/// Extends boundary values (`theta_gamma` indexed by node; only boundary
/// entries are read) into the domain with Dirichlet data on every boundary
/// node.
pub fn extend_to_domain(
    mesh: &TriMesh,
    theta_gamma: &[Vec2],
    cfg: &UpdateConfig,
) -> Result<NodeField<Vec2>, UpdateError> {
    Ok(NodeField::new(extend_to_domain_impl(mesh, theta_gamma, cfg)?.0, "length"))
}

fn extend_to_domain_impl(
    mesh: &TriMesh,
    theta_gamma: &[Vec2],
    cfg: &UpdateConfig,
) -> Result<(Vec<Vec2>, Diagnostics), UpdateError> {
    assert_eq!(theta_gamma.len(), mesh.node_count(), "boundary field length");
    let mask = mesh.boundary_node_mask();
    if let Some(i) = (0..mesh.node_count()).find(|&i| mask[i] && !theta_gamma[i].is_finite()) {
        return Err(MeshError::NonFinite { what: "boundary direction", index: i }.into());
    }
    let boundary: Vec<usize> = (0..mesh.node_count()).filter(|&i| mask[i]).collect();
    let opts = SolverOptions { exec: cfg.exec, ..SolverOptions::default() };
    let mut diag = Diagnostics::default();
    let theta = match cfg.extension {
        Extension::Elasticity => {
            let mut sys = assemble_elasticity_with(cfg.exec, mesh, &Pattern::new(mesh, 2), cfg.elasticity)?;
            apply_dirichlet(
                &mut sys,
                boundary.iter().flat_map(|&i| [(2 * i, theta_gamma[i].x), (2 * i + 1, theta_gamma[i].y)]),
            )?;
            let sol = solve_spd_with(&sys, &opts, None)?;
            diag.solver_residual = sol.residual;
            diag.solver_iterations = sol.iterations;
            interleaved_to_vec2(&sol.values)
        }
        Extension::WallDistance => {
            let kappa = wall_conductivity(mesh, cfg.epsilon_for(mesh), cfg.exec);
            let sys = assemble_scalar_diffusion_cells(cfg.exec, mesh, &Pattern::new(mesh, 1), &kappa, 0.0)?;
            let dir: BTreeMap<usize, Vec2> = boundary.iter().map(|&i| (i, theta_gamma[i])).collect();
            let (u, sols) = solve_componentwise(&sys.matrix, &vec![Vec2::ZERO; mesh.node_count()], &dir, &opts)?;
            diag.solver_residual = sols[0].residual.max(sols[1].residual);
            diag.solver_iterations = sols[0].iterations + sols[1].iterations;
            u
        }
    };
    Ok((theta, diag))
}

/// Trapezoidal rule for `int_{Gamma^d} theta . n s dGamma` with constant edge
/// normals; `s` and `theta` are indexed by mesh node.
pub fn predicted_decrease(curves: &[BoundaryCurve], s: &[f64], theta: &[Vec2]) -> f64 {
    let mut total = 0.0;
    for c in curves {
        for j in 0..c.len() {
            if !c.edge_design[j] {
                continue;
            }
            let k = c.next(j);
            let (a, b) = (c.nodes[j], c.nodes[k]);
            let n = c.edge_normals[j];
            total += 0.5 * c.spacing[k] * (n.dot(theta[a]) * s[a] + n.dot(theta[b]) * s[b]);
        }
    }
    total
}
