//! Steepest-descent driver: step size, stopping rules, remeshing cadence and
//! the per-iteration log.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::geometry::Vec2;
use crate::mesh::{boundary_loops, displace_by, min_quality, BoundaryCurve, MeshError, NodeField, TriMesh};
use crate::problem::{mean_boundary_displacement, ProblemError, SensitivityProvider};
use crate::mesh::io::Polyline;
use crate::remesh::{check_simple, remesh, RemeshError};
use crate::updates::{compute_update_from, phd_displacement, UpdateConfig, UpdateError, UpdateMethod, UpdateResult};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Remesh(#[from] RemeshError),
    #[error("invalid descent configuration: {0}")]
    Config(String),
    #[error("update direction vanished; nothing to scale")]
    ZeroDirection,
}

/// A failed run together with everything computed before the failure.
#[derive(Debug)]
pub struct DescentError {
    pub partial: Vec<IterationRecord>,
    pub mesh: TriMesh,
    pub source: OptimizeError,
}

impl fmt::Display for DescentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "descent aborted after {} iterations: {}", self.partial.len(), self.source)
    }
}

impl std::error::Error for DescentError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepMode {
    LineSearch,
    /// Step chosen in the first iteration so the largest node movement is
    /// `theta_max`, then kept fixed.
    MaxDisplacement { theta_max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchParams {
    /// First trial moves the boundary by this fraction of the diameter.
    pub initial_fraction: f64,
    pub expansion: f64,
    /// Bracket refinement stops at `(c - a) <= rel_width * c`.
    pub rel_width: f64,
    pub alpha_min: f64,
    /// Minimum interior angle (degrees) an accepted mesh must keep.
    pub quality_gate: f64,
    pub max_expansions: usize,
}

impl Default for LineSearchParams {
    fn default() -> Self {
        Self {
            initial_fraction: 0.02,
            expansion: 2.0,
            rel_width: 1e-2,
            alpha_min: 1e-6,
            quality_gate: 10.0,
            max_expansions: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentConfig {
    pub update: UpdateConfig,
    pub step: StepMode,
    pub line_search: LineSearchParams,
    /// Remesh every `k` iterations and after failed line searches; 0 disables
    /// remeshing.
    pub remesh_interval: usize,
    /// Target edge length for remeshing; `None` uses the mean boundary
    /// spacing of the initial mesh.
    pub remesh_h: Option<f64>,
    pub max_iterations: usize,
    pub g_tol: f64,
    pub j_rel_tol: f64,
}

impl DescentConfig {
    pub fn new(method: UpdateMethod) -> Self {
        Self {
            update: UpdateConfig::new(method),
            step: StepMode::LineSearch,
            line_search: LineSearchParams::default(),
            remesh_interval: 0,
            remesh_h: None,
            max_iterations: 100,
            g_tol: 1e-4,
            j_rel_tol: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<(), OptimizeError> {
        self.update.validate()?;
        let ls = &self.line_search;
        let bad = |m: &str| Err(OptimizeError::Config(m.to_string()));
        if let StepMode::MaxDisplacement { theta_max } = self.step {
            if !(theta_max > 0.0 && theta_max.is_finite()) {
                return bad("theta_max must be positive");
            }
        }
        if !(ls.alpha_min > 0.0) {
            return bad("alpha_min must be positive");
        }
        if !(ls.quality_gate > 0.0 && ls.quality_gate < 60.0) {
            return bad("quality gate must lie in (0, 60) degrees");
        }
        if !(ls.expansion > 1.0) || !(ls.rel_width > 0.0 && ls.rel_width < 1.0) || !(ls.initial_fraction > 0.0) {
            return bad("line search needs expansion > 1, 0 < rel_width < 1 and initial_fraction > 0");
        }
        if !(self.g_tol >= 0.0) || !(self.j_rel_tol >= 0.0) {
            return bad("stopping tolerances must be non-negative");
        }
        if let Some(h) = self.remesh_h {
            if !(h > 0.0) {
                return bad("remesh h must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// Objective at the start of the iteration.
    pub j: f64,
    /// Objective right after the step, before any remeshing; equals `j`
    /// when no step was taken.
    pub j_step: f64,
    pub g: f64,
    pub alpha: f64,
    /// Minimum angle of the mesh after the step (degrees).
    pub min_quality: f64,
    pub n_boundary_nodes: usize,
    pub predicted_decrease: f64,
    pub solver_residual: f64,
    pub remeshed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ZeroUpdate,
    SmallDisplacement,
    SmallObjectiveChange,
    StepFailure,
    MaxIterations,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::ZeroUpdate => "zero update direction",
            Termination::SmallDisplacement => "mean boundary displacement below tolerance",
            Termination::SmallObjectiveChange => "relative objective change below tolerance",
            Termination::StepFailure => "no acceptable step size",
            Termination::MaxIterations => "iteration limit",
        })
    }
}

#[derive(Debug, Clone)]
pub struct DescentOutcome {
    pub records: Vec<IterationRecord>,
    pub mesh: TriMesh,
    pub termination: Termination,
}

/// Objective and mesh quality at one trial step; quality 0 marks an
/// unusable (tangled) mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub j: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOutcome {
    /// Accepted step; 0 when no step decreases `J`.
    pub alpha: f64,
    pub j: f64,
    pub quality: f64,
    pub evaluations: usize,
    /// The mesh-quality gate, not `J`, bounded the step.
    pub quality_limited: bool,
}

/// `alpha = theta_max / max |theta|`.
pub fn max_displacement_step(theta: &NodeField<Vec2>, theta_max: f64) -> Result<f64, OptimizeError> {
    if !(theta_max > 0.0) {
        return Err(OptimizeError::Config(format!("theta_max must be positive, got {theta_max}")));
    }
    let m = theta.max_magnitude();
    if m == 0.0 {
        return Err(OptimizeError::ZeroDirection);
    }
    Ok(theta_max / m)
}

/// Bracket-and-refine search for the first local minimizer of `J(alpha)`.
///
/// Trial steps grow by `expansion` from `alpha0` until `J` stops decreasing
/// or the mesh quality drops below the gate; if `alpha0` already fails they
/// shrink instead, down to `alpha_min`. A bracket around a minimum is refined
/// by golden-section steps and its lower end is returned. When the quality
/// gate ends the expansion, the largest passing step that still decreases `J`
/// is located by bisection.
pub fn line_search<F>(j0: f64, alpha0: f64, params: &LineSearchParams, mut eval: F) -> LineSearchOutcome
where
    F: FnMut(f64) -> Trial,
{
    let mut cache: HashMap<u64, Trial> = HashMap::new();
    let mut count = 0;
    let mut probe = |a: f64| -> Trial {
        *cache.entry(a.to_bits()).or_insert_with(|| {
            count += 1;
            eval(a)
        })
    };
    let gate = params.quality_gate;
    let ok = |t: &Trial| t.quality >= gate && t.j.is_finite();
    let fail = LineSearchOutcome { alpha: 0.0, j: j0, quality: f64::NAN, evaluations: 0, quality_limited: false };

    // (alpha, J) with the best accepted point in `b`
    let (mut a, mut ja): (f64, f64);
    let (mut b, mut tb): (f64, Trial);
    let c: f64;
    let mut quality_limited = false;

    let t0 = probe(alpha0);
    if ok(&t0) && t0.j < j0 {
        a = 0.0;
        ja = j0;
        b = alpha0;
        tb = t0;
        let mut expansions = 0;
        loop {
            let next = b * params.expansion;
            let tn = probe(next);
            if !ok(&tn) {
                quality_limited = true;
                c = next;
                break;
            }
            if tn.j >= tb.j || expansions >= params.max_expansions {
                c = next;
                break;
            }
            a = b;
            ja = tb.j;
            b = next;
            tb = tn;
            expansions += 1;
        }
    } else {
        let mut upper = alpha0;
        loop {
            let next = upper / params.expansion;
            if next < params.alpha_min {
                return LineSearchOutcome { evaluations: count, ..fail };
            }
            let tn = probe(next);
            if ok(&tn) && tn.j < j0 {
                a = 0.0;
                ja = j0;
                b = next;
                tb = tn;
                c = upper;
                quality_limited = !ok(&probe(upper));
                break;
            }
            upper = next;
        }
    }

    let mut c = c;
    if quality_limited {
        // largest passing step between b and the failing c
        loop {
            if c - b <= params.rel_width * c {
                return LineSearchOutcome { alpha: b, j: tb.j, quality: tb.quality, evaluations: count, quality_limited: true };
            }
            let m = 0.5 * (b + c);
            let tm = probe(m);
            if !ok(&tm) {
                c = m;
            } else if tm.j < tb.j {
                a = b;
                ja = tb.j;
                b = m;
                tb = tm;
            } else {
                // J turned upward first: ordinary bracket (a, b, m)
                c = m;
                break;
            }
        }
    }

    // golden-section refinement keeping J(b) <= J(a), J(c)
    const R: f64 = 0.381_966_011_250_105_1;
    for _ in 0..200 {
        if c - a <= params.rel_width * c {
            break;
        }
        let left = b - a > c - b;
        let x = if left { b - R * (b - a) } else { b + R * (c - b) };
        let tx = probe(x);
        let jx = if ok(&tx) { tx.j } else { f64::INFINITY };
        if jx < tb.j {
            if left {
                c = b;
            } else {
                a = b;
                ja = tb.j;
            }
            b = x;
            tb = tx;
        } else if left {
            a = x;
            ja = jx;
        } else {
            c = x;
        }
    }
    let _ = ja;
    if a > 0.0 {
        let ta = probe(a);
        if ok(&ta) && ta.j < j0 {
            return LineSearchOutcome { alpha: a, j: ta.j, quality: ta.quality, evaluations: count, quality_limited: false };
        }
    }
    LineSearchOutcome { alpha: b, j: tb.j, quality: tb.quality, evaluations: count, quality_limited: false }
}

/// Mean boundary spacing, used as the default remeshing target.
fn mean_spacing(curves: &[BoundaryCurve]) -> f64 {
    let (total, count) = curves.iter().fold((0.0, 0usize), |(t, n), c| (t + c.length(), n + c.len()));
    total / count as f64
}

/// Whether the loops stay simple after moving every node by `displacement`.
fn boundary_stays_simple(mesh: &TriMesh, curves: &[BoundaryCurve], displacement: &[Vec2]) -> bool {
    let polys: Vec<Polyline> = curves
        .iter()
        .map(|c| Polyline {
            loop_id: c.loop_id,
            points: c.nodes.iter().map(|&i| mesh.nodes()[i] + displacement[i]).collect(),
            design: c.edge_design.clone(),
        })
        .collect();
    check_simple(&polys).is_ok()
}

struct Step {
    alpha: f64,
    displacement: Vec<Vec2>,
    mesh: TriMesh,
    j_new: Option<f64>,
    quality_limited: bool,
}

/// Snapshot handed to the observer after every iteration.
pub struct IterationView<'a> {
    pub record: &'a IterationRecord,
    pub mesh: &'a TriMesh,
}

pub fn run_descent(
    provider: &dyn SensitivityProvider,
    mesh0: TriMesh,
    cfg: &DescentConfig,
) -> Result<DescentOutcome, DescentError> {
    run_descent_observed(provider, mesh0, cfg, &mut |_| {})
}

/// Runs the descent loop, calling `observer` after each recorded iteration.
pub fn run_descent_observed(
    provider: &dyn SensitivityProvider,
    mesh0: TriMesh,
    cfg: &DescentConfig,
    observer: &mut dyn FnMut(&IterationView),
) -> Result<DescentOutcome, DescentError> {
    let mut records = Vec::new();
    let mut mesh = mesh0;
    match descent_loop(provider, &mut mesh, cfg, &mut records, observer) {
        Ok(termination) => Ok(DescentOutcome { records, mesh, termination }),
        Err(source) => Err(DescentError { partial: records, mesh, source }),
    }
}

fn displacement_for(
    mesh: &TriMesh,
    curves: &[BoundaryCurve],
    s: &NodeField<f64>,
    cfg: &UpdateConfig,
    update: &UpdateResult,
    alpha: f64,
) -> Result<Vec<Vec2>, OptimizeError> {
    match (&cfg.method, &update.phd_state) {
        (UpdateMethod::Phd { .. }, Some((a0, u0))) => {
            if *a0 == alpha {
                Ok(u0.iter().map(|&v| -v).collect())
            } else {
                Ok(phd_displacement(mesh, curves, s, cfg, alpha, Some((*a0, u0)))?)
            }
        }
        _ => Ok(update.theta.values.iter().map(|&t| t * alpha).collect()),
    }
}

fn descent_loop(
    provider: &dyn SensitivityProvider,
    mesh: &mut TriMesh,
    cfg: &DescentConfig,
    records: &mut Vec<IterationRecord>,
    observer: &mut dyn FnMut(&IterationView),
) -> Result<Termination, OptimizeError> {
    cfg.validate()?;
    mesh.check_positive_areas()?;
    let analytic = provider.is_analytic();
    if !analytic && cfg.step == StepMode::LineSearch {
        return Err(OptimizeError::Config("line search needs a provider that can evaluate trial domains".into()));
    }
    if !analytic && cfg.remesh_interval > 0 {
        return Err(OptimizeError::Config("remeshing needs a provider that can evaluate new meshes".into()));
    }
    let remesh_h = match cfg.remesh_h {
        Some(h) => h,
        None => mean_spacing(&boundary_loops(mesh)?),
    };
    let phd_p = match cfg.update.method {
        UpdateMethod::Phd { p } => Some(p),
        _ => None,
    };
    let mut fixed_alpha: Option<f64> = None;
    let mut zero_steps = 0;
    let mut retried_after_remesh = false;
    // previous p-Laplacian solution, valid while the topology is unchanged
    let mut phd_guess: Option<Vec<Vec2>> = None;

    for iter in 1..=cfg.max_iterations {
        let curves = boundary_loops(mesh)?;
        let n_boundary: usize = curves.iter().map(|c| c.len()).sum();
        let j = provider.objective(mesh)?;
        let s = provider.sensitivity(mesh, &curves)?;
        let alpha_hint = match (phd_p, fixed_alpha) {
            (Some(_), Some(a)) => a,
            _ => 1.0,
        };
        let started = std::time::Instant::now();
        let update = compute_update_from(mesh, &curves, &s, &cfg.update, alpha_hint, phd_guess.as_deref())?;
        log::debug!(
            "iteration {iter}: {} nodes, update in {:.3}s, {} solver iterations",
            mesh.node_count(),
            started.elapsed().as_secs_f64(),
            update.diagnostics.solver_iterations
        );
        phd_guess = update.phd_state.as_ref().map(|(_, u)| u.clone());
        let theta_max_norm = update.theta.max_magnitude();
        let mut record = IterationRecord {
            iter,
            j,
            j_step: j,
            g: 0.0,
            alpha: 0.0,
            min_quality: min_quality(mesh),
            n_boundary_nodes: n_boundary,
            predicted_decrease: update.predicted_decrease,
            solver_residual: update.diagnostics.solver_residual,
            remeshed: false,
        };
        if theta_max_norm == 0.0 {
            records.push(record);
            observer(&IterationView { record: records.last().unwrap(), mesh });
            return Ok(Termination::ZeroUpdate);
        }

        // step size for the raw direction; for PHD alpha scales the load and
        // the displacement grows like alpha^(1/(p-1))
        let scale_for = |target: f64| match phd_p {
            Some(p) => (target / (theta_max_norm * alpha_hint)).powf(p - 1.0) * alpha_hint,
            None => target / theta_max_norm,
        };
        let step: Option<Step> = match cfg.step {
            StepMode::MaxDisplacement { theta_max } => {
                let alpha = *fixed_alpha.get_or_insert_with(|| scale_for(theta_max));
                let displacement = displacement_for(mesh, &curves, &s, &cfg.update, &update, alpha)?;
                let moved = displace_by(mesh, &displacement);
                Some(Step { alpha, displacement, mesh: moved, j_new: None, quality_limited: false })
            }
            StepMode::LineSearch => {
                // PHD is searched in tau = alpha^(1/(p-1)), in which the
                // displacement is (nearly) linear
                let to_alpha = |tau: f64| match phd_p {
                    Some(p) => tau.powf(p - 1.0),
                    None => tau,
                };
                let tau0 = cfg.line_search.initial_fraction * mesh.diameter() / theta_max_norm;
                let mut failure: Option<OptimizeError> = None;
                let mut trial_displacements: HashMap<u64, Vec<Vec2>> = HashMap::new();
                let outcome = line_search(j, tau0, &cfg.line_search, |tau| {
                    let alpha = to_alpha(tau);
                    if failure.is_some() {
                        return Trial { j: f64::INFINITY, quality: 0.0 };
                    }
                    let d = match displacement_for(mesh, &curves, &s, &cfg.update, &update, alpha) {
                        Ok(d) => d,
                        Err(e) => {
                            failure = Some(e);
                            return Trial { j: f64::INFINITY, quality: 0.0 };
                        }
                    };
                    // positive angles do not rule out a boundary folding over
                    // itself
                    if !boundary_stays_simple(mesh, &curves, &d) {
                        return Trial { j: f64::INFINITY, quality: 0.0 };
                    }
                    let trial = displace_by(mesh, &d);
                    if phd_p.is_some() {
                        trial_displacements.insert(tau.to_bits(), d);
                    }
                    let quality = min_quality(&trial);
                    if quality <= 0.0 {
                        return Trial { j: f64::INFINITY, quality };
                    }
                    match provider.objective(&trial) {
                        Ok(jt) => Trial { j: jt, quality },
                        Err(e) => {
                            failure = Some(e.into());
                            Trial { j: f64::INFINITY, quality: 0.0 }
                        }
                    }
                });
                if let Some(e) = failure {
                    return Err(e);
                }
                log::debug!(
                    "iteration {iter}: line search {} evaluations, tau {:.3e}, total {:.3}s",
                    outcome.evaluations,
                    outcome.alpha,
                    started.elapsed().as_secs_f64()
                );
                if outcome.alpha > 0.0 && outcome.alpha >= cfg.line_search.alpha_min {
                    let alpha = to_alpha(outcome.alpha);
                    let displacement = match trial_displacements.remove(&outcome.alpha.to_bits()) {
                        Some(d) => d,
                        None => displacement_for(mesh, &curves, &s, &cfg.update, &update, alpha)?,
                    };
                    let moved = displace_by(mesh, &displacement);
                    Some(Step {
                        alpha,
                        displacement,
                        mesh: moved,
                        j_new: Some(outcome.j),
                        quality_limited: outcome.quality_limited,
                    })
                } else {
                    None
                }
            }
        };

        let Some(step) = step else {
            zero_steps += 1;
            records.push(record);
            observer(&IterationView { record: records.last().unwrap(), mesh });
            if cfg.remesh_interval > 0 && !retried_after_remesh {
                retried_after_remesh = true;
                *mesh = remesh(&curves, remesh_h)?;
                phd_guess = None;
                records.last_mut().unwrap().remeshed = true;
                continue;
            }
            if zero_steps >= 2 || cfg.remesh_interval == 0 || retried_after_remesh {
                return Ok(Termination::StepFailure);
            }
            continue;
        };
        zero_steps = 0;
        retried_after_remesh = false;

        step.mesh.check_positive_areas()?;
        let step_quality_limited = step.quality_limited;
        let g = {
            let disp = NodeField::new(step.displacement, "length");
            mean_boundary_displacement(&disp, 1.0, &curves)
        };
        record.g = g;
        record.alpha = step.alpha;
        record.min_quality = min_quality(&step.mesh);
        let j_new = match step.j_new {
            Some(v) => v,
            None => provider.objective(&step.mesh)?,
        };
        record.j_step = j_new;
        *mesh = step.mesh;
        if cfg.remesh_interval > 0 && iter % cfg.remesh_interval == 0 {
            *mesh = remesh(&boundary_loops(mesh)?, remesh_h)?;
            phd_guess = None;
            record.remeshed = true;
        }
        records.push(record);
        observer(&IterationView { record: records.last().unwrap(), mesh });

        // a step cut short by mesh quality says nothing about optimality
        if step_quality_limited {
            continue;
        }
        if g < cfg.g_tol {
            return Ok(Termination::SmallDisplacement);
        }
        let denom = j.abs().max(f64::MIN_POSITIVE);
        if (j - j_new).abs() / denom < cfg.j_rel_tol {
            return Ok(Termination::SmallObjectiveChange);
        }
    }
    Ok(Termination::MaxIterations)
}
