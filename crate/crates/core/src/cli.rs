//! Configuration-driven front end behind the `shapedesc` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec2;
use crate::mesh::io::{fmt_f64, write_boundary_csv, write_off, write_vtk, IoError};
use crate::mesh::{boundary_loops, MeshError, TriMesh};
use crate::optimizer::{
    run_descent_observed, DescentConfig, DescentError, IterationRecord, LineSearchParams, StepMode, Termination,
};
use crate::par::Execution;
use crate::problem::{load_external_sensitivity, levelset_oracle, IllustrativeProblem, ProblemError, SensitivityProvider};
use crate::remesh::{generate_annulus, generate_diamond_annulus, RemeshError};
use crate::updates::{Extension, UpdateMethod};
use crate::fem::ElasticityParams;
use crate::verify::{run_checks, CheckOptions};

/// Environment variable overriding the configured output directory.
pub const OUT_ENV: &str = "SHAPEDESC_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key `{key}`: {message}")]
    Config { key: &'static str, message: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Output(#[from] IoError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("mesh generation failed: {0}")]
    Remesh(#[from] RemeshError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Descent(#[from] Box<DescentError>),
    #[error("{0} check(s) failed")]
    Checks(usize),
}

fn key_err(key: &'static str, message: impl Into<String>) -> CliError {
    CliError::Config { key, message: message.into() }
}

#[derive(Debug, Parser)]
#[command(name = "shapedesc", version, about = "Parameter-free shape optimization on planar triangulations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one optimization described by a config file.
    Run { config: PathBuf },
    /// Run every method listed under `methods` and merge the logs.
    Compare { config: PathBuf },
    /// Write the analytic optimal boundary as oracle.csv.
    Oracle {
        #[arg(long, default_value_t = 0.0)]
        c1: f64,
        #[arg(long, default_value_t = 360)]
        n: usize,
        /// Output directory (default: current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the discretization self-checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        perturb_stiffness: bool,
    },
}

/// Flat TOML run description; every key is optional except `h` and the
/// geometry.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub sensitivity_file: Option<PathBuf>,
    pub annulus_outer: Option<f64>,
    pub annulus_inner: Option<f64>,
    pub diamond_circumradius: Option<f64>,
    pub diamond_inner: Option<f64>,
    pub h: Option<f64>,
    pub method: Option<String>,
    pub methods: Option<Vec<String>>,
    pub extension: Option<String>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub epsilon: Option<f64>,
    pub step: Option<String>,
    pub theta_max: Option<f64>,
    pub quality_gate: Option<f64>,
    pub remesh: Option<bool>,
    pub remesh_interval: Option<usize>,
    pub max_iterations: Option<usize>,
    pub g_tol: Option<f64>,
    pub j_rel_tol: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Annulus { outer: f64, inner: f64 },
    Diamond { circumradius: f64, inner: f64 },
}

impl Geometry {
    pub fn mesh(&self, h: f64) -> Result<TriMesh, RemeshError> {
        match *self {
            Geometry::Annulus { outer, inner } => generate_annulus(outer, inner, h),
            Geometry::Diamond { circumradius, inner } => generate_diamond_annulus(circumradius, inner, h),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderSpec {
    Illustrative(IllustrativeProblem),
    External(PathBuf),
}

/// A checked configuration.
#[derive(Debug, Clone)]
pub struct Settings {
    pub provider: ProviderSpec,
    pub geometry: Geometry,
    pub h: f64,
    pub methods: Vec<String>,
    /// Descent settings; the update method is filled in per run.
    pub descent: DescentConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

fn positive(key: &'static str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(key_err(key, format!("must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Checks every key; `base` resolves a relative sensitivity file.
    pub fn settings(&self, base: &Path) -> Result<Settings, CliError> {
        let h = positive("h", self.h.ok_or_else(|| key_err("h", "missing"))?)?;

        let annulus = self.annulus_outer.is_some() || self.annulus_inner.is_some();
        let diamond = self.diamond_circumradius.is_some() || self.diamond_inner.is_some();
        let geometry = match (annulus, diamond) {
            (true, true) => return Err(key_err("annulus_outer", "give either annulus_* or diamond_* keys, not both")),
            (false, false) => return Err(key_err("annulus_outer", "no geometry: set annulus_* or diamond_* keys")),
            (true, false) => {
                let outer = positive("annulus_outer", self.annulus_outer.ok_or_else(|| key_err("annulus_outer", "missing"))?)?;
                let inner = positive("annulus_inner", self.annulus_inner.ok_or_else(|| key_err("annulus_inner", "missing"))?)?;
                if inner >= outer {
                    return Err(key_err("annulus_inner", "must be smaller than annulus_outer"));
                }
                Geometry::Annulus { outer, inner }
            }
            (false, true) => {
                let c = self.diamond_circumradius.ok_or_else(|| key_err("diamond_circumradius", "missing"))?;
                let c = positive("diamond_circumradius", c)?;
                let inner = positive("diamond_inner", self.diamond_inner.ok_or_else(|| key_err("diamond_inner", "missing"))?)?;
                if inner >= c / 2f64.sqrt() {
                    return Err(key_err("diamond_inner", "hole must fit inside the diamond"));
                }
                Geometry::Diamond { circumradius: c, inner }
            }
        };

        let provider = match &self.sensitivity_file {
            Some(path) => {
                if self.c1.is_some() || self.c2.is_some() {
                    return Err(key_err("sensitivity_file", "cannot be combined with c1/c2"));
                }
                ProviderSpec::External(base.join(path))
            }
            None => ProviderSpec::Illustrative(IllustrativeProblem::new(self.c1.unwrap_or(0.0), self.c2.unwrap_or(0.0))),
        };
        for (key, v) in [("c1", self.c1), ("c2", self.c2)] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(key_err(key, "must be finite"));
                }
            }
        }

        let mut methods = Vec::new();
        if let Some(m) = &self.method {
            methods.push(m.clone());
        }
        if let Some(ms) = &self.methods {
            methods.extend(ms.iter().cloned());
        }
        if methods.is_empty() {
            methods.push("SP-SM".to_string());
        }
        for m in &methods {
            let key = if self.method.as_deref() == Some(m.as_str()) { "method" } else { "methods" };
            m.parse::<UpdateMethod>().map_err(|e| key_err(key, e.to_string()))?;
        }

        let mut descent = DescentConfig::new(UpdateMethod::SpSm);
        descent.update.extension = match self.extension.as_deref() {
            None | Some("wall-distance") => Extension::WallDistance,
            Some("elasticity") => Extension::Elasticity,
            Some(other) => return Err(key_err("extension", format!("expected `wall-distance` or `elasticity`, got `{other}`"))),
        };
        descent.update.elasticity = ElasticityParams {
            lambda: self.lambda.unwrap_or(0.0),
            mu: self.mu.unwrap_or(1.0),
        };
        if !(descent.update.elasticity.mu > 0.0) {
            return Err(key_err("mu", "must be positive"));
        }
        if !(descent.update.elasticity.lambda >= 0.0) {
            return Err(key_err("lambda", "must be non-negative"));
        }
        if let Some(e) = self.epsilon {
            descent.update.epsilon = Some(positive("epsilon", e)?);
        }
        descent.step = match self.step.as_deref() {
            None | Some("line-search") => {
                if self.theta_max.is_some() {
                    return Err(key_err("theta_max", "only used with step = \"max-displacement\""));
                }
                StepMode::LineSearch
            }
            Some("max-displacement") => {
                let t = self.theta_max.ok_or_else(|| key_err("theta_max", "required for max-displacement steps"))?;
                StepMode::MaxDisplacement { theta_max: positive("theta_max", t)? }
            }
            Some(other) => {
                return Err(key_err("step", format!("expected `line-search` or `max-displacement`, got `{other}`")))
            }
        };
        descent.line_search = LineSearchParams {
            quality_gate: self.quality_gate.unwrap_or(LineSearchParams::default().quality_gate),
            ..LineSearchParams::default()
        };
        let gate = descent.line_search.quality_gate;
        if !(gate > 0.0 && gate < 60.0) {
            return Err(key_err("quality_gate", format!("must lie in (0, 60) degrees, got {gate}")));
        }
        descent.remesh_interval = match (self.remesh.unwrap_or(false), self.remesh_interval) {
            (false, None) => 0,
            (false, Some(_)) => return Err(key_err("remesh_interval", "set remesh = true to use it")),
            (true, None) => 3,
            (true, Some(0)) => return Err(key_err("remesh_interval", "must be at least 1")),
            (true, Some(k)) => k,
        };
        descent.remesh_h = Some(h);
        descent.max_iterations = self.max_iterations.unwrap_or(100);
        if descent.max_iterations == 0 {
            return Err(key_err("max_iterations", "must be at least 1"));
        }
        for (key, v, slot) in [
            ("g_tol", self.g_tol, &mut descent.g_tol),
            ("j_rel_tol", self.j_rel_tol, &mut descent.j_rel_tol),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(key_err(key, format!("must be non-negative, got {v}")));
                }
                *slot = v;
            }
        }

        if matches!(provider, ProviderSpec::External(_)) {
            if descent.step == StepMode::LineSearch {
                return Err(key_err("step", "an external sensitivity needs step = \"max-displacement\""));
            }
            if descent.remesh_interval > 0 {
                return Err(key_err("remesh", "remeshing needs the analytic objective"));
            }
            match self.max_iterations {
                None => descent.max_iterations = 1,
                Some(1) => {}
                Some(_) => return Err(key_err("max_iterations", "an external sensitivity describes one shape; use 1")),
            }
        }

        Ok(Settings {
            provider,
            geometry,
            h,
            methods,
            descent,
            output_dir: self.output_dir.clone().unwrap_or_else(|| PathBuf::from("shapedesc_out")),
            seed: self.seed.unwrap_or(0),
        })
    }
}

/// Loads and validates a config file; `out_override` replaces `output_dir`.
pub fn load_settings(path: &Path, out_override: Option<PathBuf>) -> Result<Settings, CliError> {
    let cfg = RunConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut settings = cfg.settings(base)?;
    if let Some(out) = out_override {
        settings.output_dir = out;
    }
    Ok(settings)
}

fn make_provider(spec: &ProviderSpec, mesh: &TriMesh) -> Result<Box<dyn SensitivityProvider>, CliError> {
    Ok(match spec {
        ProviderSpec::Illustrative(p) => Box::new(*p),
        ProviderSpec::External(path) => Box::new(load_external_sensitivity(path, mesh)?),
    })
}

/// One row of run.csv / compare.csv.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RunRow {
    #[serde(default)]
    pub method: Option<String>,
    pub iter: usize,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "G")]
    pub g: f64,
    pub alpha: f64,
    #[serde(alias = "min_quality_deg")]
    pub min_quality: f64,
    #[serde(default)]
    pub n_boundary_nodes: Option<usize>,
}

pub fn run_csv_string(records: &[IterationRecord]) -> String {
    let mut s = String::from("iter,J,G,alpha,min_quality_deg,n_boundary_nodes\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.iter,
            fmt_f64(r.j),
            fmt_f64(r.g),
            fmt_f64(r.alpha),
            fmt_f64(r.min_quality),
            r.n_boundary_nodes
        );
    }
    s
}

pub fn compare_csv_string(runs: &[(String, Vec<IterationRecord>)]) -> String {
    let mut s = String::from("method,iter,J,G,alpha,min_quality\n");
    for (label, records) in runs {
        for r in records {
            let _ = writeln!(
                s,
                "{label},{},{},{},{},{}",
                r.iter,
                fmt_f64(r.j),
                fmt_f64(r.g),
                fmt_f64(r.alpha),
                fmt_f64(r.min_quality)
            );
        }
    }
    s
}

/// Reads run.csv or compare.csv back.
pub fn parse_run_csv(text: &str) -> Result<Vec<RunRow>, CliError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize().map(|r| r.map_err(|e| CliError::Parse(e.to_string()))).collect()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct OracleRow {
    pub phi: f64,
    pub x: f64,
    pub y: f64,
    pub ok: u8,
}

pub fn parse_oracle_csv(text: &str) -> Result<Vec<OracleRow>, CliError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize().map(|r| r.map_err(|e| CliError::Parse(e.to_string()))).collect()
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub method: UpdateMethod,
    pub records: Vec<IterationRecord>,
    pub final_j: f64,
    pub termination: Termination,
}

impl RunSummary {
    pub fn line(&self) -> String {
        format!(
            "method {}: final J = {}, iterations = {}, termination: {}",
            self.method,
            fmt_f64(self.final_j),
            self.records.len(),
            self.termination
        )
    }
}

/// Runs one method, writing boundary snapshots, run.csv and the final mesh
/// under `dir`. Partial outputs are written before an error is returned.
pub fn execute(settings: &Settings, method: UpdateMethod, dir: &Path) -> Result<RunSummary, CliError> {
    fs::create_dir_all(dir)?;
    let mesh = settings.geometry.mesh(settings.h)?;
    let provider = make_provider(&settings.provider, &mesh)?;
    let mut cfg = settings.descent.clone();
    cfg.update.method = method;
    write_boundary_csv(&dir.join("boundary_0000.csv"), &boundary_loops(&mesh)?)?;

    let mut snapshot_err: Option<CliError> = None;
    let result = run_descent_observed(provider.as_ref(), mesh, &cfg, &mut |view| {
        if snapshot_err.is_some() {
            return;
        }
        let name = format!("boundary_{:04}.csv", view.record.iter);
        let written = boundary_loops(view.mesh)
            .map_err(CliError::from)
            .and_then(|c| write_boundary_csv(&dir.join(name), &c).map_err(CliError::from));
        if let Err(e) = written {
            snapshot_err = Some(e);
        }
        log::info!(
            "{method} iter {} J {:.10e} G {:.4e} alpha {:.4e}",
            view.record.iter,
            view.record.j,
            view.record.g,
            view.record.alpha
        );
    });
    let (records, mesh, outcome) = match result {
        Ok(out) => (out.records, out.mesh, Ok(out.termination)),
        Err(e) => (e.partial.clone(), e.mesh.clone(), Err(e)),
    };
    fs::write(dir.join("run.csv"), run_csv_string(&records))?;
    write_vtk(&dir.join("final.vtk"), &mesh, &[])?;
    write_off(&dir.join("final.off"), &mesh)?;
    if let Some(e) = snapshot_err {
        return Err(e);
    }
    let termination = outcome.map_err(Box::new)?;
    let final_j = provider.objective(&mesh)?;
    Ok(RunSummary { method, records, final_j, termination })
}

pub fn cmd_run(config: &Path, out_override: Option<PathBuf>) -> Result<RunSummary, CliError> {
    let settings = load_settings(config, out_override)?;
    if settings.methods.len() != 1 {
        return Err(key_err("methods", "`run` takes a single method; use `compare` for several"));
    }
    let method: UpdateMethod = settings.methods[0].parse().map_err(|e: crate::updates::UpdateError| key_err("method", e.to_string()))?;
    execute(&settings, method, &settings.output_dir)
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub succeeded: Vec<RunSummary>,
    /// `(method label, error message)`.
    pub failed: Vec<(String, String)>,
}

/// Runs all configured methods (concurrently when built with `parallel`)
/// and writes compare.csv in configuration order.
pub fn cmd_compare(config: &Path, out_override: Option<PathBuf>) -> Result<CompareReport, CliError> {
    let settings = load_settings(config, out_override)?;
    let methods: Vec<UpdateMethod> = settings.methods.iter().map(|m| m.parse().expect("validated")).collect();
    fs::create_dir_all(&settings.output_dir)?;
    let indexed: Vec<(usize, UpdateMethod)> = methods.into_iter().enumerate().collect();
    let results = Execution::default().map_slice(&indexed, |&(i, m)| {
        let dir = settings.output_dir.join(format!("method_{i:02}_{}", m.tag()));
        (m, execute(&settings, m, &dir))
    });
    let mut report = CompareReport { succeeded: Vec::new(), failed: Vec::new() };
    for (m, r) in results {
        match r {
            Ok(summary) => report.succeeded.push(summary),
            Err(e) => {
                log::warn!("method {m} failed: {e}");
                report.failed.push((m.to_string(), e.to_string()));
            }
        }
    }
    let runs: Vec<(String, Vec<IterationRecord>)> =
        report.succeeded.iter().map(|s| (s.method.to_string(), s.records.clone())).collect();
    fs::write(settings.output_dir.join("compare.csv"), compare_csv_string(&runs))?;
    Ok(report)
}

/// Writes oracle.csv with `n` equally spaced angles; returns the number of
/// angles where root finding failed.
pub fn cmd_oracle(c1: f64, n: usize, out: &Path) -> Result<usize, CliError> {
    if n == 0 {
        return Err(key_err("n", "must be at least 1"));
    }
    if !c1.is_finite() {
        return Err(key_err("c1", "must be finite"));
    }
    let problem = IllustrativeProblem::new(c1, 0.0);
    let mut s = String::from("phi,x,y,ok\n");
    let mut failures = 0;
    for k in 0..n {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        match levelset_oracle(phi, &problem) {
            Ok(r) => {
                let p = Vec2::from_polar(r, phi);
                let _ = writeln!(s, "{},{},{},1", fmt_f64(phi), fmt_f64(p.x), fmt_f64(p.y));
            }
            Err(e) => {
                log::warn!("oracle failed at phi = {phi}: {e}");
                failures += 1;
                let _ = writeln!(s, "{},NaN,NaN,0", fmt_f64(phi));
            }
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("oracle.csv"), s)?;
    Ok(failures)
}

/// Runs the self-checks; returns the report text and an error when any
/// check failed.
pub fn cmd_check(opts: CheckOptions) -> (String, Result<(), CliError>) {
    let results = run_checks(opts);
    let mut report = String::new();
    for r in &results {
        let _ = writeln!(report, "{}", r.line());
    }
    let failures = results.iter().filter(|r| !r.passed).count();
    let status = if failures == 0 { Ok(()) } else { Err(CliError::Checks(failures)) };
    (report, status)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(text: &str) -> Result<Settings, CliError> {
        RunConfig::parse(text)?.settings(Path::new("."))
    }

    const BASE: &str = "annulus_outer = 1.0\nannulus_inner = 0.3\nh = 0.1\n";

    #[test]
    fn minimal_config() {
        let s = settings(BASE).unwrap();
        assert_eq!(s.geometry, Geometry::Annulus { outer: 1.0, inner: 0.3 });
        assert_eq!(s.methods, vec!["SP-SM".to_string()]);
        assert_eq!(s.descent.remesh_interval, 0);
        assert_eq!(s.descent.step, StepMode::LineSearch);
    }

    #[test]
    fn errors_name_the_key() {
        let e = settings("annulus_outer = 1.0\nannulus_inner = 0.3\nh = -1.0\n").unwrap_err();
        assert!(e.to_string().contains("`h`"), "{e}");
        let e = settings(&format!("{BASE}diamond_circumradius = 1.0\ndiamond_inner = 0.3\n")).unwrap_err();
        assert!(e.to_string().contains("not both"), "{e}");
        let e = settings(&format!("{BASE}colour = 3\n")).unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
        let e = settings(&format!("{BASE}step = \"max-displacement\"\n")).unwrap_err();
        assert!(e.to_string().contains("theta_max"), "{e}");
        let e = settings(&format!("{BASE}method = \"XYZ\"\n")).unwrap_err();
        assert!(e.to_string().contains("`method`"), "{e}");
    }

    #[test]
    fn remesh_defaults_to_every_third_iteration() {
        let s = settings(&format!("{BASE}remesh = true\n")).unwrap();
        assert_eq!(s.descent.remesh_interval, 3);
        assert!(settings(&format!("{BASE}remesh_interval = 2\n")).is_err());
    }

    #[test]
    fn external_provider_rules() {
        let ext = "annulus_outer = 1.0\nannulus_inner = 0.3\nh = 0.1\nsensitivity_file = \"s.csv\"\n";
        assert!(settings(ext).is_err());
        let ok = settings(&format!("{ext}step = \"max-displacement\"\ntheta_max = 0.02\n")).unwrap();
        assert_eq!(ok.descent.max_iterations, 1);
        assert!(settings(&format!("{ext}c1 = 1.0\nstep = \"max-displacement\"\ntheta_max = 0.02\n")).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rec = IterationRecord {
            iter: 3,
            j: -1.0 / 3.0,
            j_step: -0.5,
            g: 1e-5,
            alpha: 0.1,
            min_quality: 27.5,
            n_boundary_nodes: 120,
            predicted_decrease: -1.0,
            solver_residual: 0.0,
            remeshed: false,
        };
        let rows = parse_run_csv(&run_csv_string(std::slice::from_ref(&rec))).unwrap();
        assert_eq!(rows[0].j, rec.j);
        assert_eq!(rows[0].n_boundary_nodes, Some(120));
        let rows = parse_run_csv(&compare_csv_string(&[("FS:sigma=0.1".into(), vec![rec.clone()])])).unwrap();
        assert_eq!(rows[0].method.as_deref(), Some("FS:sigma=0.1"));
        assert_eq!(rows[0].min_quality, 27.5);
    }
}
