//! Self-checks of the discretization, run by `shapedesc check`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boundary_ops::fd_laplace_beltrami;
use crate::fem::{
    apply_dirichlet, assemble_elasticity, assemble_scalar_diffusion, mass_load, neumann_nodal_loads,
    solve_componentwise, solve_p_laplacian, solve_spd, ElasticityParams, PicardConfig, SolverOptions,
};
use crate::geometry::Vec2;
use crate::mesh::{
    boundary_loops, displace, shepard_to_nodes, structured_rectangle, BoundaryCurve, CellField, ShepardVariant,
    TriMesh,
};
use crate::problem::{objective, sensitivity, IllustrativeProblem};
use crate::remesh::generate_annulus;
use crate::updates::{extend_to_domain, predicted_decrease, UpdateConfig, UpdateMethod};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CheckOptions {
    /// Seed for the random directions and spacings.
    pub seed: u64,
    /// Test hook: corrupts one stiffness entry before the patch test.
    pub perturb_stiffness: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub fn run_checks(opts: CheckOptions) -> Vec<CheckResult> {
    vec![
        diffusion_convergence(),
        elasticity_patch(opts.perturb_stiffness),
        plaplace_p2(),
        plaplace_homogeneity(),
        stencil_exactness(opts.seed),
        shepard_semantics(),
        shape_derivative(opts.seed),
    ]
}

fn failed(name: &'static str, e: impl std::fmt::Display) -> CheckResult {
    CheckResult::new(name, false, format!("error: {e}"))
}

/// L2 error of the P1 solution of `-lap u = 2 pi^2 sin(pi x) sin(pi y)` on
/// the unit square (edge-midpoint quadrature).
fn poisson_l2_error(n: usize) -> Result<f64, String> {
    let exact = |p: Vec2| (PI * p.x).sin() * (PI * p.y).sin();
    let m = structured_rectangle(0.0, 1.0, 0.0, 1.0, n, n);
    let mut sys = assemble_scalar_diffusion(&m, |_| 1.0, 0.0).map_err(|e| e.to_string())?;
    sys.rhs = mass_load(&m, |p| 2.0 * PI * PI * exact(p));
    let mask = m.boundary_node_mask();
    apply_dirichlet(&mut sys, (0..m.node_count()).filter(|&i| mask[i]).map(|i| (i, 0.0))).map_err(|e| e.to_string())?;
    let u = solve_spd(&sys, 1e-12).map_err(|e| e.to_string())?.values;
    let mut err2 = 0.0;
    for (t, tri) in m.triangles().iter().enumerate() {
        let area = m.signed_area(t);
        for (a, b) in [(0, 1), (1, 2), (2, 0)] {
            let mid = (m.nodes()[tri[a]] + m.nodes()[tri[b]]) * 0.5;
            let uh = 0.5 * (u[tri[a]] + u[tri[b]]);
            err2 += area / 3.0 * (uh - exact(mid)).powi(2);
        }
    }
    Ok(err2.sqrt())
}

fn diffusion_convergence() -> CheckResult {
    const NAME: &str = "diffusion manufactured solution";
    match (poisson_l2_error(10), poisson_l2_error(20)) {
        (Ok(e1), Ok(e2)) => {
            let order = (e1 / e2).log2();
            CheckResult::new(NAME, order >= 1.8, format!("L2 order {order:.4} (errors {e1:.4e}, {e2:.4e})"))
        }
        (Err(e), _) | (_, Err(e)) => failed(NAME, e),
    }
}

fn elasticity_patch(perturb: bool) -> CheckResult {
    const NAME: &str = "elasticity patch test";
    let m = structured_rectangle(0.0, 1.0, 0.0, 1.0, 6, 6);
    let field = |p: Vec2| Vec2::new(0.1 + 0.3 * p.x - 0.2 * p.y, -0.05 + 0.4 * p.x + 0.25 * p.y);
    let mut sys = match assemble_elasticity(&m, ElasticityParams { lambda: 0.7, mu: 1.3 }) {
        Ok(s) => s,
        Err(e) => return failed(NAME, e),
    };
    let mask = m.boundary_node_mask();
    if perturb {
        let i = (0..m.node_count()).find(|&i| !mask[i]).unwrap_or(0);
        let r = 2 * i;
        if let Some(k) = (sys.matrix.row_ptr[r]..sys.matrix.row_ptr[r + 1]).find(|&k| sys.matrix.col_idx[k] == r) {
            sys.matrix.values[k] *= 1.01;
        }
    }
    let cons = (0..m.node_count()).filter(|&i| mask[i]).flat_map(|i| {
        let v = field(m.nodes()[i]);
        [(2 * i, v.x), (2 * i + 1, v.y)]
    });
    if let Err(e) = apply_dirichlet(&mut sys, cons) {
        return failed(NAME, e);
    }
    match solve_spd(&sys, 1e-14) {
        Ok(sol) => {
            let err = m
                .nodes()
                .iter()
                .enumerate()
                .map(|(i, &p)| (Vec2::new(sol.values[2 * i], sol.values[2 * i + 1]) - field(p)).norm())
                .fold(0.0, f64::max);
            CheckResult::new(NAME, err <= 1e-10, format!("max nodal error {err:.3e}"))
        }
        Err(e) => failed(NAME, e),
    }
}

fn benchmark_annulus(h: f64) -> Result<(TriMesh, Vec<BoundaryCurve>, Vec<f64>), String> {
    let m = generate_annulus(1.0, 0.3, h).map_err(|e| e.to_string())?;
    let curves = boundary_loops(&m).map_err(|e| e.to_string())?;
    let s = sensitivity(&m, &curves, &IllustrativeProblem::default()).values;
    Ok((m, curves, s))
}

fn plaplace_p2() -> CheckResult {
    const NAME: &str = "p-Laplacian at p=2 against diffusion";
    let run = || -> Result<f64, String> {
        let (m, curves, s) = benchmark_annulus(0.1)?;
        let cfg = PicardConfig::new(2.0, m.diameter());
        let sol = solve_p_laplacian(&m, &curves, &s, 1.0, &cfg, None).map_err(|e| e.to_string())?;
        let k = assemble_scalar_diffusion(&m, |_| 1.0, 0.0).map_err(|e| e.to_string())?.matrix;
        let mut loads = vec![Vec2::ZERO; m.node_count()];
        let mut dir = BTreeMap::new();
        for c in &curves {
            for (l, f) in loads.iter_mut().zip(neumann_nodal_loads(m.node_count(), c, &s, true)) {
                *l += f;
            }
            for (j, &i) in c.nodes.iter().enumerate() {
                if !c.design[j] {
                    dir.insert(i, Vec2::ZERO);
                }
            }
        }
        let (u, _) = solve_componentwise(&k, &loads, &dir, &SolverOptions::default()).map_err(|e| e.to_string())?;
        let scale = u.iter().fold(0.0f64, |a, v| a.max(v.norm()));
        let err = u.iter().zip(&sol.u).fold(0.0f64, |a, (x, y)| a.max((*x - *y).norm()));
        Ok(err / scale)
    };
    match run() {
        Ok(rel) => CheckResult::new(NAME, rel <= 1e-8, format!("relative difference {rel:.3e}")),
        Err(e) => failed(NAME, e),
    }
}

fn plaplace_homogeneity() -> CheckResult {
    const NAME: &str = "p-Laplacian homogeneity at p=4";
    let run = || -> Result<f64, String> {
        let (m, curves, s) = benchmark_annulus(0.1)?;
        let cfg = PicardConfig::new(4.0, m.diameter());
        let a = solve_p_laplacian(&m, &curves, &s, 1.0, &cfg, None).map_err(|e| e.to_string())?;
        let s8: Vec<f64> = s.iter().map(|v| 8.0 * v).collect();
        let b = solve_p_laplacian(&m, &curves, &s8, 1.0, &cfg, None).map_err(|e| e.to_string())?;
        let scale = b.u.iter().fold(0.0f64, |x, v| x.max(v.norm()));
        let err = a.u.iter().zip(&b.u).fold(0.0f64, |x, (ua, ub)| x.max((*ua * 2.0 - *ub).norm()));
        Ok(err / scale)
    };
    match run() {
        Ok(rel) => CheckResult::new(NAME, rel <= 1e-6, format!("relative deviation from 2x scaling {rel:.3e}")),
        Err(e) => failed(NAME, e),
    }
}

fn stencil_exactness(seed: u64) -> CheckResult {
    const NAME: &str = "boundary stencil on quadratics";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 16;
    // random spacings along a straight segment closed by a far-away apex
    let mut x = 0.0;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n - 1 {
        points.push(Vec2::new(x, 0.0));
        x += rng.random_range(0.01..0.2);
    }
    points.push(Vec2::new(0.5 * x, -x));
    let curve = BoundaryCurve::from_polyline(0, (0..n).collect(), points.clone(), vec![true; n]);
    let v: Vec<f64> = points.iter().map(|p| 0.5 * p.x * p.x).collect();
    let l = fd_laplace_beltrami(&curve, &v);
    let err = (1..n - 2).map(|j| (l[j] - 1.0).abs()).fold(0.0, f64::max);
    CheckResult::new(NAME, err <= 1e-12, format!("max deviation from 1: {err:.3e}"))
}

fn shepard_semantics() -> CheckResult {
    const NAME: &str = "nodal interpolation semantics";
    let m = structured_rectangle(0.0, 1.0, 0.0, 1.0, 1, 1);
    let adjacency = m.node_triangles();
    let Some(node) = (0..m.node_count()).find(|&i| adjacency[i].len() == 2) else {
        return CheckResult::new(NAME, false, "no node shared by two cells".into());
    };
    let ones = CellField::new(vec![1.0; m.triangle_count()], "");
    let verbatim = shepard_to_nodes(&m, &ones, ShepardVariant::Verbatim).map(|f| f[node]);
    let normalized = shepard_to_nodes(&m, &ones, ShepardVariant::Normalized).map(|f| f[node]);
    let big = structured_rectangle(0.0, 2.0, 0.0, 1.0, 7, 4);
    let c = -3.25;
    let constant = shepard_to_nodes(&big, &CellField::new(vec![c; big.triangle_count()], ""), ShepardVariant::Normalized)
        .map(|f| f.values.iter().map(|v| (v - c).abs()).fold(0.0, f64::max));
    match (verbatim, normalized, constant) {
        (Ok(v), Ok(nv), Ok(ce)) => CheckResult::new(
            NAME,
            v == 0.5 && nv == 1.0 && ce <= 1e-12,
            format!("verbatim {v}, normalized {nv}, constant error {ce:.3e}"),
        ),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => failed(NAME, e),
    }
}

fn shape_derivative(seed: u64) -> CheckResult {
    const NAME: &str = "shape derivative against finite differences";
    let run = || -> Result<f64, String> {
        let problem = IllustrativeProblem::default();
        let (m, curves, s) = benchmark_annulus(0.1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c, k) = (
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(1..4) as f64,
        );
        let mut gamma = vec![Vec2::ZERO; m.node_count()];
        for curve in &curves {
            for (j, &i) in curve.nodes.iter().enumerate() {
                if curve.design[j] {
                    let p = curve.points[j];
                    let phi = p.y.atan2(p.x);
                    gamma[i] = curve.normals[j] * (a + b * (k * phi).cos() + c * (k * phi).sin());
                }
            }
        }
        let theta = extend_to_domain(&m, &gamma, &UpdateConfig::new(UpdateMethod::Ds)).map_err(|e| e.to_string())?;
        let delta = 1e-4;
        let jp = objective(&displace(&m, &theta, delta), &problem).map_err(|e| e.to_string())?;
        let jm = objective(&displace(&m, &theta, -delta), &problem).map_err(|e| e.to_string())?;
        let fd = (jp - jm) / (2.0 * delta);
        let pred = predicted_decrease(&curves, &s, &theta.values);
        Ok(((pred - fd) / fd).abs())
    };
    match run() {
        Ok(rel) => CheckResult::new(NAME, rel <= 0.02, format!("relative mismatch {rel:.3e}")),
        Err(e) => failed(NAME, e),
    }
}
