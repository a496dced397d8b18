use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use shapedesc::boundary_ops::{fd_laplace_beltrami, solve_cyclic_tridiagonal};
use shapedesc::cli::{parse_run_csv, run_csv_string};
use shapedesc::fem::{assemble_scalar_diffusion, mass_load, solve_spd};
use shapedesc::geometry::Vec2;
use shapedesc::mesh::{shepard_to_nodes, BoundaryCurve, CellField, ShepardVariant};
use shapedesc::optimizer::{line_search, IterationRecord, LineSearchParams, Trial};
use shapedesc::remesh::{generate_annulus, turning_angles_deg};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stencil_is_exact_on_quadratics(gaps in prop::collection::vec(0.01f64..0.3, 4..14), c in -3.0f64..3.0) {
        let mut x = 0.0;
        let mut pts = vec![];
        for g in &gaps {
            pts.push(Vec2::new(x, 0.0));
            x += g;
        }
        pts.push(Vec2::new(0.5 * x, -x));
        let n = pts.len();
        let curve = BoundaryCurve::from_polyline(0, (0..n).collect(), pts.clone(), vec![true; n]);
        let v: Vec<f64> = pts.iter().map(|p| 0.5 * p.x * p.x + c * p.x).collect();
        let l = fd_laplace_beltrami(&curve, &v);
        for j in 1..n - 2 {
            prop_assert!((l[j] - 1.0).abs() <= 1e-9, "j={} value {}", j, l[j]);
        }
    }

    #[test]
    fn line_search_approaches_minimizer_from_below(m in 0.01f64..20.0, alpha0 in 1e-4f64..50.0) {
        let params = LineSearchParams { quality_gate: 1e-9, ..LineSearchParams::default() };
        let out = line_search(m * m, alpha0, &params, |a| Trial { j: (a - m).powi(2), quality: 60.0 });
        prop_assert!(out.alpha <= m && out.alpha >= 0.98 * m, "m {} alpha {}", m, out.alpha);
        prop_assert!(out.j < m * m);
    }

    #[test]
    fn line_search_never_accepts_an_increase(slope in 0.0f64..5.0, alpha0 in 1e-3f64..1.0) {
        let params = LineSearchParams::default();
        let out = line_search(1.0, alpha0, &params, |a| Trial { j: 1.0 + slope * a, quality: 60.0 });
        prop_assert_eq!(out.alpha, 0.0);
    }

    #[test]
    fn normalized_shepard_reproduces_constants(h in 0.08f64..0.3, value in -1e3f64..1e3) {
        let m = generate_annulus(1.0, 0.3, h).unwrap();
        let f = shepard_to_nodes(&m, &CellField::new(vec![value; m.triangle_count()], ""), ShepardVariant::Normalized).unwrap();
        for v in &f.values {
            prop_assert!((v - value).abs() <= 1e-12 * value.abs().max(1.0));
        }
    }

    #[test]
    fn run_csv_round_trips_bitwise(js in prop::collection::vec(-1e6f64..1e6, 1..20), g in 0.0f64..1.0) {
        let records: Vec<IterationRecord> = js
            .iter()
            .enumerate()
            .map(|(k, &j)| IterationRecord {
                iter: k + 1,
                j,
                j_step: j,
                g,
                alpha: g / 3.0,
                min_quality: 12.5,
                n_boundary_nodes: 40 + k,
                predicted_decrease: -1.0,
                solver_residual: 0.0,
                remeshed: false,
            })
            .collect();
        let rows = parse_run_csv(&run_csv_string(&records)).unwrap();
        prop_assert_eq!(rows.len(), records.len());
        for (r, rec) in rows.iter().zip(&records) {
            prop_assert_eq!(r.j.to_bits(), rec.j.to_bits());
            prop_assert_eq!(r.g.to_bits(), rec.g.to_bits());
            prop_assert_eq!(r.alpha.to_bits(), rec.alpha.to_bits());
        }
    }

    #[test]
    fn cyclic_tridiagonal_matches_dense(diag in prop::collection::vec(3.0f64..6.0, 3..12), off in -1.0f64..1.0, seed in 0u64..1000) {
        let n = diag.len();
        let a: Vec<f64> = (0..n).map(|i| off * (1.0 + 0.1 * ((i as u64 + seed) % 7) as f64)).collect();
        let c: Vec<f64> = (0..n).map(|i| -off * (0.5 + 0.1 * ((i as u64 * 3 + seed) % 5) as f64)).collect();
        let d: Vec<f64> = (0..n).map(|i| ((i as f64 + seed as f64) * 0.7).sin()).collect();
        let mut m = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            m[(i, i)] += diag[i];
            m[(i, (i + n - 1) % n)] += a[i];
            m[(i, (i + 1) % n)] += c[i];
        }
        let dense = m.lu().solve(&DVector::from_vec(d.clone())).unwrap();
        let x = solve_cyclic_tridiagonal(&a, &diag, &c, &d).unwrap();
        for i in 0..n {
            prop_assert!((x[i] - dense[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn remeshed_boundary_turns_once(h in 0.06f64..0.25) {
        let m = generate_annulus(1.0, 0.3, h).unwrap();
        for c in shapedesc::mesh::boundary_loops(&m).unwrap() {
            let total: f64 = turning_angles_deg(&c.points).iter().sum();
            prop_assert!((total.abs() - 360.0).abs() < 1e-6, "total {}", total);
        }
    }
}

#[test]
fn pcg_matches_dense_solve() {
    let m = generate_annulus(1.0, 0.3, 0.15).unwrap();
    let mut sys = assemble_scalar_diffusion(&m, |p| 1.0 + p.x * p.x, 0.5).unwrap();
    sys.rhs = mass_load(&m, |p| (3.0 * p.x).sin() + p.y);
    let x = solve_spd(&sys, 1e-13).unwrap().values;
    let n = m.node_count();
    let mut k = DMatrix::<f64>::zeros(n, n);
    for r in 0..n {
        for (c, v) in sys.matrix.row(r) {
            k[(r, c)] = v;
        }
    }
    let dense = k.cholesky().expect("SPD").solve(&DVector::from_vec(sys.rhs.clone()));
    let scale = dense.amax();
    for i in 0..n {
        assert!((x[i] - dense[i]).abs() <= 1e-9 * scale, "node {i}");
    }
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_and_sequential_objectives_agree_bitwise() {
    use shapedesc::par::Execution;
    use shapedesc::problem::{objective_with, IllustrativeProblem};

    let m = generate_annulus(1.0, 0.3, 0.05).unwrap();
    let p = IllustrativeProblem::new(1.0, 1.0);
    let a = objective_with(Execution::Sequential, &m, &p).unwrap();
    let b = objective_with(Execution::Parallel, &m, &p).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}
