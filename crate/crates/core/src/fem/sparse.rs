//! Compressed-row matrices, Dirichlet elimination and a Jacobi-preconditioned
//! conjugate-gradient solver.

use std::collections::BTreeMap;

use crate::par::Execution;

use super::FemError;

/// Square matrix in compressed row form with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Sums duplicate entries in the order they were given, so equal triplet
    /// lists always produce bitwise-equal matrices.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            rows[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            // stable: duplicates keep insertion order
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                if col_idx.len() > *row_ptr.last().unwrap() && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        Self { n, row_ptr: (0..=n).collect(), col_idx: (0..n).collect(), values: vec![1.0; n] }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    /// Entry `(r, c)`, zero when not stored.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.get(r, r)).collect()
    }

    pub fn spmv(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.spmv_into(Execution::default(), x, &mut y);
        y
    }

    /// `y = A x`; rows are independent so the parallel path is exact.
    pub fn spmv_into(&self, exec: Execution, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        exec.fill(y, |r| {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            acc
        });
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        if scale > 0.0 {
            worst / scale
        } else {
            0.0
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v *= factor);
        m
    }
}

/// Linear system with Dirichlet constraints kept separate until the solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub constraints: BTreeMap<usize, f64>,
}

impl SparseSystem {
    pub fn new(matrix: CsrMatrix) -> Self {
        let n = matrix.n;
        Self { matrix, rhs: vec![0.0; n], constraints: BTreeMap::new() }
    }

    pub fn dofs(&self) -> usize {
        self.matrix.n
    }
}

/// Records Dirichlet values; a dof constrained twice to different values is
/// an error, repeating the same value is accepted.
pub fn apply_dirichlet(
    system: &mut SparseSystem,
    constraints: impl IntoIterator<Item = (usize, f64)>,
) -> Result<(), FemError> {
    for (dof, value) in constraints {
        if dof >= system.dofs() {
            return Err(FemError::Constraint(format!("dof {dof} out of range ({} dofs)", system.dofs())));
        }
        if !value.is_finite() {
            return Err(FemError::Constraint(format!("non-finite value for dof {dof}")));
        }
        match system.constraints.get(&dof) {
            Some(&old) if old != value => {
                return Err(FemError::Constraint(format!("dof {dof} constrained to both {old} and {value}")));
            }
            _ => {
                system.constraints.insert(dof, value);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Relative residual target `|r| / |b|` on the free dofs.
    pub tol: f64,
    /// Iteration cap; `None` means `10 n + 100`.
    pub max_iterations: Option<usize>,
    pub exec: Execution,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iterations: None, exec: Execution::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub values: Vec<f64>,
    /// Achieved relative residual on the free dofs.
    pub residual: f64,
    pub iterations: usize,
    /// `f - K u` at each constrained dof (reaction terms).
    pub constraint_residual: BTreeMap<usize, f64>,
}

pub fn solve_spd(system: &SparseSystem, tol: f64) -> Result<Solution, FemError> {
    solve_spd_with(system, &SolverOptions { tol, ..SolverOptions::default() }, None)
}

/// Eliminates the constraints symmetrically, solves the reduced system with
/// Jacobi-preconditioned CG (optionally warm-started) and reinserts the
/// constrained values.
pub fn solve_spd_with(
    system: &SparseSystem,
    opts: &SolverOptions,
    initial: Option<&[f64]>,
) -> Result<Solution, FemError> {
    let n = system.dofs();
    assert_eq!(system.rhs.len(), n, "rhs length");
    if let Some(i) = system.rhs.iter().position(|v| !v.is_finite()) {
        return Err(FemError::NonFinite { what: "right-hand side", index: i });
    }
    let mut free_index = vec![usize::MAX; n];
    let mut free = Vec::with_capacity(n);
    for dof in 0..n {
        if !system.constraints.contains_key(&dof) {
            free_index[dof] = free.len();
            free.push(dof);
        }
    }
    let mut full = vec![0.0; n];
    for (&dof, &v) in &system.constraints {
        full[dof] = v;
    }

    let m = free.len();
    let mut x = vec![0.0; m];
    let mut iterations = 0;
    let mut residual = 0.0;
    if m > 0 {
        // reduced matrix and rhs f_F - K_FC u_C
        let mut row_ptr = Vec::with_capacity(m + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut b = Vec::with_capacity(m);
        row_ptr.push(0);
        for &dof in &free {
            let mut bi = system.rhs[dof];
            for (c, v) in system.matrix.row(dof) {
                let fc = free_index[c];
                if fc == usize::MAX {
                    bi -= v * full[c];
                } else {
                    col_idx.push(fc);
                    values.push(v);
                }
            }
            b.push(bi);
            row_ptr.push(col_idx.len());
        }
        let reduced = CsrMatrix { n: m, row_ptr, col_idx, values };
        if let Some(init) = initial {
            assert_eq!(init.len(), n, "initial guess length");
            for (k, &dof) in free.iter().enumerate() {
                x[k] = init[dof];
            }
        }
        let cap = opts.max_iterations.unwrap_or(10 * m + 100);
        let (its, res) = pcg(&reduced, &b, &mut x, opts.tol, cap, opts.exec)?;
        iterations = its;
        residual = res;
    }
    for (k, &dof) in free.iter().enumerate() {
        full[dof] = x[k];
    }
    let mut constraint_residual = BTreeMap::new();
    for &dof in system.constraints.keys() {
        let ku: f64 = system.matrix.row(dof).map(|(c, v)| v * full[c]).sum();
        constraint_residual.insert(dof, system.rhs[dof] - ku);
    }
    Ok(Solution { values: full, residual, iterations, constraint_residual })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns (iterations, relative residual).
fn pcg(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    cap: usize,
    exec: Execution,
) -> Result<(usize, f64), FemError> {
    let m = a.n;
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok((0, 0.0));
    }
    let diag = a.diagonal();
    if let Some(i) = diag.iter().position(|&d| !(d > 0.0)) {
        return Err(FemError::Singular(format!("non-positive diagonal entry at reduced dof {i}")));
    }
    let mut ax = vec![0.0; m];
    a.spmv_into(exec, x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut rel = dot(&r, &r).sqrt() / bnorm;
    if rel <= tol {
        return Ok((0, rel));
    }
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; m];
    for it in 1..=cap {
        a.spmv_into(exec, &p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(FemError::Singular(format!("curvature p'Ap = {pap:e} at CG iteration {it}")));
        }
        let step = rz / pap;
        for k in 0..m {
            x[k] += step * p[k];
            r[k] -= step * ap[k];
        }
        rel = dot(&r, &r).sqrt() / bnorm;
        if !rel.is_finite() {
            return Err(FemError::Singular(format!("residual became non-finite at CG iteration {it}")));
        }
        if rel <= tol {
            return Ok((it, rel));
        }
        for k in 0..m {
            z[k] = r[k] / diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..m {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(FemError::NotConverged { iterations: cap, residual: rel })
}
