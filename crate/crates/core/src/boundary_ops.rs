//! Boundary-resident update operators: direct sensitivity, the Gaussian
//! filter and the finite-difference Laplace-Beltrami smoothers.
//!
//! All functions take per-loop-position arrays (index `j` is `curve.nodes[j]`)
//! and return zero on non-design nodes.

use thiserror::Error;

use crate::geometry::Vec2;
use crate::mesh::BoundaryCurve;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundaryError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("singular boundary system: {0}")]
    Singular(String),
    #[error("expected {expected} values on the loop, got {got}")]
    Length { got: usize, expected: usize },
}

fn check_len(curve: &BoundaryCurve, len: usize) -> Result<(), BoundaryError> {
    if len != curve.len() {
        return Err(BoundaryError::Length { got: len, expected: curve.len() });
    }
    Ok(())
}

/// Stencil weights `(to previous, to next)` of the three-point second
/// derivative at loop position `j`.
#[inline]
fn stencil(curve: &BoundaryCurve, j: usize) -> (f64, f64) {
    let hj = curve.spacing[j];
    let hn = curve.spacing[curve.next(j)];
    (2.0 / (hj * (hj + hn)), 2.0 / (hn * (hj + hn)))
}

/// Three-point arc-length second derivative on a nonuniform closed loop.
pub fn fd_laplace_beltrami(curve: &BoundaryCurve, v: &[f64]) -> Vec<f64> {
    assert_eq!(v.len(), curve.len(), "values per loop node");
    (0..curve.len())
        .map(|j| {
            let (wp, wn) = stencil(curve, j);
            wn * (v[curve.next(j)] - v[j]) - wp * (v[j] - v[curve.prev(j)])
        })
        .collect()
}

/// `theta_n = -n_n s_n` on design nodes.
pub fn direct_sensitivity(curve: &BoundaryCurve, s: &[f64]) -> Vec<Vec2> {
    assert_eq!(s.len(), curve.len(), "values per loop node");
    (0..curve.len()).map(|j| if curve.design[j] { curve.normals[j] * -s[j] } else { Vec2::ZERO }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Gaussian width in arc length; neighbours lie within `3 sigma`.
    pub sigma: f64,
}

impl FilterConfig {
    pub fn cutoff(&self) -> f64 {
        3.0 * self.sigma
    }
}

/// Arc distances from `j` to the design nodes reachable along the loop
/// without leaving the design part, within `cutoff`.
fn arc_neighbours(curve: &BoundaryCurve, j: usize, cutoff: f64) -> Vec<(usize, f64)> {
    let n = curve.len();
    let mut dist = vec![f64::INFINITY; n];
    dist[j] = 0.0;
    for forward in [true, false] {
        let mut k = j;
        let mut d = 0.0;
        for _ in 1..n {
            let next = if forward { curve.next(k) } else { curve.prev(k) };
            d += if forward { curve.spacing[next] } else { curve.spacing[k] };
            if d > cutoff || !curve.design[next] {
                break;
            }
            dist[next] = dist[next].min(d);
            k = next;
        }
    }
    (0..n).filter(|&k| dist[k].is_finite()).map(|k| (k, dist[k])).collect()
}

/// Normalized Gaussian filter `theta_n = -sum_j w_nj s_j n_j`.
pub fn filter_sensitivity(curve: &BoundaryCurve, s: &[f64], cfg: FilterConfig) -> Result<Vec<Vec2>, BoundaryError> {
    check_len(curve, s.len())?;
    if !(cfg.sigma > 0.0 && cfg.sigma.is_finite()) {
        return Err(BoundaryError::InvalidParameter(format!("sigma must be positive, got {}", cfg.sigma)));
    }
    let denom = 2.0 * cfg.sigma * cfg.sigma;
    Ok((0..curve.len())
        .map(|j| {
            if !curve.design[j] {
                return Vec2::ZERO;
            }
            let nb = arc_neighbours(curve, j, cfg.cutoff());
            let w: Vec<f64> = nb.iter().map(|&(_, d)| (-d * d / denom).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut acc = Vec2::ZERO;
            for (&(k, _), wk) in nb.iter().zip(&w) {
                acc += curve.normals[k] * (wk / total * s[k]);
            }
            -acc
        })
        .collect())
}

/// Thomas algorithm; `a`, `b`, `c` are the sub-, main and super-diagonals (`a[0]` and `c[n-1]` unused).
pub fn solve_tridiagonal(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Result<Vec<f64>, BoundaryError> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    let mut x = vec![0.0; n];
    if n == 0 {
        return Ok(x);
    }
    let mut piv = b[0];
    for i in 0..n {
        if i > 0 {
            piv = b[i] - a[i] * cp[i - 1];
        }
        if !(piv.abs() > 0.0) || !piv.is_finite() {
            return Err(BoundaryError::Singular(format!("zero pivot at row {i}")));
        }
        cp[i] = if i + 1 < n { c[i] / piv } else { 0.0 };
        dp[i] = (d[i] - if i > 0 { a[i] * dp[i - 1] } else { 0.0 }) / piv;
    }
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    Ok(x)
}

/// Periodic tridiagonal solve: `a[0]` couples row 0 to the last unknown and
/// `c[n-1]` couples the last row to unknown 0 (Sherman-Morrison).
pub fn solve_cyclic_tridiagonal(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Result<Vec<f64>, BoundaryError> {
    let n = b.len();
    if n < 3 {
        return Err(BoundaryError::InvalidParameter(format!("cyclic system needs at least 3 rows, got {n}")));
    }
    let (beta, alpha) = (a[0], c[n - 1]);
    let gamma = -b[0];
    let mut bb = b.to_vec();
    bb[0] = b[0] - gamma;
    bb[n - 1] = b[n - 1] - alpha * beta / gamma;
    let x = solve_tridiagonal(a, &bb, c, d)?;
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = alpha;
    let z = solve_tridiagonal(a, &bb, c, &u)?;
    let den = 1.0 + z[0] + beta * z[n - 1] / gamma;
    if !(den.abs() > 0.0) {
        return Err(BoundaryError::Singular("Sherman-Morrison denominator vanished".into()));
    }
    let fact = (x[0] + beta * x[n - 1] / gamma) / den;
    Ok(x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect())
}

/// Maximal runs of consecutive design nodes as `(start, length)`; `None`
/// when every node is design.
fn design_runs(curve: &BoundaryCurve) -> Option<Vec<(usize, usize)>> {
    let n = curve.len();
    let first_fixed = curve.design.iter().position(|&d| !d)?;
    let mut runs = Vec::new();
    let mut k = 0;
    while k < n {
        let j = (first_fixed + 1 + k) % n;
        if curve.design[j] {
            let start = j;
            let mut len = 0;
            while k < n && curve.design[(first_fixed + 1 + k) % n] {
                len += 1;
                k += 1;
            }
            runs.push((start, len));
        } else {
            k += 1;
        }
    }
    Some(runs)
}

/// Solves `(I - A L_FD) x = s` on design nodes with `x = 0` elsewhere;
/// periodic when the whole loop is design.
pub fn solve_slb(curve: &BoundaryCurve, s: &[f64], a: f64) -> Result<Vec<f64>, BoundaryError> {
    check_len(curve, s.len())?;
    if !(a >= 0.0 && a.is_finite()) {
        return Err(BoundaryError::Singular(format!("conductivity A must be non-negative, got {a}")));
    }
    if let Some(j) = curve.spacing.iter().position(|&h| !(h > 0.0 && h.is_finite())) {
        return Err(BoundaryError::Singular(format!("spacing {} at loop node {j}", curve.spacing[j])));
    }
    let n = curve.len();
    let mut out = vec![0.0; n];
    let coeffs = |j: usize| {
        let (wp, wn) = stencil(curve, j);
        (-a * wp, 1.0 + a * (wp + wn), -a * wn)
    };
    match design_runs(curve) {
        None => {
            let (mut lo, mut di, mut up) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for j in 0..n {
                (lo[j], di[j], up[j]) = coeffs(j);
            }
            out = solve_cyclic_tridiagonal(&lo, &di, &up, s)?;
        }
        Some(runs) => {
            for (start, len) in runs {
                let idx: Vec<usize> = (0..len).map(|k| (start + k) % n).collect();
                let (mut lo, mut di, mut up) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
                for (k, &j) in idx.iter().enumerate() {
                    (lo[k], di[k], up[k]) = coeffs(j);
                }
                let rhs: Vec<f64> = idx.iter().map(|&j| s[j]).collect();
                let x = solve_tridiagonal(&lo, &di, &up, &rhs)?;
                for (k, &j) in idx.iter().enumerate() {
                    out[j] = x[k];
                }
            }
        }
    }
    Ok(out)
}

/// Componentwise [`solve_slb`] with right-hand side `n s`.
pub fn solve_vlb(curve: &BoundaryCurve, s: &[f64], a: f64) -> Result<Vec<Vec2>, BoundaryError> {
    check_len(curve, s.len())?;
    let sx: Vec<f64> = (0..curve.len()).map(|j| curve.normals[j].x * s[j]).collect();
    let sy: Vec<f64> = (0..curve.len()).map(|j| curve.normals[j].y * s[j]).collect();
    let x = solve_slb(curve, &sx, a)?;
    let y = solve_slb(curve, &sy, a)?;
    Ok(x.into_iter().zip(y).map(|(x, y)| Vec2::new(x, y)).collect())
}
