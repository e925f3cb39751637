//! Small dense solvers shared by the control-set, constraint and solver
//! modules: least squares, nonnegative least squares and Euclidean
//! projection onto polyhedra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Minimum-norm least-squares solution of `a x ≈ b`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    if a.nrows() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let tol = svd.singular_values.max() * 1e-12 * a.nrows().max(a.ncols()) as f64;
    svd.solve(b, tol).expect("svd solve with u and v_t")
}

/// Smallest singular value (zero for empty or wide matrices).
pub fn min_singular_value(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    if a.nrows() < a.ncols() {
        return 0.0;
    }
    a.clone().singular_values().min()
}

/// Lawson–Hanson nonnegative least squares: `min ‖a x − b‖` subject to `x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    if n == 0 {
        return x;
    }
    let scale = a.norm().max(1.0) * b.norm().max(1.0);
    let tol = 1e-13 * scale;
    let mut passive = vec![false; n];
    let max_outer = 5 * n + 20;
    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        for _ in 0..(3 * n + 10) {
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let sub = a.select_columns(&idx);
            let z_p = lstsq(&sub, b);
            if z_p.iter().all(|&v| v > 0.0) {
                for (k, &i) in idx.iter().enumerate() {
                    x[i] = z_p[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &i) in idx.iter().enumerate() {
                if z_p[k] <= 0.0 {
                    let denom = x[i] - z_p[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (k, &i) in idx.iter().enumerate() {
                x[i] += alpha * (z_p[k] - x[i]);
            }
            for &i in &idx {
                if x[i] <= 1e-15 * scale {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    x
}

/// Least squares with a mix of free and sign-constrained variables:
/// `min ‖a x − b‖` with `x_j ≥ 0` where `nonneg[j]`.
pub fn mixed_nnls(a: &DMatrix<f64>, b: &DVector<f64>, nonneg: &[bool]) -> DVector<f64> {
    let n = a.ncols();
    let free: Vec<usize> = (0..n).filter(|&j| !nonneg[j]).collect();
    let mut cols = Vec::with_capacity(n + free.len());
    for j in 0..n {
        cols.push(a.column(j).into_owned());
    }
    for &j in &free {
        cols.push(-a.column(j).into_owned());
    }
    if cols.is_empty() {
        return DVector::zeros(0);
    }
    let split = DMatrix::from_columns(&cols);
    let y = nnls(&split, b);
    let mut x = y.rows(0, n).into_owned();
    for (k, &j) in free.iter().enumerate() {
        x[j] -= y[n + k];
    }
    x
}

/// Euclidean projection of `y` onto `{x : a x ≤ b}` by a primal active-set
/// method started from the feasible point `start`.
pub fn project_polyhedron(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    y: &DVector<f64>,
    start: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = a.nrows();
    let n = a.ncols();
    let row_norms: Vec<f64> = (0..m).map(|i| a.row(i).norm().max(1e-300)).collect();
    let feas_tol = 1e-9;
    let slack = |x: &DVector<f64>, i: usize| (b[i] - a.row(i).dot(&x.transpose())) / row_norms[i];
    for i in 0..m {
        if slack(start, i) < -feas_tol {
            return Err(Error::Invalid("polyhedral projection started from an infeasible point".into()));
        }
    }
    let mut x = start.clone();
    let mut working: Vec<usize> = (0..m).filter(|&i| slack(&x, i).abs() <= 1e-12).collect();
    // keep the initial working set linearly independent
    working = independent_subset(a, &working);
    for _ in 0..(50 * (m + n) + 100) {
        let aw = a.select_rows(&working);
        let g = &x - y;
        // step to the minimiser on the current face: p = -(I - Aw⁺Aw) g
        let p = if working.is_empty() {
            -g.clone()
        } else {
            let lam = lstsq(&aw.transpose(), &g);
            -(&g - aw.transpose() * lam)
        };
        if p.norm() <= 1e-14 * (1.0 + x.norm() + y.norm()) {
            if working.is_empty() {
                return Ok(x);
            }
            // multipliers from g + Awᵀ λ = 0
            let lam = lstsq(&aw.transpose(), &(-&g));
            let (k, min_lam) = lam
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, v)| (k, *v))
                .unwrap();
            if min_lam >= -1e-12 * (1.0 + g.norm()) {
                return Ok(x);
            }
            working.remove(k);
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..m {
            if working.contains(&i) {
                continue;
            }
            let ap = a.row(i).dot(&p.transpose());
            if ap > 1e-14 * row_norms[i] * p.norm() {
                let step = (b[i] - a.row(i).dot(&x.transpose())).max(0.0) / ap;
                if step < alpha {
                    alpha = step;
                    blocking = Some(i);
                }
            }
        }
        x += &p * alpha;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    Err(Error::Invalid("polyhedral projection did not terminate".into()))
}

fn independent_subset(a: &DMatrix<f64>, rows: &[usize]) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in rows {
        let mut trial = kept.clone();
        trial.push(i);
        let sub = a.select_rows(&trial).transpose();
        if min_singular_value(&sub) > 1e-10 * a.row(i).norm().max(1e-300) {
            kept = trial;
        }
    }
    kept
}
