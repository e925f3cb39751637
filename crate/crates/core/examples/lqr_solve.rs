//! Projected-gradient solve of a linear-quadratic problem, compared with
//! the Riccati feedback solution.

use dgmp::adjoint::CostSpec;
use dgmp::oracle;
use dgmp::solver::{self, SolveOptions};
use dgmp::system::{ControlSetSpec, ControlSystem, StageMap};
use dgmp::Point;
use nalgebra::{DMatrix, DVector};

fn main() -> dgmp::Result<()> {
    let dt = 0.1;
    let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]);
    let (q, r, qf) = (DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.1, DMatrix::identity(2, 2) * 10.0);
    let n = 30;
    let q0 = DVector::from_vec(vec![1.0, 0.0]);

    let sys = ControlSystem::uniform(StageMap::linear(a.clone(), b.clone()), ControlSetSpec::WholeManifold, n)?;
    let cost = CostSpec::quadratic(q.clone(), r.clone(), qf.clone());
    let rep = solver::minimize(&sys, &cost, &Point::euclidean(q0.clone()), &sys.default_controls(), &SolveOptions::default())?;
    let exact = oracle::riccati_lqr(&a, &b, &q, &r, &qf, n, &q0)?;

    let err = rep
        .controls()
        .iter()
        .zip(&exact.controls)
        .map(|(u, v)| (u.coords() - v).norm_squared())
        .sum::<f64>()
        .sqrt();
    println!("status {:?} after {} iterations", rep.status, rep.iterations);
    println!("J = {:.12} (Riccati {:.12})", rep.cost, exact.value);
    println!("certified Δ {:.2e}, control error {err:.2e}", rep.certified_delta);
    Ok(())
}
