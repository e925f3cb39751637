//! Box-constrained controls: the solution saturates and the stage
//! Hamiltonian is maximised over the box at every stage.

use dgmp::adjoint::{self, CostSpec};
use dgmp::solver::{self, SolveOptions};
use dgmp::system::{ControlSetSpec, ControlSystem, StageMap};
use dgmp::Point;
use nalgebra::{DMatrix, DVector};

fn main() -> dgmp::Result<()> {
    let dt = 0.2;
    let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]);
    let set = ControlSetSpec::boxed(DVector::from_element(1, -0.5), DVector::from_element(1, 0.5))?;
    let n = 12;
    let sys = ControlSystem::uniform(StageMap::linear(a, b), set, n)?;
    let cost = CostSpec::quadratic(DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.01, DMatrix::identity(2, 2) * 20.0);
    let q0 = Point::from_slice(&[2.0, 0.0]);

    let rep = solver::minimize(&sys, &cost, &q0, &sys.default_controls(), &SolveOptions::default())?;
    println!("status {:?}, certified Δ {:.2e}", rep.status, rep.certified_delta);

    let sweep = adjoint::backward_sweep(&sys, &rep.trajectory, &cost)?;
    let mut p = vec![DVector::zeros(2)];
    p.extend(sweep.p.iter().map(|c| c.covec().clone()));
    for i in 0..n {
        let m = solver::maximization_check(&sys, &rep.trajectory, &cost, &p, i, 500, 1.0)?;
        println!("stage {i:2}: u = {:+.6}  H gap {:.1e}  {}", rep.controls()[i].coords()[0], m.worst_gap, if m.pass { "ok" } else { "FAIL" });
    }
    Ok(())
}
