//! Reduced gradient of a nonlinear cost by the backward costate sweep,
//! checked against central finite differences.

use dgmp::adjoint::{self, CostSpec};
use dgmp::oracle;
use dgmp::system::{self, ControlSetSpec, ControlSystem, StageMap};
use dgmp::{ManifoldHandle, Point};
use nalgebra::{DMatrix, DVector};

fn main() -> dgmp::Result<()> {
    // pendulum-like q_{i+1} = q_i + h (v, −sin θ + u)
    let h = 0.1;
    let stage = StageMap::new(ManifoldHandle::euclidean(2), ManifoldHandle::euclidean(1), move |q, u| {
        let (q, u) = (q.as_vector().unwrap(), u.as_vector().unwrap());
        Point::from_slice(&[q[0] + h * q[1], q[1] + h * (-q[0].sin() + u[0])])
    });
    let sys = ControlSystem::uniform(stage, ControlSetSpec::WholeManifold, 15)?;
    let cost = CostSpec::quadratic(DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.1, DMatrix::identity(2, 2) * 5.0);
    let q0 = Point::from_slice(&[1.0, 0.0]);
    let controls: Vec<Point> = (0..15).map(|i| Point::from_slice(&[0.2 * (i as f64).cos()])).collect();

    let traj = system::rollout(&sys, &q0, &controls)?;
    let grad = adjoint::cost_gradient(&sys, &traj, &cost)?;
    let sweep = adjoint::backward_sweep(&sys, &traj, &cost)?;
    println!("J = {:.10}", cost.evaluate(&traj));
    println!("p_1 = {:?}", sweep.costate(1).as_slice());

    let flat = DVector::from_iterator(grad.len(), grad.iter().map(|g| g[0]));
    let f = |u: &Point| adjoint::total_cost(&sys, &cost, &q0, u.factors().unwrap()).unwrap();
    let fd = oracle::fd_gradient(f, &Point::product(controls.clone()), oracle::FD_STEP)?;
    println!("adjoint vs finite differences: relative error {:.2e}", oracle::relative_error(&flat, &fd.gradient));

    let cert = adjoint::criticality_certificate(&sys, &traj, &cost)?;
    println!("certified Δ at the initial guess: {:.4}", cert.certified_delta);
    Ok(())
}
