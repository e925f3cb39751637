//! Steering a rotation to a target attitude with body-rate controls on SO(3).

use dgmp::adjoint::CostSpec;
use dgmp::manifold::so3;
use dgmp::solver::{self, SolveOptions};
use dgmp::system::{ControlSetSpec, ControlSystem, StageMap};
use dgmp::ManifoldHandle;
use nalgebra::{DMatrix, Vector3};

fn main() -> dgmp::Result<()> {
    let n = 20;
    let stage = StageMap::retraction_velocity(ManifoldHandle::so3(), DMatrix::identity(3, 3), 0.1);
    let sys = ControlSystem::uniform(stage, ControlSetSpec::ball(nalgebra::DVector::zeros(3), 3.0)?, n)?;
    let target = so3::axis_angle(&Vector3::new(1.0, 1.0, 0.0).normalize(), 2.0);
    let cost = CostSpec::attitude(target, 10.0, 0.05);
    let q0 = ManifoldHandle::so3().identity();

    let rep = solver::minimize(&sys, &cost, &q0, &sys.default_controls(), &SolveOptions::default())?;
    let end = rep.trajectory.final_state().as_rotation().unwrap();
    let miss = so3::log(&(target.transpose() * end)).norm();
    println!("status {:?}, {} iterations, certified Δ {:.2e}", rep.status, rep.iterations, rep.certified_delta);
    println!("J = {:.8}, final attitude error {miss:.4} rad", rep.cost);
    let peak = rep.controls().iter().map(|u| u.coords().norm()).fold(0.0, f64::max);
    println!("peak body rate {peak:.4} (bound 3)");
    Ok(())
}
