//! Strong decrease of the penalty for a polyhedral control constraint and
//! the resulting bound d(u, feasible set) ≤ P(u) / Δ.

use dgmp::constraints::{self, Constraint, ConstraintKind, ConstraintSet, DecreaseOptions, Location};
use dgmp::oracle;
use dgmp::system::{self, ControlSetSpec, ControlSystem, StageMap};
use dgmp::Point;
use nalgebra::{DMatrix, DVector};

fn main() -> dgmp::Result<()> {
    // the triangle x ≤ 2, y ≤ 2, −x − 2y ≤ 2 for the control of q_1 = q_0 + u
    let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -2.0]);
    let b = DVector::from_vec(vec![2.0, 2.0, 2.0]);
    let sys = ControlSystem::uniform(
        StageMap::linear(DMatrix::identity(2, 2), DMatrix::identity(2, 2)),
        ControlSetSpec::WholeManifold,
        1,
    )?;
    let mut cons = ConstraintSet::new(&sys);
    for j in 0..3 {
        cons.push(Constraint::linear(Location::Stage(0), ConstraintKind::Inequality, DVector::zeros(2), a.row(j).transpose(), b[j]))?;
    }
    let q0 = Point::from_slice(&[0.0, 0.0]);
    let e0 = DVector::zeros(3);
    let u0 = [Point::from_slice(&[0.0, 0.0])];
    let opts = DecreaseOptions {
        radius: 4.0,
        perturbation_radius: 0.0,
        samples: 2000,
        ..DecreaseOptions::default()
    };

    let probe = constraints::decrease_certificate(&sys, &cons, &e0, &q0, &u0, &opts, None)?;
    let delta = probe.estimated_delta * (1.0 - 1e-6);
    println!("estimated decrease rate Δ = {delta:.6} over {} infeasible samples", probe.infeasible_samples);

    let start = DVector::zeros(2);
    let dist = |_: &DVector<f64>, u: &[Point]| oracle::polyhedron_distance(&a, &b, &u[0].coords(), &start).ok();
    let cert = constraints::decrease_certificate(&sys, &cons, &e0, &q0, &u0, &DecreaseOptions { delta, ..opts }, Some(&dist))?;
    println!("certificate pass {}, distance bound holds {}", cert.pass, cert.distance_bound_holds);

    for u in [[3.0, 0.0], [3.0, 3.0], [-4.0, -4.0]] {
        let traj = system::rollout(&sys, &q0, &[Point::from_slice(&u)])?;
        let p = constraints::penalty_eval(&cons, &e0, &traj)?.total;
        let d = oracle::polyhedron_distance(&a, &b, &DVector::from_row_slice(&u), &start)?;
        println!("u = {u:?}: d = {d:.4} ≤ P/Δ = {:.4}", p / delta);
    }
    Ok(())
}
