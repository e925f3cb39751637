//! Exact penalization of an endpoint equality, multiplier recovery and the
//! regularity checks at the solution.

use dgmp::adjoint::CostSpec;
use dgmp::constraints::{self, Constraint, ConstraintKind, ConstraintSet, Location};
use dgmp::solver::{self, SolveOptions};
use dgmp::system::{ControlSetSpec, ControlSystem, StageMap};
use dgmp::Point;
use nalgebra::{DMatrix, DVector};

fn main() -> dgmp::Result<()> {
    let dt = 0.1;
    let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]);
    let sys = ControlSystem::uniform(StageMap::linear(a, b), ControlSetSpec::WholeManifold, 20)?;
    let cost = CostSpec::quadratic(DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.1, DMatrix::identity(2, 2));
    // reach position 0.5 exactly at the final stage
    let cons = ConstraintSet::new(&sys).with(Constraint::linear(
        Location::Endpoint,
        ConstraintKind::Equality,
        DVector::from_vec(vec![1.0, 0.0]),
        DVector::zeros(0),
        0.5,
    ))?;
    let q0 = Point::from_slice(&[0.0, 0.0]);

    let out = solver::penalty_solve(&sys, &cost, &cons, &q0, &sys.default_controls(), &SolveOptions::default())?;
    let rep = &out.report;
    println!("status {:?}, κ = {}, P = {:.1e}, J = {:.10}", rep.status, rep.kappa, rep.penalty, rep.cost);
    for (k, p) in &rep.history {
        println!("  round κ = {k:<6} P = {p:.2e}");
    }
    if let Some(m) = &out.multipliers {
        println!("multipliers: {:?}, λ0 = {}, μ = {:?}", m.outcome, m.multipliers.lambda0, m.multipliers.values.as_slice());
    }
    let licq = constraints::licq_check(&cons, &rep.trajectory, Location::Endpoint)?;
    let normal = constraints::strict_normality_check(&sys, &rep.trajectory, &cons)?;
    println!("LICQ {} (σ_min {:.3}), strictly normal {}", licq.regular, licq.min_singular_value, normal.strictly_normal);
    Ok(())
}
