//! A constraint the dynamics cannot influence: the normality test returns
//! an abnormal certificate, and an unreachable target stalls the penalty
//! method instead of converging.

use dgmp::adjoint::CostSpec;
use dgmp::constraints::{self, Constraint, ConstraintKind, ConstraintSet, Location};
use dgmp::solver::{self, SolveOptions};
use dgmp::system::{self, ControlSetSpec, ControlSystem, StageMap};
use dgmp::Point;
use nalgebra::{DMatrix, DVector};

fn toy(gap: f64) -> dgmp::Result<(ControlSystem, ConstraintSet)> {
    // the control never enters the state
    let sys = ControlSystem::uniform(
        StageMap::linear(DMatrix::identity(2, 2), DMatrix::zeros(2, 1)),
        ControlSetSpec::WholeManifold,
        1,
    )?;
    let cons = ConstraintSet::new(&sys).with(Constraint::linear(
        Location::Endpoint,
        ConstraintKind::Equality,
        DVector::from_vec(vec![1.0, -2.0]),
        DVector::zeros(0),
        gap,
    ))?;
    Ok((sys, cons))
}

fn main() -> dgmp::Result<()> {
    let q0 = Point::from_slice(&[1.0, 0.5]);
    let (sys, cons) = toy(0.0)?;
    let traj = system::rollout(&sys, &q0, &[Point::from_slice(&[0.3])])?;
    let rep = constraints::strict_normality_check(&sys, &traj, &cons)?;
    println!("feasible point: strictly normal {}", rep.strictly_normal);
    if let Some(c) = &rep.certificate {
        println!(
            "  abnormal multipliers {:?}, residuals {:.1e} / {:.1e}",
            c.multipliers.values.as_slice(),
            c.stationarity_residual,
            c.adjoint_residual
        );
    }

    let (sys, cons) = toy(0.5)?;
    let cost = CostSpec::new(|_| 0.0, |_, _, u| 0.5 * u.coords().norm_squared());
    let out = solver::penalty_solve(&sys, &cost, &cons, &q0, &sys.default_controls(), &SolveOptions::default())?;
    println!("unreachable endpoint: status {:?}, P = {}", out.report.status, out.report.penalty);
    if let Some(d) = &out.report.diagnostics {
        println!("  {d}");
    }
    Ok(())
}
