//! Perturbing the right-hand side of an active inequality: the value
//! function v(e) and its calmness slope, which matches −μ.

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
    // final velocity at most −0.2 (the free optimum comes to rest)
    let cons = ConstraintSet::new(&sys).with(Constraint::linear(
        Location::Endpoint,
        ConstraintKind::Inequality,
        DVector::from_vec(vec![0.0, 1.0]),
        DVector::zeros(0),
        -0.2,
    ))?;
    let q0 = Point::from_slice(&[1.0, 0.0]);
    let opts = SolveOptions::default();

    let out = solver::penalty_solve(&sys, &cost, &cons, &q0, &sys.default_controls(), &opts)?;
    let mu = out.multipliers.as_ref().map(|m| m.multipliers.values[0]);
    println!("baseline J = {:.10}, multiplier {mu:?}", out.report.cost);

    let grid: Vec<DVector<f64>> = [-1e-2, -1e-3, -1e-4, 1e-4, 1e-3, 1e-2].iter().map(|&e| DVector::from_element(1, e)).collect();
    let table = constraints::value_sensitivity(&sys, &cost, &cons, &q0, &sys.default_controls(), &grid, &opts)?;
    for row in &table.rows {
        println!("e = {:+.0e}: v = {:?} ({})", row.e[0], row.value, row.status);
    }
    println!("calmness estimate {:?}", table.calmness);
    Ok(())
}
