//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::time::Instant;

use common::*;
use dgmp::adjoint::{self, CostSpec};
use dgmp::constraints::{
    self, AssemblyOutcome, Constraint, ConstraintKind, ConstraintSet, DecreaseOptions, Location,
};
use dgmp::liegroup::{self, GroupFunction};
use dgmp::oracle;
use dgmp::solver::{self, SolveOptions, SolveStatus};
use dgmp::system::{self, ControlSetSpec, ControlSystem, StageMap};
use dgmp::{ManifoldHandle, Point};
use nalgebra::{DMatrix, DVector, Vector3};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 1 ---------------------------------------------------------------------------

fn adjoint_vs_finite_differences() -> Outcome {
    let mut worst_rel: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    for p in random_problems(20, 100) {
        let traj = system::rollout(&p.sys, &p.q0, &p.controls).map_err(|e| e.to_string())?;
        let grad = flatten(&adjoint::cost_gradient(&p.sys, &traj, &p.cost).map_err(|e| e.to_string())?);
        let x = Point::product(p.controls.clone());
        let f = |u: &Point| adjoint::total_cost(&p.sys, &p.cost, &p.q0, u.factors().unwrap()).unwrap();
        let fd = oracle::fd_gradient(f, &x, oracle::FD_STEP).map_err(|e| e.to_string())?;
        let rel = oracle::relative_error(&grad, &fd.gradient);
        let sweep = adjoint::backward_sweep(&p.sys, &traj, &p.cost).map_err(|e| e.to_string())?;
        let (end, rec) = sweep.residuals(&system::linearize(&p.sys, &traj));
        if rel > 1e-5 || end.max(rec) > 1e-12 {
            return Err(format!("{}: rel err {rel:.2e}, residuals ({end:.1e}, {rec:.1e})", p.label));
        }
        worst_rel = worst_rel.max(rel);
        worst_res = worst_res.max(end.max(rec));
    }
    Ok(format!("20 problems, worst rel err {worst_rel:.2e}, worst sweep residual {worst_res:.1e}"))
}

// 2 ---------------------------------------------------------------------------

fn forward_adjoint_duality() -> Outcome {
    let mut worst: f64 = 0.0;
    for (k, p) in random_problems(20, 100).into_iter().enumerate() {
        let traj = system::rollout(&p.sys, &p.q0, &p.controls).unwrap();
        let r = adjoint::cost_gradient(&p.sys, &traj, &p.cost).unwrap();
        let sweep = adjoint::backward_sweep(&p.sys, &traj, &p.cost).unwrap();
        let mut g = rng(500 + k as u64);
        let vs: Vec<DVector<f64>> = r.iter().map(|ri| rand_vec(&mut g, ri.len(), 1.0)).collect();
        let qdot = system::forward_variation(&p.sys, &traj, &vs).unwrap();
        let n = vs.len();
        let adjoint_side: f64 = r.iter().zip(&vs).map(|(ri, vi)| ri.dot(vi)).sum();
        // q_0' = 0; q_j' for j = 1..n
        let mut forward_side = sweep.a[n].dot(&qdot[n - 1]);
        for i in 0..n {
            forward_side += sweep.b[i].dot(&vs[i]);
            if i > 0 {
                forward_side += sweep.a[i].dot(&qdot[i - 1]);
            }
        }
        let err = (adjoint_side - forward_side).abs() / forward_side.abs().max(1.0);
        worst = worst.max(err);
    }
    check(worst <= 1e-10, format!("worst pairing mismatch {worst:.2e}"))
}

// 3 ---------------------------------------------------------------------------

fn semigroup_law() -> Outcome {
    let mut worst: f64 = 0.0;
    for s in 0..5u64 {
        let p = random_problem(if s % 2 == 0 { 1 } else { 2 }, 900 + s);
        let traj = system::rollout(&p.sys, &p.q0, &p.controls).unwrap();
        let n = p.sys.horizon();
        for i in 0..=n {
            for j in i..=n {
                for k in j..=n {
                    let fij = system::transition_jacobian(&p.sys, &traj, i, j).unwrap();
                    let fjk = system::transition_jacobian(&p.sys, &traj, j, k).unwrap();
                    let fik = system::transition_jacobian(&p.sys, &traj, i, k).unwrap();
                    worst = worst.max((fjk * fij - fik).norm());
                }
            }
        }
    }
    check(worst <= 1e-10, format!("worst ‖F_jk F_ij − F_ik‖ = {worst:.2e}"))
}

// 4 ---------------------------------------------------------------------------

fn lqr_matches_riccati() -> Outcome {
    let lqr = Lqr::random(4, 4, 2, 20, 1.05);
    let sys = lqr.system(ControlSetSpec::WholeManifold);
    let q0 = Point::euclidean(lqr.q0.clone());
    let opts = SolveOptions::default();
    let rep = solver::minimize(&sys, &lqr.cost(), &q0, &sys.default_controls(), &opts).map_err(|e| e.to_string())?;
    let exact = oracle::riccati_lqr(&lqr.a, &lqr.b, &lqr.q, &lqr.r, &lqr.qf, lqr.n, &lqr.q0).unwrap();
    let err = (flatten(&vectors(rep.controls())) - flatten(&exact.controls)).norm();
    check(
        err <= 1e-6 && rep.certified_delta <= 1e-8 && rep.iterations <= 5000,
        format!(
            "control err {err:.2e}, certified Δ {:.2e}, {} iterations, status {:?}",
            rep.certified_delta, rep.iterations, rep.status
        ),
    )
}

// 5 ---------------------------------------------------------------------------

fn variational_integrator() -> Outcome {
    let free = rigid_body(0.01, GroupFunction::zero());
    let g0 = ManifoldHandle::so3().identity();
    let p0 = v(&[0.3, -0.5, 0.8]);
    let run = liegroup::integrate(&free, &g0, &p0, 1000).map_err(|e| e.to_string())?;
    let worst_res = run.residuals.iter().copied().fold(0.0, f64::max);
    let drift = run.casimir_drift();

    let heavy = rigid_body(0.01, liegroup::heavy_top_potential(0.8, Vector3::z(), Vector3::new(0.0, 0.1, 0.3)));
    let run2 = liegroup::integrate(&heavy, &g0, &p0, 1000).map_err(|e| e.to_string())?;
    let worst_res2 = run2.residuals.iter().copied().fold(0.0, f64::max);
    let (sys, cost) = liegroup::action_sum_for(&heavy, &run2).map_err(|e| e.to_string())?;
    let cert = adjoint::criticality_certificate(&sys, &run2.trajectory(), &cost).map_err(|e| e.to_string())?;
    check(
        worst_res.max(worst_res2) <= 1e-10 && drift <= 1e-9 && cert.certified_delta <= 1e-7,
        format!(
            "step residual {:.1e}, Casimir drift {drift:.1e}, action-sum Δ {:.1e}",
            worst_res.max(worst_res2),
            cert.certified_delta
        ),
    )
}

// 6 ---------------------------------------------------------------------------

fn costates_of(sys: &ControlSystem, traj: &system::Trajectory, cost: &CostSpec) -> Vec<DVector<f64>> {
    let sweep = adjoint::backward_sweep(sys, traj, cost).unwrap();
    let d = sys.state_manifold().dim();
    let mut p = vec![sweep.p0.map(|c| c.covec().clone()).unwrap_or_else(|| DVector::zeros(d))];
    p.extend(sweep.p.iter().map(|c| c.covec().clone()));
    p
}

fn maximization_on_box_problems() -> Outcome {
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut saturated = 0;
    for s in 0..4u64 {
        let lqr = Lqr::random(60 + s, 3, 2, 6, 1.1);
        let bound = 0.4;
        let set = ControlSetSpec::boxed(DVector::from_element(2, -bound), DVector::from_element(2, bound)).unwrap();
        let sys = if s < 3 {
            lqr.system(set)
        } else {
            ControlSystem::uniform(StageMap::euler_affine(lqr.a.clone(), lqr.b.clone(), 0.5), set, lqr.n).unwrap()
        };
        let cost = lqr.cost();
        let q0 = Point::euclidean(lqr.q0.clone());
        let rep = solver::minimize(&sys, &cost, &q0, &sys.default_controls(), &SolveOptions::default()).map_err(|e| e.to_string())?;
        let p = costates_of(&sys, &rep.trajectory, &cost);
        saturated += rep
            .controls()
            .iter()
            .flat_map(|u| u.coords().iter().copied().collect::<Vec<_>>())
            .filter(|x| (x.abs() - bound).abs() < 1e-9)
            .count();
        for i in 0..lqr.n {
            let m = solver::maximization_check(&sys, &rep.trajectory, &cost, &p, i, 1000, 1.0).map_err(|e| e.to_string())?;
            worst = worst.max(m.worst_gap);
            if !m.pass {
                return Err(format!("problem {s} stage {i}: gap {:.2e}", m.worst_gap));
            }
        }
    }
    check(worst <= 1e-7, format!("4 problems, worst gap {worst:.2e}, {saturated} saturated control entries"))
}

// 7 ---------------------------------------------------------------------------

fn endpoint_lqr() -> (Lqr, DVector<f64>, f64) {
    let lqr = Lqr::random(7, 3, 2, 8, 1.0);
    (lqr, v(&[1.0, -0.5, 0.25]), 0.75)
}

fn exact_penalization() -> Outcome {
    let (lqr, c, d) = endpoint_lqr();
    let sys = lqr.system(ControlSetSpec::WholeManifold);
    let cost = lqr.cost();
    let q0 = Point::euclidean(lqr.q0.clone());
    let cons = ConstraintSet::new(&sys)
        .with(Constraint::linear(Location::Endpoint, ConstraintKind::Equality, c.clone(), v(&[]), d))
        .unwrap();
    let opts = SolveOptions::default();
    let out = solver::penalty_solve(&sys, &cost, &cons, &q0, &sys.default_controls(), &opts).map_err(|e| e.to_string())?;
    let traj = &out.report.trajectory;
    let licq = constraints::licq_check(&cons, traj, Location::Endpoint).map_err(|e| e.to_string())?;
    let normal = constraints::strict_normality_check(&sys, traj, &cons).map_err(|e| e.to_string())?;
    let kappa_star = out.report.kappa;
    let doubled = SolveOptions {
        kappa0: 2.0 * kappa_star,
        ..opts
    };
    let out2 = solver::penalty_solve(&sys, &cost, &cons, &q0, &sys.default_controls(), &doubled).map_err(|e| e.to_string())?;
    let change = (flatten(&vectors(out.report.controls())) - flatten(&vectors(out2.report.controls()))).norm();
    let (u_kkt, nu) = lqr.kkt_endpoint(&c, d);
    let mult = out.multipliers.as_ref().ok_or("no multipliers assembled")?;
    let mu = mult.multipliers.values[0];
    let u_err = (flatten(&vectors(out.report.controls())) - u_kkt).norm();
    check(
        out.report.status == SolveStatus::Converged
            && licq.regular
            && normal.strictly_normal
            && out.report.penalty <= 1e-9
            && change <= 1e-6
            && mult.outcome == AssemblyOutcome::Normal
            && (mu - nu).abs() <= 1e-5,
        format!(
            "P {:.1e}, κ* {kappa_star}, doubling change {change:.1e}, μ {mu:.8} vs KKT {nu:.8}, control err {u_err:.1e}, LICQ {}, strictly normal {}",
            out.report.penalty, licq.regular, normal.strictly_normal
        ),
    )
}

// 8 ---------------------------------------------------------------------------

fn distance_bound() -> Outcome {
    // triangle x ≤ 2, y ≤ 2, −x − 2y ≤ 2 as controls of q_1 = q_0 + u
    let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -2.0]);
    let b = v(&[2.0, 2.0, 2.0]);
    let sys = ControlSystem::uniform(
        StageMap::linear(DMatrix::identity(2, 2), DMatrix::identity(2, 2)),
        ControlSetSpec::WholeManifold,
        1,
    )
    .unwrap();
    let mut cons = ConstraintSet::new(&sys);
    for j in 0..3 {
        cons.push(Constraint::linear(
            Location::Stage(0),
            ConstraintKind::Inequality,
            DVector::zeros(2),
            a.row(j).transpose(),
            b[j],
        ))
        .unwrap();
    }
    let q0 = Point::from_slice(&[0.0, 0.0]);
    let zero = DVector::zeros(3);
    let start = DVector::zeros(2);
    let dist = |_: &DVector<f64>, u: &[Point]| oracle::polyhedron_distance(&a, &b, &u[0].coords(), &start).ok();
    let opts = DecreaseOptions {
        radius: 4.0,
        perturbation_radius: 0.0,
        delta: 1e-3,
        samples: 4000,
        directions: 8,
        seed: 8,
    };
    let probe = constraints::decrease_certificate(&sys, &cons, &zero, &q0, &[Point::from_slice(&[0.0, 0.0])], &opts, None)
        .map_err(|e| e.to_string())?;
    let delta = probe.estimated_delta * (1.0 - 1e-6);
    let cert = constraints::decrease_certificate(
        &sys,
        &cons,
        &zero,
        &q0,
        &[Point::from_slice(&[0.0, 0.0])],
        &DecreaseOptions { delta, ..opts },
        Some(&dist),
    )
    .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut infeasible = 0;
    for ix in 0..50 {
        for iy in 0..50 {
            let u = v(&[-4.0 + 8.0 * ix as f64 / 49.0, -4.0 + 8.0 * iy as f64 / 49.0]);
            let traj = system::rollout(&sys, &q0, &[Point::euclidean(u.clone())]).unwrap();
            let pen = constraints::penalty_eval(&cons, &zero, &traj).unwrap().total;
            let d = oracle::polyhedron_distance(&a, &b, &u, &start).map_err(|e| e.to_string())?;
            if pen > 0.0 {
                infeasible += 1;
            }
            worst = worst.max(d - pen / delta);
        }
    }
    check(
        cert.pass && cert.distance_bound_holds && worst <= 1e-12,
        format!(
            "Δ = {delta:.6}, {infeasible}/2500 grid points infeasible, max(d − P/Δ) = {worst:.2e}, certificate pass {}",
            cert.pass
        ),
    )
}

// 9 ---------------------------------------------------------------------------

fn abnormal_toy(gap: f64) -> (ControlSystem, ConstraintSet, Point) {
    let sys = ControlSystem::uniform(
        StageMap::linear(DMatrix::identity(2, 2), DMatrix::zeros(2, 1)),
        ControlSetSpec::WholeManifold,
        1,
    )
    .unwrap();
    let cons = ConstraintSet::new(&sys)
        .with(Constraint::linear(Location::Endpoint, ConstraintKind::Equality, v(&[1.0, -2.0]), v(&[]), gap))
        .unwrap();
    (sys, cons, Point::from_slice(&[1.0, 0.5]))
}

fn abnormality_detection() -> Outcome {
    let (sys, cons, q0) = abnormal_toy(0.0);
    let traj = system::rollout(&sys, &q0, &[Point::from_slice(&[0.3])]).unwrap();
    let rep = constraints::strict_normality_check(&sys, &traj, &cons).map_err(|e| e.to_string())?;
    let cert = rep.certificate.ok_or("no abnormal certificate")?;
    let res = cert.stationarity_residual.max(cert.adjoint_residual);

    let cost = CostSpec::new(|_| 0.0, |_, _, u| 0.5 * u.as_vector().unwrap()[0].powi(2));
    let (sys, cons, q0) = abnormal_toy(0.5);
    let out = solver::penalty_solve(&sys, &cost, &cons, &q0, &sys.default_controls(), &SolveOptions::default())
        .map_err(|e| e.to_string())?;
    let flagged = out.normality.as_ref().map(|n| !n.strictly_normal).unwrap_or(false);
    check(
        !rep.strictly_normal && res <= 1e-12 && out.report.status == SolveStatus::PenaltyStalled && flagged,
        format!(
            "certificate residual {res:.1e}, multiplier {:?}, unreachable endpoint → {:?} (P = {}), abnormal verdict {flagged}",
            cert.multipliers.values.as_slice(),
            out.report.status,
            out.report.penalty
        ),
    )
}

// 10 --------------------------------------------------------------------------

fn e_grid() -> Vec<DVector<f64>> {
    [-1e-3, -1e-4, -1e-5, 1e-5, 1e-4, 1e-3].iter().map(|&e| v(&[e])).collect()
}

fn calmness() -> Outcome {
    // min ½(u − 2)² s.t. u ≤ 1 + e: v(e) = ½(e − 1)², one-sided slope −1
    let sys = ControlSystem::uniform(
        StageMap::linear(DMatrix::identity(1, 1), DMatrix::identity(1, 1)),
        ControlSetSpec::WholeManifold,
        1,
    )
    .unwrap();
    let cost = CostSpec::new(|_| 0.0, |_, _, u| 0.5 * (u.as_vector().unwrap()[0] - 2.0).powi(2))
        .with_running_grad(|_, _, u| (v(&[0.0]), v(&[u.as_vector().unwrap()[0] - 2.0])));
    let cons = ConstraintSet::new(&sys)
        .with(Constraint::linear(Location::Stage(0), ConstraintKind::Inequality, v(&[0.0]), v(&[1.0]), 1.0))
        .unwrap();
    let q0 = Point::from_slice(&[0.0]);
    let opts = SolveOptions::default();
    let table = constraints::value_sensitivity(&sys, &cost, &cons, &q0, &sys.default_controls(), &e_grid(), &opts)
        .map_err(|e| e.to_string())?;
    let curve = table
        .rows
        .iter()
        .map(|r| r.value.map(|x| (x - 0.5 * (r.e[0] - 1.0).powi(2)).abs()).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    let slope1 = table.calmness.ok_or("no calmness estimate (1-D)")?;

    // LQR with an active endpoint inequality ⟨c, q_n⟩ ≤ d
    let (lqr, c, _) = endpoint_lqr();
    let free = oracle::riccati_lqr(&lqr.a, &lqr.b, &lqr.q, &lqr.r, &lqr.qf, lqr.n, &lqr.q0).unwrap();
    let d = c.dot(free.states.last().unwrap()) - 0.5;
    let (_, nu) = lqr.kkt_endpoint(&c, d);
    let sys = lqr.system(ControlSetSpec::WholeManifold);
    let cons = ConstraintSet::new(&sys)
        .with(Constraint::linear(Location::Endpoint, ConstraintKind::Inequality, c, v(&[]), d))
        .unwrap();
    let q0 = Point::euclidean(lqr.q0.clone());
    let table2 = constraints::value_sensitivity(&sys, &lqr.cost(), &cons, &q0, &sys.default_controls(), &e_grid(), &opts)
        .map_err(|e| e.to_string())?;
    let slope2 = table2.calmness.ok_or("no calmness estimate (LQR)")?;
    let rel = (slope2 + nu).abs() / nu.abs();
    check(
        (slope1 + 1.0).abs() <= 1e-4 && curve <= 1e-6 && rel <= 0.05,
        format!(
            "1-D slope {slope1:.6} vs −1 (curve err {curve:.1e}); LQR slope {slope2:.6} vs −μ = {:.6} ({:.2}%)",
            -nu,
            100.0 * rel
        ),
    )
}

// 11 --------------------------------------------------------------------------

fn golden_csv() -> Outcome {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let bin = env!("CARGO_BIN_EXE_dgmp");
    let cases: [(&str, &[&str], &str); 3] = [
        ("rollout", &["rollout", "lqr.json", "--controls", "lqr_controls.csv"], "trajectory.csv"),
        ("solve", &["solve", "lqr.json"], "solution.csv"),
        ("integrate", &["integrate", "rigid_body.json", "--steps", "200"], "integration.csv"),
    ];
    let mut lines = Vec::new();
    for (name, args, file) in cases {
        let expected = std::fs::read(dir.join(format!("{name}.csv"))).map_err(|e| format!("{name}: {e}"))?;
        for run in 0..2 {
            let out = tempfile::tempdir().map_err(|e| e.to_string())?;
            let status = std::process::Command::new(bin)
                .current_dir(&dir)
                .args(args)
                .args(["--seed", "7", "--out"])
                .arg(out.path())
                .status()
                .map_err(|e| e.to_string())?;
            if !status.success() {
                return Err(format!("{name}: exit {status}"));
            }
            let got = std::fs::read(out.path().join(file)).map_err(|e| format!("{name}: {e}"))?;
            if got != expected {
                return Err(format!("{name}: run {run} differs from golden file"));
            }
        }
        lines.push(format!("{name} ({} bytes)", expected.len()));
    }
    Ok(format!("byte-identical over 2 runs: {}", lines.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("adjoint vs finite differences", adjoint_vs_finite_differences),
        ("forward/adjoint duality", forward_adjoint_duality),
        ("transition semigroup law", semigroup_law),
        ("LQR vs Riccati", lqr_matches_riccati),
        ("variational integrator", variational_integrator),
        ("maximization condition", maximization_on_box_problems),
        ("exact penalization", exact_penalization),
        ("distance bound", distance_bound),
        ("abnormality detection", abnormality_detection),
        ("calmness estimate", calmness),
        ("golden CSV determinism", golden_csv),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let res = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.2}s]", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.2}s]", k + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
