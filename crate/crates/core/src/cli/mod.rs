//! Command-line front end: JSON problem files built from a registry of
//! builtin dynamics, costs, control sets and constraints, and CSV/JSON
//! result files.
//!
//! Every command is a thin wrapper over the library; numbers written to disk
//! are exactly what the corresponding library calls return.

mod problem;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde_json::json;

use crate::adjoint;
use crate::constraints::{self, ConstraintSet, FEASIBLE_PENALTY};
use crate::error::Error;
use crate::liegroup;
use crate::manifold::Point;
use crate::solver::{self, SolveOptions, SolveReport, SolveStatus};
use crate::system::{self, ControlSystem, Trajectory};

pub use problem::{Built, ProblemFile};

#[derive(Parser, Debug)]
#[command(name = "dgmp", version, about = "Discrete-time geometric optimal control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Roll out controls and write the state sequence.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Controls CSV (header row, one row per stage); defaults to the
        /// control-set witnesses.
        #[arg(long)]
        controls: Option<PathBuf>,
    },
    /// Minimize the cost (by exact penalization when constrained).
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate costates, residuals and certificates at given controls.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        controls: PathBuf,
    },
    /// Step the variational integrator.
    Integrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
    /// Tabulate the value function over perturbations of one constraint.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated values, or `lo:hi:count`.
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        /// Index of the perturbed constraint.
        #[arg(long, default_value_t = 0)]
        constraint: usize,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Problem definition (JSON).
    pub problem: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub kappa0: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("integrator failure: {0}")]
    Integrator(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Validation(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Integrator(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NewtonDivergence { .. } => CliError::Integrator(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Caps the global rayon pool at `DGMP_THREADS` when set.
pub fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("DGMP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Validation(format!("DGMP_THREADS must be a positive integer, got {v:?}")))?;
        // a second initialisation in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Rollout { common, controls } => cmd_rollout(&common, controls.as_deref()),
        Command::Solve { common } => cmd_solve(&common),
        Command::Check { common, controls } => cmd_check(&common, &controls),
        Command::Integrate { common, steps } => cmd_integrate(&common, steps),
        Command::Sweep {
            common,
            grid,
            constraint,
        } => cmd_sweep(&common, &grid, constraint),
    }
}

// ---------------------------------------------------------------------------
// I/O helpers.

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_problem(path: &Path) -> CliResult<ProblemFile> {
    ProblemFile::parse(&read(path)?).map_err(CliError::Validation)
}

/// Full double precision: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_row(out: &mut String, cells: impl IntoIterator<Item = String>) {
    let row: Vec<String> = cells.into_iter().collect();
    out.push_str(&row.join(","));
    out.push('\n');
}

fn coord_header(prefix: &str, len: usize) -> Vec<String> {
    (0..len).map(|k| format!("{prefix}{k}")).collect()
}

/// Parses a CSV of control rows (first line is a header).
pub fn read_controls(path: &Path, sys: &ControlSystem) -> CliResult<Vec<Point>> {
    let text = read(path)?;
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != sys.horizon() {
        return Err(CliError::Validation(format!(
            "controls file has {} rows, horizon is {}",
            rows.len(),
            sys.horizon()
        )));
    }
    rows.iter()
        .enumerate()
        .map(|(i, line)| {
            let vals = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| CliError::Validation(format!("controls row {i}: {e}")))?;
            Ok(sys.stage(i).control_manifold().point_from_coords(&vals)?)
        })
        .collect()
}

/// `stage,q…,u…` rows; the final row leaves the control cells empty.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let qlen = traj.states[0].manifold().coord_len();
    let ulen = traj.controls.first().map_or(0, |u| u.manifold().coord_len());
    let mut out = String::new();
    let mut header = vec!["stage".to_string()];
    header.extend(coord_header("q", qlen));
    header.extend(coord_header("u", ulen));
    push_row(&mut out, header);
    for (i, q) in traj.states.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(q.coords().iter().map(|&x| fmt_f64(x)));
        match traj.controls.get(i) {
            Some(u) => row.extend(u.coords().iter().map(|&x| fmt_f64(x))),
            None => row.extend(std::iter::repeat(String::new()).take(ulen)),
        }
        push_row(&mut out, row);
    }
    out
}

/// Header plus one row of coordinates per control.
pub fn controls_csv(controls: &[Point]) -> String {
    let ulen = controls.first().map_or(0, |u| u.manifold().coord_len());
    let mut out = String::new();
    push_row(&mut out, coord_header("u", ulen));
    for u in controls {
        push_row(&mut out, u.coords().iter().map(|&x| fmt_f64(x)));
    }
    out
}

fn to_json(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

fn vec_json(v: &DVector<f64>) -> serde_json::Value {
    json!(v.as_slice())
}

fn solver_options(common: &Common, built: &Built) -> SolveOptions {
    let mut opts = built.solver.clone();
    if let Some(s) = common.seed {
        opts.seed = s;
    }
    if let Some(t) = common.tol {
        opts.tol = t;
    }
    if let Some(m) = common.max_iters {
        opts.max_iters = m;
    }
    if let Some(k) = common.kappa0 {
        opts.kappa0 = k;
    }
    opts
}

// ---------------------------------------------------------------------------
// Commands.

pub fn cmd_rollout(common: &Common, controls: Option<&Path>) -> CliResult<()> {
    let built = load_problem(&common.problem)?.build()?;
    let sys = built.system()?;
    let u = match controls {
        Some(p) => read_controls(p, sys)?,
        None => sys.default_controls(),
    };
    sys.check_controls(&u)?;
    let traj = system::rollout(sys, built.initial_state()?, &u)?;
    write(&common.out, "trajectory.csv", &trajectory_csv(&traj))
}

fn report_json(rep: &SolveReport) -> serde_json::Value {
    json!({
        "status": rep.status,
        "J": rep.cost,
        "certified_delta": rep.certified_delta,
        "iterations": rep.iterations,
        "penalty": rep.penalty,
        "kappa": rep.kappa,
        "diagnostics": rep.diagnostics,
    })
}

fn assembly_json(m: &constraints::MultiplierAssembly) -> serde_json::Value {
    json!({
        "outcome": format!("{:?}", m.outcome),
        "lambda0": m.multipliers.lambda0,
        "values": vec_json(&m.multipliers.values),
        "certified_delta": m.report.certified_delta,
        "slackness_violation": m.report.slackness_violation,
    })
}

fn normality_json(n: &constraints::NormalityReport) -> serde_json::Value {
    json!({
        "strictly_normal": n.strictly_normal,
        "certificate": n.certificate.as_ref().map(|c| json!({
            "multipliers": vec_json(&c.multipliers.values),
            "stationarity_residual": c.stationarity_residual,
            "adjoint_residual": c.adjoint_residual,
        })),
    })
}

pub fn cmd_solve(common: &Common) -> CliResult<()> {
    let built = load_problem(&common.problem)?.build()?;
    let sys = built.system()?;
    let cost = built.cost()?;
    let q0 = built.initial_state()?;
    let opts = solver_options(common, &built);
    let u0 = sys.default_controls();
    let (rep, mut report) = match built.constraints.as_ref() {
        None => {
            let rep = solver::minimize(sys, cost, q0, &u0, &opts)?;
            let j = report_json(&rep);
            (rep, j)
        }
        Some(cons) => {
            let out = solver::penalty_solve(sys, cost, cons, q0, &u0, &opts)?;
            let mut j = report_json(&out.report);
            j["multipliers"] = out.multipliers.as_ref().map(assembly_json).unwrap_or(serde_json::Value::Null);
            j["normality"] = out.normality.as_ref().map(normality_json).unwrap_or(serde_json::Value::Null);
            (out.report, j)
        }
    };
    report["controls"] = json!(rep.controls().iter().map(|u| u.coords().as_slice().to_vec()).collect::<Vec<_>>());
    write(&common.out, "solution.csv", &trajectory_csv(&rep.trajectory))?;
    write(&common.out, "report.json", &to_json(&report))?;
    if rep.status != SolveStatus::Converged {
        return Err(CliError::Solver(format!(
            "status {:?}{}",
            rep.status,
            rep.diagnostics.as_deref().map(|d| format!(": {d}")).unwrap_or_default()
        )));
    }
    Ok(())
}

pub fn cmd_check(common: &Common, controls: &Path) -> CliResult<()> {
    let built = load_problem(&common.problem)?.build()?;
    let sys = built.system()?;
    let q0 = built.initial_state()?;
    let u = read_controls(controls, sys)?;
    sys.check_controls(&u)?;
    let traj = system::rollout(sys, q0, &u)?;
    let cost = built.check_cost(&traj)?;
    let sweep = adjoint::backward_sweep(sys, &traj, &cost)?;
    let lin = system::linearize(sys, &traj);
    let (endpoint, recursion) = sweep.residuals(&lin);
    let cert = adjoint::criticality_certificate(sys, &traj, &cost)?;
    let d = sys.state_manifold().dim();
    let mut costates = vec![sweep.p0.as_ref().map(|c| c.covec().clone()).unwrap_or_else(|| DVector::zeros(d))];
    costates.extend(sweep.p.iter().map(|c| c.covec().clone()));
    let mut report = json!({
        "J": cost.evaluate(&traj),
        "certified_delta": cert.certified_delta,
        "per_stage_delta": cert.per_stage_delta,
        "stationarity": cert.residuals.iter().map(|r| r.as_slice().to_vec()).collect::<Vec<_>>(),
        "costates": costates.iter().map(|p| p.as_slice().to_vec()).collect::<Vec<_>>(),
        "adjoint_residuals": { "endpoint": endpoint, "recursion": recursion },
        "maximization": null,
        "constrained": null,
    });
    match built.constraints.as_ref() {
        None => {
            let affine = (0..sys.horizon()).all(|i| sys.stage(i).factorization().is_some_and(|f| f.affine_in_u));
            if affine {
                let mut worst: f64 = f64::NEG_INFINITY;
                let mut pass = true;
                for i in 0..sys.horizon() {
                    let m = solver::maximization_check(sys, &traj, &cost, &costates, i, 1000, 1.0)?;
                    worst = worst.max(m.worst_gap);
                    pass &= m.pass;
                }
                report["maximization"] = json!({ "pass": pass, "worst_gap": worst });
            }
        }
        Some(cons) => {
            let pen = constraints::penalty_eval(cons, cons.perturbation(), &traj)?;
            if pen.total > FEASIBLE_PENALTY {
                return Err(CliError::Validation(format!(
                    "controls violate the constraints (penalty {:.3e})",
                    pen.total
                )));
            }
            let tol = common.tol.unwrap_or(built.solver.tol);
            let asm = constraints::assemble_multipliers(sys, &traj, &cost, cons, tol)?;
            let normality = constraints::strict_normality_check(sys, &traj, cons)?;
            report["constrained"] = json!({
                "multipliers": assembly_json(&asm),
                "costates": asm.report.costates.iter().map(|p| p.as_slice().to_vec()).collect::<Vec<_>>(),
                "normality": normality_json(&normality),
            });
        }
    }
    write(&common.out, "check.json", &to_json(&report))
}

pub fn cmd_integrate(common: &Common, steps: usize) -> CliResult<()> {
    let built = load_problem(&common.problem)?.build()?;
    let integ = built.integrator()?;
    let run = liegroup::integrate(&integ.problem, &integ.g0, &integ.p0, steps)?;
    let mut out = String::new();
    let mut header = vec!["step".to_string()];
    header.extend((0..3).flat_map(|i| (0..3).map(move |j| format!("g{i}{j}"))));
    header.extend(["p0", "p1", "p2", "p_norm", "residual"].map(String::from));
    push_row(&mut out, header);
    for k in 0..=steps {
        let p = if k == 0 { &run.initial_momentum } else { &run.momenta.p[k - 1] };
        let res = if k == 0 { 0.0 } else { run.residuals[k - 1] };
        let mut row = vec![k.to_string()];
        row.extend(run.states[k].coords().iter().map(|&x| fmt_f64(x)));
        row.extend(p.iter().map(|&x| fmt_f64(x)));
        row.push(fmt_f64(p.norm()));
        row.push(fmt_f64(res));
        push_row(&mut out, row);
    }
    write(&common.out, "integration.csv", &out)?;
    write(&common.out, "integration_controls.csv", &controls_csv(&run.controls))
}

/// `a,b,c` or `lo:hi:count` (inclusive, evenly spaced).
pub fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let bad = |m: String| CliError::Validation(format!("grid {text:?}: {m}"));
    let parts: Vec<&str> = text.split(':').collect();
    let vals = match parts.as_slice() {
        [lo, hi, count] => {
            let lo: f64 = lo.trim().parse().map_err(|e| bad(format!("{e}")))?;
            let hi: f64 = hi.trim().parse().map_err(|e| bad(format!("{e}")))?;
            let count: usize = count.trim().parse().map_err(|e| bad(format!("{e}")))?;
            if count < 2 {
                return Err(bad("count must be at least 2".into()));
            }
            (0..count).map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64).collect()
        }
        [list] => list
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| bad(format!("{e}"))))
            .collect::<CliResult<Vec<f64>>>()?,
        _ => return Err(bad("expected a list or lo:hi:count".into())),
    };
    if vals.iter().any(|x| !x.is_finite()) {
        return Err(bad("values must be finite".into()));
    }
    Ok(vals)
}

pub fn cmd_sweep(common: &Common, grid: &str, constraint: usize) -> CliResult<()> {
    let built = load_problem(&common.problem)?.build()?;
    let sys = built.system()?;
    let cost = built.cost()?;
    let cons: &ConstraintSet = built
        .constraints
        .as_ref()
        .ok_or_else(|| CliError::Validation("sweep needs at least one constraint".into()))?;
    if constraint >= cons.len() {
        return Err(CliError::Validation(format!(
            "constraint index {constraint} out of range (problem has {})",
            cons.len()
        )));
    }
    let base = cons.perturbation().clone();
    let zeroed = cons.clone().with_perturbation(DVector::zeros(cons.len()))?;
    let e_grid: Vec<DVector<f64>> = parse_grid(grid)?
        .into_iter()
        .map(|s| {
            let mut e = base.clone();
            e[constraint] += s;
            e
        })
        .collect();
    let opts = solver_options(common, &built);
    let table = constraints::value_sensitivity(sys, cost, &zeroed, built.initial_state()?, &sys.default_controls(), &e_grid, &opts)?;
    let mut out = String::new();
    let mut header = coord_header("e", cons.len());
    header.extend(["value", "status"].map(String::from));
    push_row(&mut out, header);
    for r in &table.rows {
        let mut row: Vec<String> = r.e.iter().map(|&x| fmt_f64(x)).collect();
        row.push(r.value.map(fmt_f64).unwrap_or_default());
        row.push(r.status.replace(',', ";"));
        push_row(&mut out, row);
    }
    let fmt_opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_else(|| "NaN".into());
    let _ = writeln!(out, "# baseline,{}", fmt_opt(table.baseline));
    let _ = writeln!(out, "# calmness,{}", fmt_opt(table.calmness));
    write(&common.out, "sweep.csv", &out)
}

/// Convenience for examples and tests: the parsed problem with its system
/// and cost built.
pub fn build_problem(path: &Path) -> CliResult<Built> {
    Ok(load_problem(path)?.build()?)
}

pub(crate) fn expect<T>(x: Option<T>, what: &str) -> CliResult<T> {
    x.ok_or_else(|| CliError::Validation(format!("problem file has no {what} section")))
}
