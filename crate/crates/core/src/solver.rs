//! Projected-gradient descent over control sequences, the exact-penalty
//! outer loop for constrained problems, and the maximization check for
//! control-affine stages.
//!
//! The search direction is the negative minimum-norm element of
//! `∇J + κ ∂P + N_𝒰(u)`, computed in the flattened control space with the
//! identity metric; without constraints this is `−P_T(r)` stage by stage.
//! Steps retract, then project back onto the control sets. Trial steps use
//! the Barzilai–Borwein length and are accepted by an Armijo test on
//! `J + κP`. Kinks of the penalty that the minimum-norm element straddles
//! are re-attained after each step by a Gauss–Newton correction.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::adjoint::{self, CostSpec};
use crate::constraints::{
    self, control_dims, flatten, generator_groups, min_norm_element, normal_block, project_control, pullback,
    unflatten, ConstraintKind, ConstraintSet, GeneratorGroup, MultiplierAssembly, NormalityReport, TIE_TOL,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::manifold::Point;
use crate::system::{self, ControlSetSpec, ControlSystem, Linearization, Trajectory};

/// Penalty values up to this size count as feasible in the outer loop.
pub const PENALTY_TOL: f64 = 1e-9;
/// Residual tolerance for recovered multipliers.
pub const MULTIPLIER_TOL: f64 = 1e-6;
const EPS_START: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOptions {
    pub max_iters: usize,
    /// Convergence threshold on the certified Δ.
    pub tol: f64,
    pub c1: f64,
    pub backtrack: f64,
    pub initial_step: f64,
    pub max_backtracks: usize,
    pub kappa0: f64,
    pub growth: f64,
    pub max_rounds: usize,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            tol: 1e-8,
            c1: 1e-4,
            backtrack: 0.5,
            initial_step: 1.0,
            max_backtracks: 60,
            kappa0: 1.0,
            growth: 10.0,
            max_rounds: 8,
            seed: 0,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.tol, self.c1, self.backtrack, self.initial_step, self.kappa0, self.growth];
        if positive.iter().any(|&x| !(x > 0.0)) || self.max_iters == 0 || self.max_rounds == 0 {
            return Err(Error::Invalid("solver options must be positive".into()));
        }
        if self.growth <= 1.0 || self.backtrack >= 1.0 || self.c1 >= 1.0 {
            return Err(Error::Invalid("need growth > 1, backtrack < 1 and c1 < 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Converged,
    IterLimit,
    PenaltyStalled,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub trajectory: Trajectory,
    pub iterations: usize,
    pub certified_delta: f64,
    /// `J` at the final controls.
    pub cost: f64,
    /// Final penalty `P` (zero without constraints).
    pub penalty: f64,
    /// Penalty weight of the last round.
    pub kappa: f64,
    /// `(κ, P)` after each outer round of a penalty run.
    pub history: Vec<(f64, f64)>,
    pub status: SolveStatus,
    /// Why the run stopped early, if it did.
    pub diagnostics: Option<String>,
    /// `J + κP` after every accepted step.
    pub objective_trace: Vec<f64>,
}

impl SolveReport {
    pub fn controls(&self) -> &[Point] {
        &self.trajectory.controls
    }
}

/// Projected-gradient minimisation of `J` over the control sets.
pub fn minimize(sys: &ControlSystem, cost: &CostSpec, q0: &Point, u_init: &[Point], opts: &SolveOptions) -> Result<SolveReport> {
    opts.validate()?;
    sys.check_controls(u_init)?;
    let ctx = Context {
        sys,
        cost,
        cons: None,
        kappa: 0.0,
        q0,
        dims: control_dims(sys),
    };
    descend(&ctx, u_init, opts)
}

/// Result of [`penalty_solve`].
#[derive(Clone, Debug)]
pub struct PenaltyOutcome {
    pub report: SolveReport,
    /// Recovered multipliers when the run converged.
    pub multipliers: Option<MultiplierAssembly>,
    /// Normality verdict at the final point when the run stalled.
    pub normality: Option<NormalityReport>,
}

/// Minimises `J + κP` for an increasing sequence of `κ` until the penalty
/// vanishes, then recovers multipliers.
pub fn penalty_solve(
    sys: &ControlSystem,
    cost: &CostSpec,
    cons: &ConstraintSet,
    q0: &Point,
    u_init: &[Point],
    opts: &SolveOptions,
) -> Result<PenaltyOutcome> {
    opts.validate()?;
    cons.check_system(sys)?;
    sys.check_controls(u_init)?;
    let dims = control_dims(sys);
    let mut controls = u_init.to_vec();
    let mut kappa = opts.kappa0;
    let mut history: Vec<(f64, f64)> = Vec::new();
    let mut iterations = 0;
    let mut trace = Vec::new();
    let mut last: Option<SolveReport> = None;
    let mut status = SolveStatus::IterLimit;
    for round in 0..opts.max_rounds {
        let ctx = Context {
            sys,
            cost,
            cons: Some(cons),
            kappa,
            q0,
            dims: dims.clone(),
        };
        let inner = descend(&ctx, &controls, opts)?;
        iterations += inner.iterations;
        trace.extend(inner.objective_trace.iter().copied());
        controls = inner.trajectory.controls.clone();
        history.push((kappa, inner.penalty));
        log::debug!(
            "penalty round {round}: κ = {kappa:.3e}, P = {:.3e}, Δ = {:.3e}, {:?}",
            inner.penalty,
            inner.certified_delta,
            inner.status
        );
        let done = inner.penalty <= PENALTY_TOL && inner.status == SolveStatus::Converged;
        last = Some(inner);
        if done {
            status = SolveStatus::Converged;
            break;
        }
        let k = history.len();
        if k >= 3 {
            let (p2, p1, p0) = (history[k - 3].1, history[k - 2].1, history[k - 1].1);
            if p0 > PENALTY_TOL && p1 >= p2 * (1.0 - 1e-6) && p0 >= p1 * (1.0 - 1e-6) {
                status = SolveStatus::PenaltyStalled;
                break;
            }
        }
        if round + 1 < opts.max_rounds {
            kappa *= opts.growth;
        }
    }
    let inner = last.expect("at least one round");
    let mut report = SolveReport {
        iterations,
        history,
        status,
        kappa,
        objective_trace: trace,
        ..inner
    };
    let mut multipliers = None;
    let mut normality = None;
    match status {
        SolveStatus::Converged => {
            multipliers = Some(constraints::assemble_multipliers(
                sys,
                &report.trajectory,
                cost,
                cons,
                MULTIPLIER_TOL.max(10.0 * opts.tol),
            )?);
        }
        SolveStatus::PenaltyStalled => {
            report.diagnostics = Some("penalty stopped decreasing across two rounds".into());
            normality = Some(constraints::normality_at(sys, &report.trajectory, cons)?);
        }
        SolveStatus::IterLimit => {
            if report.diagnostics.is_none() {
                report.diagnostics = Some(format!("no feasible critical point after {} rounds", opts.max_rounds));
            }
        }
    }
    Ok(PenaltyOutcome {
        report,
        multipliers,
        normality,
    })
}

struct Context<'a> {
    sys: &'a ControlSystem,
    cost: &'a CostSpec,
    cons: Option<&'a ConstraintSet>,
    kappa: f64,
    q0: &'a Point,
    dims: Vec<usize>,
}

struct Eval {
    traj: Trajectory,
    lin: Linearization,
    cost: f64,
    penalty: f64,
    objective: f64,
}

struct Direction {
    element: DVector<f64>,
    groups: Vec<GeneratorGroup>,
    weights: Vec<DVector<f64>>,
}

impl Context<'_> {
    fn evaluate(&self, controls: &[Point]) -> Result<Eval> {
        let traj = system::rollout(self.sys, self.q0, controls)?;
        let cost = self.cost.evaluate(&traj);
        let penalty = match self.cons {
            Some(c) => constraints::penalty_eval(c, c.perturbation(), &traj)?.total,
            None => 0.0,
        };
        let objective = cost + self.kappa * penalty;
        let lin = system::linearize(self.sys, &traj);
        Ok(Eval {
            traj,
            lin,
            cost,
            penalty,
            objective,
        })
    }

    fn gradient(&self, ev: &Eval) -> Vec<DVector<f64>> {
        let sweep = adjoint::backward_sweep_with(&ev.traj, self.cost, &ev.lin);
        adjoint::reduced_gradient(&sweep, &ev.lin)
    }

    fn groups(&self, ev: &Eval, eps: f64) -> Vec<GeneratorGroup> {
        match self.cons {
            Some(c) if self.kappa > 0.0 => generator_groups(c, c.perturbation(), &ev.traj, &ev.lin, &self.dims, eps),
            _ => Vec::new(),
        }
    }

    fn direction(&self, ev: &Eval, eps: f64) -> Direction {
        let g0 = flatten(&self.gradient(ev));
        let groups = self.groups(ev, eps);
        let normals = normal_block(self.sys, &ev.traj.controls);
        let mn = min_norm_element(&g0, &groups, self.kappa, &normals);
        Direction {
            element: mn.element,
            groups,
            weights: mn.weights,
        }
    }

    /// Certified Δ: the stagewise adjoint certificate when no penalty piece
    /// is active, otherwise the norm of the minimum-norm element of the
    /// composite subdifferential with ties at [`TIE_TOL`].
    fn certificate(&self, ev: &Eval) -> Result<f64> {
        let groups = self.groups(ev, TIE_TOL);
        if groups.is_empty() {
            return Ok(adjoint::certify(self.sys, &ev.traj.controls, self.gradient(ev))?.certified_delta);
        }
        let g0 = flatten(&self.gradient(ev));
        let normals = normal_block(self.sys, &ev.traj.controls);
        Ok(min_norm_element(&g0, &groups, self.kappa, &normals).element.norm())
    }

    fn step(&self, controls: &[Point], d: &DVector<f64>, alpha: f64) -> Result<Vec<Point>> {
        unflatten(d, &self.dims)
            .iter()
            .enumerate()
            .map(|(i, di)| project_control(self.sys.control_set(i), &controls[i].retract_vec(&(di * alpha))))
            .collect()
    }

    /// Gauss–Newton return to the kinks that the direction straddled:
    /// equalises every positively weighted piece with the dominant one.
    fn restore(&self, controls: Vec<Point>, dir: &Direction) -> Result<Vec<Point>> {
        let Some(cons) = self.cons else {
            return Ok(controls);
        };
        let e = cons.perturbation();
        let mut pairs = Vec::new();
        for (g, w) in dir.groups.iter().zip(&dir.weights) {
            let support: Vec<usize> = (0..w.len()).filter(|&k| w[k] > 1e-9).collect();
            if support.len() < 2 {
                continue;
            }
            let r = *support.iter().max_by(|&&x, &&y| w[x].total_cmp(&w[y])).unwrap();
            for &k in &support {
                if k != r {
                    pairs.push(((g.gens[k].constraint, g.gens[k].sign), (g.gens[r].constraint, g.gens[r].sign), g.loc));
                }
            }
        }
        if pairs.is_empty() {
            return Ok(controls);
        }
        let n = self.sys.horizon();
        let mut current = controls;
        for _ in 0..3 {
            let traj = system::rollout(self.sys, self.q0, &current)?;
            let lin = system::linearize(self.sys, &traj);
            let piece = |(c, s): (Option<usize>, f64), loc| -> (f64, DVector<f64>) {
                let total: usize = self.dims.iter().sum();
                match c {
                    None => (0.0, DVector::zeros(total)),
                    Some(k) => {
                        let con = &cons.constraints()[k];
                        let (q, u) = match loc {
                            constraints::Location::Stage(i) => (traj.states[i].clone(), traj.controls[i].clone()),
                            constraints::Location::Endpoint => {
                                (traj.final_state().clone(), Point::euclidean(DVector::zeros(0)))
                            }
                        };
                        let v = con.value(&q, &u) - e[k];
                        let (a, b) = con.gradient(&q, &u);
                        let idx = match loc {
                            constraints::Location::Stage(i) => i,
                            constraints::Location::Endpoint => n,
                        };
                        let xi = pullback(&lin, idx, &a, &b, &self.dims);
                        match con.kind() {
                            ConstraintKind::Inequality => (v, xi),
                            ConstraintKind::Equality => (s * v, xi * s),
                        }
                    }
                }
            };
            let mut rows = Vec::with_capacity(pairs.len());
            let mut rhs = DVector::zeros(pairs.len());
            for (j, &(pk, pr, loc)) in pairs.iter().enumerate() {
                let (vk, gk) = piece(pk, loc);
                let (vr, gr) = piece(pr, loc);
                rhs[j] = -(vk - vr);
                rows.push((gk - gr).transpose());
            }
            if rhs.amax() <= 1e-15 {
                break;
            }
            let jac = DMatrix::from_rows(&rows);
            let delta = linalg::lstsq(&jac, &rhs);
            current = self.step(&current, &delta, 1.0)?;
        }
        Ok(current)
    }
}

fn displacement(from: &[Point], to: &[Point]) -> DVector<f64> {
    flatten(&from.iter().zip(to).map(|(a, b)| a.local_log(b)).collect::<Vec<_>>())
}

fn descend(ctx: &Context<'_>, u_init: &[Point], opts: &SolveOptions) -> Result<SolveReport> {
    let restoring = ctx.cons.is_some() && ctx.kappa > 0.0;
    let mut controls = u_init.to_vec();
    let mut ev = ctx.evaluate(&controls)?;
    if !ev.objective.is_finite() {
        return Err(Error::NonFinite("objective at the initial controls"));
    }
    let mut eps = EPS_START;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None; // (step, element)
    let mut diagnostics = None;
    let mut status = SolveStatus::IterLimit;
    let mut certified = f64::INFINITY;
    while iterations < opts.max_iters {
        let dir = ctx.direction(&ev, eps);
        let gnorm = dir.element.norm();
        if gnorm <= opts.tol {
            certified = ctx.certificate(&ev)?;
            if certified <= opts.tol {
                status = SolveStatus::Converged;
                break;
            }
            if eps > TIE_TOL {
                eps = (eps * 1e-2).max(TIE_TOL);
                continue;
            }
        }
        let d = -&dir.element;
        let mut alpha = match &prev {
            Some((s, g_old)) => {
                let y = &dir.element - g_old;
                let sy = s.dot(&y);
                if sy > 0.0 {
                    (s.norm_squared() / sy).clamp(1e-12, 1e12)
                } else {
                    opts.initial_step
                }
            }
            None => opts.initial_step,
        };
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial = ctx.step(&controls, &d, alpha).and_then(|c| if restoring { ctx.restore(c, &dir) } else { Ok(c) });
            if let Ok(cand) = trial {
                let disp = displacement(&controls, &cand);
                let moved = disp.norm_squared();
                if moved > 0.0 {
                    if let Ok(ev_c) = ctx.evaluate(&cand) {
                        if ev_c.objective.is_finite() && ev_c.objective <= ev.objective - opts.c1 * moved / alpha {
                            accepted = Some((cand, ev_c, disp));
                            break;
                        }
                    }
                }
            }
            alpha *= opts.backtrack;
        }
        match accepted {
            Some((cand, ev_c, disp)) => {
                debug_assert!(ev_c.objective <= ev.objective);
                controls = cand;
                ev = ev_c;
                trace.push(ev.objective);
                prev = Some((disp, dir.element));
                iterations += 1;
            }
            None if eps > TIE_TOL => {
                eps = (eps * 1e-2).max(TIE_TOL);
                prev = None;
            }
            None => {
                certified = ctx.certificate(&ev)?;
                if certified <= opts.tol {
                    status = SolveStatus::Converged;
                } else {
                    diagnostics = Some(format!(
                        "line search failed after {} backtracks at iteration {iterations} (Δ = {certified:.3e})",
                        opts.max_backtracks
                    ));
                }
                break;
            }
        }
    }
    if status != SolveStatus::Converged && !certified.is_finite() {
        certified = ctx.certificate(&ev)?;
        if certified <= opts.tol {
            status = SolveStatus::Converged;
        }
    }
    if status == SolveStatus::IterLimit && diagnostics.is_none() {
        diagnostics = Some(format!("iteration limit {} reached (Δ = {certified:.3e})", opts.max_iters));
    }
    Ok(SolveReport {
        trajectory: ev.traj,
        iterations,
        certified_delta: certified,
        cost: ev.cost,
        penalty: ev.penalty,
        kappa: ctx.kappa,
        history: Vec::new(),
        status,
        diagnostics,
        objective_trace: trace,
    })
}

// ---------------------------------------------------------------------------
// Maximization condition.

#[derive(Clone, Debug)]
pub struct MaximizationReport {
    pub pass: bool,
    /// `max_sampled H − H(u_i)`, clipped below at zero.
    pub worst_gap: f64,
    pub value_at_control: f64,
    pub best_sample: DVector<f64>,
    pub samples: usize,
}

/// Slack allowed between the sampled maximum and `H_i(u_i)`.
pub const MAXIMIZATION_TOL: f64 = 1e-7;

/// Checks `H_i(u_i) = max_{u ∈ 𝒰_i} H_i(u)` with
/// `H_i(u) = ⟨𝔽E* p_{i+1}, f(q_i, u)⟩ − λ₀ L_i(q_i, u)` over low-discrepancy
/// samples of the control set plus its vertices. `costates` are
/// `p_0 … p_n`.
pub fn maximization_check(
    sys: &ControlSystem,
    traj: &Trajectory,
    cost: &CostSpec,
    costates: &[DVector<f64>],
    stage: usize,
    samples: usize,
    lambda0: f64,
) -> Result<MaximizationReport> {
    let n = sys.horizon();
    if stage >= n {
        return Err(Error::IndexOutOfRange {
            index: stage,
            max: n.saturating_sub(1),
        });
    }
    if costates.len() != n + 1 {
        return Err(Error::DimensionMismatch {
            context: "costate sequence",
            expected: n + 1,
            found: costates.len(),
        });
    }
    let st = sys.stage(stage);
    let fac = match st.factorization() {
        Some(f) if f.affine_in_u => f,
        _ => return Err(Error::NotAffine(stage)),
    };
    let q = &traj.states[stage];
    let u = &traj.controls[stage];
    let Some(uv) = u.as_vector() else {
        return Err(Error::Invalid("maximization check needs Euclidean controls".into()));
    };
    let pulled = st.fibre_derivative(q, u)?.transpose() * &costates[stage + 1];
    let ham = |v: &DVector<f64>| {
        let p = Point::euclidean(v.clone());
        pulled.dot(&(fac.f)(q, &p)) - lambda0 * cost.running(stage, q, &p)
    };
    let set = sys.control_set(stage);
    let candidates = control_samples(set, uv, samples)?;
    let h0 = ham(uv);
    let mut best = (f64::NEG_INFINITY, uv.clone());
    for c in &candidates {
        let h = ham(c);
        if h > best.0 {
            best = (h, c.clone());
        }
    }
    let gap = (best.0 - h0).max(0.0);
    Ok(MaximizationReport {
        pass: gap <= MAXIMIZATION_TOL,
        worst_gap: gap,
        value_at_control: h0,
        best_sample: best.1,
        samples: candidates.len(),
    })
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn halton(i: usize, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |k, _| radical_inverse(i + 1, PRIMES[k % PRIMES.len()]))
}

/// Halton points of the set (bounding box with rejection) plus vertices.
fn control_samples(set: &ControlSetSpec, u: &DVector<f64>, samples: usize) -> Result<Vec<DVector<f64>>> {
    let d = u.len();
    let (lo, hi) = match set {
        ControlSetSpec::WholeManifold => (u.add_scalar(-1.0), u.add_scalar(1.0)),
        ControlSetSpec::Box { lower, upper } => (
            lower.zip_map(u, |l, x| if l.is_finite() { l } else { x - 1.0 }),
            upper.zip_map(u, |h, x| if h.is_finite() { h } else { x + 1.0 }),
        ),
        ControlSetSpec::Ball { center, radius } => (center.add_scalar(-radius), center.add_scalar(*radius)),
        ControlSetSpec::ConvexPolytope { a, b, .. } => polytope_bounds(a, b, u)?,
    };
    let mut out = Vec::with_capacity(samples + (1 << d.min(12)));
    let mut i = 0;
    while out.len() < samples && i < 50 * samples.max(1) {
        let h = halton(i, d);
        let x = DVector::from_fn(d, |k, _| lo[k] + h[k] * (hi[k] - lo[k]));
        if set.contains(&x) {
            out.push(x);
        }
        i += 1;
    }
    match set {
        ControlSetSpec::Box { .. } | ControlSetSpec::WholeManifold if d <= 12 => {
            for mask in 0..(1usize << d) {
                out.push(DVector::from_fn(d, |k, _| if mask >> k & 1 == 1 { hi[k] } else { lo[k] }));
            }
        }
        ControlSetSpec::ConvexPolytope { a, b, .. } => out.extend(polytope_vertices(a, b)),
        ControlSetSpec::Ball { center, radius } => {
            for k in 0..d {
                for s in [-1.0, 1.0] {
                    let mut x = center.clone();
                    x[k] += s * radius;
                    out.push(x);
                }
            }
        }
        _ => {}
    }
    Ok(out)
}

fn polytope_bounds(a: &DMatrix<f64>, b: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    use microlp::{ComparisonOp, OptimizationDirection, Problem};
    let d = a.ncols();
    let mut lo = DVector::zeros(d);
    let mut hi = DVector::zeros(d);
    for k in 0..d {
        for (dir, slot) in [(OptimizationDirection::Minimize, 0), (OptimizationDirection::Maximize, 1)] {
            let mut lp = Problem::new(dir);
            let vars: Vec<_> = (0..d)
                .map(|j| lp.add_var(if j == k { 1.0 } else { 0.0 }, (f64::NEG_INFINITY, f64::INFINITY)))
                .collect();
            for i in 0..a.nrows() {
                let row: Vec<_> = vars.iter().enumerate().map(|(j, v)| (*v, a[(i, j)])).collect();
                lp.add_constraint(&row, ComparisonOp::Le, b[i]);
            }
            let value = match lp.solve() {
                Ok(sol) => sol.objective(),
                // unbounded direction: sample a unit window around the control
                Err(_) => u[k] + if slot == 0 { -1.0 } else { 1.0 },
            };
            if slot == 0 {
                lo[k] = value;
            } else {
                hi[k] = value;
            }
        }
    }
    Ok((lo, hi))
}

/// Vertices of `{x : A x ≤ b}` by enumerating `d`-subsets of the rows.
fn polytope_vertices(a: &DMatrix<f64>, b: &DVector<f64>) -> Vec<DVector<f64>> {
    let (m, d) = (a.nrows(), a.ncols());
    let mut out = Vec::new();
    if d == 0 || d > m || m > 20 {
        return out;
    }
    let mut idx: Vec<usize> = (0..d).collect();
    loop {
        let sub = a.select_rows(&idx);
        let rhs = DVector::from_iterator(d, idx.iter().map(|&i| b[i]));
        if let Some(x) = sub.lu().solve(&rhs) {
            let ok = (0..m).all(|i| a.row(i).dot(&x.transpose()) <= b[i] + 1e-9);
            if ok && x.iter().all(|v| v.is_finite()) {
                out.push(x);
            }
        }
        // next combination
        let mut k = d;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            if idx[k] < m - d + k {
                idx[k] += 1;
                for j in k + 1..d {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{Constraint, Location};
    use crate::system::StageMap;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn quadratic_bowl() {
        // F(q, u) = q + u, J = ½‖q₁ − t‖² + ½‖u‖²: u* = (t − q₀)/2
        let sys = ControlSystem::uniform(
            StageMap::linear(DMatrix::identity(2, 2), DMatrix::identity(2, 2)),
            ControlSetSpec::WholeManifold,
            1,
        )
        .unwrap();
        let t = v(&[1.0, -2.0]);
        let t2 = t.clone();
        let cost = CostSpec::new(
            move |q| 0.5 * (q.as_vector().unwrap() - &t2).norm_squared(),
            |_, _, u| 0.5 * u.as_vector().unwrap().norm_squared(),
        );
        let q0 = Point::from_slice(&[0.5, 0.5]);
        let rep = minimize(&sys, &cost, &q0, &sys.default_controls(), &SolveOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged);
        let expect = (&t - v(&[0.5, 0.5])) / 2.0;
        assert!((rep.controls()[0].as_vector().unwrap() - expect).norm() < 1e-8);
        assert!(rep.certified_delta <= 1e-8);
        assert!(rep.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn box_clamped_maximizer() {
        // min ½‖q_n‖² + ½ Σ 0.1‖u‖² with |u| ≤ 0.2: bounds active early on
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.1]);
        let set = ControlSetSpec::boxed(v(&[-0.2]), v(&[0.2])).unwrap();
        let sys = ControlSystem::uniform(StageMap::linear(a, b), set, 6).unwrap();
        let cost = CostSpec::quadratic(DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.1, DMatrix::identity(2, 2) * 10.0);
        let q0 = Point::from_slice(&[1.0, 0.5]);
        let rep = minimize(&sys, &cost, &q0, &sys.default_controls(), &SolveOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged, "{:?}", rep.diagnostics);
        assert!(rep.controls().iter().any(|u| (u.as_vector().unwrap()[0].abs() - 0.2).abs() < 1e-12));
        let sweep = adjoint::backward_sweep(&sys, &rep.trajectory, &cost).unwrap();
        let mut p = vec![sweep.p0.unwrap().covec().clone()];
        p.extend(sweep.p.iter().map(|c| c.covec().clone()));
        for i in 0..6 {
            let m = maximization_check(&sys, &rep.trajectory, &cost, &p, i, 1000, 1.0).unwrap();
            assert!(m.pass, "stage {i}: gap {}", m.worst_gap);
        }
        // a perturbed control breaks the condition
        let mut bad = rep.trajectory.clone();
        bad.controls[0] = Point::from_slice(&[0.0]);
        let m = maximization_check(&sys, &bad, &cost, &p, 0, 1000, 1.0).unwrap();
        assert!(!m.pass && m.worst_gap > 0.0);
    }

    #[test]
    fn non_affine_stage_refused() {
        let sys = ControlSystem::uniform(StageMap::lie_multiplicative(crate::manifold::ManifoldHandle::so3()), ControlSetSpec::WholeManifold, 1)
            .unwrap();
        let q0 = sys.state_manifold().identity();
        let tr = system::rollout(&sys, &q0, &sys.default_controls()).unwrap();
        let p = vec![DVector::zeros(3); 2];
        assert!(matches!(
            maximization_check(&sys, &tr, &CostSpec::zero(), &p, 0, 10, 1.0),
            Err(Error::NotAffine(0))
        ));
    }

    #[test]
    fn inactive_constraints_match_minimize() {
        let sys = ControlSystem::uniform(
            StageMap::linear(DMatrix::identity(2, 2), DMatrix::identity(2, 2)),
            ControlSetSpec::WholeManifold,
            2,
        )
        .unwrap();
        let cost = CostSpec::quadratic(DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2));
        let q0 = Point::from_slice(&[1.0, -1.0]);
        let cons = ConstraintSet::new(&sys)
            .with(Constraint::linear(Location::Endpoint, ConstraintKind::Inequality, v(&[1.0, 0.0]), v(&[]), 10.0))
            .unwrap();
        let opts = SolveOptions::default();
        let plain = minimize(&sys, &cost, &q0, &sys.default_controls(), &opts).unwrap();
        let pen = penalty_solve(&sys, &cost, &cons, &q0, &sys.default_controls(), &opts).unwrap();
        assert_eq!(pen.report.status, SolveStatus::Converged);
        assert_eq!(pen.report.kappa, opts.kappa0);
        assert_eq!(pen.report.trajectory, plain.trajectory);
        let m = pen.multipliers.unwrap();
        assert_eq!(m.multipliers.values[0], 0.0);
    }

    #[test]
    fn scalar_bound_by_penalty() {
        // min ½(u − 2)² s.t. u ≤ 1: u* = 1, λ = 1
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
        let out = penalty_solve(&sys, &cost, &cons, &q0, &sys.default_controls(), &SolveOptions::default()).unwrap();
        assert_eq!(out.report.status, SolveStatus::Converged, "{:?}", out.report.diagnostics);
        assert!((out.report.controls()[0].as_vector().unwrap()[0] - 1.0).abs() < 1e-9);
        assert!(out.report.penalty <= PENALTY_TOL);
        let m = out.multipliers.unwrap();
        assert!((m.multipliers.values[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn halton_is_in_unit_cube() {
        for i in 0..100 {
            let h = halton(i, 3);
            assert!(h.iter().all(|&x| (0.0..1.0).contains(&x)));
        }
        let verts = polytope_vertices(
            &DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]),
            &v(&[0.0, 0.0, 1.0]),
        );
        assert_eq!(verts.len(), 3);
    }
}
