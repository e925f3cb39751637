//! Backward costate sweep and Δ-criticality certificates.
//!
//! For a cost `J(u) = ℓ(q_n) + Σ L_i(q_i, u_i)` the sweep computes
//!
//! ```text
//! p_n     = -dℓ(q_n)
//! p_{i-1} = -d_qL_{i-1} + D_qF_{i-1}ᵀ p_i
//! r_i     =  d_uL_i - D_uF_iᵀ p_{i+1}
//! ```
//!
//! `r_i` is the reduced differential of `J` with respect to `u_i`, and the
//! smallest `Δ` with `-Δ‖v‖ ≤ ⟨r_i, v⟩` on the tangent cone of `𝒰_i` is the
//! norm of the projection of `-r_i` onto that cone.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::manifold::{Cotangent, Point};
use crate::system::{self, unit, ControlSetSpec, ControlSystem, Linearization, StageMap, Trajectory};

pub type StateCostFn = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;
pub type StateGradFn = Arc<dyn Fn(&Point) -> DVector<f64> + Send + Sync>;
pub type RunningCostFn = Arc<dyn Fn(usize, &Point, &Point) -> f64 + Send + Sync>;
pub type RunningGradFn = Arc<dyn Fn(usize, &Point, &Point) -> (DVector<f64>, DVector<f64>) + Send + Sync>;

/// Step of the central differences used when a cost has no analytic gradient.
const COST_FD_STEP: f64 = 1e-6;

/// `J = κ(q_0) + ℓ(q_n) + Σ L_i(q_i, u_i)`; `κ` is optional.
#[derive(Clone)]
pub struct CostSpec {
    terminal: StateCostFn,
    terminal_grad: Option<StateGradFn>,
    running: RunningCostFn,
    running_grad: Option<RunningGradFn>,
    initial: Option<StateCostFn>,
    initial_grad: Option<StateGradFn>,
}

impl std::fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CostSpec")
            .field("analytic_terminal", &self.terminal_grad.is_some())
            .field("analytic_running", &self.running_grad.is_some())
            .field("initial", &self.initial.is_some())
            .finish()
    }
}

impl CostSpec {
    pub fn new(
        terminal: impl Fn(&Point) -> f64 + Send + Sync + 'static,
        running: impl Fn(usize, &Point, &Point) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            terminal: Arc::new(terminal),
            terminal_grad: None,
            running: Arc::new(running),
            running_grad: None,
            initial: None,
            initial_grad: None,
        }
    }

    pub fn zero() -> Self {
        Self::new(|_| 0.0, |_, _, _| 0.0)
            .with_terminal_grad(|q| DVector::zeros(q.manifold().dim()))
            .with_running_grad(|_, q, u| (DVector::zeros(q.manifold().dim()), DVector::zeros(u.manifold().dim())))
    }

    pub fn with_terminal_grad(mut self, grad: impl Fn(&Point) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.terminal_grad = Some(Arc::new(grad));
        self
    }

    pub fn with_running_grad(
        mut self,
        grad: impl Fn(usize, &Point, &Point) -> (DVector<f64>, DVector<f64>) + Send + Sync + 'static,
    ) -> Self {
        self.running_grad = Some(Arc::new(grad));
        self
    }

    /// Adds an initial-state cost `κ(q_0)` with optional gradient.
    pub fn with_initial(
        mut self,
        kappa: impl Fn(&Point) -> f64 + Send + Sync + 'static,
        grad: Option<StateGradFn>,
    ) -> Self {
        self.initial = Some(Arc::new(kappa));
        self.initial_grad = grad;
        self
    }

    /// `ℓ(q) = ⟨c, q⟩` on ℝ^d, no running cost.
    pub fn linear_terminal(c: DVector<f64>) -> Self {
        let c2 = c.clone();
        Self::new(move |q| c.dot(q.as_vector().unwrap()), |_, _, _| 0.0)
            .with_terminal_grad(move |_| c2.clone())
            .with_running_grad(|_, q, u| (DVector::zeros(q.manifold().dim()), DVector::zeros(u.manifold().dim())))
    }

    /// `ℓ = ½ q_nᵀ Q_f q_n`, `L_i = ½ q_iᵀ Q q_i + ½ u_iᵀ R u_i` on ℝ^d.
    pub fn quadratic(q: DMatrix<f64>, r: DMatrix<f64>, qf: DMatrix<f64>) -> Self {
        let (q2, r2, qf2) = (q.clone(), r.clone(), qf.clone());
        Self::new(
            move |x| 0.5 * x.as_vector().unwrap().dot(&(&qf * x.as_vector().unwrap())),
            move |_, x, u| {
                let (x, u) = (x.as_vector().unwrap(), u.as_vector().unwrap());
                0.5 * x.dot(&(&q * x)) + 0.5 * u.dot(&(&r * u))
            },
        )
        .with_terminal_grad(move |x| &qf2 * x.as_vector().unwrap())
        .with_running_grad(move |_, x, u| (&q2 * x.as_vector().unwrap(), &r2 * u.as_vector().unwrap()))
    }

    /// Attitude cost on SO(3) states with Euclidean controls:
    /// `ℓ(g) = w·tr(I − R*ᵀ g)`, `L_i = ½ ρ ‖u‖²`.
    pub fn attitude(target: nalgebra::Matrix3<f64>, weight: f64, effort: f64) -> Self {
        let t2 = target;
        Self::new(
            move |g| weight * (3.0 - (target.transpose() * g.as_rotation().unwrap()).trace()),
            move |_, _, u| 0.5 * effort * u.as_vector().unwrap().norm_squared(),
        )
        .with_terminal_grad(move |g| {
            // d/dt −w tr(R*ᵀ g exp(t â)) = w a·vee(M − Mᵀ), M = R*ᵀ g
            let m = t2.transpose() * g.as_rotation().unwrap();
            let w = crate::manifold::so3::skew_vee(&m) * (2.0 * weight);
            DVector::from_column_slice(w.as_slice())
        })
        .with_running_grad(move |_, g, u| (DVector::zeros(g.manifold().dim()), u.as_vector().unwrap() * effort))
    }

    /// Multiplies every term by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let base = self.clone();
        let (t, r) = (base.terminal.clone(), base.running.clone());
        let mut out = Self::new(move |q| s * t(q), move |i, q, u| s * r(i, q, u));
        let b1 = base.clone();
        out = out.with_terminal_grad(move |q| b1.terminal_gradient(q) * s);
        let b2 = base.clone();
        out = out.with_running_grad(move |i, q, u| {
            let (gq, gu) = b2.running_gradient(i, q, u);
            (gq * s, gu * s)
        });
        if let Some(k) = base.initial.clone() {
            let b3 = base.clone();
            let grad: StateGradFn = Arc::new(move |q| b3.initial_gradient(q).unwrap() * s);
            out = out.with_initial(move |q| s * k(q), Some(grad));
        }
        out
    }

    pub fn has_initial(&self) -> bool {
        self.initial.is_some()
    }

    pub fn has_analytic_gradients(&self) -> bool {
        self.terminal_grad.is_some() && self.running_grad.is_some()
    }

    pub fn terminal(&self, q: &Point) -> f64 {
        (self.terminal)(q)
    }

    pub fn running(&self, i: usize, q: &Point, u: &Point) -> f64 {
        (self.running)(i, q, u)
    }

    pub fn initial(&self, q: &Point) -> Option<f64> {
        self.initial.as_ref().map(|k| k(q))
    }

    pub fn terminal_gradient(&self, q: &Point) -> DVector<f64> {
        match &self.terminal_grad {
            Some(g) => g(q),
            None => fd_point_gradient(|x| (self.terminal)(x), q),
        }
    }

    /// `(d_qL_i, d_uL_i)`.
    pub fn running_gradient(&self, i: usize, q: &Point, u: &Point) -> (DVector<f64>, DVector<f64>) {
        match &self.running_grad {
            Some(g) => g(i, q, u),
            None => (
                fd_point_gradient(|x| (self.running)(i, x, u), q),
                fd_point_gradient(|v| (self.running)(i, q, v), u),
            ),
        }
    }

    pub fn initial_gradient(&self, q: &Point) -> Option<DVector<f64>> {
        let k = self.initial.as_ref()?;
        Some(match &self.initial_grad {
            Some(g) => g(q),
            None => fd_point_gradient(|x| k(x), q),
        })
    }

    /// `J` along a trajectory (including `κ(q_0)` when present).
    pub fn evaluate(&self, traj: &Trajectory) -> f64 {
        let mut total = self.terminal(traj.final_state());
        for (i, u) in traj.controls.iter().enumerate() {
            total += self.running(i, &traj.states[i], u);
        }
        if let Some(k) = self.initial(traj.initial_state()) {
            total += k;
        }
        total
    }
}

fn fd_point_gradient(f: impl Fn(&Point) -> f64, x: &Point) -> DVector<f64> {
    let d = x.manifold().dim();
    DVector::from_fn(d, |k, _| {
        let e = unit(d, k) * COST_FD_STEP;
        (f(&x.retract_vec(&e)) - f(&x.retract_vec(&-e))) / (2.0 * COST_FD_STEP)
    })
}

/// Rolls out and evaluates `J(u)` for a fixed initial state.
pub fn total_cost(sys: &ControlSystem, cost: &CostSpec, q0: &Point, controls: &[Point]) -> Result<f64> {
    let traj = system::rollout(sys, q0, controls)?;
    Ok(cost.evaluate(&traj))
}

/// Output of [`backward_sweep`].
#[derive(Clone, Debug)]
pub struct CostateSequence {
    /// `p_1 … p_n`, based at `q_1 … q_n`.
    pub p: Vec<Cotangent>,
    /// `p_0 = -d_qL_0 + D_qF_0ᵀ p_1`, based at `q_0`.
    pub p0: Option<Cotangent>,
    /// `a_0 … a_n`: `a_i = d_qL_i(q_i, u_i)` for `i < n`, `a_n = dℓ(q_n)`.
    pub a: Vec<DVector<f64>>,
    /// `b_0 … b_{n-1}`: `b_i = d_uL_i(q_i, u_i)`.
    pub b: Vec<DVector<f64>>,
}

impl CostateSequence {
    /// Costate coordinates `p_i` for `i = 1..=n`.
    pub fn costate(&self, i: usize) -> &DVector<f64> {
        self.p[i - 1].covec()
    }

    /// `(endpoint residual, max recursion residual)` of the sweep equations.
    pub fn residuals(&self, lin: &Linearization) -> (f64, f64) {
        let n = self.p.len();
        if n == 0 {
            return (0.0, 0.0);
        }
        let endpoint = (self.costate(n) + &self.a[n]).norm();
        let mut worst: f64 = 0.0;
        for i in 2..=n {
            let rhs = -&self.a[i - 1] + lin.dq[i - 1].transpose() * self.costate(i);
            worst = worst.max((self.costate(i - 1) - rhs).norm());
        }
        if let Some(p0) = &self.p0 {
            let rhs = -&self.a[0] + lin.dq[0].transpose() * self.costate(1);
            worst = worst.max((p0.covec() - rhs).norm());
        }
        (endpoint, worst)
    }
}

/// Backward costate recursion along a valid trajectory.
pub fn backward_sweep(sys: &ControlSystem, traj: &Trajectory, cost: &CostSpec) -> Result<CostateSequence> {
    system::validate_trajectory(sys, traj)?;
    let lin = system::linearize(sys, traj);
    Ok(backward_sweep_with(traj, cost, &lin))
}

pub(crate) fn backward_sweep_with(traj: &Trajectory, cost: &CostSpec, lin: &Linearization) -> CostateSequence {
    let n = traj.horizon();
    let mut a = Vec::with_capacity(n + 1);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let (gq, gu) = cost.running_gradient(i, &traj.states[i], &traj.controls[i]);
        a.push(gq);
        b.push(gu);
    }
    a.push(cost.terminal_gradient(traj.final_state()));
    let covecs = sweep_covectors(&a, lin);
    let mut p: Vec<Cotangent> = covecs
        .iter()
        .enumerate()
        .map(|(k, c)| Cotangent::new(traj.states[k].clone(), c.clone()).expect("costate length"))
        .collect();
    let p0 = if n > 0 { Some(p.remove(0)) } else { None };
    CostateSequence { p, p0, a, b }
}

/// `p_n = -a_n`, `p_{i-1} = -a_{i-1} + D_qF_{i-1}ᵀ p_i`; returns `p_0 … p_n`.
pub(crate) fn sweep_covectors(a: &[DVector<f64>], lin: &Linearization) -> Vec<DVector<f64>> {
    let n = a.len() - 1;
    let mut p = vec![DVector::zeros(0); n + 1];
    p[n] = -&a[n];
    for i in (1..=n).rev() {
        p[i - 1] = -&a[i - 1] + lin.dq[i - 1].transpose() * &p[i];
    }
    p
}

/// `r_i = b_i - D_uF_iᵀ p_{i+1}` given costates `p_0 … p_n`.
pub(crate) fn stationarity_covectors(b: &[DVector<f64>], p: &[DVector<f64>], lin: &Linearization) -> Vec<DVector<f64>> {
    b.iter()
        .enumerate()
        .map(|(i, bi)| bi - lin.du[i].transpose() * &p[i + 1])
        .collect()
}

/// Reduced gradient of `J` with respect to each control.
pub fn cost_gradient(sys: &ControlSystem, traj: &Trajectory, cost: &CostSpec) -> Result<Vec<DVector<f64>>> {
    system::validate_trajectory(sys, traj)?;
    let lin = system::linearize(sys, traj);
    let sweep = backward_sweep_with(traj, cost, &lin);
    Ok(reduced_gradient(&sweep, &lin))
}

pub(crate) fn reduced_gradient(sweep: &CostateSequence, lin: &Linearization) -> Vec<DVector<f64>> {
    let mut p = Vec::with_capacity(sweep.p.len() + 1);
    p.push(sweep.p0.as_ref().map(|c| c.covec().clone()).unwrap_or_else(|| DVector::zeros(0)));
    p.extend(sweep.p.iter().map(|c| c.covec().clone()));
    stationarity_covectors(&sweep.b, &p, lin)
}

#[derive(Clone, Debug)]
pub struct CriticalityReport {
    pub residuals: Vec<DVector<f64>>,
    pub per_stage_delta: Vec<f64>,
    pub certified_delta: f64,
}

/// Certifies the smallest Δ for which the stationarity inequality holds at
/// every stage over the tangent cones of the control sets.
pub fn criticality_certificate(sys: &ControlSystem, traj: &Trajectory, cost: &CostSpec) -> Result<CriticalityReport> {
    sys.check_controls(&traj.controls)?;
    let residuals = cost_gradient(sys, traj, cost)?;
    certify(sys, &traj.controls, residuals)
}

/// Shared by the unconstrained and constrained reports.
pub(crate) fn certify(sys: &ControlSystem, controls: &[Point], residuals: Vec<DVector<f64>>) -> Result<CriticalityReport> {
    let per_stage_delta = residuals
        .iter()
        .enumerate()
        .map(|(i, r)| stage_delta(sys.control_set(i), &controls[i], r).map_err(|e| relabel_stage(e, i)))
        .collect::<Result<Vec<_>>>()?;
    let certified_delta = per_stage_delta.iter().copied().fold(0.0, f64::max);
    Ok(CriticalityReport {
        residuals,
        per_stage_delta,
        certified_delta,
    })
}

/// `‖P_{T(u)}(-r)‖` for one stage.
pub(crate) fn stage_delta(set: &ControlSetSpec, u: &Point, r: &DVector<f64>) -> Result<f64> {
    match (set, u.as_vector()) {
        (ControlSetSpec::WholeManifold, _) => Ok(r.norm()),
        (_, Some(uv)) => Ok(set.project_tangent(uv, &-r)?.norm()),
        (_, None) => Err(Error::Invalid("convex control set on a non-Euclidean control".into())),
    }
}

fn relabel_stage(e: Error, stage: usize) -> Error {
    match e {
        Error::Infeasible { violation, .. } => Error::Infeasible { stage, violation },
        other => other,
    }
}

/// Problem obtained by treating the initial state as an extra control.
#[derive(Clone, Debug)]
pub struct InitialStateExtension {
    /// `n + 1` stages; stage 0 maps `(q, q̃) ↦ q̃`.
    pub system: ControlSystem,
    /// Stage-0 running cost is `κ(q̃)`; later stages are shifted by one.
    pub cost: CostSpec,
}

impl InitialStateExtension {
    /// Controls of the extended problem: `(q_0, u_0, …, u_{n-1})`.
    pub fn controls(q0: &Point, controls: &[Point]) -> Vec<Point> {
        let mut out = Vec::with_capacity(controls.len() + 1);
        out.push(q0.clone());
        out.extend_from_slice(controls);
        out
    }
}

/// Prepends the stage `F̂(q, q̃) = q̃` with cost `κ(q̃)` and control set `s0`.
/// The stage-0 residual of the extended system is `β − p_0` with `β = dκ(q_0)`.
pub fn extend_with_initial_state(
    sys: &ControlSystem,
    cost: &CostSpec,
    s0: ControlSetSpec,
) -> Result<InitialStateExtension> {
    if !cost.has_initial() {
        return Err(Error::MissingInitialCost);
    }
    let q = sys.state_manifold().clone();
    let d = q.dim();
    let pick = StageMap::new(q.clone(), q.clone(), |_, next| next.clone())
        .with_jacobians(move |_, _| (DMatrix::zeros(d, d), DMatrix::identity(d, d)));
    let mut stages = vec![pick];
    stages.extend(sys.stages().iter().cloned());
    let mut sets = vec![s0];
    sets.extend(sys.control_sets().iter().cloned());
    let system = ControlSystem::new(q, stages, sets)?;

    let (c1, c2, c3) = (cost.clone(), cost.clone(), cost.clone());
    let ext_cost = CostSpec::new(
        move |x| c1.terminal(x),
        move |i, x, u| {
            if i == 0 {
                c2.initial(u).unwrap()
            } else {
                c2.running(i - 1, x, u)
            }
        },
    )
    .with_terminal_grad({
        let c = cost.clone();
        move |x| c.terminal_gradient(x)
    })
    .with_running_grad(move |i, x, u| {
        if i == 0 {
            (DVector::zeros(x.manifold().dim()), c3.initial_gradient(u).unwrap())
        } else {
            c3.running_gradient(i - 1, x, u)
        }
    });
    Ok(InitialStateExtension { system, cost: ext_cost })
}
