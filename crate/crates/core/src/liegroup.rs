//! Multiplicative systems `g_{i+1} = g_i u_i` on Lie groups: costates in
//! 𝔤*, the discrete Legendre transform and the Hamiltonian variational
//! integrator for action sums `Σ hK(u_i) − (h/2)φ(g_i) − (h/2)φ(g_i u_i)`.
//!
//! Covectors are stored in left-trivialised body coordinates. With
//! `D₁μ(g, u) = Ad(u⁻¹)` the pull-back of a costate through one stage is
//! `T_u = Ad(u⁻¹)ᵀ`, which in the `Ad*(g) = Ad(g⁻¹)ᵀ` convention is `Ad*_u`
//! (`T_u = u` on SO(3)). The step equations used here are
//!
//! ```text
//! p_i     = h·T_u dK(u_i) + (h/2) m_i
//! g_{i+1} = g_i u_i
//! p_{i+1} = T_u⁻¹ p_i − (h/2) T_u⁻¹ m_i − (h/2) m_{i+1}
//! ```
//!
//! which are exactly the stationarity and costate equations of the action
//! sum, so integrator output is critical for it (see [`action_sum`]).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::adjoint::CostSpec;
use crate::error::{Error, Result};
use crate::linalg;
use crate::manifold::{so3, ManifoldHandle, ManifoldKind, Point};
use crate::system::{self, unit, ControlSetSpec, ControlSystem, StageMap, Trajectory};

pub type GroupFn = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;
pub type GroupCovectorFn = Arc<dyn Fn(&Point) -> DVector<f64> + Send + Sync>;

const FD_STEP: f64 = 1e-6;
/// Absolute tolerance on the momentum-matching residual.
pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITERS: usize = 50;

/// A scalar function on the group with an optional analytic differential in
/// body coordinates. Without one, the differential is a central difference
/// along the exponential.
#[derive(Clone)]
pub struct GroupFunction {
    value: GroupFn,
    differential: Option<GroupCovectorFn>,
}

impl std::fmt::Debug for GroupFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GroupFunction").field("analytic", &self.differential.is_some()).finish()
    }
}

impl GroupFunction {
    pub fn new(value: impl Fn(&Point) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            value: Arc::new(value),
            differential: None,
        }
    }

    pub fn with_differential(mut self, d: impl Fn(&Point) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.differential = Some(Arc::new(d));
        self
    }

    pub fn zero() -> Self {
        Self::new(|_| 0.0).with_differential(|g| DVector::zeros(g.manifold().dim()))
    }

    pub fn has_analytic_differential(&self) -> bool {
        self.differential.is_some()
    }

    pub fn value(&self, g: &Point) -> f64 {
        (self.value)(g)
    }

    pub fn differential(&self, g: &Point) -> DVector<f64> {
        match &self.differential {
            Some(d) => d(g),
            None => {
                let d = g.manifold().dim();
                DVector::from_fn(d, |k, _| {
                    let e = unit(d, k) * FD_STEP;
                    (self.value(&g.retract_vec(&e)) - self.value(&g.retract_vec(&-e))) / (2.0 * FD_STEP)
                })
            }
        }
    }
}

/// `K(u) = (1/h) tr((I − u) J_d)` with `dK(u) = (2/h)·vee(skew(J_d u))`.
pub fn so3_kinetic(jd: &Matrix3<f64>, h: f64) -> Result<GroupFunction> {
    check_spd(jd)?;
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("step size must be positive, got {h}")));
    }
    let (j1, j2) = (*jd, *jd);
    Ok(GroupFunction::new(move |u| ((Matrix3::identity() - u.as_rotation().unwrap()) * j1).trace() / h)
        .with_differential(move |u| {
            let w = so3::skew_vee(&(j2 * u.as_rotation().unwrap())) * (2.0 / h);
            DVector::from_column_slice(w.as_slice())
        }))
}

/// Heavy-top potential `φ(R) = w⟨z, Rρ⟩` with `dφ(R) = w·(ρ × Rᵀz)`.
pub fn heavy_top_potential(weight: f64, z: Vector3<f64>, rho: Vector3<f64>) -> GroupFunction {
    GroupFunction::new(move |g| weight * z.dot(&(g.as_rotation().unwrap() * rho))).with_differential(move |g| {
        let w = rho.cross(&(g.as_rotation().unwrap().transpose() * z)) * weight;
        DVector::from_column_slice(w.as_slice())
    })
}

fn check_spd(jd: &Matrix3<f64>) -> Result<()> {
    if (jd - jd.transpose()).norm() > 1e-12 * jd.norm().max(1.0) {
        return Err(Error::Invalid("J_d must be symmetric".into()));
    }
    let min_eig = jd.symmetric_eigenvalues().min();
    if !(min_eig > 0.0) {
        return Err(Error::Invalid(format!("J_d must be positive definite (smallest eigenvalue {min_eig:.3e})")));
    }
    Ok(())
}

fn is_group(m: &ManifoldHandle) -> bool {
    match m.kind() {
        ManifoldKind::SO3 | ManifoldKind::Euclidean(_) => true,
        ManifoldKind::Product(fs) => fs.iter().all(is_group),
    }
}

/// Action-sum data for the variational integrator.
#[derive(Clone, Debug)]
pub struct LieGroupProblem {
    group: ManifoldHandle,
    h: f64,
    kinetic: GroupFunction,
    potential: GroupFunction,
    jd: Option<Matrix3<f64>>,
    /// Jacobian of `x ↦ dK(exp x)` at 0; seeds the Newton iteration.
    dk_jacobian: DMatrix<f64>,
}

impl LieGroupProblem {
    /// Checks `dK(e) = 0` and that `dK` has full rank at `e`.
    pub fn new(group: ManifoldHandle, h: f64, kinetic: GroupFunction, potential: GroupFunction) -> Result<Self> {
        if !is_group(&group) {
            return Err(Error::Invalid("state manifold is not a supported group".into()));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Invalid(format!("step size must be positive, got {h}")));
        }
        let e = group.identity();
        let dk_e = kinetic.differential(&e);
        if dk_e.norm() > 1e-10 {
            return Err(Error::Invalid(format!("dK(e) must vanish, got norm {:.3e}", dk_e.norm())));
        }
        let d = group.dim();
        let mut dk_jacobian = DMatrix::zeros(d, d);
        for k in 0..d {
            let s = unit(d, k) * FD_STEP;
            let col = (kinetic.differential(&e.retract_vec(&s)) - kinetic.differential(&e.retract_vec(&-s))) / (2.0 * FD_STEP);
            dk_jacobian.set_column(k, &col);
        }
        let sigma = linalg::min_singular_value(&dk_jacobian);
        if sigma < 1e-8 {
            return Err(Error::Invalid(format!("dK is not full rank at the identity (σ_min = {sigma:.3e})")));
        }
        Ok(Self {
            group,
            h,
            kinetic,
            potential,
            jd: None,
            dk_jacobian,
        })
    }

    /// Rigid body on SO(3) with `K(u) = (1/h) tr((I − u)J_d)`.
    pub fn rigid_body(jd: Matrix3<f64>, h: f64, potential: GroupFunction) -> Result<Self> {
        let kinetic = so3_kinetic(&jd, h)?;
        let mut prob = Self::new(ManifoldHandle::so3(), h, kinetic, potential)?;
        prob.jd = Some(jd);
        Ok(prob)
    }

    pub fn group(&self) -> &ManifoldHandle {
        &self.group
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn inertia(&self) -> Option<&Matrix3<f64>> {
        self.jd.as_ref()
    }

    pub fn kinetic(&self) -> &GroupFunction {
        &self.kinetic
    }

    pub fn potential(&self) -> &GroupFunction {
        &self.potential
    }

    /// `h·T_u dK(u) + (h/2) m − p`.
    pub fn momentum_residual(&self, p: &DVector<f64>, m: &DVector<f64>, u: &Point) -> DVector<f64> {
        let h = self.h;
        u.ad_star_matrix() * self.kinetic.differential(u) * h + m * (0.5 * h) - p
    }

    /// Stage Lagrangian `L(g, u) = hK(u) − (h/2)φ(g) − (h/2)φ(gu)`.
    pub fn lagrangian(&self, g: &Point, u: &Point) -> f64 {
        let h = self.h;
        h * self.kinetic.value(u) - 0.5 * h * self.potential.value(g) - 0.5 * h * self.potential.value(&g.compose(u))
    }

    /// `(d_gL, d_uL)` in body coordinates.
    pub fn lagrangian_gradient(&self, g: &Point, u: &Point) -> (DVector<f64>, DVector<f64>) {
        let h = self.h;
        let m_next = self.potential.differential(&g.compose(u));
        let dg = self.potential.differential(g) * (-0.5 * h) - u.ad_star_matrix() * &m_next * (0.5 * h);
        let du = self.kinetic.differential(u) * h - m_next * (0.5 * h);
        (dg, du)
    }
}

/// One costate update `p_{i+1} = T_u⁻¹(p_i + d_gL_i)`.
pub fn lie_costate_step(p: &DVector<f64>, dgl: &DVector<f64>, u: &Point) -> DVector<f64> {
    u.inverse().ad_star_matrix() * (p + dgl)
}

/// Inverse of [`lie_costate_step`]: `p_i = −d_gL_i + T_u p_{i+1}`.
pub fn lie_costate_back(p_next: &DVector<f64>, dgl: &DVector<f64>, u: &Point) -> DVector<f64> {
    u.ad_star_matrix() * p_next - dgl
}

/// Discrete Legendre transform `𝔽⁺L(g, u) = d_uL(g, u)` for stage `i` of a cost.
pub fn legendre_plus(cost: &CostSpec, stage: usize, g: &Point, u: &Point) -> DVector<f64> {
    cost.running_gradient(stage, g, u).1
}

/// Output of one [`variational_step`].
#[derive(Clone, Debug)]
pub struct StepResult {
    pub u: Point,
    pub g_next: Point,
    pub p_next: DVector<f64>,
    /// `m_{i+1} = dφ(g_{i+1})`.
    pub m_next: DVector<f64>,
    /// Final momentum-matching residual.
    pub residual: f64,
    /// Residual after each Newton iterate (the first entry is the initial guess).
    pub residual_history: Vec<f64>,
}

/// Solves the momentum-matching equation for `u_i` by Newton's method on
/// `u = exp(x)` and advances `(g_i, p_i) ↦ (g_{i+1}, p_{i+1})`.
pub fn variational_step(prob: &LieGroupProblem, g: &Point, p: &DVector<f64>) -> Result<StepResult> {
    prob.group.check_same(g.manifold())?;
    if p.len() != prob.group.dim() {
        return Err(Error::DimensionMismatch {
            context: "momentum",
            expected: prob.group.dim(),
            found: p.len(),
        });
    }
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("momentum"));
    }
    let h = prob.h;
    let d = prob.group.dim();
    let e = prob.group.identity();
    let m = prob.potential.differential(g);
    let rhs = p - &m * (0.5 * h);
    let tol = NEWTON_TOL * (1.0 + p.norm());

    let residual_at = |x: &DVector<f64>| prob.momentum_residual(p, &m, &e.retract_vec(x));
    let mut x = linalg::lstsq(&(&prob.dk_jacobian * h), &rhs);
    let mut r = residual_at(&x);
    let mut history = vec![r.norm()];
    let mut converged = r.norm() <= tol;
    for _ in 0..NEWTON_MAX_ITERS {
        if converged {
            break;
        }
        let step = 1e-7 * (1.0 + x.norm());
        let mut jac = DMatrix::zeros(d, d);
        for k in 0..d {
            let dx = unit(d, k) * step;
            jac.set_column(k, &((residual_at(&(&x + &dx)) - residual_at(&(&x - &dx))) / (2.0 * step)));
        }
        let Some(delta) = jac.lu().solve(&(-&r)) else {
            return Err(Error::NewtonDivergence { step: 0, residual: r.norm() });
        };
        x += delta;
        r = residual_at(&x);
        let rn = r.norm();
        if !rn.is_finite() {
            return Err(Error::NewtonDivergence { step: 0, residual: rn });
        }
        let prev = *history.last().unwrap();
        history.push(rn);
        // converged, or stalled at the rounding floor just above the tolerance
        converged = rn <= tol || (rn <= 100.0 * tol && rn >= 0.5 * prev);
    }
    let rn = r.norm();
    if !converged {
        return Err(Error::NewtonDivergence { step: 0, residual: rn });
    }
    let u = e.retract_vec(&x);
    let g_next = g.compose(&u);
    let m_next = prob.potential.differential(&g_next);
    let t_inv = u.inverse().ad_star_matrix();
    let p_next = &t_inv * p - &t_inv * &m * (0.5 * h) - &m_next * (0.5 * h);
    Ok(StepResult {
        u,
        g_next,
        p_next,
        m_next,
        residual: rn,
        residual_history: history,
    })
}

/// Momenta produced by [`integrate`].
#[derive(Clone, Debug, Default)]
pub struct MomentumSequence {
    /// Momentum after each step; `p[k] = d_uL(g_k, u_k)`.
    pub p: Vec<DVector<f64>>,
    /// `m[k] = dφ(g_{k+1})`.
    pub m: Vec<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct Integration {
    /// `g_0 … g_steps`.
    pub states: Vec<Point>,
    /// `u_0 … u_{steps-1}`.
    pub controls: Vec<Point>,
    /// The momentum the run started from.
    pub initial_momentum: DVector<f64>,
    pub momenta: MomentumSequence,
    /// Momentum-matching residual of every step.
    pub residuals: Vec<f64>,
}

impl Integration {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            states: self.states.clone(),
            controls: self.controls.clone(),
        }
    }

    /// `max_k |‖p_k‖ − ‖p_start‖|`.
    pub fn casimir_drift(&self) -> f64 {
        let n0 = self.initial_momentum.norm();
        self.momenta.p.iter().map(|p| (p.norm() - n0).abs()).fold(0.0, f64::max)
    }
}

/// Iterates [`variational_step`] from `(g_0, p)`; never adapts `h`.
pub fn integrate(prob: &LieGroupProblem, g0: &Point, p: &DVector<f64>, steps: usize) -> Result<Integration> {
    let mut out = Integration {
        states: vec![g0.clone()],
        controls: Vec::with_capacity(steps),
        initial_momentum: p.clone(),
        momenta: MomentumSequence::default(),
        residuals: Vec::with_capacity(steps),
    };
    let mut g = g0.clone();
    let mut p = p.clone();
    for k in 0..steps {
        let step = variational_step(prob, &g, &p).map_err(|e| match e {
            Error::NewtonDivergence { residual, .. } => Error::NewtonDivergence { step: k, residual },
            other => other,
        })?;
        log::trace!("step {k}: residual {:.3e} after {} iterates", step.residual, step.residual_history.len());
        out.controls.push(step.u.clone());
        out.states.push(step.g_next.clone());
        out.momenta.p.push(step.p_next.clone());
        out.momenta.m.push(step.m_next);
        out.residuals.push(step.residual);
        g = step.g_next;
        p = step.p_next;
    }
    Ok(out)
}

/// The action sum over `n` stages as a control problem for the adjoint
/// module. With `terminal_momentum = Some(p_n)` a terminal cost
/// `ℓ(g) = −⟨p_n, log(g_n⁻¹ g)⟩` anchored at `g_n` is added, so that
/// `−dℓ(g_n) = p_n`; without it the endpoint condition forces `p_n = 0`.
pub fn action_sum(
    prob: &LieGroupProblem,
    n: usize,
    terminal: Option<(Point, DVector<f64>)>,
) -> Result<(ControlSystem, CostSpec)> {
    let sys = ControlSystem::uniform(
        StageMap::lie_multiplicative(prob.group.clone()),
        ControlSetSpec::WholeManifold,
        n,
    )?;
    let (p1, p2) = (prob.clone(), prob.clone());
    let running = move |_: usize, g: &Point, u: &Point| p1.lagrangian(g, u);
    let running_grad = move |_: usize, g: &Point, u: &Point| p2.lagrangian_gradient(g, u);
    let cost = match terminal {
        None => CostSpec::new(|_| 0.0, running).with_terminal_grad(|g| DVector::zeros(g.manifold().dim())),
        Some((gn, pn)) => {
            let (gn2, pn2) = (gn.clone(), pn.clone());
            CostSpec::new(move |g| -pn.dot(&gn.local_log(g)), running).with_terminal_grad(move |g| {
                // d/dt log(g_n⁻¹ g exp(ta)) = Jr(x)⁻¹ a
                let x = gn2.local_log(g);
                let jr = system::right_jacobian(g.manifold(), &x);
                let jr_inv = jr.try_inverse().unwrap_or_else(|| DMatrix::identity(x.len(), x.len()));
                -(jr_inv.transpose() * &pn2)
            })
        }
    };
    Ok((sys, cost.with_running_grad(running_grad)))
}

/// [`action_sum`] anchored at the end of an integration run, so that the
/// run's controls are critical for it.
pub fn action_sum_for(prob: &LieGroupProblem, run: &Integration) -> Result<(ControlSystem, CostSpec)> {
    let n = run.controls.len();
    let terminal = run.momenta.p.last().map(|pn| (run.states[n].clone(), pn.clone()));
    action_sum(prob, n, terminal)
}
