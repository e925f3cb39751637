//! Stagewise and endpoint constraints: max-type penalties, constraint
//! qualifications, abnormality certificates, the constrained necessary
//! conditions and value-function sensitivity.
//!
//! Every constraint owns one entry of the perturbation vector `e`, in
//! insertion order. Inequalities read `g(q, u) ≤ e_j`, equalities
//! `h(q, u) = e_j`. Stage constraints may sit at any stage `0..n`; endpoint
//! constraints depend on `q_n` only.
//!
//! Sign conventions for the constrained conditions:
//!
//! ```text
//! p_n     = −λ₀ dℓ − Σ λ ∇G − Σ μ ∇H
//! p_{i−1} = −λ₀ d_qL − Σ λ ∇_q g − Σ μ ∇_q h + D_qFᵀ p_i
//! s_i     =  λ₀ d_uL + Σ λ ∇_u g + Σ μ ∇_u h − D_uFᵀ p_{i+1}
//! ```
//!
//! with `‖P_{T(u_i)}(−s_i)‖` as the per-stage stationarity residual.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adjoint::{self, CostSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::manifold::{ManifoldHandle, Point};
use crate::oracle::{self, AuditEntry};
use crate::solver::{self, SolveOptions, SolveStatus};
use crate::system::{self, unit, ControlSetSpec, ControlSystem, Linearization, Trajectory};

/// Ties in the max-type penalty are resolved within this tolerance.
pub const TIE_TOL: f64 = 1e-9;
/// Inequalities within this distance of their bound count as active when
/// building multipliers and qualification tests.
pub const ACTIVE_TOL: f64 = 1e-7;
/// Singular-value threshold of the constraint qualification test.
pub const LICQ_TOL: f64 = 1e-8;
/// Largest penalty still treated as feasible.
pub const FEASIBLE_PENALTY: f64 = 1e-8;
const CONSTRAINT_FD_STEP: f64 = 1e-6;
const LP_TOL: f64 = 1e-9;

pub type ConstraintFn = Arc<dyn Fn(&Point, &Point) -> f64 + Send + Sync>;
pub type ConstraintGradFn = Arc<dyn Fn(&Point, &Point) -> (DVector<f64>, DVector<f64>) + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    #[serde(alias = "ineq")]
    Inequality,
    #[serde(alias = "eq")]
    Equality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    Stage(usize),
    Endpoint,
}

impl Location {
    fn index(self, horizon: usize) -> usize {
        match self {
            Location::Stage(i) => i,
            Location::Endpoint => horizon,
        }
    }
}

/// A single scalar constraint. Endpoint constraints receive an empty
/// control point.
#[derive(Clone)]
pub struct Constraint {
    name: String,
    location: Location,
    kind: ConstraintKind,
    value: ConstraintFn,
    gradient: Option<ConstraintGradFn>,
    pure_state: bool,
    /// `(state dim, control dim)` expected by builtin constraints.
    dims: Option<(usize, usize)>,
}

impl fmt::Debug for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Constraint")
            .field("name", &self.name)
            .field("location", &self.location)
            .field("kind", &self.kind)
            .field("pure_state", &self.pure_state)
            .field("analytic_gradient", &self.gradient.is_some())
            .finish()
    }
}

fn empty_point() -> Point {
    Point::euclidean(DVector::zeros(0))
}

fn vec_of(p: &Point) -> &DVector<f64> {
    p.as_vector().expect("builtin constraint needs a Euclidean point")
}

impl Constraint {
    /// Mixed stage constraint `c(q_i, u_i)`.
    pub fn stage(
        stage: usize,
        kind: ConstraintKind,
        f: impl Fn(&Point, &Point) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: "custom".into(),
            location: Location::Stage(stage),
            kind,
            value: Arc::new(f),
            gradient: None,
            pure_state: false,
            dims: None,
        }
    }

    /// Constraint on the state alone, at a stage or at the endpoint.
    pub fn state(location: Location, kind: ConstraintKind, f: impl Fn(&Point) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: "custom".into(),
            location,
            kind,
            value: Arc::new(move |q, _| f(q)),
            gradient: None,
            pure_state: true,
            dims: None,
        }
    }

    pub fn with_gradient(
        mut self,
        g: impl Fn(&Point, &Point) -> (DVector<f64>, DVector<f64>) + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }

    /// Analytic gradient for a pure-state constraint.
    pub fn with_state_gradient(mut self, g: impl Fn(&Point) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(move |q, u| (g(q), DVector::zeros(u.manifold().dim()))));
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// `⟨c_q, q⟩ + ⟨c_u, u⟩ − d` on Euclidean spaces. Endpoint constraints
    /// take an empty `c_u`.
    pub fn linear(location: Location, kind: ConstraintKind, cq: DVector<f64>, cu: DVector<f64>, d: f64) -> Self {
        let (cq2, cu2) = (cq.clone(), cu.clone());
        let pure = cu.iter().all(|&x| x == 0.0);
        let dims = Some((cq.len(), cu.len()));
        Self {
            name: "linear".into(),
            location,
            kind,
            value: Arc::new(move |q, u| cq.dot(vec_of(q)) + if cu.is_empty() { 0.0 } else { cu.dot(vec_of(u)) } - d),
            gradient: Some(Arc::new(move |_, u| {
                let b = if cu2.is_empty() { DVector::zeros(u.manifold().dim()) } else { cu2.clone() };
                (cq2.clone(), b)
            })),
            pure_state: pure,
            dims,
        }
    }

    /// `‖q − c‖² − r²` (an inequality keeps `q` in the ball).
    pub fn sphere(location: Location, center: DVector<f64>, radius: f64) -> Self {
        let c2 = center.clone();
        let d = center.len();
        Self {
            name: "sphere".into(),
            location,
            kind: ConstraintKind::Inequality,
            value: Arc::new(move |q, _| (vec_of(q) - &center).norm_squared() - radius * radius),
            gradient: Some(Arc::new(move |q, u| ((vec_of(q) - &c2) * 2.0, DVector::zeros(u.manifold().dim())))),
            pure_state: true,
            dims: Some((d, usize::MAX)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn location(&self) -> Location {
        self.location
    }

    pub fn kind(&self) -> ConstraintKind {
        self.kind
    }

    pub fn is_pure_state(&self) -> bool {
        self.pure_state
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    pub fn value(&self, q: &Point, u: &Point) -> f64 {
        (self.value)(q, u)
    }

    /// `(∇_q c, ∇_u c)` in trivialised coordinates; central differences
    /// along retractions when no analytic gradient was supplied.
    pub fn gradient(&self, q: &Point, u: &Point) -> (DVector<f64>, DVector<f64>) {
        match &self.gradient {
            Some(g) => g(q, u),
            None => fd_constraint_gradient(&*self.value, q, u),
        }
    }
}

fn fd_constraint_gradient(f: &(dyn Fn(&Point, &Point) -> f64 + Send + Sync), q: &Point, u: &Point) -> (DVector<f64>, DVector<f64>) {
    let h = CONSTRAINT_FD_STEP;
    let dq = q.manifold().dim();
    let du = u.manifold().dim();
    let gq = DVector::from_fn(dq, |k, _| {
        let e = unit(dq, k) * h;
        (f(&q.retract_vec(&e), u) - f(&q.retract_vec(&-e), u)) / (2.0 * h)
    });
    let gu = DVector::from_fn(du, |k, _| {
        let e = unit(du, k) * h;
        (f(q, &u.retract_vec(&e)) - f(q, &u.retract_vec(&-e))) / (2.0 * h)
    });
    (gq, gu)
}

/// All constraints of a problem together with the perturbation `e`.
#[derive(Clone, Debug)]
pub struct ConstraintSet {
    horizon: usize,
    state: ManifoldHandle,
    controls: Vec<ManifoldHandle>,
    items: Vec<Constraint>,
    perturbation: DVector<f64>,
}

impl ConstraintSet {
    pub fn new(sys: &ControlSystem) -> Self {
        Self {
            horizon: sys.horizon(),
            state: sys.state_manifold().clone(),
            controls: sys.stages().iter().map(|s| s.control_manifold().clone()).collect(),
            items: Vec::new(),
            perturbation: DVector::zeros(0),
        }
    }

    pub fn push(&mut self, c: Constraint) -> Result<&mut Self> {
        let control_dim = match c.location {
            Location::Stage(i) => {
                if i >= self.horizon {
                    return Err(Error::IndexOutOfRange {
                        index: i,
                        max: self.horizon.saturating_sub(1),
                    });
                }
                self.controls[i].dim()
            }
            Location::Endpoint => 0,
        };
        if let Some((dq, du)) = c.dims {
            if dq != self.state.dim() || !self.state.is_euclidean() {
                return Err(Error::DimensionMismatch {
                    context: "constraint state gradient",
                    expected: self.state.dim(),
                    found: dq,
                });
            }
            if du != usize::MAX && du != control_dim {
                return Err(Error::DimensionMismatch {
                    context: "constraint control gradient",
                    expected: control_dim,
                    found: du,
                });
            }
        }
        self.items.push(c);
        self.perturbation = DVector::from_fn(self.items.len(), |k, _| {
            if k < self.perturbation.len() {
                self.perturbation[k]
            } else {
                0.0
            }
        });
        Ok(self)
    }

    pub fn with(mut self, c: Constraint) -> Result<Self> {
        self.push(c)?;
        Ok(self)
    }

    pub fn with_perturbation(mut self, e: DVector<f64>) -> Result<Self> {
        check_e(&self, &e)?;
        self.perturbation = e;
        Ok(self)
    }

    pub fn perturbation(&self) -> &DVector<f64> {
        &self.perturbation
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Length of the perturbation vector.
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.items
    }

    /// True when no constraint depends on a control.
    pub fn pure_state(&self) -> bool {
        self.items.iter().all(|c| c.pure_state)
    }

    pub fn indices_at(&self, loc: Location) -> Vec<usize> {
        (0..self.items.len()).filter(|&k| self.items[k].location == loc).collect()
    }

    /// Locations carrying at least one constraint, stages first.
    pub fn locations(&self) -> Vec<Location> {
        let mut out: Vec<Location> = (0..self.horizon)
            .map(Location::Stage)
            .filter(|l| self.items.iter().any(|c| c.location == *l))
            .collect();
        if self.items.iter().any(|c| c.location == Location::Endpoint) {
            out.push(Location::Endpoint);
        }
        out
    }

    /// Checks that the set was built for `sys`.
    pub fn check_system(&self, sys: &ControlSystem) -> Result<()> {
        if sys.horizon() != self.horizon {
            return Err(Error::DimensionMismatch {
                context: "constraint horizon",
                expected: sys.horizon(),
                found: self.horizon,
            });
        }
        self.state.check_same(sys.state_manifold())
    }
}

fn check_e(cons: &ConstraintSet, e: &DVector<f64>) -> Result<()> {
    if e.len() != cons.len() {
        return Err(Error::DimensionMismatch {
            context: "perturbation vector",
            expected: cons.len(),
            found: e.len(),
        });
    }
    Ok(())
}

fn point_at(traj: &Trajectory, loc: Location) -> (Point, Point) {
    match loc {
        Location::Stage(i) => (traj.states[i].clone(), traj.controls[i].clone()),
        Location::Endpoint => (traj.final_state().clone(), empty_point()),
    }
}

/// One term of `φ = max{0, g − e, |h − e|, …}`.
#[derive(Clone, Copy, Debug)]
struct Term {
    constraint: Option<usize>,
    value: f64,
}

fn terms_at(cons: &ConstraintSet, e: &DVector<f64>, loc: Location, q: &Point, u: &Point) -> Vec<Term> {
    let mut out = vec![Term {
        constraint: None,
        value: 0.0,
    }];
    for k in cons.indices_at(loc) {
        let c = &cons.items[k];
        let shifted = c.value(q, u) - e[k];
        out.push(Term {
            constraint: Some(k),
            value: match c.kind {
                ConstraintKind::Inequality => shifted,
                ConstraintKind::Equality => shifted.abs(),
            },
        });
    }
    out
}

/// Per-location penalties `φ_0 … φ_{n−1}, φ_n` and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyValue {
    /// Indexed by stage, with the endpoint last (`n + 1` entries).
    pub per_stage: Vec<f64>,
    pub total: f64,
}

/// Max-type penalty of a trajectory for perturbation `e`.
pub fn penalty_eval(cons: &ConstraintSet, e: &DVector<f64>, traj: &Trajectory) -> Result<PenaltyValue> {
    check_e(cons, e)?;
    if traj.horizon() != cons.horizon {
        return Err(Error::DimensionMismatch {
            context: "trajectory length",
            expected: cons.horizon,
            found: traj.horizon(),
        });
    }
    let mut per_stage = vec![0.0; cons.horizon + 1];
    for loc in cons.locations() {
        let (q, u) = point_at(traj, loc);
        let phi = terms_at(cons, e, loc, &q, &u).iter().map(|t| t.value).fold(0.0, f64::max);
        per_stage[loc.index(cons.horizon)] = phi;
    }
    let total = per_stage.iter().sum();
    Ok(PenaltyValue { per_stage, total })
}

/// Penalty as a function of the controls (rolls out from `q0`).
pub fn penalty_of_controls(
    sys: &ControlSystem,
    cons: &ConstraintSet,
    e: &DVector<f64>,
    q0: &Point,
    controls: &[Point],
) -> Result<f64> {
    let traj = system::rollout(sys, q0, controls)?;
    Ok(penalty_eval(cons, e, &traj)?.total)
}

/// A generator `(a, b)` of the subdifferential of `φ_i`. `constraint` is
/// `None` for the zero term; `sign` is `−1` for the negative branch of an
/// equality term.
#[derive(Clone, Debug)]
pub struct Generator {
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub constraint: Option<usize>,
    pub sign: f64,
}

impl Generator {
    fn is_zero_term(&self) -> bool {
        self.constraint.is_none()
    }
}

fn generators_at(
    cons: &ConstraintSet,
    e: &DVector<f64>,
    loc: Location,
    q: &Point,
    u: &Point,
    tie: f64,
) -> Vec<Generator> {
    let terms = terms_at(cons, e, loc, q, u);
    let phi = terms.iter().map(|t| t.value).fold(0.0, f64::max);
    let mut out = Vec::new();
    for t in terms.iter().filter(|t| t.value >= phi - tie) {
        match t.constraint {
            None => out.push(Generator {
                a: DVector::zeros(q.manifold().dim()),
                b: DVector::zeros(u.manifold().dim()),
                constraint: None,
                sign: 0.0,
            }),
            Some(k) => {
                let c = &cons.items[k];
                let (a, b) = c.gradient(q, u);
                match c.kind {
                    ConstraintKind::Inequality => out.push(Generator {
                        a,
                        b,
                        constraint: Some(k),
                        sign: 1.0,
                    }),
                    ConstraintKind::Equality => {
                        let shifted = c.value(q, u) - e[k];
                        let signs: &[f64] = if shifted.abs() <= tie {
                            &[1.0, -1.0]
                        } else if shifted > 0.0 {
                            &[1.0]
                        } else {
                            &[-1.0]
                        };
                        for &s in signs {
                            out.push(Generator {
                                a: &a * s,
                                b: &b * s,
                                constraint: Some(k),
                                sign: s,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Generators of `∂φ` at one location, with ties resolved within [`TIE_TOL`].
pub fn penalty_subgradient(
    cons: &ConstraintSet,
    e: &DVector<f64>,
    traj: &Trajectory,
    loc: Location,
) -> Result<Vec<Generator>> {
    check_e(cons, e)?;
    if let Location::Stage(i) = loc {
        if i >= cons.horizon {
            return Err(Error::IndexOutOfRange {
                index: i,
                max: cons.horizon.saturating_sub(1),
            });
        }
    }
    let (q, u) = point_at(traj, loc);
    Ok(generators_at(cons, e, loc, &q, &u, TIE_TOL))
}

#[derive(Clone, Debug)]
pub struct LicqReport {
    pub regular: bool,
    /// Smallest singular value of the column-normalised active gradients.
    pub min_singular_value: f64,
    /// Nonzero `(λ ≥ 0, μ)` with `Σλ∇g + Σμ∇h = 0`, indexed like the set.
    pub witness: Option<DVector<f64>>,
}

/// Linear-independence test of the active constraint gradients at one
/// location, refined by a cone test for the sign-constrained part.
pub fn licq_check(cons: &ConstraintSet, traj: &Trajectory, loc: Location) -> Result<LicqReport> {
    if let Location::Stage(i) = loc {
        if i >= cons.horizon {
            return Err(Error::IndexOutOfRange {
                index: i,
                max: cons.horizon.saturating_sub(1),
            });
        }
    }
    let (q, u) = point_at(traj, loc);
    let e = &cons.perturbation;
    let mut ineq = Vec::new();
    let mut eq = Vec::new();
    let mut norms = vec![1.0; cons.len()];
    for k in cons.indices_at(loc) {
        let c = &cons.items[k];
        let (a, b) = c.gradient(&q, &u);
        let mut grad = DVector::zeros(a.len() + b.len());
        grad.rows_mut(0, a.len()).copy_from(&a);
        grad.rows_mut(a.len(), b.len()).copy_from(&b);
        let n = grad.norm();
        // scale invariance: columns are normalised
        let col = if n > 0.0 { grad / n } else { grad };
        if n > 0.0 {
            norms[k] = n;
        }
        match c.kind {
            ConstraintKind::Inequality if c.value(&q, &u) - e[k] >= -ACTIVE_TOL => ineq.push((k, col)),
            ConstraintKind::Inequality => {}
            ConstraintKind::Equality => eq.push((k, col)),
        }
    }
    let cols: Vec<DVector<f64>> = ineq.iter().chain(eq.iter()).map(|(_, c)| c.clone()).collect();
    if cols.is_empty() {
        return Ok(LicqReport {
            regular: true,
            min_singular_value: f64::INFINITY,
            witness: None,
        });
    }
    let m = DMatrix::from_columns(&cols);
    let sigma = if m.ncols() > m.nrows() { 0.0 } else { linalg::min_singular_value(&m) };
    if sigma >= LICQ_TOL {
        return Ok(LicqReport {
            regular: true,
            min_singular_value: sigma,
            witness: None,
        });
    }
    let mut witness = DVector::zeros(cons.len());
    // equality part alone dependent: witness from its null space
    if !eq.is_empty() {
        let h = DMatrix::from_columns(&eq.iter().map(|(_, c)| c.clone()).collect::<Vec<_>>());
        if h.ncols() > h.nrows() || linalg::min_singular_value(&h) < LICQ_TOL {
            let svd = h.clone().svd(false, true);
            let vt = svd.v_t.expect("right singular vectors");
            let (kmin, _) = svd
                .singular_values
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (k, &s)| if s < acc.1 { (k, s) } else { acc });
            let row = if h.ncols() > h.nrows() && vt.nrows() < h.ncols() {
                null_vector(&h)
            } else {
                vt.row(kmin).transpose()
            };
            for (j, (k, _)) in eq.iter().enumerate() {
                witness[*k] = row[j] / norms[*k];
            }
            return Ok(LicqReport {
                regular: false,
                min_singular_value: sigma,
                witness: Some(witness),
            });
        }
    }
    // cone test: −∇g_k ∈ cone(other ∇g) + span(∇h) ⇒ nonzero witness with λ_k = 1
    for (pos, (k, gk)) in ineq.iter().enumerate() {
        let mut others: Vec<DVector<f64>> = Vec::new();
        let mut nonneg = Vec::new();
        let mut owners = Vec::new();
        for (pos2, (k2, g2)) in ineq.iter().enumerate() {
            if pos2 != pos {
                others.push(g2.clone());
                nonneg.push(true);
                owners.push(*k2);
            }
        }
        for (k2, h2) in eq.iter() {
            others.push(h2.clone());
            nonneg.push(false);
            owners.push(*k2);
        }
        if others.is_empty() {
            continue;
        }
        let a = DMatrix::from_columns(&others);
        let y = linalg::mixed_nnls(&a, &-gk, &nonneg);
        let res = (&a * &y + gk).norm();
        if res <= LICQ_TOL {
            witness[*k] = 1.0 / norms[*k];
            for (j, k2) in owners.iter().enumerate() {
                witness[*k2] += y[j] / norms[*k2];
            }
            return Ok(LicqReport {
                regular: false,
                min_singular_value: sigma,
                witness: Some(witness),
            });
        }
    }
    Ok(LicqReport {
        regular: true,
        min_singular_value: sigma,
        witness: None,
    })
}

fn null_vector(h: &DMatrix<f64>) -> DVector<f64> {
    // wide matrix: pad with zero rows so the SVD exposes a null direction
    let padded = DMatrix::from_fn(h.ncols(), h.ncols(), |i, j| if i < h.nrows() { h[(i, j)] } else { 0.0 });
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors");
    let (kmin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, &s)| if s < acc.1 { (k, s) } else { acc });
    vt.row(kmin).transpose()
}

/// Multipliers `(λ₀; λ, μ)`, one value per constraint in set order.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiplierSequence {
    pub lambda0: f64,
    pub values: DVector<f64>,
}

impl MultiplierSequence {
    pub fn new(lambda0: f64, values: DVector<f64>) -> Self {
        Self { lambda0, values }
    }

    /// `λ₀ = 1` and all constraint multipliers zero.
    pub fn normal_zero(cons: &ConstraintSet) -> Self {
        Self::new(1.0, DVector::zeros(cons.len()))
    }

    pub fn check(&self, cons: &ConstraintSet) -> Result<()> {
        if self.lambda0 != 0.0 && self.lambda0 != 1.0 {
            return Err(Error::MultiplierSign(format!("λ₀ must be 0 or 1, got {}", self.lambda0)));
        }
        check_e(cons, &self.values)?;
        for (k, c) in cons.items.iter().enumerate() {
            if c.kind == ConstraintKind::Inequality && self.values[k] < 0.0 {
                return Err(Error::MultiplierSign(format!(
                    "inequality multiplier {k} ({}) is negative: {}",
                    c.name, self.values[k]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConstrainedReport {
    /// `p_0 … p_n`.
    pub costates: Vec<DVector<f64>>,
    pub multipliers: MultiplierSequence,
    /// Residuals of the endpoint condition (last entry) and of each
    /// recursion step `p_{i−1} = …` (entry `i − 1`), recomputed from `p`.
    pub adjoint_residual: Vec<f64>,
    /// `s_i` per stage.
    pub stationarity: Vec<DVector<f64>>,
    pub per_stage_delta: Vec<f64>,
    pub certified_delta: f64,
    /// `max |λ_j (g_j − e_j)|` over inequalities.
    pub slackness_violation: f64,
    pub lambda0: f64,
    /// `λ₀ = 0` with nonzero constraint multipliers.
    pub degenerate: bool,
}

/// Covectors `(a_0 … a_n, b_0 … b_{n−1})` combining cost and constraint
/// gradients with the given multipliers.
fn assembled_covectors(
    traj: &Trajectory,
    cost: Option<&CostSpec>,
    cons: &ConstraintSet,
    mult: &MultiplierSequence,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let n = traj.horizon();
    let d = traj.states[0].manifold().dim();
    let mut a = Vec::with_capacity(n + 1);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let (mut gq, mut gu) = match cost {
            Some(c) if mult.lambda0 != 0.0 => c.running_gradient(i, &traj.states[i], &traj.controls[i]),
            _ => (DVector::zeros(d), DVector::zeros(traj.controls[i].manifold().dim())),
        };
        if mult.lambda0 != 0.0 && mult.lambda0 != 1.0 {
            gq *= mult.lambda0;
            gu *= mult.lambda0;
        }
        a.push(gq);
        b.push(gu);
    }
    let mut an = match cost {
        Some(c) if mult.lambda0 != 0.0 => c.terminal_gradient(traj.final_state()),
        _ => DVector::zeros(d),
    };
    if mult.lambda0 != 0.0 && mult.lambda0 != 1.0 {
        an *= mult.lambda0;
    }
    a.push(an);
    for (k, c) in cons.items.iter().enumerate() {
        let m = mult.values[k];
        if m == 0.0 {
            continue;
        }
        let (q, u) = point_at(traj, c.location);
        let (gq, gu) = c.gradient(&q, &u);
        let idx = c.location.index(n);
        a[idx] += gq * m;
        if idx < n {
            b[idx] += gu * m;
        }
    }
    (a, b)
}

/// Assembles costates and residuals of the constrained necessary conditions.
pub fn constrained_conditions_residual(
    sys: &ControlSystem,
    traj: &Trajectory,
    cost: &CostSpec,
    cons: &ConstraintSet,
    mult: &MultiplierSequence,
) -> Result<ConstrainedReport> {
    mult.check(cons)?;
    cons.check_system(sys)?;
    system::validate_trajectory(sys, traj)?;
    sys.check_controls(&traj.controls)?;
    let lin = system::linearize(sys, traj);
    residual_with(sys, traj, Some(cost), cons, mult, &lin)
}

fn residual_with(
    sys: &ControlSystem,
    traj: &Trajectory,
    cost: Option<&CostSpec>,
    cons: &ConstraintSet,
    mult: &MultiplierSequence,
    lin: &Linearization,
) -> Result<ConstrainedReport> {
    let n = traj.horizon();
    let (a, b) = assembled_covectors(traj, cost, cons, mult);
    let p = adjoint::sweep_covectors(&a, lin);
    let s = adjoint::stationarity_covectors(&b, &p, lin);
    let mut adjoint_residual = vec![0.0; n + 1];
    adjoint_residual[n] = (&p[n] + &a[n]).norm();
    for i in 1..=n {
        let rhs = -&a[i - 1] + lin.dq[i - 1].transpose() * &p[i];
        adjoint_residual[i - 1] = (&p[i - 1] - rhs).norm();
    }
    let cert = adjoint::certify(sys, &traj.controls, s)?;
    let e = &cons.perturbation;
    let mut slackness: f64 = 0.0;
    for (k, c) in cons.items.iter().enumerate() {
        if c.kind == ConstraintKind::Inequality && mult.values[k] != 0.0 {
            let (q, u) = point_at(traj, c.location);
            slackness = slackness.max((mult.values[k] * (c.value(&q, &u) - e[k])).abs());
        }
    }
    Ok(ConstrainedReport {
        costates: p,
        multipliers: mult.clone(),
        adjoint_residual,
        stationarity: cert.residuals,
        per_stage_delta: cert.per_stage_delta,
        certified_delta: cert.certified_delta,
        slackness_violation: slackness,
        lambda0: mult.lambda0,
        degenerate: mult.lambda0 == 0.0 && mult.values.iter().any(|&v| v != 0.0),
    })
}

// ---------------------------------------------------------------------------
// Reduced (control-space) gradients shared with the solver.

pub(crate) fn control_dims(sys: &ControlSystem) -> Vec<usize> {
    sys.stages().iter().map(|s| s.control_manifold().dim()).collect()
}

pub(crate) fn flatten(v: &[DVector<f64>]) -> DVector<f64> {
    let total = v.iter().map(|x| x.len()).sum();
    let mut out = DVector::zeros(total);
    let mut off = 0;
    for x in v {
        out.rows_mut(off, x.len()).copy_from(x);
        off += x.len();
    }
    out
}

pub(crate) fn unflatten(x: &DVector<f64>, dims: &[usize]) -> Vec<DVector<f64>> {
    let mut off = 0;
    dims.iter()
        .map(|&d| {
            let part = x.rows(off, d).into_owned();
            off += d;
            part
        })
        .collect()
}

/// Gradient with respect to all controls of a function of `(q_idx, u_idx)`
/// whose partial gradients are `(a, b)`; `idx = n` for the endpoint.
pub(crate) fn pullback(lin: &Linearization, idx: usize, a: &DVector<f64>, b: &DVector<f64>, dims: &[usize]) -> DVector<f64> {
    let n = lin.dq.len();
    let mut out: Vec<DVector<f64>> = dims.iter().map(|&d| DVector::zeros(d)).collect();
    if idx < n {
        out[idx] = b.clone();
    }
    let mut p = -a;
    for j in (0..idx).rev() {
        out[j] = -(lin.du[j].transpose() * &p);
        p = lin.dq[j].transpose() * p;
    }
    flatten(&out)
}

/// Normal-cone generators of all control sets, block-embedded in the
/// flattened control space.
pub(crate) fn normal_block(sys: &ControlSystem, controls: &[Point]) -> DMatrix<f64> {
    let dims = control_dims(sys);
    let total: usize = dims.iter().sum();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut off = 0;
    for (i, u) in controls.iter().enumerate() {
        if let (ControlSetSpec::WholeManifold, _) | (_, None) = (sys.control_set(i), u.as_vector()) {
            off += dims[i];
            continue;
        }
        let nrm = sys.control_set(i).active_normals(u.as_vector().unwrap());
        for c in 0..nrm.ncols() {
            let mut col = DVector::zeros(total);
            col.rows_mut(off, dims[i]).copy_from(&nrm.column(c));
            cols.push(col);
        }
        off += dims[i];
    }
    if cols.is_empty() {
        DMatrix::zeros(total, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Generators at one location, pulled back to the control space.
#[derive(Clone, Debug)]
pub(crate) struct GeneratorGroup {
    pub loc: Location,
    pub gens: Vec<Generator>,
    pub xi: Vec<DVector<f64>>,
}

/// Generator groups of `∂P(e, ·)` at the controls of `traj`. Groups made of
/// the zero term alone are dropped.
pub(crate) fn generator_groups(
    cons: &ConstraintSet,
    e: &DVector<f64>,
    traj: &Trajectory,
    lin: &Linearization,
    dims: &[usize],
    tie: f64,
) -> Vec<GeneratorGroup> {
    let n = traj.horizon();
    let mut out = Vec::new();
    for loc in cons.locations() {
        let (q, u) = point_at(traj, loc);
        let gens = generators_at(cons, e, loc, &q, &u, tie);
        if gens.len() == 1 && gens[0].is_zero_term() {
            continue;
        }
        let xi = gens.iter().map(|g| pullback(lin, loc.index(n), &g.a, &g.b, dims)).collect();
        out.push(GeneratorGroup { loc, gens, xi });
    }
    out
}

/// Minimum-norm element of `g0 + κ Σ_groups conv(ξ) + cone(N)`.
#[derive(Clone, Debug)]
pub(crate) struct MinNorm {
    pub element: DVector<f64>,
    pub weights: Vec<DVector<f64>>,
}

pub(crate) fn min_norm_element(g0: &DVector<f64>, groups: &[GeneratorGroup], kappa: f64, normals: &DMatrix<f64>) -> MinNorm {
    let dim = g0.len();
    let finish = |base: DVector<f64>| -> DVector<f64> {
        if normals.ncols() == 0 {
            return base;
        }
        let nu = linalg::nnls(normals, &-&base);
        base + normals * nu
    };
    if groups.is_empty() {
        return MinNorm {
            element: finish(g0.clone()),
            weights: Vec::new(),
        };
    }
    let gen_cols: usize = groups.iter().map(|g| g.xi.len()).sum();
    let scale = 1.0
        + g0.norm()
        + groups
            .iter()
            .flat_map(|g| g.xi.iter())
            .map(|x| kappa * x.norm())
            .fold(0.0, f64::max);
    let rho = 1e3 * scale;
    let rows = dim + groups.len();
    let cols = gen_cols + normals.ncols();
    let mut a = DMatrix::zeros(rows, cols);
    let mut rhs = DVector::zeros(rows);
    rhs.rows_mut(0, dim).copy_from(&-g0);
    let mut c = 0;
    for (gi, g) in groups.iter().enumerate() {
        for x in &g.xi {
            a.view_mut((0, c), (dim, 1)).copy_from(&(x * kappa));
            a[(dim + gi, c)] = rho;
            c += 1;
        }
        rhs[dim + gi] = rho;
    }
    if normals.ncols() > 0 {
        a.view_mut((0, gen_cols), (dim, normals.ncols())).copy_from(normals);
    }
    let y = linalg::nnls(&a, &rhs);
    let mut weights = Vec::with_capacity(groups.len());
    let mut off = 0;
    for g in groups {
        let k = g.xi.len();
        let mut w = y.rows(off, k).into_owned();
        let s = w.sum();
        if s > 0.0 {
            w /= s;
        } else {
            w = DVector::from_element(k, 1.0 / k as f64);
        }
        weights.push(w);
        off += k;
    }
    let combine = |weights: &[DVector<f64>]| {
        let mut base = g0.clone();
        for (g, w) in groups.iter().zip(weights) {
            for (x, &wk) in g.xi.iter().zip(w.iter()) {
                if wk != 0.0 {
                    base += x * (kappa * wk);
                }
            }
        }
        base
    };
    let mut element = finish(combine(&weights));
    // polish on the affine hull of the positive-weight generators
    if let Some(polished) = polish(g0, groups, kappa, normals, &weights) {
        let candidate = finish(combine(&polished));
        if candidate.norm() < element.norm() {
            element = candidate;
            weights = polished;
        }
    }
    MinNorm { element, weights }
}

fn polish(
    g0: &DVector<f64>,
    groups: &[GeneratorGroup],
    kappa: f64,
    normals: &DMatrix<f64>,
    weights: &[DVector<f64>],
) -> Option<Vec<DVector<f64>>> {
    let mut base = g0.clone();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut moves: Vec<(usize, usize, usize)> = Vec::new();
    for (gi, (g, w)) in groups.iter().zip(weights).enumerate() {
        let support: Vec<usize> = (0..w.len()).filter(|&k| w[k] > 1e-12).collect();
        let Some(&reference) = support.iter().max_by(|&&x, &&y| w[x].total_cmp(&w[y])) else {
            continue;
        };
        base += &g.xi[reference] * kappa;
        for &k in &support {
            if k != reference {
                cols.push((&g.xi[k] - &g.xi[reference]) * kappa);
                moves.push((gi, k, reference));
            }
        }
    }
    let nu_start = cols.len();
    if normals.ncols() > 0 {
        let probe = linalg::nnls(normals, &-&base);
        for c in 0..normals.ncols() {
            if probe[c] > 0.0 {
                cols.push(normals.column(c).into_owned());
            }
        }
    }
    if cols.is_empty() {
        return None;
    }
    let m = DMatrix::from_columns(&cols);
    let t = linalg::lstsq(&m, &-&base);
    if (nu_start..cols.len()).any(|k| t[k] < 0.0) {
        return None;
    }
    let mut out: Vec<DVector<f64>> = weights
        .iter()
        .zip(groups)
        .map(|(w, _)| {
            let mut z = DVector::zeros(w.len());
            let best = (0..w.len()).filter(|&k| w[k] > 1e-12).max_by(|&x, &y| w[x].total_cmp(&w[y]));
            if let Some(r) = best {
                z[r] = 1.0;
            } else {
                z.copy_from(w);
            }
            z
        })
        .collect();
    for (j, &(gi, k, r)) in moves.iter().enumerate() {
        out[gi][k] += t[j];
        out[gi][r] -= t[j];
    }
    if out.iter().any(|w| w.iter().any(|&x| x < 0.0)) {
        return None;
    }
    Some(out)
}

// ---------------------------------------------------------------------------
// Abnormality.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SignClass {
    Nonneg,
    Free,
    Nonpos,
}

#[derive(Clone, Debug)]
pub struct AbnormalCertificate {
    /// `λ₀ = 0`, `‖(λ, μ)‖₁ = 1`.
    pub multipliers: MultiplierSequence,
    /// `a_0 … a_n` and `b_0 … b_{n−1}` assembled from the multipliers.
    pub a: Vec<DVector<f64>>,
    pub b: Vec<DVector<f64>>,
    /// Homogeneous costates `p_0 … p_n`.
    pub costates: Vec<DVector<f64>>,
    /// Largest stationarity residual of the homogeneous system.
    pub stationarity_residual: f64,
    /// Largest residual of the homogeneous recursion and endpoint condition.
    pub adjoint_residual: f64,
}

#[derive(Clone, Debug)]
pub struct NormalityReport {
    pub strictly_normal: bool,
    pub certificate: Option<AbnormalCertificate>,
}

/// Decides strict normality at a feasible trajectory by linear programming
/// over the multipliers of the active constraints. The verdict presumes the
/// active gradients are independent at each location (see [`licq_check`]).
pub fn strict_normality_check(sys: &ControlSystem, traj: &Trajectory, cons: &ConstraintSet) -> Result<NormalityReport> {
    cons.check_system(sys)?;
    system::validate_trajectory(sys, traj)?;
    let pen = penalty_eval(cons, &cons.perturbation, traj)?;
    if pen.total > FEASIBLE_PENALTY {
        let (stage, violation) = pen
            .per_stage
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        return Err(Error::Infeasible { stage, violation });
    }
    normality_lp(sys, traj, cons, &sign_classes(cons, traj))
}

/// Sign classes of the multipliers that may be nonzero; feasible points use
/// active constraints, infeasible ones the violated branch.
fn sign_classes(cons: &ConstraintSet, traj: &Trajectory) -> Vec<Option<SignClass>> {
    let e = &cons.perturbation;
    cons.items
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let (q, u) = point_at(traj, c.location);
            let v = c.value(&q, &u) - e[k];
            match c.kind {
                ConstraintKind::Inequality if v >= -ACTIVE_TOL => Some(SignClass::Nonneg),
                ConstraintKind::Inequality => None,
                ConstraintKind::Equality if v.abs() <= ACTIVE_TOL => Some(SignClass::Free),
                ConstraintKind::Equality if v > 0.0 => Some(SignClass::Nonneg),
                ConstraintKind::Equality => Some(SignClass::Nonpos),
            }
        })
        .collect()
}

/// Normality verdict at a possibly infeasible point (used when the penalty
/// loop stalls).
pub(crate) fn normality_at(sys: &ControlSystem, traj: &Trajectory, cons: &ConstraintSet) -> Result<NormalityReport> {
    normality_lp(sys, traj, cons, &sign_classes(cons, traj))
}

fn normality_lp(
    sys: &ControlSystem,
    traj: &Trajectory,
    cons: &ConstraintSet,
    classes: &[Option<SignClass>],
) -> Result<NormalityReport> {
    use microlp::{ComparisonOp, OptimizationDirection, Problem};

    let active: Vec<usize> = (0..cons.len()).filter(|&k| classes[k].is_some()).collect();
    if active.is_empty() {
        return Ok(NormalityReport {
            strictly_normal: true,
            certificate: None,
        });
    }
    let n = traj.horizon();
    let dims = control_dims(sys);
    let lin = system::linearize(sys, traj);
    let xi: Vec<DVector<f64>> = active
        .iter()
        .map(|&k| {
            let c = &cons.items[k];
            let (q, u) = point_at(traj, c.location);
            let (a, b) = c.gradient(&q, &u);
            pullback(&lin, c.location.index(n), &a, &b, &dims)
        })
        .collect();
    let normals = normal_block(sys, &traj.controls);
    let rows = xi.first().map(|x| x.len()).unwrap_or(0);

    // objective: Σ signed multipliers of one class, or ±μ_k for a free one
    let solve = |objective: &dyn Fn(usize) -> f64| -> Result<Option<DVector<f64>>> {
        let mut lp = Problem::new(OptimizationDirection::Maximize);
        let vars: Vec<_> = active
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                let bounds = match classes[k].unwrap() {
                    SignClass::Nonneg => (0.0, 1.0),
                    SignClass::Nonpos => (-1.0, 0.0),
                    SignClass::Free => (-1.0, 1.0),
                };
                lp.add_var(objective(j), bounds)
            })
            .collect();
        let nus: Vec<_> = (0..normals.ncols()).map(|_| lp.add_var(0.0, (0.0, f64::INFINITY))).collect();
        for r in 0..rows {
            let mut row: Vec<(microlp::Variable, f64)> = Vec::new();
            for (j, v) in vars.iter().enumerate() {
                if xi[j][r] != 0.0 {
                    row.push((*v, xi[j][r]));
                }
            }
            for (c, v) in nus.iter().enumerate() {
                if normals[(r, c)] != 0.0 {
                    row.push((*v, normals[(r, c)]));
                }
            }
            if !row.is_empty() {
                lp.add_constraint(&row, ComparisonOp::Eq, 0.0);
            }
        }
        // ‖·‖₁ ≤ 1 on the signed classes keeps the program bounded
        let signed: Vec<(microlp::Variable, f64)> = active
            .iter()
            .enumerate()
            .filter_map(|(j, &k)| match classes[k].unwrap() {
                SignClass::Nonneg => Some((vars[j], 1.0)),
                SignClass::Nonpos => Some((vars[j], -1.0)),
                SignClass::Free => None,
            })
            .collect();
        if !signed.is_empty() {
            lp.add_constraint(&signed, ComparisonOp::Le, 1.0);
        }
        let sol = lp.solve().map_err(|e| Error::Invalid(format!("normality program: {e}")))?;
        if sol.objective() > LP_TOL {
            Ok(Some(DVector::from_iterator(vars.len(), vars.iter().map(|v| sol[*v]))))
        } else {
            Ok(None)
        }
    };

    let mut found = None;
    let signs: Vec<f64> = active
        .iter()
        .map(|&k| match classes[k].unwrap() {
            SignClass::Nonneg => 1.0,
            SignClass::Nonpos => -1.0,
            SignClass::Free => 0.0,
        })
        .collect();
    if signs.iter().any(|&s| s != 0.0) {
        found = solve(&|j| signs[j])?;
    }
    if found.is_none() {
        'outer: for (j0, &k) in active.iter().enumerate() {
            if classes[k] != Some(SignClass::Free) {
                continue;
            }
            for dir in [1.0, -1.0] {
                if let Some(x) = solve(&|j| if j == j0 { dir } else { 0.0 })? {
                    found = Some(x);
                    break 'outer;
                }
            }
        }
    }
    let Some(x) = found else {
        return Ok(NormalityReport {
            strictly_normal: true,
            certificate: None,
        });
    };
    let l1 = x.iter().map(|v| v.abs()).sum::<f64>();
    let mut values = DVector::zeros(cons.len());
    for (j, &k) in active.iter().enumerate() {
        values[k] = x[j] / l1;
    }
    let mult = MultiplierSequence::new(0.0, values);
    let certificate = homogeneous_certificate(sys, traj, cons, mult, &lin)?;
    Ok(NormalityReport {
        strictly_normal: false,
        certificate: Some(certificate),
    })
}

fn homogeneous_certificate(
    sys: &ControlSystem,
    traj: &Trajectory,
    cons: &ConstraintSet,
    mult: MultiplierSequence,
    lin: &Linearization,
) -> Result<AbnormalCertificate> {
    let (a, b) = assembled_covectors(traj, None, cons, &mult);
    let p = adjoint::sweep_covectors(&a, lin);
    let s = adjoint::stationarity_covectors(&b, &p, lin);
    let n = traj.horizon();
    let mut adjoint_residual = (&p[n] + &a[n]).norm();
    for i in 1..=n {
        let rhs = -&a[i - 1] + lin.dq[i - 1].transpose() * &p[i];
        adjoint_residual = adjoint_residual.max((&p[i - 1] - rhs).norm());
    }
    // stationarity over the cones, without requiring feasibility of the
    // controls' own sets beyond what the caller established
    let mut worst: f64 = 0.0;
    for (i, si) in s.iter().enumerate() {
        worst = worst.max(adjoint::stage_delta(sys.control_set(i), &traj.controls[i], si)?);
    }
    Ok(AbnormalCertificate {
        multipliers: mult,
        a,
        b,
        costates: p,
        stationarity_residual: worst,
        adjoint_residual,
    })
}

// ---------------------------------------------------------------------------
// Multiplier recovery.

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum AssemblyOutcome {
    /// `λ₀ = 1` multipliers with residual within tolerance.
    Normal,
    /// `λ₀ = 0`, `‖(λ, μ)‖₁ = 1`.
    Degenerate,
    /// Neither branch met the tolerance; the normal-branch fit is reported.
    NoCertificate,
}

#[derive(Clone, Debug)]
pub struct MultiplierAssembly {
    pub outcome: AssemblyOutcome,
    pub multipliers: MultiplierSequence,
    pub report: ConstrainedReport,
}

/// Recovers multipliers at an (approximately) stationary feasible point by
/// sign-constrained least squares on the stationarity residuals.
pub fn assemble_multipliers(
    sys: &ControlSystem,
    traj: &Trajectory,
    cost: &CostSpec,
    cons: &ConstraintSet,
    tol: f64,
) -> Result<MultiplierAssembly> {
    cons.check_system(sys)?;
    system::validate_trajectory(sys, traj)?;
    sys.check_controls(&traj.controls)?;
    let n = traj.horizon();
    let dims = control_dims(sys);
    let lin = system::linearize(sys, traj);
    let classes: Vec<Option<SignClass>> = {
        let e = &cons.perturbation;
        cons.items
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let (q, u) = point_at(traj, c.location);
                match c.kind {
                    ConstraintKind::Inequality if c.value(&q, &u) - e[k] >= -ACTIVE_TOL => Some(SignClass::Nonneg),
                    ConstraintKind::Inequality => None,
                    ConstraintKind::Equality => Some(SignClass::Free),
                }
            })
            .collect()
    };
    let active: Vec<usize> = (0..cons.len()).filter(|&k| classes[k].is_some()).collect();
    let sweep = adjoint::backward_sweep_with(traj, cost, &lin);
    let r = flatten(&adjoint::reduced_gradient(&sweep, &lin));
    let normals = normal_block(sys, &traj.controls);
    let mut cols: Vec<DVector<f64>> = active
        .iter()
        .map(|&k| {
            let c = &cons.items[k];
            let (q, u) = point_at(traj, c.location);
            let (a, b) = c.gradient(&q, &u);
            pullback(&lin, c.location.index(n), &a, &b, &dims)
        })
        .collect();
    let mut nonneg: Vec<bool> = active.iter().map(|&k| classes[k] == Some(SignClass::Nonneg)).collect();
    for c in 0..normals.ncols() {
        cols.push(normals.column(c).into_owned());
        nonneg.push(true);
    }
    let mut values = DVector::zeros(cons.len());
    if !cols.is_empty() && r.len() > 0 {
        let m = DMatrix::from_columns(&cols);
        let y = linalg::mixed_nnls(&m, &-&r, &nonneg);
        for (j, &k) in active.iter().enumerate() {
            values[k] = if classes[k] == Some(SignClass::Nonneg) { y[j].max(0.0) } else { y[j] };
        }
    }
    let normal = MultiplierSequence::new(1.0, values);
    let report = residual_with(sys, traj, Some(cost), cons, &normal, &lin)?;
    if report.certified_delta <= tol {
        return Ok(MultiplierAssembly {
            outcome: AssemblyOutcome::Normal,
            multipliers: normal,
            report,
        });
    }
    log::debug!("normal multiplier branch residual {:.3e} > {tol:.1e}", report.certified_delta);
    let verdict = normality_lp(sys, traj, cons, &classes)?;
    if let Some(cert) = verdict.certificate {
        let deg = residual_with(sys, traj, Some(cost), cons, &cert.multipliers, &lin)?;
        if deg.certified_delta <= tol {
            return Ok(MultiplierAssembly {
                outcome: AssemblyOutcome::Degenerate,
                multipliers: cert.multipliers,
                report: deg,
            });
        }
    }
    Ok(MultiplierAssembly {
        outcome: AssemblyOutcome::NoCertificate,
        multipliers: normal,
        report,
    })
}

// ---------------------------------------------------------------------------
// Bounded slope.

#[derive(Clone, Debug)]
pub struct BoundedSlopeReport {
    pub pass: bool,
    /// Largest `‖b‖ / ‖a‖` seen (infinite for `a = 0 ≠ b`).
    pub worst_ratio: f64,
}

/// `‖b‖ ≤ κ‖a‖` over the subdifferential generators of every stage penalty
/// and 10³ random convex combinations of them. Constraints within
/// [`ACTIVE_TOL`] of their bound contribute their gradients.
pub fn bounded_slope_check(cons: &ConstraintSet, traj: &Trajectory, kappa: f64, seed: u64) -> Result<BoundedSlopeReport> {
    let e = &cons.perturbation;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let ratio = |a: &DVector<f64>, b: &DVector<f64>| -> Option<f64> {
        let (na, nb) = (a.norm(), b.norm());
        if nb == 0.0 {
            (na > 0.0).then_some(0.0)
        } else if na == 0.0 {
            Some(f64::INFINITY)
        } else {
            Some(nb / na)
        }
    };
    for i in 0..cons.horizon {
        let loc = Location::Stage(i);
        let (q, u) = point_at(traj, loc);
        let gens: Vec<Generator> = generators_at(cons, e, loc, &q, &u, ACTIVE_TOL + TIE_TOL)
            .into_iter()
            .chain(cons.indices_at(loc).into_iter().filter_map(|k| {
                let c = &cons.items[k];
                let v = c.value(&q, &u) - e[k];
                (c.kind == ConstraintKind::Inequality && v >= -ACTIVE_TOL && v < 0.0).then(|| {
                    let (a, b) = c.gradient(&q, &u);
                    Generator {
                        a,
                        b,
                        constraint: Some(k),
                        sign: 1.0,
                    }
                })
            }))
            .filter(|g| !g.is_zero_term())
            .collect();
        for g in &gens {
            if let Some(r) = ratio(&g.a, &g.b) {
                worst = worst.max(r);
            }
        }
        if gens.len() > 1 {
            for _ in 0..1000 {
                let w: Vec<f64> = (0..gens.len()).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = w.iter().sum();
                let mut a = DVector::zeros(gens[0].a.len());
                let mut b = DVector::zeros(gens[0].b.len());
                for (g, wk) in gens.iter().zip(&w) {
                    a += &g.a * (wk / s);
                    b += &g.b * (wk / s);
                }
                if let Some(r) = ratio(&a, &b) {
                    worst = worst.max(r);
                }
            }
        }
    }
    Ok(BoundedSlopeReport {
        pass: worst <= kappa,
        worst_ratio: worst,
    })
}

// ---------------------------------------------------------------------------
// Strong decrease and the distance bound.

#[derive(Clone, Debug)]
pub struct DecreaseOptions {
    /// Half-width of the control sampling box.
    pub radius: f64,
    /// Half-width of the perturbation sampling box.
    pub perturbation_radius: f64,
    pub delta: f64,
    pub samples: usize,
    /// Random tangent-cone directions tried per sample (on top of the
    /// steepest-descent direction of `P`).
    pub directions: usize,
    pub seed: u64,
}

impl Default for DecreaseOptions {
    fn default() -> Self {
        Self {
            radius: 0.5,
            perturbation_radius: 0.5,
            delta: 0.1,
            samples: 200,
            directions: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecreaseSample {
    pub e: DVector<f64>,
    pub controls: Vec<Point>,
    pub penalty: f64,
    /// Best (most negative) Dini derivative found over unit directions.
    pub best_slope: f64,
    /// `−‖min-norm element‖` of the hull of all pieces within half the
    /// local penalty of the max; a lower bound for slopes on nearby kinks.
    pub kink_slope: f64,
    /// `d_{𝒜(e)}(u)` when a distance oracle was supplied.
    pub distance: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct DecreaseReport {
    /// Every infeasible sample admits a direction with slope ≤ −Δ.
    pub pass: bool,
    /// `d ≤ P / Δ` at every sample where a distance was computed.
    pub distance_bound_holds: bool,
    pub infeasible_samples: usize,
    /// Smallest of `−best_slope` and `−kink_slope` over the samples.
    pub estimated_delta: f64,
    pub counterexample: Option<DecreaseSample>,
    pub samples: Vec<DecreaseSample>,
}

/// Distance from controls to `𝒜(e)`, supplied by the caller.
pub type DistanceFn<'a> = &'a (dyn Fn(&DVector<f64>, &[Point]) -> Option<f64> + Sync);

/// Samples `(e, u)` around `(e0, u0)` and checks the strong decrease
/// condition of the penalty with rate `Δ` by one-sided difference
/// quotients along unit tangent-cone directions.
pub fn decrease_certificate(
    sys: &ControlSystem,
    cons: &ConstraintSet,
    e0: &DVector<f64>,
    q0: &Point,
    controls0: &[Point],
    opts: &DecreaseOptions,
    distance: Option<DistanceFn<'_>>,
) -> Result<DecreaseReport> {
    check_e(cons, e0)?;
    let p0 = penalty_of_controls(sys, cons, e0, q0, controls0)?;
    if p0 > FEASIBLE_PENALTY {
        return Err(Error::Infeasible {
            stage: cons.horizon,
            violation: p0,
        });
    }
    let dims = control_dims(sys);
    let samples: Vec<Option<DecreaseSample>> = (0..opts.samples)
        .into_par_iter()
        .map(|s| -> Result<Option<DecreaseSample>> {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9e37_79b9).wrapping_add(s as u64));
            let e = e0 + DVector::from_fn(e0.len(), |_, _| rng.gen_range(-1.0..1.0)) * opts.perturbation_radius;
            let mut controls = Vec::with_capacity(controls0.len());
            for (i, u) in controls0.iter().enumerate() {
                let v = DVector::from_fn(dims[i], |_, _| rng.gen_range(-1.0..1.0)) * opts.radius;
                controls.push(project_control(sys.control_set(i), &u.retract_vec(&v))?);
            }
            let pen = penalty_of_controls(sys, cons, &e, q0, &controls)?;
            if pen <= FEASIBLE_PENALTY {
                return Ok(None);
            }
            let (best, kink) = best_descent_slope(sys, cons, &e, q0, &controls, opts.directions, &mut rng)?;
            let dist = distance.and_then(|f| f(&e, &controls));
            Ok(Some(DecreaseSample {
                e,
                controls,
                penalty: pen,
                best_slope: best,
                kink_slope: kink,
                distance: dist,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<DecreaseSample> = samples.into_iter().flatten().collect();
    let mut pass = true;
    let mut bound = true;
    let mut counterexample = None;
    let mut estimated: f64 = f64::INFINITY;
    for s in &samples {
        estimated = estimated.min(-s.best_slope).min(-s.kink_slope);
        if s.best_slope > -opts.delta {
            pass = false;
            counterexample.get_or_insert_with(|| s.clone());
        }
        if let Some(d) = s.distance {
            if d > s.penalty / opts.delta * (1.0 + 1e-9) + 1e-12 {
                bound = false;
            }
        }
    }
    Ok(DecreaseReport {
        pass,
        distance_bound_holds: bound,
        infeasible_samples: samples.len(),
        estimated_delta: if samples.is_empty() { f64::INFINITY } else { estimated },
        counterexample,
        samples,
    })
}

pub(crate) fn project_control(set: &ControlSetSpec, u: &Point) -> Result<Point> {
    match (set, u.as_vector()) {
        (ControlSetSpec::WholeManifold, _) => Ok(u.clone()),
        (_, Some(v)) => Ok(Point::euclidean(set.project_point(v)?)),
        (_, None) => Err(Error::Invalid("convex control set on a non-Euclidean control".into())),
    }
}

/// Most negative one-sided slope of `P(e, ·)` over unit tangent-cone
/// directions: the steepest-descent direction plus `extra` random ones.
/// Also returns the kink slope (see [`DecreaseSample::kink_slope`]).
fn best_descent_slope(
    sys: &ControlSystem,
    cons: &ConstraintSet,
    e: &DVector<f64>,
    q0: &Point,
    controls: &[Point],
    extra: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let dims = control_dims(sys);
    let traj = system::rollout(sys, q0, controls)?;
    let lin = system::linearize(sys, &traj);
    let groups = generator_groups(cons, e, &traj, &lin, &dims, TIE_TOL);
    let normals = normal_block(sys, controls);
    let total: usize = dims.iter().sum();
    let mn = min_norm_element(&DVector::zeros(total), &groups, 1.0, &normals);
    // Pieces within half the local penalty count as tied: the min-norm
    // element of that wider hull bounds the slope on nearby kinks, which
    // random samples hit with probability zero.
    let phi = penalty_eval(cons, e, &traj)?.per_stage;
    let n = traj.horizon();
    let wide: Vec<GeneratorGroup> = cons
        .locations()
        .into_iter()
        .filter_map(|loc| {
            let p = phi[loc.index(n)];
            if p <= FEASIBLE_PENALTY {
                return groups.iter().find(|g| g.loc == loc).cloned();
            }
            let (q, u) = point_at(&traj, loc);
            let gens: Vec<Generator> = generators_at(cons, e, loc, &q, &u, 0.5 * p)
                .into_iter()
                .filter(|g| !g.is_zero_term())
                .collect();
            let xi = gens.iter().map(|g| pullback(&lin, loc.index(n), &g.a, &g.b, &dims)).collect();
            Some(GeneratorGroup { loc, gens, xi })
        })
        .collect();
    let kink = -min_norm_element(&DVector::zeros(total), &wide, 1.0, &normals).element.norm();
    let mut dirs = vec![-mn.element.clone()];
    for _ in 0..extra {
        let v = DVector::from_fn(total, |_, _| rng.gen_range(-1.0..1.0));
        dirs.push(project_to_cones(sys, controls, &v)?);
    }
    let x = Point::product(controls.to_vec());
    let f = |p: &Point| {
        let parts = p.factors().expect("product point");
        penalty_of_controls(sys, cons, e, q0, parts).unwrap_or(f64::INFINITY)
    };
    let mut best = f64::INFINITY;
    for d in dirs {
        let nrm = d.norm();
        if nrm < 1e-12 {
            continue;
        }
        let est = oracle::dini_estimate(f, &x, &(d / nrm))?;
        best = best.min(est.value);
    }
    Ok((best, kink))
}

/// Stagewise projection of a flattened direction onto the tangent cones.
pub(crate) fn project_to_cones(sys: &ControlSystem, controls: &[Point], v: &DVector<f64>) -> Result<DVector<f64>> {
    let parts = unflatten(v, &control_dims(sys));
    let mut out = Vec::with_capacity(parts.len());
    for (i, w) in parts.into_iter().enumerate() {
        out.push(match (sys.control_set(i), controls[i].as_vector()) {
            (ControlSetSpec::WholeManifold, _) | (_, None) => w,
            (set, Some(u)) => set.project_tangent(u, &w)?,
        });
    }
    Ok(flatten(&out))
}

// ---------------------------------------------------------------------------
// Value function.

#[derive(Clone, Debug)]
pub struct SensitivityRow {
    pub e: DVector<f64>,
    pub value: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct SensitivityTable {
    pub baseline: Option<f64>,
    pub rows: Vec<SensitivityRow>,
    /// `min (v(e) − v(0)) / ‖e‖` over solved rows with `e ≠ 0`. An estimate,
    /// not a certified bound.
    pub calmness: Option<f64>,
}

/// Solves the perturbed problems `v(e)` over a grid (in parallel) and
/// estimates the calmness modulus at `e = 0`.
pub fn value_sensitivity(
    sys: &ControlSystem,
    cost: &CostSpec,
    cons: &ConstraintSet,
    q0: &Point,
    u_init: &[Point],
    e_grid: &[DVector<f64>],
    opts: &SolveOptions,
) -> Result<SensitivityTable> {
    for e in e_grid {
        check_e(cons, e)?;
    }
    let solve = |e: &DVector<f64>| -> SensitivityRow {
        let outcome = cons
            .clone()
            .with_perturbation(e.clone())
            .and_then(|c| solver::penalty_solve(sys, cost, &c, q0, u_init, opts));
        match outcome {
            Ok(out) if out.report.status == SolveStatus::Converged => SensitivityRow {
                e: e.clone(),
                value: Some(out.report.cost),
                status: "Converged".into(),
            },
            Ok(out) => {
                log::warn!("value_sensitivity: e = {:?} unsolved ({:?})", e.as_slice(), out.report.status);
                SensitivityRow {
                    e: e.clone(),
                    value: None,
                    status: format!("{:?}", out.report.status),
                }
            }
            Err(err) => {
                log::warn!("value_sensitivity: e = {:?} failed: {err}", e.as_slice());
                SensitivityRow {
                    e: e.clone(),
                    value: None,
                    status: format!("error: {err}"),
                }
            }
        }
    };
    let zero = DVector::zeros(cons.len());
    let base = solve(&zero);
    let rows: Vec<SensitivityRow> = e_grid.par_iter().map(solve).collect();
    let calmness = base.value.and_then(|v0| {
        rows.iter()
            .filter_map(|r| {
                let n = r.e.norm();
                match r.value {
                    Some(v) if n > 0.0 => Some((v - v0) / n),
                    _ => None,
                }
            })
            .reduce(f64::min)
    });
    Ok(SensitivityTable {
        baseline: base.value,
        rows,
        calmness,
    })
}

// ---------------------------------------------------------------------------
// Gradient audits.

pub(crate) fn audit_entries() -> Vec<AuditEntry> {
    vec![
        AuditEntry {
            name: "Constraint::linear",
            run: |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let c = Constraint::linear(
                    Location::Stage(0),
                    ConstraintKind::Inequality,
                    DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)),
                    DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)),
                    0.3,
                );
                audit_constraint(&c, s, 3, 2)
            },
        },
        AuditEntry {
            name: "Constraint::sphere",
            run: |s| audit_constraint(&Constraint::sphere(Location::Endpoint, DVector::from_vec(vec![0.2, -0.1, 0.4]), 0.7), s, 3, 0),
        },
        AuditEntry {
            name: "reduced constraint gradient",
            run: audit_pullback,
        },
    ]
}

fn audit_constraint(c: &Constraint, seed: u64, dq: usize, du: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let q = Point::euclidean(DVector::from_fn(dq, |_, _| rng.gen_range(-1.0..1.0)));
        let u = Point::euclidean(DVector::from_fn(du, |_, _| rng.gen_range(-1.0..1.0)));
        let (a, b) = c.gradient(&q, &u);
        let (fa, fb) = fd_constraint_gradient(&*c.value, &q, &u);
        worst = worst.max(oracle::relative_error(&a, &fa));
        if du > 0 {
            worst = worst.max(oracle::relative_error(&b, &fb));
        }
    }
    Ok(worst)
}

fn audit_pullback(seed: u64) -> Result<f64> {
    use crate::system::StageMap;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    let stage = StageMap::retraction_velocity(
        ManifoldHandle::so3(),
        DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0)),
        0.4,
    );
    let sys = ControlSystem::uniform(stage, ControlSetSpec::WholeManifold, n)?;
    let target = DVector::from_vec(vec![0.3, -0.2, 0.5]);
    let t2 = target.clone();
    let c = Constraint::state(Location::Endpoint, ConstraintKind::Inequality, move |q| {
        let r = q.as_rotation().unwrap();
        (r * nalgebra::Vector3::new(t2[0], t2[1], t2[2])).z
    });
    let mut cons = ConstraintSet::new(&sys);
    cons.push(c.clone())?;
    let q0 = oracle::random_point(&mut rng, sys.state_manifold());
    let controls: Vec<Point> = (0..n)
        .map(|_| Point::euclidean(DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0))))
        .collect();
    let traj = system::rollout(&sys, &q0, &controls)?;
    let lin = system::linearize(&sys, &traj);
    let dims = control_dims(&sys);
    let (a, b) = c.gradient(traj.final_state(), &empty_point());
    let analytic = pullback(&lin, n, &a, &b, &dims);
    let x = Point::product(controls.clone());
    let fd = oracle::fd_gradient(
        |p| {
            let t = system::rollout(&sys, &q0, p.factors().unwrap()).unwrap();
            c.value(t.final_state(), &empty_point())
        },
        &x,
        oracle::FD_STEP,
    )?;
    Ok(oracle::relative_error(&analytic, &fd.gradient))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::StageMap;

    fn add2(n: usize) -> ControlSystem {
        ControlSystem::uniform(
            StageMap::linear(DMatrix::identity(2, 2), DMatrix::identity(2, 2)),
            ControlSetSpec::WholeManifold,
            n,
        )
        .unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn traj_at(sys: &ControlSystem, q0: &[f64], us: &[&[f64]]) -> Trajectory {
        let controls: Vec<Point> = us.iter().map(|u| Point::from_slice(u)).collect();
        system::rollout(sys, &Point::from_slice(q0), &controls).unwrap()
    }

    #[test]
    fn penalty_examples() {
        let sys = add2(1);
        let cons = ConstraintSet::new(&sys)
            .with(Constraint::linear(Location::Endpoint, ConstraintKind::Inequality, v(&[1.0, 0.0]), v(&[]), 0.0))
            .unwrap();
        let t = traj_at(&sys, &[0.0, 0.0], &[&[0.3, 0.0]]);
        let p = penalty_eval(&cons, &v(&[0.0]), &t).unwrap();
        assert!((p.total - 0.3).abs() < 1e-15);
        assert_eq!(penalty_eval(&cons, &v(&[0.3]), &t).unwrap().total, 0.0);
        assert!(matches!(penalty_eval(&cons, &v(&[0.0, 1.0]), &t), Err(Error::DimensionMismatch { .. })));
        let feasible = traj_at(&sys, &[0.0, 0.0], &[&[-1.0, 4.0]]);
        assert_eq!(penalty_eval(&cons, &v(&[0.0]), &feasible).unwrap().total, 0.0);
    }

    #[test]
    fn equality_penalty_is_absolute_value() {
        let sys = add2(2);
        let cons = ConstraintSet::new(&sys)
            .with(Constraint::linear(Location::Stage(1), ConstraintKind::Equality, v(&[0.0, 1.0]), v(&[1.0, 0.0]), 1.0))
            .unwrap();
        let t = traj_at(&sys, &[0.0, 0.0], &[&[0.0, 0.5], &[0.0, 0.0]]);
        let p = penalty_eval(&cons, &v(&[0.0]), &t).unwrap();
        assert!((p.per_stage[1] - 0.5).abs() < 1e-15);
        let g = penalty_subgradient(&cons, &v(&[0.0]), &t, Location::Stage(1)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].sign, -1.0);
        assert_eq!(g[0].a, v(&[0.0, -1.0]));
    }

    #[test]
    fn generator_sets() {
        let sys = add2(1);
        let cons = ConstraintSet::new(&sys)
            .with(Constraint::linear(Location::Stage(0), ConstraintKind::Inequality, v(&[1.0, 0.0]), v(&[0.0, 0.0]), 0.0))
            .unwrap()
            .with(Constraint::linear(Location::Stage(0), ConstraintKind::Inequality, v(&[0.0, 1.0]), v(&[0.0, 0.0]), 0.0))
            .unwrap();
        let e = v(&[0.0, 0.0]);
        let interior = traj_at(&sys, &[-1.0, -1.0], &[&[0.0, 0.0]]);
        let g = penalty_subgradient(&cons, &e, &interior, Location::Stage(0)).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g[0].is_zero_term());
        let one = traj_at(&sys, &[0.5, -1.0], &[&[0.0, 0.0]]);
        let g = penalty_subgradient(&cons, &e, &one, Location::Stage(0)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].a, v(&[1.0, 0.0]));
        let tie = traj_at(&sys, &[0.5, 0.5], &[&[0.0, 0.0]]);
        let g = penalty_subgradient(&cons, &e, &tie, Location::Stage(0)).unwrap();
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn tie_dini_matches_hull_support() {
        // φ = max(g1, g2) at a tie: the one-sided derivative along v is the
        // largest pairing of v with the generators
        let sys = add2(1);
        let cons = ConstraintSet::new(&sys)
            .with(Constraint::linear(Location::Endpoint, ConstraintKind::Inequality, v(&[1.0, 0.5]), v(&[]), 0.0))
            .unwrap()
            .with(Constraint::linear(Location::Endpoint, ConstraintKind::Inequality, v(&[-0.3, 1.0]), v(&[]), -0.15))
            .unwrap();
        // both equal 1.0 at q = (0.5, 1.0)
        let q0 = Point::from_slice(&[0.0, 0.0]);
        let u = vec![Point::from_slice(&[0.5, 1.0])];
        let e = v(&[0.0, 0.0]);
        let t = system::rollout(&sys, &q0, &u).unwrap();
        let gens = penalty_subgradient(&cons, &e, &t, Location::Endpoint).unwrap();
        assert_eq!(gens.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let dir = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let est = oracle::dini_estimate(
                |p| penalty_of_controls(&sys, &cons, &e, &q0, &[p.clone()]).unwrap(),
                &u[0],
                &dir,
            )
            .unwrap();
            let support = gens.iter().map(|g| g.a.dot(&dir)).fold(f64::NEG_INFINITY, f64::max);
            assert!((est.value - support).abs() < 1e-6, "{} vs {support}", est.value);
        }
    }

    #[test]
    fn licq_examples() {
        let sys = add2(1);
        let at_zero = traj_at(&sys, &[0.0, 0.0], &[&[0.0, 0.0]]);
        let g = || Constraint::linear(Location::Stage(0), ConstraintKind::Inequality, v(&[1.0, 0.0]), v(&[0.0, 0.0]), 0.0);
        let single = ConstraintSet::new(&sys).with(g()).unwrap();
        assert!(licq_check(&single, &at_zero, Location::Stage(0)).unwrap().regular);
        // g and g: dependent, but the only witness needs a negative λ
        let dup = ConstraintSet::new(&sys).with(g()).unwrap().with(g()).unwrap();
        let rep = licq_check(&dup, &at_zero, Location::Stage(0)).unwrap();
        assert!(rep.regular && rep.min_singular_value < LICQ_TOL);
        // g and −g (i.e. g ≥ 0 written as an inequality): witness (1, 1)
        let neg = Constraint::linear(Location::Stage(0), ConstraintKind::Inequality, v(&[-2.0, 0.0]), v(&[0.0, 0.0]), 0.0);
        let opp = ConstraintSet::new(&sys).with(g()).unwrap().with(neg).unwrap();
        let rep = licq_check(&opp, &at_zero, Location::Stage(0)).unwrap();
        assert!(!rep.regular);
        let w = rep.witness.unwrap();
        assert!(w[0] > 0.0 && w[1] > 0.0);
        // equality duplicated with a scale: degenerate via the null space
        let h1 = Constraint::linear(Location::Stage(0), ConstraintKind::Equality, v(&[0.0, 1.0]), v(&[1.0, 0.0]), 0.0);
        let h2 = Constraint::linear(Location::Stage(0), ConstraintKind::Equality, v(&[0.0, 3.0]), v(&[3.0, 0.0]), 0.0);
        let eqs = ConstraintSet::new(&sys).with(h1).unwrap().with(h2).unwrap();
        let rep = licq_check(&eqs, &at_zero, Location::Stage(0)).unwrap();
        assert!(!rep.regular);
        let w = rep.witness.unwrap();
        assert!((w[0] + 3.0 * w[1]).abs() < 1e-10 && w.norm() > 0.5);
    }

    #[test]
    fn licq_random_full_rank_and_scale_invariance() {
        let sys = ControlSystem::uniform(
            StageMap::linear(DMatrix::identity(3, 3), DMatrix::identity(3, 3)),
            ControlSetSpec::WholeManifold,
            1,
        )
        .unwrap();
        let t = system::rollout(&sys, &Point::from_slice(&[0.0; 3]), &[Point::from_slice(&[0.0; 3])]).unwrap();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cons = ConstraintSet::new(&sys);
            let mut scaled = ConstraintSet::new(&sys);
            for k in 0..3 {
                let cq = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
                let cu = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
                let kind = if k == 0 { ConstraintKind::Equality } else { ConstraintKind::Inequality };
                let s = rng.gen_range(0.01..100.0);
                cons.push(Constraint::linear(Location::Stage(0), kind, cq.clone(), cu.clone(), 0.0)).unwrap();
                scaled.push(Constraint::linear(Location::Stage(0), kind, cq * s, cu * s, 0.0)).unwrap();
            }
            let a = licq_check(&cons, &t, Location::Stage(0)).unwrap();
            let b = licq_check(&scaled, &t, Location::Stage(0)).unwrap();
            assert!(a.regular, "seed {seed}");
            assert_eq!(a.regular, b.regular);
        }
    }

    #[test]
    fn strict_normality_examples() {
        // no constraints
        let sys = add2(2);
        let t = traj_at(&sys, &[0.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(strict_normality_check(&sys, &t, &ConstraintSet::new(&sys)).unwrap().strictly_normal);

        // double integrator, endpoint equality: strictly normal
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let di = ControlSystem::uniform(StageMap::linear(a, b), ControlSetSpec::WholeManifold, 2).unwrap();
        let q0 = Point::from_slice(&[1.0, 0.0]);
        let us = vec![Point::from_slice(&[0.3]), Point::from_slice(&[-0.2])];
        let tr = system::rollout(&di, &q0, &us).unwrap();
        let qn = tr.final_state().as_vector().unwrap().clone();
        let c = v(&[1.0, 2.0]);
        let d = c.dot(&qn);
        let cons = ConstraintSet::new(&di)
            .with(Constraint::linear(Location::Endpoint, ConstraintKind::Equality, c, v(&[]), d))
            .unwrap();
        assert!(strict_normality_check(&di, &tr, &cons).unwrap().strictly_normal);

        // D_uF = 0: abnormal, p_1 = −μc
        let (toy, cons, tr) = abnormal_toy(0.0);
        let rep = strict_normality_check(&toy, &tr, &cons).unwrap();
        assert!(!rep.strictly_normal);
        let cert = rep.certificate.unwrap();
        assert!(cert.stationarity_residual <= 1e-12 && cert.adjoint_residual <= 1e-12);
        let mu = cert.multipliers.values[0];
        assert!((mu.abs() - 1.0).abs() < 1e-12);
        let expected = -v(&[1.0, -2.0]) * mu;
        assert!((&cert.costates[1] - expected).norm() < 1e-12);

        // infeasible input is refused
        let (toy, cons, tr) = abnormal_toy(0.5);
        assert!(matches!(strict_normality_check(&toy, &tr, &cons), Err(Error::Infeasible { .. })));
    }

    /// `q₁ = q₀` whatever the control, with an endpoint equality offset by
    /// `gap` from the reachable state.
    pub(crate) fn abnormal_toy(gap: f64) -> (ControlSystem, ConstraintSet, Trajectory) {
        let sys = ControlSystem::uniform(
            StageMap::linear(DMatrix::identity(2, 2), DMatrix::zeros(2, 1)),
            ControlSetSpec::WholeManifold,
            1,
        )
        .unwrap();
        let q0 = Point::from_slice(&[1.0, 0.5]);
        let tr = system::rollout(&sys, &q0, &[Point::from_slice(&[0.2])]).unwrap();
        let cons = ConstraintSet::new(&sys)
            .with(Constraint::linear(Location::Endpoint, ConstraintKind::Equality, v(&[1.0, -2.0]), v(&[]), gap))
            .unwrap();
        (sys, cons, tr)
    }

    #[test]
    fn bounded_slope_examples() {
        let sys = add2(1);
        let t = traj_at(&sys, &[0.0, 0.0], &[&[0.0, 0.0]]);
        let pure = ConstraintSet::new(&sys)
            .with(Constraint::linear(Location::Stage(0), ConstraintKind::Inequality, v(&[1.0, 0.0]), v(&[0.0, 0.0]), 0.0))
            .unwrap();
        assert!(bounded_slope_check(&pure, &t, 0.0, 1).unwrap().pass);
        let control_only = ConstraintSet::new(&sys)
            .with(Constraint::linear(Location::Stage(0), ConstraintKind::Inequality, v(&[0.0, 0.0]), v(&[1.0, 0.0]), 0.0))
            .unwrap();
        let rep = bounded_slope_check(&control_only, &t, 1e6, 1).unwrap();
        assert!(!rep.pass && rep.worst_ratio.is_infinite());
        let mixed = ConstraintSet::new(&sys)
            .with(Constraint::linear(Location::Stage(0), ConstraintKind::Inequality, v(&[1.0, 0.0]), v(&[0.5, 0.0]), 0.0))
            .unwrap();
        let rep = bounded_slope_check(&mixed, &t, 1.0, 1).unwrap();
        assert!(rep.pass && (rep.worst_ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_multipliers_reproduce_adjoint() {
        let sys = add2(3);
        let t = traj_at(&sys, &[0.2, 0.1], &[&[1.0, 0.0], &[0.0, 1.0], &[0.5, -0.5]]);
        let cost = CostSpec::quadratic(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2) * 2.0);
        let cons = ConstraintSet::new(&sys)
            .with(Constraint::linear(Location::Endpoint, ConstraintKind::Inequality, v(&[1.0, 1.0]), v(&[]), 100.0))
            .unwrap();
        let rep = constrained_conditions_residual(&sys, &t, &cost, &cons, &MultiplierSequence::normal_zero(&cons)).unwrap();
        let adj = adjoint::criticality_certificate(&sys, &t, &cost).unwrap();
        assert_eq!(rep.stationarity, adj.residuals);
        assert_eq!(rep.certified_delta, adj.certified_delta);
        assert!(rep.adjoint_residual.iter().all(|&r| r == 0.0));
        let bad = MultiplierSequence::new(1.0, v(&[-1.0]));
        assert!(matches!(
            constrained_conditions_residual(&sys, &t, &cost, &cons, &bad),
            Err(Error::MultiplierSign(_))
        ));
    }

    #[test]
    fn bound_multiplier_by_hand() {
        // min ½(u − 2)² s.t. u ≤ 1 on F(q, u) = q + u: λ = 1 at u = 1
        let sys = ControlSystem::uniform(
            StageMap::linear(DMatrix::identity(1, 1), DMatrix::identity(1, 1)),
            ControlSetSpec::WholeManifold,
            1,
        )
        .unwrap();
        let cost = CostSpec::new(|_| 0.0, |_, _, u| 0.5 * (u.as_vector().unwrap()[0] - 2.0).powi(2));
        let cons = ConstraintSet::new(&sys)
            .with(Constraint::linear(Location::Stage(0), ConstraintKind::Inequality, v(&[0.0]), v(&[1.0]), 1.0))
            .unwrap();
        let t = traj_at(&sys, &[0.0], &[&[1.0]]);
        let asm = assemble_multipliers(&sys, &t, &cost, &cons, 1e-6).unwrap();
        assert_eq!(asm.outcome, AssemblyOutcome::Normal);
        assert!((asm.multipliers.values[0] - 1.0).abs() < 1e-6);

        // unconstrained stationary point: zero multipliers
        let free = ConstraintSet::new(&sys)
            .with(Constraint::linear(Location::Stage(0), ConstraintKind::Inequality, v(&[0.0]), v(&[1.0]), 5.0))
            .unwrap();
        let t = traj_at(&sys, &[0.0], &[&[2.0]]);
        let asm = assemble_multipliers(&sys, &t, &cost, &free, 1e-6).unwrap();
        assert_eq!(asm.outcome, AssemblyOutcome::Normal);
        assert_eq!(asm.multipliers.values[0], 0.0);
    }

    #[test]
    fn degenerate_branch_on_abnormal_toy() {
        let (sys, cons, tr) = abnormal_toy(0.0);
        // a cost that the toy cannot make stationary through the constraint
        let cost = CostSpec::new(|_| 0.0, |_, _, u| 0.5 * u.as_vector().unwrap()[0].powi(2));
        let tr = system::rollout(&sys, tr.initial_state(), &[Point::from_slice(&[0.0])]).unwrap();
        let asm = assemble_multipliers(&sys, &tr, &cost, &cons, 1e-9).unwrap();
        // u = 0 is stationary for the cost, so the normal branch succeeds
        assert_eq!(asm.outcome, AssemblyOutcome::Normal);
        let tr = system::rollout(&sys, tr.initial_state(), &[Point::from_slice(&[0.7])]).unwrap();
        let asm = assemble_multipliers(&sys, &tr, &CostSpec::zero(), &cons, 1e-9).unwrap();
        assert_eq!(asm.outcome, AssemblyOutcome::Normal);
        // with λ₀ forced to zero the certificate direction is recovered
        let rep = strict_normality_check(&sys, &tr, &cons).unwrap();
        let cert = rep.certificate.unwrap();
        assert!((cert.multipliers.values[0].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decrease_scalar_bound() {
        let sys = ControlSystem::uniform(
            StageMap::linear(DMatrix::identity(1, 1), DMatrix::identity(1, 1)),
            ControlSetSpec::WholeManifold,
            1,
        )
        .unwrap();
        let cons = ConstraintSet::new(&sys)
            .with(Constraint::linear(Location::Stage(0), ConstraintKind::Inequality, v(&[0.0]), v(&[1.0]), 0.0))
            .unwrap();
        let q0 = Point::from_slice(&[0.0]);
        let u0 = vec![Point::from_slice(&[-0.1])];
        let dist = |e: &DVector<f64>, u: &[Point]| Some((u[0].as_vector().unwrap()[0] - e[0]).max(0.0));
        let opts = DecreaseOptions {
            radius: 0.5,
            perturbation_radius: 0.5,
            delta: 1.0 - 1e-6,
            samples: 64,
            directions: 4,
            seed: 2,
        };
        let rep = decrease_certificate(&sys, &cons, &v(&[0.0]), &q0, &u0, &opts, Some(&dist)).unwrap();
        assert!(rep.infeasible_samples > 0);
        assert!(rep.pass && rep.distance_bound_holds);
        for s in &rep.samples {
            assert!((s.distance.unwrap() - s.penalty).abs() < 1e-12);
        }
        let empty = ConstraintSet::new(&sys);
        let rep = decrease_certificate(&sys, &empty, &v(&[]), &q0, &u0, &opts, None).unwrap();
        assert!(rep.pass && rep.infeasible_samples == 0);
    }

    #[test]
    fn min_norm_on_tied_equality_is_exact() {
        // g0 = (1, 0), generators ±(1, 0): minimum norm zero
        let g0 = v(&[1.0, 0.0]);
        let group = GeneratorGroup {
            loc: Location::Endpoint,
            gens: Vec::new(),
            xi: vec![v(&[1.0, 0.0]), v(&[-1.0, 0.0]), v(&[0.0, 0.0])],
        };
        let mn = min_norm_element(&g0, &[group], 3.0, &DMatrix::zeros(2, 0));
        assert!(mn.element.norm() < 1e-14, "{}", mn.element);
    }

    #[test]
    fn audits_pass() {
        for entry in audit_entries() {
            let err = (entry.run)(5).unwrap();
            assert!(err <= 1e-5, "{}: {err}", entry.name);
        }
    }
}
