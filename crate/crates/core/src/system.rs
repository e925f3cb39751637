//! Discrete-time geometric control systems `q_{i+1} = F_i(q_i, u_i)`.
//!
//! Jacobians are expressed in the trivialised tangent coordinates of
//! [`crate::manifold`]: `D_qF` maps coordinates at `q` to coordinates at
//! `F(q, u)`. Stage maps without analytic Jacobians fall back to central
//! differences through retractions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::linalg;
use crate::manifold::{so3, Cotangent, ManifoldHandle, ManifoldKind, Point, Tangent};

/// Central-difference step used for Jacobians without an analytic form.
pub const FD_STEP: f64 = 1e-6;
/// Dynamics residual accepted by [`validate_trajectory`].
pub const TRAJECTORY_TOL: f64 = 1e-10;
/// Feasibility tolerance for control sets.
pub const FEASIBILITY_TOL: f64 = 1e-9;

pub type StageFn = Arc<dyn Fn(&Point, &Point) -> Point + Send + Sync>;
pub type JacobianFn = Arc<dyn Fn(&Point, &Point) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync>;
pub type FibreFn = Arc<dyn Fn(&Point, &Point) -> DVector<f64> + Send + Sync>;
pub type BundleMapFn = Arc<dyn Fn(&Point, &DVector<f64>) -> Point + Send + Sync>;
pub type FibreDerivativeFn = Arc<dyn Fn(&Point, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// `F = E ∘ f` with `f(q, u)` in a vector-bundle fibre over `q`.
#[derive(Clone)]
pub struct Factorization {
    pub fibre_dim: usize,
    pub f: FibreFn,
    pub e: BundleMapFn,
    pub fibre_derivative: Option<FibreDerivativeFn>,
    pub affine_in_u: bool,
}

#[derive(Clone)]
pub struct StageMap {
    state: ManifoldHandle,
    control: ManifoldHandle,
    evaluate: StageFn,
    jacobians: Option<JacobianFn>,
    factorization: Option<Factorization>,
}

impl fmt::Debug for StageMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageMap")
            .field("state", &self.state)
            .field("control", &self.control)
            .field("analytic_jacobians", &self.jacobians.is_some())
            .field("factored", &self.factorization.is_some())
            .finish()
    }
}

impl StageMap {
    pub fn new(
        state: ManifoldHandle,
        control: ManifoldHandle,
        evaluate: impl Fn(&Point, &Point) -> Point + Send + Sync + 'static,
    ) -> Self {
        Self {
            state,
            control,
            evaluate: Arc::new(evaluate),
            jacobians: None,
            factorization: None,
        }
    }

    /// Attaches analytic `(D_qF, D_uF)`.
    pub fn with_jacobians(
        mut self,
        jac: impl Fn(&Point, &Point) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync + 'static,
    ) -> Self {
        self.jacobians = Some(Arc::new(jac));
        self
    }

    /// Stage map of the form `F(q, u) = E(q, f(q, u))`.
    pub fn factored(state: ManifoldHandle, control: ManifoldHandle, factorization: Factorization) -> Self {
        let fac = factorization.clone();
        let evaluate: StageFn = Arc::new(move |q, u| (fac.e)(q, &(fac.f)(q, u)));
        Self {
            state,
            control,
            evaluate,
            jacobians: None,
            factorization: Some(factorization),
        }
    }

    /// `q_{i+1} = A q_i + B u_i` on Euclidean spaces.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        let (d, m) = (a.nrows(), b.ncols());
        let (a2, b2) = (a.clone(), b.clone());
        // F(q, u) = q + ((A − I) q + B u), the fibre part being affine in u
        let (a_f, b_f) = (&a - DMatrix::identity(d, d), b.clone());
        let fac = Factorization {
            fibre_dim: d,
            f: Arc::new(move |q, u| &a_f * q.as_vector().unwrap() + &b_f * u.as_vector().unwrap()),
            e: Arc::new(|q, x| q.retract_vec(x)),
            fibre_derivative: Some(Arc::new(move |_, _| DMatrix::identity(d, d))),
            affine_in_u: true,
        };
        let mut stage = StageMap::new(ManifoldHandle::euclidean(d), ManifoldHandle::euclidean(m), move |q, u| {
            Point::euclidean(&a2 * q.as_vector().unwrap() + &b2 * u.as_vector().unwrap())
        })
        .with_jacobians(move |_, _| (a.clone(), b.clone()));
        stage.factorization = Some(fac);
        stage
    }

    /// `g_{i+1} = g_i u_i` on a group manifold; `D_qF = Ad(u⁻¹)`, `D_uF = I`.
    pub fn lie_multiplicative(group: ManifoldHandle) -> Self {
        let d = group.dim();
        StageMap::new(group.clone(), group, |g, u| g.compose(u))
            .with_jacobians(move |_, u| (u.inverse().ad_matrix(), DMatrix::identity(d, d)))
    }

    /// `q_{i+1} = retract(q_i, h·B·u_i)` with Euclidean controls. Control
    /// affine; the fibre derivative of the retraction is the right Jacobian.
    pub fn retraction_velocity(state: ManifoldHandle, b: DMatrix<f64>, h: f64) -> Self {
        let m = b.ncols();
        let hb = b * h;
        let hb_f = hb.clone();
        let fac = Factorization {
            fibre_dim: state.dim(),
            f: Arc::new(move |_, u| &hb_f * u.as_vector().unwrap()),
            e: Arc::new(|q, x| q.retract_vec(x)),
            fibre_derivative: Some(Arc::new(|q, x| right_jacobian(q.manifold(), x))),
            affine_in_u: true,
        };
        let st = state.clone();
        StageMap::factored(state, ManifoldHandle::euclidean(m), fac).with_jacobians(move |_, u| {
            let x = &hb * u.as_vector().unwrap();
            let step = st.identity().retract_vec(&x);
            (step.inverse().ad_matrix(), right_jacobian(&st, &x) * &hb)
        })
    }

    /// Forward-Euler step `q + h (A q + B u)` written in factored form with
    /// `E(q, x) = q + x`.
    pub fn euler_affine(a: DMatrix<f64>, b: DMatrix<f64>, h: f64) -> Self {
        let (d, m) = (a.nrows(), b.ncols());
        let (a_f, b_f) = (a.clone(), b.clone());
        let fac = Factorization {
            fibre_dim: d,
            f: Arc::new(move |q, u| (&a_f * q.as_vector().unwrap() + &b_f * u.as_vector().unwrap()) * h),
            e: Arc::new(|q, x| q.retract_vec(x)),
            fibre_derivative: Some(Arc::new(move |_, _| DMatrix::identity(d, d))),
            affine_in_u: true,
        };
        StageMap::factored(ManifoldHandle::euclidean(d), ManifoldHandle::euclidean(m), fac)
            .with_jacobians(move |_, _| (DMatrix::identity(d, d) + &a * h, &b * h))
    }

    pub fn state_manifold(&self) -> &ManifoldHandle {
        &self.state
    }

    pub fn control_manifold(&self) -> &ManifoldHandle {
        &self.control
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.jacobians.is_some()
    }

    pub fn factorization(&self) -> Option<&Factorization> {
        self.factorization.as_ref()
    }

    pub fn evaluate(&self, q: &Point, u: &Point) -> Point {
        (self.evaluate)(q, u)
    }

    /// `(D_qF, D_uF)`, analytic when available.
    pub fn jacobians(&self, q: &Point, u: &Point) -> (DMatrix<f64>, DMatrix<f64>) {
        match &self.jacobians {
            Some(j) => j(q, u),
            None => self.fd_jacobians(q, u),
        }
    }

    /// Central differences through retractions with step [`FD_STEP`].
    pub fn fd_jacobians(&self, q: &Point, u: &Point) -> (DMatrix<f64>, DMatrix<f64>) {
        let out = self.evaluate(q, u);
        let dq = self.state.dim();
        let du = self.control.dim();
        let mut jq = DMatrix::zeros(dq, dq);
        for k in 0..dq {
            let e = unit(dq, k) * FD_STEP;
            let plus = out.local_log(&self.evaluate(&q.retract_vec(&e), u));
            let minus = out.local_log(&self.evaluate(&q.retract_vec(&-e), u));
            jq.set_column(k, &((plus - minus) / (2.0 * FD_STEP)));
        }
        let mut ju = DMatrix::zeros(dq, du);
        for k in 0..du {
            let e = unit(du, k) * FD_STEP;
            let plus = out.local_log(&self.evaluate(q, &u.retract_vec(&e)));
            let minus = out.local_log(&self.evaluate(q, &u.retract_vec(&-e)));
            ju.set_column(k, &((plus - minus) / (2.0 * FD_STEP)));
        }
        (jq, ju)
    }

    /// Fibre derivative `𝔽E` at `f(q, u)`, as a `dim(Q) × fibre_dim` matrix.
    pub fn fibre_derivative(&self, q: &Point, u: &Point) -> Result<DMatrix<f64>> {
        let fac = self.factorization.as_ref().ok_or(Error::NotFactored)?;
        let x = (fac.f)(q, u);
        if let Some(fd) = &fac.fibre_derivative {
            return Ok(fd(q, &x));
        }
        let out = (fac.e)(q, &x);
        let mut m = DMatrix::zeros(self.state.dim(), fac.fibre_dim);
        for k in 0..fac.fibre_dim {
            let e = unit(fac.fibre_dim, k) * FD_STEP;
            let plus = out.local_log(&(fac.e)(q, &(&x + &e)));
            let minus = out.local_log(&(fac.e)(q, &(&x - &e)));
            m.set_column(k, &((plus - minus) / (2.0 * FD_STEP)));
        }
        Ok(m)
    }
}

/// Right Jacobian of the group exponential in trivialised coordinates
/// (identity on Euclidean factors).
pub fn right_jacobian(manifold: &ManifoldHandle, x: &DVector<f64>) -> DMatrix<f64> {
    let d = manifold.dim();
    match manifold.kind() {
        ManifoldKind::Euclidean(_) => DMatrix::identity(d, d),
        ManifoldKind::SO3 => {
            let jr = so3::right_jacobian(&Vector3::new(x[0], x[1], x[2]));
            DMatrix::from_fn(3, 3, |i, j| jr[(i, j)])
        }
        ManifoldKind::Product(fs) => {
            let mut out = DMatrix::zeros(d, d);
            let mut offset = 0;
            for m in fs {
                let k = m.dim();
                let block = right_jacobian(m, &x.rows(offset, k).into_owned());
                out.view_mut((offset, offset), (k, k)).copy_from(&block);
                offset += k;
            }
            out
        }
    }
}

pub(crate) fn unit(d: usize, k: usize) -> DVector<f64> {
    let mut e = DVector::zeros(d);
    e[k] = 1.0;
    e
}

/// Admissible control set `𝒰_i`. All variants are closed and convex.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlSetSpec {
    WholeManifold,
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    ConvexPolytope {
        a: DMatrix<f64>,
        b: DVector<f64>,
        witness: DVector<f64>,
    },
    Ball {
        center: DVector<f64>,
        radius: f64,
    },
}

impl ControlSetSpec {
    pub fn boxed(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                context: "box bounds",
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::Invalid("empty box: lower bound exceeds upper bound".into()));
        }
        Ok(Self::Box { lower, upper })
    }

    pub fn ball(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::Invalid("ball radius must be nonnegative".into()));
        }
        Ok(Self::Ball { center, radius })
    }

    /// Polytope `{u : A u ≤ b}` with a feasible witness checked on entry.
    pub fn polytope(a: DMatrix<f64>, b: DVector<f64>, witness: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() || a.ncols() != witness.len() {
            return Err(Error::DimensionMismatch {
                context: "polytope",
                expected: a.nrows(),
                found: b.len(),
            });
        }
        let set = Self::ConvexPolytope { a, b, witness };
        let w = set.witness(0);
        if set.violation(&w) > FEASIBILITY_TOL {
            return Err(Error::Invalid("polytope witness is infeasible".into()));
        }
        Ok(set)
    }

    /// Polytope whose witness is found by a feasibility linear program.
    pub fn polytope_auto(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        use microlp::{ComparisonOp, OptimizationDirection, Problem};
        let mut lp = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<_> = (0..a.ncols())
            .map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
            .collect();
        for i in 0..a.nrows() {
            let row: Vec<_> = vars.iter().enumerate().map(|(j, v)| (*v, a[(i, j)])).collect();
            lp.add_constraint(&row, ComparisonOp::Le, b[i]);
        }
        let sol = lp.solve().map_err(|_| Error::Invalid("polytope is empty".into()))?;
        let witness = DVector::from_iterator(vars.len(), vars.iter().map(|v| sol[*v]));
        Self::polytope(a, b, witness)
    }

    /// Dimension the set lives in, `None` for the whole manifold.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::WholeManifold => None,
            Self::Box { lower, .. } => Some(lower.len()),
            Self::ConvexPolytope { a, .. } => Some(a.ncols()),
            Self::Ball { center, .. } => Some(center.len()),
        }
    }

    /// A point of the set (the origin for the whole manifold).
    pub fn witness(&self, dim: usize) -> DVector<f64> {
        match self {
            Self::WholeManifold => DVector::zeros(dim),
            Self::Box { lower, upper } => DVector::from_iterator(
                lower.len(),
                lower.iter().zip(upper.iter()).map(|(l, u)| {
                    if *l <= 0.0 && 0.0 <= *u {
                        0.0
                    } else if l.is_finite() && u.is_finite() {
                        0.5 * (l + u)
                    } else if l.is_finite() {
                        *l
                    } else {
                        *u
                    }
                }),
            ),
            Self::ConvexPolytope { witness, .. } => witness.clone(),
            Self::Ball { center, .. } => center.clone(),
        }
    }

    /// Largest constraint violation of `u` (zero when feasible).
    pub fn violation(&self, u: &DVector<f64>) -> f64 {
        match self {
            Self::WholeManifold => 0.0,
            Self::Box { lower, upper } => (0..u.len())
                .map(|k| (lower[k] - u[k]).max(u[k] - upper[k]).max(0.0))
                .fold(0.0, f64::max),
            Self::ConvexPolytope { a, b, .. } => {
                let r = a * u - b;
                (0..r.len())
                    .map(|i| r[i] / a.row(i).norm().max(1e-300))
                    .fold(0.0, f64::max)
            }
            Self::Ball { center, radius } => ((u - center).norm() - radius).max(0.0),
        }
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        self.violation(u) <= FEASIBILITY_TOL
    }

    /// Euclidean projection of a point onto the set.
    pub fn project_point(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(match self {
            Self::WholeManifold => y.clone(),
            Self::Box { lower, upper } => {
                DVector::from_iterator(y.len(), (0..y.len()).map(|k| y[k].clamp(lower[k], upper[k])))
            }
            Self::ConvexPolytope { a, b, witness } => linalg::project_polyhedron(a, b, y, witness)?,
            Self::Ball { center, radius } => {
                let d = y - center;
                let r = d.norm();
                if r <= *radius {
                    y.clone()
                } else {
                    center + d * (radius / r)
                }
            }
        })
    }

    /// Columns generating the normal cone at `u` (outward normals of the
    /// active constraints). Empty for interior points.
    pub fn active_normals(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let n = u.len();
        let mut cols: Vec<DVector<f64>> = Vec::new();
        match self {
            Self::WholeManifold => {}
            Self::Box { lower, upper } => {
                for k in 0..n {
                    if upper[k] - u[k] <= FEASIBILITY_TOL {
                        cols.push(unit(n, k));
                    }
                    if u[k] - lower[k] <= FEASIBILITY_TOL {
                        cols.push(-unit(n, k));
                    }
                }
            }
            Self::ConvexPolytope { a, b, .. } => {
                for i in 0..a.nrows() {
                    let norm = a.row(i).norm().max(1e-300);
                    if (b[i] - a.row(i).dot(&u.transpose())) / norm <= FEASIBILITY_TOL {
                        cols.push(a.row(i).transpose() / norm);
                    }
                }
            }
            Self::Ball { center, radius } => {
                let d = u - center;
                if radius - d.norm() <= FEASIBILITY_TOL {
                    let nrm = d.norm();
                    if nrm > 0.0 {
                        cols.push(d / nrm);
                    } else {
                        // zero-radius ball: normal cone is everything
                        for k in 0..n {
                            cols.push(unit(n, k));
                            cols.push(-unit(n, k));
                        }
                    }
                }
            }
        }
        if cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&cols)
        }
    }

    /// Euclidean projection of `w` onto the tangent cone at the feasible
    /// point `u`. The cone is `{v : Nᵀ v ≤ 0}` for the active normals `N`.
    pub fn project_tangent(&self, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        let violation = self.violation(u);
        if violation > FEASIBILITY_TOL {
            return Err(Error::Infeasible { stage: 0, violation });
        }
        let normals = self.active_normals(u);
        if normals.ncols() == 0 {
            return Ok(w.clone());
        }
        match self {
            Self::Box { .. } => {
                // componentwise: each active bound is a half-line or a point
                let mut out = w.clone();
                for c in 0..normals.ncols() {
                    let col = normals.column(c);
                    let k = (0..col.len()).find(|&k| col[k] != 0.0).unwrap();
                    if col[k] * out[k] > 0.0 {
                        out[k] = 0.0;
                    }
                }
                Ok(out)
            }
            _ => {
                // Moreau: w = P_T(w) + P_N(w), with N = cone(normals)
                let lam = linalg::nnls(&normals, w);
                Ok(w - &normals * lam)
            }
        }
    }
}

/// Checked form: projects a tangent at `u` onto `T^C_𝒰(u)`.
pub fn tangent_cone_project(set: &ControlSetSpec, u: &Point, w: &Tangent) -> Result<Tangent> {
    u.manifold().check_same(w.manifold())?;
    match (set, u.as_vector()) {
        (ControlSetSpec::WholeManifold, _) => Ok(w.clone()),
        (_, Some(uv)) => Tangent::new(u.clone(), set.project_tangent(uv, w.vec())?),
        (_, None) => Err(Error::Invalid("convex control sets require a Euclidean control manifold".into())),
    }
}

#[derive(Clone, Debug)]
pub struct ControlSystem {
    state: ManifoldHandle,
    stages: Vec<StageMap>,
    control_sets: Vec<ControlSetSpec>,
}

impl ControlSystem {
    pub fn new(state: ManifoldHandle, stages: Vec<StageMap>, control_sets: Vec<ControlSetSpec>) -> Result<Self> {
        if stages.len() != control_sets.len() {
            return Err(Error::DimensionMismatch {
                context: "control sets per stage",
                expected: stages.len(),
                found: control_sets.len(),
            });
        }
        for (stage, set) in stages.iter().zip(&control_sets) {
            state.check_same(stage.state_manifold())?;
            if let Some(d) = set.dim() {
                let cm = stage.control_manifold();
                if !cm.is_euclidean() {
                    return Err(Error::Invalid(format!(
                        "only the whole manifold is supported as a control set on {cm}"
                    )));
                }
                if cm.dim() != d {
                    return Err(Error::DimensionMismatch {
                        context: "control set",
                        expected: cm.dim(),
                        found: d,
                    });
                }
            }
        }
        Ok(Self {
            state,
            stages,
            control_sets,
        })
    }

    /// Same stage map and control set at every stage.
    pub fn uniform(stage: StageMap, set: ControlSetSpec, horizon: usize) -> Result<Self> {
        let state = stage.state_manifold().clone();
        Self::new(state, vec![stage; horizon], vec![set; horizon])
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn state_manifold(&self) -> &ManifoldHandle {
        &self.state
    }

    pub fn stage(&self, i: usize) -> &StageMap {
        &self.stages[i]
    }

    pub fn stages(&self) -> &[StageMap] {
        &self.stages
    }

    pub fn control_set(&self, i: usize) -> &ControlSetSpec {
        &self.control_sets[i]
    }

    pub fn control_sets(&self) -> &[ControlSetSpec] {
        &self.control_sets
    }

    /// Checks manifolds and control-set membership of a control sequence.
    pub fn check_controls(&self, controls: &[Point]) -> Result<()> {
        if controls.len() != self.horizon() {
            return Err(Error::DimensionMismatch {
                context: "control sequence",
                expected: self.horizon(),
                found: controls.len(),
            });
        }
        for (i, u) in controls.iter().enumerate() {
            self.stages[i].control_manifold().check_same(u.manifold())?;
            if let Some(v) = u.as_vector() {
                let violation = self.control_sets[i].violation(v);
                if violation > FEASIBILITY_TOL {
                    return Err(Error::Infeasible { stage: i, violation });
                }
            }
        }
        Ok(())
    }

    /// Default initial guess: the control-set witness (or identity) per stage.
    pub fn default_controls(&self) -> Vec<Point> {
        self.stages
            .iter()
            .zip(&self.control_sets)
            .map(|(s, set)| {
                let m = s.control_manifold();
                if m.is_euclidean() {
                    Point::euclidean(set.witness(m.dim()))
                } else {
                    m.identity()
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Point>,
    pub controls: Vec<Point>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn initial_state(&self) -> &Point {
        &self.states[0]
    }

    pub fn final_state(&self) -> &Point {
        self.states.last().expect("nonempty trajectory")
    }
}

/// Rolls out `q_{i+1} = F_i(q_i, u_i)`. Control-set membership is not
/// required here; use [`ControlSystem::check_controls`] for that.
pub fn rollout(sys: &ControlSystem, q0: &Point, controls: &[Point]) -> Result<Trajectory> {
    sys.state.check_same(q0.manifold())?;
    if controls.len() != sys.horizon() {
        return Err(Error::DimensionMismatch {
            context: "control sequence",
            expected: sys.horizon(),
            found: controls.len(),
        });
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(q0.clone());
    for (i, u) in controls.iter().enumerate() {
        let stage = &sys.stages[i];
        stage.control_manifold().check_same(u.manifold())?;
        let next = stage.evaluate(&states[i], u);
        sys.state.check_same(next.manifold())?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        controls: controls.to_vec(),
    })
}

/// Checks that every state is reproduced by the dynamics to [`TRAJECTORY_TOL`].
pub fn validate_trajectory(sys: &ControlSystem, traj: &Trajectory) -> Result<()> {
    if traj.controls.len() != sys.horizon() || traj.states.len() != sys.horizon() + 1 {
        return Err(Error::DimensionMismatch {
            context: "trajectory length",
            expected: sys.horizon() + 1,
            found: traj.states.len(),
        });
    }
    for i in 1..traj.states.len() {
        let predicted = sys.stages[i - 1].evaluate(&traj.states[i - 1], &traj.controls[i - 1]);
        let residual = predicted.coord_distance(&traj.states[i]);
        if !(residual <= TRAJECTORY_TOL) {
            return Err(Error::InvalidTrajectory { index: i, residual });
        }
    }
    Ok(())
}

/// Stage Jacobians `(D_qF_i, D_uF_i)` along a trajectory.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub dq: Vec<DMatrix<f64>>,
    pub du: Vec<DMatrix<f64>>,
}

pub fn linearize(sys: &ControlSystem, traj: &Trajectory) -> Linearization {
    let (dq, du) = (0..sys.horizon())
        .map(|i| sys.stages[i].jacobians(&traj.states[i], &traj.controls[i]))
        .unzip();
    Linearization { dq, du }
}

impl Linearization {
    /// `ℱ_{i,j} = D_qF_{j-1} ⋯ D_qF_i`, identity when `i == j`.
    pub fn transition(&self, i: usize, j: usize) -> DMatrix<f64> {
        let d = self.dq.first().map(|m| m.nrows()).unwrap_or(0);
        let mut out = DMatrix::identity(d, d);
        for k in i..j {
            out = &self.dq[k] * out;
        }
        out
    }
}

/// Transition Jacobian `ℱ_{i,j}` between tangent coordinates at `q_i` and `q_j`.
pub fn transition_jacobian(sys: &ControlSystem, traj: &Trajectory, i: usize, j: usize) -> Result<DMatrix<f64>> {
    let n = sys.horizon();
    if j > n {
        return Err(Error::IndexOutOfRange { index: j, max: n });
    }
    if i > j {
        return Err(Error::IndexOutOfRange { index: i, max: j });
    }
    let d = sys.state.dim();
    let mut out = DMatrix::identity(d, d);
    for k in i..j {
        let (dq, _) = sys.stages[k].jacobians(&traj.states[k], &traj.controls[k]);
        out = dq * out;
    }
    Ok(out)
}

/// Forward sensitivity `q_j'(0) = Σ_{i<j} ℱ_{i+1,j} D_uF_i v_i` for
/// `j = 1..n`, computed by the one-step recursion
/// `q_j' = D_qF_{j-1} q_{j-1}' + D_uF_{j-1} v_{j-1}`.
pub fn forward_variation(sys: &ControlSystem, traj: &Trajectory, v: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    if v.len() != sys.horizon() {
        return Err(Error::DimensionMismatch {
            context: "control variation",
            expected: sys.horizon(),
            found: v.len(),
        });
    }
    let lin = linearize(sys, traj);
    forward_variation_with(&lin, v)
}

pub fn forward_variation_with(lin: &Linearization, v: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let d = lin.dq.first().map(|m| m.nrows()).unwrap_or(0);
    let mut current = DVector::zeros(d);
    let mut out = Vec::with_capacity(v.len());
    for (i, vi) in v.iter().enumerate() {
        if vi.len() != lin.du[i].ncols() {
            return Err(Error::DimensionMismatch {
                context: "control variation",
                expected: lin.du[i].ncols(),
                found: vi.len(),
            });
        }
        current = &lin.dq[i] * current + &lin.du[i] * vi;
        out.push(current.clone());
    }
    Ok(out)
}

/// `𝔽E* p`: pulls a covector at `F(q, u)` back to the fibre over `q`.
pub fn fibre_derivative_pullback(stage: &StageMap, q: &Point, u: &Point, p: &Cotangent) -> Result<DVector<f64>> {
    let fe = stage.fibre_derivative(q, u)?;
    stage.state_manifold().check_same(p.manifold())?;
    Ok(fe.transpose() * p.covec())
}
