//! Problem-file schema and the builtin registry.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

use super::{expect, CliError, CliResult};
use crate::adjoint::CostSpec;
use crate::constraints::{Constraint, ConstraintKind, ConstraintSet, Location};
use crate::liegroup::{self, GroupFunction, LieGroupProblem};
use crate::manifold::{ManifoldHandle, Point};
use crate::solver::SolveOptions;
use crate::system::{ControlSetSpec, ControlSystem, StageMap, Trajectory};

type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub manifold: ManifoldFile,
    #[serde(default)]
    pub horizon: Option<usize>,
    /// Flattened coordinates (row-major 3×3 on SO(3)).
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
    #[serde(default)]
    pub dynamics: Option<Builtin>,
    #[serde(default)]
    pub cost: Option<Builtin>,
    /// Empty: whole manifold; one entry: every stage; otherwise one per stage.
    #[serde(default)]
    pub control_sets: Vec<ControlSetFile>,
    #[serde(default)]
    pub constraints: Vec<ConstraintFile>,
    #[serde(default)]
    pub integrator: Option<IntegratorFile>,
    #[serde(default)]
    pub solver: Option<SolverFile>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldFile {
    pub kind: String,
    #[serde(default)]
    pub dim: Option<usize>,
}

/// `{ "builtin": name, "params": {...} }`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Builtin {
    pub builtin: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ControlSetFile {
    Whole,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    Polytope { a: Matrix, b: Vec<f64> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum StageRef {
    Stage(usize),
    Named(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintFile {
    pub stage: StageRef,
    pub kind: ConstraintKind,
    pub builtin: String,
    #[serde(default)]
    pub params: Value,
    /// Perturbation `e` of this constraint.
    #[serde(default)]
    pub rhs: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorFile {
    #[serde(rename = "J_d")]
    pub jd: Matrix,
    pub h: f64,
    #[serde(default)]
    pub potential: Option<Builtin>,
    /// Row-major; identity when absent.
    #[serde(default)]
    pub initial_attitude: Option<Vec<f64>>,
    pub initial_momentum: Vec<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverFile {
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub c1: Option<f64>,
    pub backtrack: Option<f64>,
    pub initial_step: Option<f64>,
    pub max_backtracks: Option<usize>,
    pub kappa0: Option<f64>,
    pub growth: Option<f64>,
    pub max_rounds: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearDynamics {
    #[serde(rename = "A")]
    a: Matrix,
    #[serde(rename = "B")]
    b: Matrix,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactoredDynamics {
    /// `velocity`: `retract(q, h B u)`; `euler_affine`: `q + h (A q + B u)`.
    f: String,
    #[serde(rename = "A", default)]
    a: Option<Matrix>,
    #[serde(rename = "B")]
    b: Matrix,
    h: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadraticCost {
    #[serde(rename = "Q")]
    q: Matrix,
    #[serde(rename = "R")]
    r: Matrix,
    #[serde(rename = "Qf")]
    qf: Matrix,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttitudeCost {
    target: Vec<f64>,
    weight: f64,
    effort: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearTerminalCost {
    c: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlEffortCost {
    target: Vec<f64>,
    #[serde(default = "one")]
    weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearConstraint {
    #[serde(default)]
    cq: Vec<f64>,
    #[serde(default)]
    cu: Vec<f64>,
    #[serde(default)]
    d: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SphereConstraint {
    center: Vec<f64>,
    radius: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeavyTop {
    weight: f64,
    z: Vec<f64>,
    rho: Vec<f64>,
}

/// The variational-integrator section, built.
#[derive(Clone, Debug)]
pub struct Integrator {
    pub problem: LieGroupProblem,
    pub g0: Point,
    pub p0: DVector<f64>,
}

/// A parsed and validated problem.
#[derive(Clone)]
pub struct Built {
    pub manifold: ManifoldHandle,
    pub system: Option<ControlSystem>,
    pub cost: Option<CostSpec>,
    pub initial_state: Option<Point>,
    /// `None` when the file lists no constraints; the perturbation vector
    /// holds the `rhs` entries.
    pub constraints: Option<ConstraintSet>,
    pub solver: SolveOptions,
    pub integrator: Option<Integrator>,
    /// The cost is the action sum of the integrator section.
    action_sum: bool,
}

impl Built {
    pub fn system(&self) -> CliResult<&ControlSystem> {
        expect(self.system.as_ref(), "dynamics")
    }

    pub fn cost(&self) -> CliResult<&CostSpec> {
        expect(self.cost.as_ref(), "cost")
    }

    pub fn initial_state(&self) -> CliResult<&Point> {
        expect(self.initial_state.as_ref(), "initial_state")
    }

    pub fn integrator(&self) -> CliResult<&Integrator> {
        expect(self.integrator.as_ref(), "integrator")
    }

    /// The cost used to check a trajectory. An action sum is anchored at the
    /// trajectory's end with the momentum of its last control, so that
    /// integrator output is critical.
    pub fn check_cost(&self, traj: &Trajectory) -> CliResult<CostSpec> {
        if !self.action_sum {
            return Ok(self.cost()?.clone());
        }
        let integ = self.integrator()?;
        let n = traj.horizon();
        let terminal = if n == 0 {
            None
        } else {
            let (_, pn) = integ.problem.lagrangian_gradient(&traj.states[n - 1], &traj.controls[n - 1]);
            Some((traj.states[n].clone(), pn))
        };
        Ok(liegroup::action_sum(&integ.problem, n, terminal)?.1)
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn params<T: DeserializeOwned>(what: &str, v: &Value) -> CliResult<T> {
    let v = if v.is_null() { Value::Object(Default::default()) } else { v.clone() };
    serde_json::from_value(v).map_err(|e| invalid(format!("{what} params: {e}")))
}

fn matrix(what: &str, rows: &Matrix, shape: (Option<usize>, Option<usize>)) -> CliResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(invalid(format!("{what}: rows have different lengths")));
    }
    if shape.0.is_some_and(|e| e != r) || shape.1.is_some_and(|e| e != c) {
        return Err(invalid(format!(
            "{what}: expected {}×{}, found {r}×{c}",
            shape.0.map_or("?".into(), |x| x.to_string()),
            shape.1.map_or("?".into(), |x| x.to_string())
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    finite(what, &flat)?;
    Ok(DMatrix::from_row_slice(r, c, &flat))
}

fn vector(what: &str, v: &[f64], len: Option<usize>) -> CliResult<DVector<f64>> {
    if let Some(l) = len {
        if v.len() != l {
            return Err(invalid(format!("{what}: expected length {l}, found {}", v.len())));
        }
    }
    finite(what, v)?;
    Ok(DVector::from_column_slice(v))
}

fn finite(what: &str, v: &[f64]) -> CliResult<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid(format!("{what}: entries must be finite")));
    }
    Ok(())
}

fn rotation(what: &str, v: &[f64]) -> CliResult<Matrix3<f64>> {
    let m = vector(what, v, Some(9))?;
    let r = Matrix3::from_row_slice(m.as_slice());
    Point::rotation(r).map_err(|e| invalid(format!("{what}: {e}")))?;
    Ok(r)
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("problem file: {e}"))
    }

    pub fn build(&self) -> CliResult<Built> {
        let manifold = match (self.manifold.kind.as_str(), self.manifold.dim) {
            ("euclidean", Some(d)) if d > 0 => ManifoldHandle::euclidean(d),
            ("euclidean", _) => return Err(invalid("euclidean manifold needs a positive dim")),
            ("so3", None | Some(3)) => ManifoldHandle::so3(),
            ("so3", Some(d)) => return Err(invalid(format!("so3 has dimension 3, not {d}"))),
            (k, _) => return Err(invalid(format!("unknown manifold kind {k:?} (euclidean | so3)"))),
        };
        let d = manifold.dim();
        let integrator = self.integrator.as_ref().map(|i| self.build_integrator(&manifold, i)).transpose()?;
        let initial_state = self
            .initial_state
            .as_ref()
            .map(|c| manifold.point_from_coords(c).map_err(|e| invalid(format!("initial_state: {e}"))))
            .transpose()?;

        let system = match &self.dynamics {
            None => None,
            Some(dy) => {
                let n = self.horizon.ok_or_else(|| invalid("dynamics given without a horizon"))?;
                let stage = self.build_stage(&manifold, dy)?;
                let m = stage.control_manifold().dim();
                let sets = self.build_control_sets(n, m, stage.control_manifold().is_euclidean())?;
                Some(ControlSystem::new(manifold.clone(), vec![stage; n], sets)?)
            }
        };

        let mut action_sum = false;
        let cost = match &self.cost {
            None => None,
            Some(c) => Some(match c.builtin.as_str() {
                "quadratic" => {
                    let p: QuadraticCost = params("quadratic cost", &c.params)?;
                    let m = control_dim(system.as_ref())?;
                    CostSpec::quadratic(
                        matrix("Q", &p.q, (Some(d), Some(d)))?,
                        matrix("R", &p.r, (Some(m), Some(m)))?,
                        matrix("Qf", &p.qf, (Some(d), Some(d)))?,
                    )
                }
                "attitude" => {
                    let p: AttitudeCost = params("attitude cost", &c.params)?;
                    if !matches!(manifold.kind(), crate::manifold::ManifoldKind::SO3) {
                        return Err(invalid("attitude cost needs an so3 manifold"));
                    }
                    CostSpec::attitude(rotation("target", &p.target)?, p.weight, p.effort)
                }
                "linear_terminal" => {
                    let p: LinearTerminalCost = params("linear_terminal cost", &c.params)?;
                    CostSpec::linear_terminal(vector("c", &p.c, Some(d))?)
                }
                "control_effort" => {
                    // ½ w ‖u − target‖², no state cost
                    let p: ControlEffortCost = params("control_effort cost", &c.params)?;
                    let m = control_dim(system.as_ref())?;
                    let t = vector("target", &p.target, Some(m))?;
                    let (t2, w) = (t.clone(), p.weight);
                    CostSpec::new(|_| 0.0, move |_, _, u| 0.5 * w * (u.as_vector().unwrap() - &t).norm_squared())
                        .with_terminal_grad(move |q| DVector::zeros(q.manifold().dim()))
                        .with_running_grad(move |_, q, u| (DVector::zeros(q.manifold().dim()), (u.as_vector().unwrap() - &t2) * w))
                }
                "action_sum" => {
                    let integ = integrator.as_ref().ok_or_else(|| invalid("action_sum cost needs an integrator section"))?;
                    let n = self.horizon.ok_or_else(|| invalid("action_sum cost needs a horizon"))?;
                    action_sum = true;
                    liegroup::action_sum(&integ.problem, n, None)?.1
                }
                other => {
                    return Err(invalid(format!(
                        "unknown cost builtin {other:?} (quadratic | attitude | linear_terminal | control_effort | action_sum)"
                    )))
                }
            }),
        };

        let constraints = if self.constraints.is_empty() {
            None
        } else {
            let sys = system.as_ref().ok_or_else(|| invalid("constraints given without dynamics"))?;
            let mut set = ConstraintSet::new(sys);
            let mut rhs = Vec::new();
            for (k, c) in self.constraints.iter().enumerate() {
                set.push(self.build_constraint(k, c, sys)?)
                    .map_err(|e| invalid(format!("constraint {k}: {e}")))?;
                rhs.push(c.rhs);
            }
            finite("constraint rhs", &rhs)?;
            Some(set.with_perturbation(DVector::from_vec(rhs))?)
        };

        let solver = self.build_solver()?;
        Ok(Built {
            manifold,
            system,
            cost,
            initial_state,
            constraints,
            solver,
            integrator,
            action_sum,
        })
    }

    fn build_stage(&self, manifold: &ManifoldHandle, dy: &Builtin) -> CliResult<StageMap> {
        let d = manifold.dim();
        match dy.builtin.as_str() {
            "linear" => {
                if !manifold.is_euclidean() {
                    return Err(invalid("linear dynamics need a euclidean manifold"));
                }
                let p: LinearDynamics = params("linear dynamics", &dy.params)?;
                let a = matrix("A", &p.a, (Some(d), Some(d)))?;
                let b = matrix("B", &p.b, (Some(d), None))?;
                Ok(StageMap::linear(a, b))
            }
            "lie_multiplicative" => {
                if !dy.params.is_null() && dy.params != Value::Object(Default::default()) {
                    return Err(invalid("lie_multiplicative takes no params"));
                }
                Ok(StageMap::lie_multiplicative(manifold.clone()))
            }
            "factored_retraction" => {
                let p: FactoredDynamics = params("factored_retraction dynamics", &dy.params)?;
                if !(p.h > 0.0 && p.h.is_finite()) {
                    return Err(invalid("factored_retraction: h must be positive"));
                }
                let b = matrix("B", &p.b, (Some(d), None))?;
                match (p.f.as_str(), &p.a) {
                    ("velocity", None) => Ok(StageMap::retraction_velocity(manifold.clone(), b, p.h)),
                    ("euler_affine", Some(a)) if manifold.is_euclidean() => {
                        Ok(StageMap::euler_affine(matrix("A", a, (Some(d), Some(d)))?, b, p.h))
                    }
                    ("euler_affine", _) => Err(invalid("euler_affine needs A and a euclidean manifold")),
                    ("velocity", Some(_)) => Err(invalid("velocity fibre map takes no A")),
                    (f, _) => Err(invalid(format!("unknown fibre map {f:?} (velocity | euler_affine)"))),
                }
            }
            other => Err(invalid(format!(
                "unknown dynamics builtin {other:?} (linear | lie_multiplicative | factored_retraction)"
            ))),
        }
    }

    fn build_control_sets(&self, n: usize, m: usize, euclidean: bool) -> CliResult<Vec<ControlSetSpec>> {
        let one = |k: usize, c: &ControlSetFile| -> CliResult<ControlSetSpec> {
            let what = format!("control_sets[{k}]");
            if !euclidean && !matches!(c, ControlSetFile::Whole) {
                return Err(invalid(format!("{what}: only whole is allowed on a non-euclidean control manifold")));
            }
            let set = match c {
                ControlSetFile::Whole => ControlSetSpec::WholeManifold,
                ControlSetFile::Box { lower, upper } => {
                    ControlSetSpec::boxed(vector(&what, lower, Some(m))?, vector(&what, upper, Some(m))?)?
                }
                ControlSetFile::Ball { center, radius } => ControlSetSpec::ball(vector(&what, center, Some(m))?, *radius)?,
                ControlSetFile::Polytope { a, b } => {
                    let a = matrix(&what, a, (None, Some(m)))?;
                    let b = vector(&what, b, Some(a.nrows()))?;
                    ControlSetSpec::polytope_auto(a, b)?
                }
            };
            Ok(set)
        };
        match self.control_sets.len() {
            0 => Ok(vec![ControlSetSpec::WholeManifold; n]),
            1 => Ok(vec![one(0, &self.control_sets[0])?; n]),
            l if l == n => self.control_sets.iter().enumerate().map(|(k, c)| one(k, c)).collect(),
            l => Err(invalid(format!("control_sets has {l} entries; expected 0, 1 or the horizon {n}"))),
        }
    }

    fn build_constraint(&self, k: usize, c: &ConstraintFile, sys: &ControlSystem) -> CliResult<Constraint> {
        let what = format!("constraint {k}");
        let loc = match &c.stage {
            StageRef::Stage(i) => Location::Stage(*i),
            StageRef::Named(s) if s == "end" => Location::Endpoint,
            StageRef::Named(s) => return Err(invalid(format!("{what}: stage must be an index or \"end\", got {s:?}"))),
        };
        if !sys.state_manifold().is_euclidean() {
            return Err(invalid(format!("{what}: builtin constraints need a euclidean state manifold")));
        }
        let d = sys.state_manifold().dim();
        match c.builtin.as_str() {
            "linear" => {
                let p: LinearConstraint = params(&what, &c.params)?;
                let cu_len = match loc {
                    Location::Endpoint => 0,
                    Location::Stage(i) if i < sys.horizon() => sys.stage(i).control_manifold().dim(),
                    Location::Stage(i) => return Err(invalid(format!("{what}: stage {i} beyond horizon {}", sys.horizon()))),
                };
                let cq = if p.cq.is_empty() { DVector::zeros(d) } else { vector("cq", &p.cq, Some(d))? };
                let cu = if p.cu.is_empty() { DVector::zeros(cu_len) } else { vector("cu", &p.cu, Some(cu_len))? };
                Ok(Constraint::linear(loc, c.kind, cq, cu, p.d))
            }
            "sphere" => {
                let p: SphereConstraint = params(&what, &c.params)?;
                if c.kind != ConstraintKind::Inequality {
                    return Err(invalid(format!("{what}: sphere is an inequality constraint")));
                }
                Ok(Constraint::sphere(loc, vector("center", &p.center, Some(d))?, p.radius))
            }
            other => Err(invalid(format!("{what}: unknown builtin {other:?} (linear | sphere)"))),
        }
    }

    fn build_integrator(&self, manifold: &ManifoldHandle, i: &IntegratorFile) -> CliResult<Integrator> {
        if !matches!(manifold.kind(), crate::manifold::ManifoldKind::SO3) {
            return Err(invalid("integrator section needs an so3 manifold"));
        }
        let jd = matrix("J_d", &i.jd, (Some(3), Some(3)))?;
        let jd = Matrix3::from_iterator(jd.iter().copied());
        let potential = match &i.potential {
            None => GroupFunction::zero(),
            Some(p) => match p.builtin.as_str() {
                "none" => GroupFunction::zero(),
                "heavy_top" => {
                    let h: HeavyTop = params("heavy_top potential", &p.params)?;
                    let z = vector("z", &h.z, Some(3))?;
                    let rho = vector("rho", &h.rho, Some(3))?;
                    liegroup::heavy_top_potential(h.weight, Vector3::from_column_slice(z.as_slice()), Vector3::from_column_slice(rho.as_slice()))
                }
                other => return Err(invalid(format!("unknown potential {other:?} (none | heavy_top)"))),
            },
        };
        let problem = LieGroupProblem::rigid_body(jd, i.h, potential)?;
        let g0 = match &i.initial_attitude {
            None => manifold.identity(),
            Some(r) => Point::rotation(rotation("initial_attitude", r)?)?,
        };
        Ok(Integrator {
            problem,
            g0,
            p0: vector("initial_momentum", &i.initial_momentum, Some(3))?,
        })
    }

    fn build_solver(&self) -> CliResult<SolveOptions> {
        let mut o = SolveOptions::default();
        if let Some(s) = &self.solver {
            o.max_iters = s.max_iters.unwrap_or(o.max_iters);
            o.tol = s.tol.unwrap_or(o.tol);
            o.c1 = s.c1.unwrap_or(o.c1);
            o.backtrack = s.backtrack.unwrap_or(o.backtrack);
            o.initial_step = s.initial_step.unwrap_or(o.initial_step);
            o.max_backtracks = s.max_backtracks.unwrap_or(o.max_backtracks);
            o.kappa0 = s.kappa0.unwrap_or(o.kappa0);
            o.growth = s.growth.unwrap_or(o.growth);
            o.max_rounds = s.max_rounds.unwrap_or(o.max_rounds);
            o.seed = s.seed.unwrap_or(o.seed);
        }
        o.validate()?;
        Ok(o)
    }
}

fn control_dim(sys: Option<&ControlSystem>) -> CliResult<usize> {
    let sys = sys.ok_or_else(|| invalid("this cost needs a dynamics section"))?;
    Ok(sys.stage(0).control_manifold().dim())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LQR: &str = r#"{
        "manifold": {"kind": "euclidean", "dim": 2},
        "horizon": 3,
        "initial_state": [1.0, 0.0],
        "dynamics": {"builtin": "linear", "params": {"A": [[1, 0.1], [0, 1]], "B": [[0], [0.1]]}},
        "cost": {"builtin": "quadratic", "params": {"Q": [[1, 0], [0, 1]], "R": [[1]], "Qf": [[1, 0], [0, 1]]}},
        "constraints": [{"stage": "end", "kind": "eq", "builtin": "linear", "params": {"cq": [1, 0], "d": 0.5}, "rhs": 0.1}]
    }"#;

    #[test]
    fn parses_and_builds() {
        let b = ProblemFile::parse(LQR).unwrap().build().unwrap();
        assert_eq!(b.system().unwrap().horizon(), 3);
        let cons = b.constraints.as_ref().unwrap();
        assert_eq!(cons.len(), 1);
        assert_eq!(cons.perturbation()[0], 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = LQR.replacen("\"horizon\"", "\"horizn\"", 1);
        assert!(ProblemFile::parse(&bad).unwrap_err().contains("horizn"));
        let bad = LQR.replacen("\"d\": 0.5", "\"dd\": 0.5", 1);
        let err = ProblemFile::parse(&bad).unwrap().build().err().unwrap();
        assert!(err.to_string().contains("dd"), "{err}");
    }

    #[test]
    fn dimensions_are_checked() {
        let bad = LQR.replacen("[[1, 0.1], [0, 1]]", "[[1, 0.1, 0], [0, 1, 0]]", 1);
        let err = ProblemFile::parse(&bad).unwrap().build().err().unwrap();
        assert!(err.to_string().contains("expected 2×2"), "{err}");
        let bad = LQR.replacen("\"R\": [[1]]", "\"R\": [[1, 0], [0, 1]]", 1);
        assert!(ProblemFile::parse(&bad).unwrap().build().is_err());
        let bad = LQR.replacen("\"stage\": \"end\"", "\"stage\": 7", 1);
        assert!(ProblemFile::parse(&bad).unwrap().build().is_err());
    }

    #[test]
    fn so3_problems() {
        let text = r#"{
            "manifold": {"kind": "so3"},
            "integrator": {"J_d": [[1,0,0],[0,2,0],[0,0,3]], "h": 0.01, "initial_momentum": [0.1, 0.2, 0.3],
                           "potential": {"builtin": "heavy_top", "params": {"weight": 1.0, "z": [0,0,1], "rho": [0,0,0.1]}}}
        }"#;
        let b = ProblemFile::parse(text).unwrap().build().unwrap();
        assert!(b.integrator().is_ok());
        assert!(b.system().is_err());
        let bad = text.replacen("[[1,0,0],[0,2,0],[0,0,3]]", "[[1,0,0],[0,-2,0],[0,0,3]]", 1);
        assert!(ProblemFile::parse(&bad).unwrap().build().is_err());
    }
}
