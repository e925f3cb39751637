//! Independent reference computations used to audit the rest of the crate:
//! finite differences along retractions, one-sided Dini estimates,
//! brute-force distances to feasible sets and the Riccati LQR solution.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::CostSpec;
use crate::error::{Error, Result};
use crate::liegroup::{self, GroupFunction, LieGroupProblem};
use crate::manifold::{so3, ManifoldHandle, Point};
use crate::system::{unit, StageMap};

/// Default step for first-derivative central differences.
pub const FD_STEP: f64 = 1e-6;
/// Step for second-difference diagnostics.
pub const FD_STEP_COARSE: f64 = 1e-4;

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct FdGradient {
    pub gradient: DVector<f64>,
    /// `‖g(h) − g(h/2)‖ / 3`, the Richardson estimate of the error of `g(h/2)`.
    pub error_estimate: f64,
    /// `‖g(h) − g(h/2)‖ / ‖g(h/2) − g(h/4)‖`; ≈ 4 in the truncation regime.
    pub richardson_ratio: f64,
}

fn central(f: &impl Fn(&Point) -> f64, x: &Point, step: f64) -> Result<DVector<f64>> {
    let d = x.manifold().dim();
    let mut g = DVector::zeros(d);
    for k in 0..d {
        let e = unit(d, k) * step;
        let (fp, fm) = (f(&x.retract_vec(&e)), f(&x.retract_vec(&-e)));
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite-difference sample"));
        }
        g[k] = (fp - fm) / (2.0 * step);
    }
    Ok(g)
}

/// Central differences along retractions of the coordinate tangents; the
/// returned gradient uses `step`.
pub fn fd_gradient(f: impl Fn(&Point) -> f64, x: &Point, step: f64) -> Result<FdGradient> {
    let g1 = central(&f, x, 2.0 * step)?;
    let g2 = central(&f, x, step)?;
    let g3 = central(&f, x, 0.5 * step)?;
    let (d12, d23) = ((&g1 - &g2).norm(), (&g2 - &g3).norm());
    log::debug!("fd_gradient: Richardson ratio {:.3}", d12 / d23.max(f64::MIN_POSITIVE));
    Ok(FdGradient {
        error_estimate: d12 / 3.0,
        richardson_ratio: d12 / d23.max(f64::MIN_POSITIVE),
        gradient: g2,
    })
}

#[derive(Clone, Debug)]
pub struct DiniEstimate {
    /// Minimum of the forward quotients (liminf surrogate).
    pub value: f64,
    /// Forward quotients for λ = 1e-2, 1e-3, …, 1e-6.
    pub quotients: Vec<f64>,
    /// Whether the quotients vary monotonically as λ shrinks.
    pub monotone: bool,
}

/// Lower Dini derivative of `f` at `x` along `retract(x, λv)`.
pub fn dini_estimate(f: impl Fn(&Point) -> f64, x: &Point, v: &DVector<f64>) -> Result<DiniEstimate> {
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(Error::NonFinite("Dini base value"));
    }
    let mut quotients = Vec::with_capacity(5);
    for k in 2..=6 {
        let lam = 10f64.powi(-k);
        let fl = f(&x.retract_vec(&(v * lam)));
        if !fl.is_finite() {
            return Err(Error::NonFinite("Dini sample"));
        }
        quotients.push((fl - f0) / lam);
    }
    let diffs: Vec<f64> = quotients.windows(2).map(|w| w[1] - w[0]).collect();
    let monotone = diffs.iter().all(|&d| d >= -1e-9) || diffs.iter().all(|&d| d <= 1e-9);
    Ok(DiniEstimate {
        value: quotients.iter().copied().fold(f64::INFINITY, f64::min),
        quotients,
        monotone,
    })
}

#[derive(Clone, Debug)]
pub struct LqrSolution {
    pub controls: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    /// Feedback gains `u_i = −K_i q_i`.
    pub gains: Vec<DMatrix<f64>>,
    /// `½ Σ (qᵀQq + uᵀRu) + ½ q_nᵀ Q_f q_n`.
    pub value: f64,
}

/// Backward Riccati recursion and feedback rollout for
/// `q_{i+1} = A q_i + B u_i`.
pub fn riccati_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    qc: &DMatrix<f64>,
    rc: &DMatrix<f64>,
    qf: &DMatrix<f64>,
    n: usize,
    q0: &DVector<f64>,
) -> Result<LqrSolution> {
    let mut p = qf.clone();
    let mut gains = vec![DMatrix::zeros(b.ncols(), a.ncols()); n];
    for i in (0..n).rev() {
        let s = rc + b.transpose() * &p * b;
        let chol = s.clone().cholesky().ok_or(Error::Singular("R + BᵀPB"))?;
        let k = chol.solve(&(b.transpose() * &p * a));
        p = qc + a.transpose() * &p * (a - b * &k);
        p = (&p + p.transpose()) * 0.5;
        gains[i] = k;
    }
    let mut states = vec![q0.clone()];
    let mut controls = Vec::with_capacity(n);
    let mut value = 0.0;
    for k in gains.iter() {
        let q = states.last().unwrap();
        let u = -(k * q);
        value += 0.5 * (q.dot(&(qc * q)) + u.dot(&(rc * &u)));
        states.push(a * q + b * &u);
        controls.push(u);
    }
    let qn = states.last().unwrap();
    value += 0.5 * qn.dot(&(qf * qn));
    Ok(LqrSolution {
        controls,
        states,
        gains,
        value,
    })
}

/// Bracket `[lower, upper]` on the distance from a point to a feasible set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceBracket {
    pub lower: f64,
    pub upper: f64,
}

/// Nested grid search for `d(u, {x : feasible(x)})` inside the box
/// `[lo, hi]`. Each level samples a `grid`-per-axis lattice around the best
/// feasible point found so far and shrinks the window. `upper` is the
/// distance to the best feasible sample; `lower` subtracts the final lattice
/// half-diagonal. Returns `None` when no feasible sample is ever found.
pub fn feasible_distance(
    feasible: impl Fn(&DVector<f64>) -> bool,
    u: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    grid: usize,
    depth: usize,
) -> Option<DistanceBracket> {
    if feasible(u) {
        return Some(DistanceBracket { lower: 0.0, upper: 0.0 });
    }
    let d = u.len();
    let grid = grid.max(2);
    let (mut lo, mut hi) = (lo.clone(), hi.clone());
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut half_diag = f64::INFINITY;
    for _ in 0..depth.max(1) {
        let spacing = (&hi - &lo) / (grid - 1) as f64;
        half_diag = 0.5 * spacing.norm();
        let total = grid.pow(d as u32);
        for idx in 0..total {
            let mut rem = idx;
            let x = DVector::from_fn(d, |k, _| {
                let j = rem % grid;
                rem /= grid;
                lo[k] + spacing[k] * j as f64
            });
            if feasible(&x) {
                let dist = (&x - u).norm();
                if best.as_ref().map_or(true, |(b, _)| dist < *b) {
                    best = Some((dist, x));
                }
            }
        }
        let (_, centre) = best.as_ref()?;
        // zoom to two lattice cells around the incumbent
        lo = centre - &spacing * 2.0;
        hi = centre + &spacing * 2.0;
    }
    best.map(|(dist, _)| DistanceBracket {
        lower: (dist - half_diag).max(0.0),
        upper: dist,
    })
}

/// Exact distance from `u` to `{x : a x ≤ b}` by Euclidean projection.
pub fn polyhedron_distance(a: &DMatrix<f64>, b: &DVector<f64>, u: &DVector<f64>, feasible_start: &DVector<f64>) -> Result<f64> {
    let proj = crate::linalg::project_polyhedron(a, b, u, feasible_start)?;
    Ok((proj - u).norm())
}

/// One analytic derivative and its finite-difference audit. `run` returns
/// the worst relative error over its sample points.
pub struct AuditEntry {
    pub name: &'static str,
    pub run: fn(u64) -> Result<f64>,
}

/// Every analytic derivative shipped by the crate.
pub fn audit_registry() -> Vec<AuditEntry> {
    let mut out = vec![
        AuditEntry { name: "so3::right_jacobian", run: audit_right_jacobian },
        AuditEntry { name: "StageMap::linear", run: |s| audit_stage(s, StageMap::linear(rand_mat(s, 3, 3), rand_mat(s + 1, 3, 2)), false) },
        AuditEntry { name: "StageMap::lie_multiplicative", run: |s| audit_stage(s, StageMap::lie_multiplicative(ManifoldHandle::so3()), true) },
        AuditEntry {
            name: "StageMap::retraction_velocity",
            run: |s| audit_stage(s, StageMap::retraction_velocity(ManifoldHandle::so3(), rand_mat(s, 3, 3), 0.3), true),
        },
        AuditEntry {
            name: "StageMap::euler_affine",
            run: |s| audit_stage(s, StageMap::euler_affine(rand_mat(s, 2, 2), rand_mat(s + 7, 2, 1), 0.1), false),
        },
        AuditEntry { name: "fibre derivative of the retraction", run: audit_fibre },
        AuditEntry {
            name: "CostSpec::quadratic",
            run: |s| {
                let spd = |k| {
                    let m = rand_mat(k, 3, 3);
                    &m * m.transpose() + DMatrix::identity(3, 3)
                };
                audit_cost(s, &CostSpec::quadratic(spd(s), spd(s + 1), spd(s + 2)), false)
            },
        },
        AuditEntry {
            name: "CostSpec::linear_terminal",
            run: |s| audit_cost(s, &CostSpec::linear_terminal(rand_vec(s, 3)), false),
        },
        AuditEntry {
            name: "CostSpec::attitude",
            run: |s| {
                // distinct stream so the target never coincides with a sample
                let mut rng = ChaCha8Rng::seed_from_u64(s.wrapping_add(1000));
                audit_cost(s, &CostSpec::attitude(rand_rot(&mut rng), 2.0, 0.5), true)
            },
        },
        AuditEntry {
            name: "liegroup::so3_kinetic",
            run: |s| audit_group_fn(s, &liegroup::so3_kinetic(&Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0)), 0.1)?),
        },
        AuditEntry {
            name: "liegroup::heavy_top_potential",
            run: |s| audit_group_fn(s, &liegroup::heavy_top_potential(9.81, Vector3::z(), Vector3::new(0.1, -0.2, 0.5))),
        },
        AuditEntry { name: "LieGroupProblem::lagrangian_gradient", run: audit_lagrangian },
    ];
    out.extend(crate::constraints::audit_entries());
    out
}

fn rand_mat(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn rand_vec(seed: u64, d: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))
}

pub(crate) fn rand_rot(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    so3::exp(&Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
}

/// Random point on a Euclidean space or SO(3).
pub(crate) fn random_point(rng: &mut ChaCha8Rng, m: &ManifoldHandle) -> Point {
    let v = DVector::from_fn(m.dim(), |_, _| rng.gen_range(-1.0..1.0));
    if m.is_euclidean() {
        Point::euclidean(v)
    } else {
        m.identity().retract_vec(&(v * 2.0))
    }
}

fn audit_right_jacobian(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let a = Vector3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
        let jr = so3::right_jacobian(&a);
        let base_t = so3::exp(&a).transpose();
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = FD_STEP;
            let fd = (so3::log(&(base_t * so3::exp(&(a + e)))) - so3::log(&(base_t * so3::exp(&(a - e))))) / (2.0 * FD_STEP);
            let col = jr.column(k).into_owned();
            worst = worst.max(relative_error(&DVector::from_column_slice(col.as_slice()), &DVector::from_column_slice(fd.as_slice())));
        }
    }
    Ok(worst)
}

fn audit_stage(seed: u64, stage: StageMap, _group: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let q = random_point(&mut rng, stage.state_manifold());
        let u = random_point(&mut rng, stage.control_manifold());
        let (aq, au) = stage.jacobians(&q, &u);
        let (fq, fu) = stage.fd_jacobians(&q, &u);
        let scale = aq.norm().max(au.norm()).max(1e-8);
        worst = worst.max((aq - fq).norm() / scale).max((au - fu).norm() / scale);
    }
    Ok(worst)
}

fn audit_fibre(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stage = StageMap::retraction_velocity(ManifoldHandle::so3(), DMatrix::identity(3, 3), 1.0);
    let fac = stage.factorization().unwrap().clone();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let q = random_point(&mut rng, stage.state_manifold());
        let u = random_point(&mut rng, stage.control_manifold());
        let analytic = stage.fibre_derivative(&q, &u)?;
        let x = (fac.f)(&q, &u);
        let out = (fac.e)(&q, &x);
        let mut fd = DMatrix::zeros(3, 3);
        for k in 0..3 {
            let e = unit(3, k) * FD_STEP;
            let col = (out.local_log(&(fac.e)(&q, &(&x + &e))) - out.local_log(&(fac.e)(&q, &(&x - &e)))) / (2.0 * FD_STEP);
            fd.set_column(k, &col);
        }
        worst = worst.max((&analytic - fd).norm() / analytic.norm().max(1e-8));
    }
    Ok(worst)
}

fn audit_cost(seed: u64, cost: &CostSpec, so3_state: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (qm, um) = if so3_state {
        (ManifoldHandle::so3(), ManifoldHandle::euclidean(3))
    } else {
        (ManifoldHandle::euclidean(3), ManifoldHandle::euclidean(3))
    };
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let q = random_point(&mut rng, &qm);
        let u = random_point(&mut rng, &um);
        let t = fd_gradient(|x| cost.terminal(x), &q, FD_STEP)?.gradient;
        worst = worst.max(relative_error(&cost.terminal_gradient(&q), &t));
        let (gq, gu) = cost.running_gradient(0, &q, &u);
        let fq = fd_gradient(|x| cost.running(0, x, &u), &q, FD_STEP)?.gradient;
        let fu = fd_gradient(|v| cost.running(0, &q, v), &u, FD_STEP)?.gradient;
        worst = worst.max(relative_error(&gq, &fq)).max(relative_error(&gu, &fu));
    }
    Ok(worst)
}

fn audit_group_fn(seed: u64, f: &GroupFunction) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let g = Point::rotation(rand_rot(&mut rng))?;
        let fd = fd_gradient(|x| f.value(x), &g, FD_STEP)?.gradient;
        worst = worst.max(relative_error(&f.differential(&g), &fd));
    }
    Ok(worst)
}

fn audit_lagrangian(seed: u64) -> Result<f64> {
    let prob = LieGroupProblem::rigid_body(
        Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0)),
        0.1,
        liegroup::heavy_top_potential(3.0, Vector3::z(), Vector3::new(0.2, 0.1, 0.4)),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let g = Point::rotation(rand_rot(&mut rng))?;
        let u = Point::rotation(rand_rot(&mut rng))?;
        let (dg, du) = prob.lagrangian_gradient(&g, &u);
        let fg = fd_gradient(|x| prob.lagrangian(x, &u), &g, FD_STEP)?.gradient;
        let fu = fd_gradient(|v| prob.lagrangian(&g, v), &u, FD_STEP)?.gradient;
        worst = worst.max(relative_error(&dg, &fg)).max(relative_error(&du, &fu));
    }
    Ok(worst)
}
