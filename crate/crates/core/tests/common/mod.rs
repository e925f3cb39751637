//! Problem builders and dense reference solutions shared by the integration
//! and acceptance tests.
#![allow(dead_code)]

use dgmp::adjoint::CostSpec;
use dgmp::liegroup::{self, GroupFunction, LieGroupProblem};
use dgmp::manifold::so3;
use dgmp::{ControlSetSpec, ControlSystem, ManifoldHandle, Point, StageMap};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, d: usize, s: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.gen_range(-s..s))
}

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-s..s))
}

pub fn rand_spd(rng: &mut ChaCha8Rng, d: usize, floor: f64) -> DMatrix<f64> {
    let m = rand_mat(rng, d, d, 1.0);
    &m * m.transpose() * 0.2 + DMatrix::identity(d, d) * floor
}

pub fn rand_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let a = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    so3::exp(&a)
}

pub fn flatten(parts: &[DVector<f64>]) -> DVector<f64> {
    let all: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    DVector::from_vec(all)
}

/// A random problem: system, cost, initial state and controls.
pub struct Problem {
    pub label: String,
    pub sys: ControlSystem,
    pub cost: CostSpec,
    pub q0: Point,
    pub controls: Vec<Point>,
}

/// Twenty problems cycling through linear, nonlinear Euclidean, SO(3)
/// velocity-controlled and SO(3) multiplicative dynamics.
pub fn random_problems(count: usize, seed: u64) -> Vec<Problem> {
    (0..count).map(|k| random_problem(k, seed.wrapping_add(k as u64))).collect()
}

pub fn random_problem(kind: usize, seed: u64) -> Problem {
    let mut r = rng(seed);
    let n = r.gen_range(1..=10);
    match kind % 4 {
        0 => {
            let d = r.gen_range(1..=6);
            let m = r.gen_range(1..=3);
            let sys = ControlSystem::uniform(
                StageMap::linear(rand_mat(&mut r, d, d, 0.6), rand_mat(&mut r, d, m, 1.0)),
                ControlSetSpec::WholeManifold,
                n,
            )
            .unwrap();
            let cost = CostSpec::quadratic(rand_spd(&mut r, d, 0.1), rand_spd(&mut r, m, 0.1), rand_spd(&mut r, d, 0.1));
            let q0 = Point::euclidean(rand_vec(&mut r, d, 1.0));
            let controls = (0..n).map(|_| Point::euclidean(rand_vec(&mut r, m, 1.0))).collect();
            Problem {
                label: format!("linear d={d} m={m} n={n}"),
                sys,
                cost,
                q0,
                controls,
            }
        }
        1 => {
            let d = r.gen_range(2..=6);
            let m = r.gen_range(1..=3);
            let sys = ControlSystem::uniform(tanh_stage(rand_mat(&mut r, d, d, 1.0), rand_mat(&mut r, d, m, 1.0), 0.3), ControlSetSpec::WholeManifold, n)
                .unwrap();
            let cost = CostSpec::quadratic(rand_spd(&mut r, d, 0.1), rand_spd(&mut r, m, 0.1), rand_spd(&mut r, d, 0.1));
            let q0 = Point::euclidean(rand_vec(&mut r, d, 1.0));
            let controls = (0..n).map(|_| Point::euclidean(rand_vec(&mut r, m, 1.0))).collect();
            Problem {
                label: format!("tanh d={d} m={m} n={n}"),
                sys,
                cost,
                q0,
                controls,
            }
        }
        2 => {
            let m = r.gen_range(1..=3);
            let sys = ControlSystem::uniform(
                StageMap::retraction_velocity(ManifoldHandle::so3(), rand_mat(&mut r, 3, m, 1.0), 0.2),
                ControlSetSpec::WholeManifold,
                n,
            )
            .unwrap();
            let cost = CostSpec::attitude(rand_rotation(&mut r), r.gen_range(0.5..2.0), r.gen_range(0.05..0.5));
            let q0 = Point::rotation(rand_rotation(&mut r)).unwrap();
            let controls = (0..n).map(|_| Point::euclidean(rand_vec(&mut r, m, 1.0))).collect();
            Problem {
                label: format!("so3 velocity m={m} n={n}"),
                sys,
                cost,
                q0,
                controls,
            }
        }
        _ => {
            let jd = Matrix3::from_diagonal(&Vector3::new(r.gen_range(0.5..2.0), r.gen_range(0.5..2.0), r.gen_range(0.5..2.0)));
            let pot = liegroup::heavy_top_potential(r.gen_range(0.1..1.0), Vector3::z(), Vector3::new(0.1, 0.2, 0.3));
            let prob = LieGroupProblem::rigid_body(jd, 0.1, pot).unwrap();
            let (sys, cost) = liegroup::action_sum(&prob, n, None).unwrap();
            let q0 = Point::rotation(rand_rotation(&mut r)).unwrap();
            let controls = (0..n)
                .map(|_| Point::rotation(so3::exp(&Vector3::new(r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3)))).unwrap())
                .collect();
            Problem {
                label: format!("so3 action sum n={n}"),
                sys,
                cost,
                q0,
                controls,
            }
        }
    }
}

/// `q + h (tanh(A q) + B u)` with analytic Jacobians.
pub fn tanh_stage(a: DMatrix<f64>, b: DMatrix<f64>, h: f64) -> StageMap {
    let (d, m) = (a.nrows(), b.ncols());
    let (a2, b2) = (a.clone(), b.clone());
    StageMap::new(ManifoldHandle::euclidean(d), ManifoldHandle::euclidean(m), move |q, u| {
        let q = q.as_vector().unwrap();
        Point::euclidean(q + ((&a * q).map(f64::tanh) + &b * u.as_vector().unwrap()) * h)
    })
    .with_jacobians(move |q, _| {
        let z = &a2 * q.as_vector().unwrap();
        let sech2 = DMatrix::from_diagonal(&z.map(|x| 1.0 - x.tanh().powi(2)));
        (DMatrix::identity(d, d) + sech2 * &a2 * h, &b2 * h)
    })
}

/// A random linear system with `‖A‖₂ ≈ radius` and full-rank `B`.
pub struct Lqr {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    pub q0: DVector<f64>,
    pub n: usize,
}

impl Lqr {
    pub fn random(seed: u64, d: usize, m: usize, n: usize, radius: f64) -> Self {
        let mut r = rng(seed);
        let a = rand_mat(&mut r, d, d, 1.0);
        let scale = a.clone().singular_values().max();
        Self {
            a: a * (radius / scale),
            b: rand_mat(&mut r, d, m, 1.0),
            q: rand_spd(&mut r, d, 0.5),
            r: DMatrix::identity(m, m),
            qf: rand_spd(&mut r, d, 0.5),
            q0: rand_vec(&mut r, d, 2.0),
            n,
        }
    }

    pub fn system(&self, set: ControlSetSpec) -> ControlSystem {
        ControlSystem::uniform(StageMap::linear(self.a.clone(), self.b.clone()), set, self.n).unwrap()
    }

    pub fn cost(&self) -> CostSpec {
        CostSpec::quadratic(self.q.clone(), self.r.clone(), self.qf.clone())
    }

    /// Stacked `q_k = Φ_k q0 + Γ_k U` for `k = 0..=n`.
    pub fn stacked(&self) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
        let (d, m, n) = (self.a.nrows(), self.b.ncols(), self.n);
        let mut free = vec![self.q0.clone()];
        let mut gam = vec![DMatrix::zeros(d, n * m)];
        for k in 0..n {
            let mut g = &self.a * &gam[k];
            g.view_mut((0, k * m), (d, m)).copy_from(&self.b);
            free.push(&self.a * &free[k]);
            gam.push(g);
        }
        (free, gam)
    }

    /// Dense Hessian and gradient-at-zero of `J(U)`.
    pub fn dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (m, n) = (self.b.ncols(), self.n);
        let (free, gam) = self.stacked();
        let mut h = DMatrix::zeros(n * m, n * m);
        let mut g = DVector::zeros(n * m);
        for k in 0..n {
            h += gam[k].transpose() * &self.q * &gam[k];
            g += gam[k].transpose() * &self.q * &free[k];
            let mut blk = h.view_mut((k * m, k * m), (m, m));
            blk += &self.r;
        }
        h += gam[n].transpose() * &self.qf * &gam[n];
        g += gam[n].transpose() * &self.qf * &free[n];
        (h, g)
    }

    /// KKT solve for `min J(U)` s.t. `⟨c, q_n⟩ = rhs`; returns `(U, ν)` with
    /// `∇J + ν ∇(⟨c, q_n⟩ − rhs) = 0`.
    pub fn kkt_endpoint(&self, c: &DVector<f64>, rhs: f64) -> (DVector<f64>, f64) {
        let (h, g) = self.dense();
        let (free, gam) = self.stacked();
        let a = gam[self.n].transpose() * c;
        let k = h.nrows();
        let mut kkt = DMatrix::zeros(k + 1, k + 1);
        kkt.view_mut((0, 0), (k, k)).copy_from(&h);
        kkt.view_mut((0, k), (k, 1)).copy_from(&a);
        kkt.view_mut((k, 0), (1, k)).copy_from(&a.transpose());
        let mut rhs_v = DVector::zeros(k + 1);
        rhs_v.rows_mut(0, k).copy_from(&(-&g));
        rhs_v[k] = rhs - c.dot(&free[self.n]);
        let sol = kkt.lu().solve(&rhs_v).expect("KKT matrix singular");
        (sol.rows(0, k).into_owned(), sol[k])
    }

    pub fn split(&self, u: &DVector<f64>) -> Vec<DVector<f64>> {
        let m = self.b.ncols();
        (0..self.n).map(|k| u.rows(k * m, m).into_owned()).collect()
    }
}

pub fn points(us: &[DVector<f64>]) -> Vec<Point> {
    us.iter().map(|u| Point::euclidean(u.clone())).collect()
}

pub fn vectors(us: &[Point]) -> Vec<DVector<f64>> {
    us.iter().map(|u| u.coords()).collect()
}

pub fn rigid_body(h: f64, potential: GroupFunction) -> LieGroupProblem {
    LieGroupProblem::rigid_body(Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0)), h, potential).unwrap()
}
