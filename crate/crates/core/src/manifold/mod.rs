//! Manifolds used for states and controls.
//!
//! Three kinds are built in: `ℝ^d`, SO(3) and finite products of these.
//! Every manifold is also treated as a Lie group (`ℝ^d` additively), which
//! gives a global trivialisation of the tangent bundle. Tangent and cotangent
//! vectors are plain coordinate vectors of length [`ManifoldHandle::dim`] in
//! that trivialisation, and the two are paired by the dot product.

pub mod so3;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ManifoldKind {
    Euclidean(usize),
    SO3,
    Product(Vec<ManifoldHandle>),
}

/// Shared description of a manifold. Cheap to clone.
#[derive(Clone, PartialEq)]
pub struct ManifoldHandle {
    kind: Arc<ManifoldKind>,
    dim: usize,
}

impl fmt::Debug for ManifoldHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for ManifoldHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind() {
            ManifoldKind::Euclidean(d) => write!(f, "R^{d}"),
            ManifoldKind::SO3 => write!(f, "SO(3)"),
            ManifoldKind::Product(fs) => {
                write!(f, "(")?;
                for (i, m) in fs.iter().enumerate() {
                    if i > 0 {
                        write!(f, " x ")?;
                    }
                    write!(f, "{m}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl ManifoldHandle {
    pub fn euclidean(d: usize) -> Self {
        Self {
            kind: Arc::new(ManifoldKind::Euclidean(d)),
            dim: d,
        }
    }

    pub fn so3() -> Self {
        Self {
            kind: Arc::new(ManifoldKind::SO3),
            dim: 3,
        }
    }

    pub fn product(factors: Vec<ManifoldHandle>) -> Self {
        let dim = factors.iter().map(|m| m.dim).sum();
        Self {
            kind: Arc::new(ManifoldKind::Product(factors)),
            dim,
        }
    }

    pub fn kind(&self) -> &ManifoldKind {
        &self.kind
    }

    /// Intrinsic dimension, i.e. the length of tangent coordinate vectors.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Length of the flattened ambient coordinates returned by [`Point::coords`].
    pub fn coord_len(&self) -> usize {
        match self.kind() {
            ManifoldKind::Euclidean(d) => *d,
            ManifoldKind::SO3 => 9,
            ManifoldKind::Product(fs) => fs.iter().map(|m| m.coord_len()).sum(),
        }
    }

    pub fn is_euclidean(&self) -> bool {
        matches!(self.kind(), ManifoldKind::Euclidean(_))
    }

    pub fn identity(&self) -> Point {
        let data = match self.kind() {
            ManifoldKind::Euclidean(d) => PointData::Vector(DVector::zeros(*d)),
            ManifoldKind::SO3 => PointData::Rotation(Matrix3::identity()),
            ManifoldKind::Product(fs) => PointData::Product(fs.iter().map(|m| m.identity()).collect()),
        };
        Point {
            manifold: self.clone(),
            data,
        }
    }

    pub(crate) fn check_same(&self, other: &ManifoldHandle) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::ManifoldMismatch {
                expected: self.to_string(),
                found: other.to_string(),
            })
        }
    }

    /// Reconstructs a point from flattened ambient coordinates (SO(3) blocks
    /// are row-major 3×3 matrices).
    pub fn point_from_coords(&self, coords: &[f64]) -> Result<Point> {
        if coords.len() != self.coord_len() {
            return Err(Error::DimensionMismatch {
                context: "point coordinates",
                expected: self.coord_len(),
                found: coords.len(),
            });
        }
        match self.kind() {
            ManifoldKind::Euclidean(_) => Ok(Point::euclidean(DVector::from_column_slice(coords))),
            ManifoldKind::SO3 => Point::rotation(Matrix3::from_row_slice(coords)),
            ManifoldKind::Product(fs) => {
                let mut offset = 0;
                let mut parts = Vec::with_capacity(fs.len());
                for m in fs {
                    let len = m.coord_len();
                    parts.push(m.point_from_coords(&coords[offset..offset + len])?);
                    offset += len;
                }
                Ok(Point::product(parts))
            }
        }
    }

    /// Matrix of `Ad(g)` acting on tangent coordinates at the identity.
    pub fn ad_matrix(&self, g: &Point) -> Result<DMatrix<f64>> {
        self.check_same(&g.manifold)?;
        Ok(g.ad_matrix())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PointData {
    Vector(DVector<f64>),
    Rotation(Matrix3<f64>),
    Product(Vec<Point>),
}

/// A point on a manifold together with its handle.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    manifold: ManifoldHandle,
    data: PointData,
}

impl Point {
    pub fn euclidean(v: DVector<f64>) -> Self {
        Self {
            manifold: ManifoldHandle::euclidean(v.len()),
            data: PointData::Vector(v),
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::euclidean(DVector::from_column_slice(v))
    }

    /// Checked SO(3) point. See [`so3::checked_rotation`] for the policy.
    pub fn rotation(r: Matrix3<f64>) -> Result<Self> {
        Ok(Self::rotation_trusted(so3::checked_rotation(r)?))
    }

    pub(crate) fn rotation_trusted(r: Matrix3<f64>) -> Self {
        Self {
            manifold: ManifoldHandle::so3(),
            data: PointData::Rotation(r),
        }
    }

    pub fn product(parts: Vec<Point>) -> Self {
        let handle = ManifoldHandle::product(parts.iter().map(|p| p.manifold.clone()).collect());
        Self {
            manifold: handle,
            data: PointData::Product(parts),
        }
    }

    pub fn manifold(&self) -> &ManifoldHandle {
        &self.manifold
    }

    pub fn data(&self) -> &PointData {
        &self.data
    }

    pub fn as_vector(&self) -> Option<&DVector<f64>> {
        match &self.data {
            PointData::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_rotation(&self) -> Option<&Matrix3<f64>> {
        match &self.data {
            PointData::Rotation(r) => Some(r),
            _ => None,
        }
    }

    pub fn factors(&self) -> Option<&[Point]> {
        match &self.data {
            PointData::Product(ps) => Some(ps),
            _ => None,
        }
    }

    /// Flattened ambient coordinates.
    pub fn coords(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.manifold.coord_len());
        self.push_coords(&mut out);
        DVector::from_vec(out)
    }

    fn push_coords(&self, out: &mut Vec<f64>) {
        match &self.data {
            PointData::Vector(v) => out.extend(v.iter()),
            PointData::Rotation(r) => {
                for i in 0..3 {
                    for j in 0..3 {
                        out.push(r[(i, j)]);
                    }
                }
            }
            PointData::Product(ps) => ps.iter().for_each(|p| p.push_coords(out)),
        }
    }

    /// Retraction in trivialised coordinates: `x + v` on ℝ^d and
    /// `R·exp(hat(v))` on SO(3). Panics if `v` has the wrong length; use
    /// [`retract`] for the checked form.
    pub fn retract_vec(&self, v: &DVector<f64>) -> Point {
        assert_eq!(v.len(), self.manifold.dim, "tangent length");
        match &self.data {
            PointData::Vector(x) => Point {
                manifold: self.manifold.clone(),
                data: PointData::Vector(x + v),
            },
            PointData::Rotation(r) => {
                let a = Vector3::new(v[0], v[1], v[2]);
                Point::rotation_trusted(so3::repaired(r * so3::exp(&a)))
            }
            PointData::Product(ps) => {
                let mut offset = 0;
                let parts = ps
                    .iter()
                    .map(|p| {
                        let d = p.manifold.dim;
                        let part = p.retract_vec(&v.rows(offset, d).into_owned());
                        offset += d;
                        part
                    })
                    .collect();
                Point {
                    manifold: self.manifold.clone(),
                    data: PointData::Product(parts),
                }
            }
        }
    }

    /// Inverse of [`Point::retract_vec`] near `self`: returns `v` with
    /// `self.retract_vec(v) == other`.
    pub fn local_log(&self, other: &Point) -> DVector<f64> {
        debug_assert_eq!(self.manifold, other.manifold);
        match (&self.data, &other.data) {
            (PointData::Vector(x), PointData::Vector(y)) => y - x,
            (PointData::Rotation(r), PointData::Rotation(s)) => {
                let w = so3::log(&(r.transpose() * s));
                DVector::from_column_slice(w.as_slice())
            }
            (PointData::Product(ps), PointData::Product(qs)) => {
                let mut out = Vec::with_capacity(self.manifold.dim);
                for (p, q) in ps.iter().zip(qs) {
                    out.extend(p.local_log(q).iter());
                }
                DVector::from_vec(out)
            }
            _ => panic!("local_log across different manifolds"),
        }
    }

    /// Group product `self · other`.
    pub fn compose(&self, other: &Point) -> Point {
        debug_assert_eq!(self.manifold, other.manifold);
        match (&self.data, &other.data) {
            (PointData::Vector(x), PointData::Vector(y)) => Point {
                manifold: self.manifold.clone(),
                data: PointData::Vector(x + y),
            },
            (PointData::Rotation(r), PointData::Rotation(s)) => Point::rotation_trusted(so3::repaired(r * s)),
            (PointData::Product(ps), PointData::Product(qs)) => Point {
                manifold: self.manifold.clone(),
                data: PointData::Product(ps.iter().zip(qs).map(|(p, q)| p.compose(q)).collect()),
            },
            _ => panic!("compose across different manifolds"),
        }
    }

    pub fn inverse(&self) -> Point {
        match &self.data {
            PointData::Vector(x) => Point {
                manifold: self.manifold.clone(),
                data: PointData::Vector(-x),
            },
            PointData::Rotation(r) => Point::rotation_trusted(r.transpose()),
            PointData::Product(ps) => Point {
                manifold: self.manifold.clone(),
                data: PointData::Product(ps.iter().map(Point::inverse).collect()),
            },
        }
    }

    /// `Ad(self)` in trivialised coordinates: identity on ℝ^d, `R` on SO(3),
    /// block diagonal on products.
    pub fn ad_matrix(&self) -> DMatrix<f64> {
        let d = self.manifold.dim;
        match &self.data {
            PointData::Vector(_) => DMatrix::identity(d, d),
            PointData::Rotation(r) => DMatrix::from_fn(3, 3, |i, j| r[(i, j)]),
            PointData::Product(ps) => {
                let mut out = DMatrix::zeros(d, d);
                let mut offset = 0;
                for p in ps {
                    let k = p.manifold.dim;
                    out.view_mut((offset, offset), (k, k)).copy_from(&p.ad_matrix());
                    offset += k;
                }
                out
            }
        }
    }

    /// `Ad*(self) = Ad(self⁻¹)ᵀ` acting on cotangent coordinates.
    pub fn ad_star_matrix(&self) -> DMatrix<f64> {
        self.inverse().ad_matrix().transpose()
    }

    /// Distance in ambient coordinates, used for residual checks.
    pub fn coord_distance(&self, other: &Point) -> f64 {
        (self.coords() - other.coords()).norm()
    }
}

/// Tangent vector in trivialised coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Tangent {
    base: Point,
    vec: DVector<f64>,
}

impl Tangent {
    pub fn new(base: Point, vec: DVector<f64>) -> Result<Self> {
        check_len("tangent vector", base.manifold.dim, vec.len())?;
        Ok(Self { base, vec })
    }

    pub fn zero(base: Point) -> Self {
        let d = base.manifold.dim;
        Self {
            base,
            vec: DVector::zeros(d),
        }
    }

    pub fn base(&self) -> &Point {
        &self.base
    }

    pub fn vec(&self) -> &DVector<f64> {
        &self.vec
    }

    pub fn manifold(&self) -> &ManifoldHandle {
        &self.base.manifold
    }
}

/// Cotangent vector, dual to [`Tangent`] under the dot product.
#[derive(Clone, Debug, PartialEq)]
pub struct Cotangent {
    base: Point,
    covec: DVector<f64>,
}

impl Cotangent {
    pub fn new(base: Point, covec: DVector<f64>) -> Result<Self> {
        check_len("cotangent vector", base.manifold.dim, covec.len())?;
        Ok(Self { base, covec })
    }

    pub fn base(&self) -> &Point {
        &self.base
    }

    pub fn covec(&self) -> &DVector<f64> {
        &self.covec
    }

    pub fn manifold(&self) -> &ManifoldHandle {
        &self.base.manifold
    }
}

fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}

/// Checked retraction.
pub fn retract(base: &Point, v: &Tangent) -> Result<Point> {
    base.manifold.check_same(v.manifold())?;
    if base.coord_distance(&v.base) > 0.0 {
        return Err(Error::Invalid("tangent is not based at the given point".into()));
    }
    Ok(base.retract_vec(&v.vec))
}

pub fn group_mul(g: &Point, h: &Point) -> Result<Point> {
    g.manifold.check_same(&h.manifold)?;
    Ok(g.compose(h))
}

pub fn group_inv(g: &Point) -> Point {
    g.inverse()
}

/// `Ad(g)a` for `a` a tangent vector at the identity.
pub fn ad(g: &Point, a: &Tangent) -> Result<Tangent> {
    g.manifold.check_same(a.manifold())?;
    Ok(Tangent {
        base: g.manifold.identity(),
        vec: g.ad_matrix() * &a.vec,
    })
}

/// `Ad*(g)p = Ad(g⁻¹)ᵀ p` for `p` a cotangent vector at the identity.
pub fn ad_star(g: &Point, p: &Cotangent) -> Result<Cotangent> {
    g.manifold.check_same(p.manifold())?;
    Ok(Cotangent {
        base: g.manifold.identity(),
        covec: g.ad_star_matrix() * &p.covec,
    })
}

/// Dual pairing of coordinate vectors. Both must sit at the same point.
pub fn pairing(p: &Cotangent, v: &Tangent) -> Result<f64> {
    p.manifold().check_same(v.manifold())?;
    if p.base.coord_distance(&v.base) > 0.0 {
        return Err(Error::Invalid("pairing covectors and vectors at different points".into()));
    }
    Ok(p.covec.dot(&v.vec))
}

/// Block-diagonal positive-definite form on trivialised tangent coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    matrix: DMatrix<f64>,
    cholesky_inv: DMatrix<f64>,
}

impl Metric {
    pub fn identity(manifold: &ManifoldHandle) -> Self {
        let d = manifold.dim();
        Self {
            matrix: DMatrix::identity(d, d),
            cholesky_inv: DMatrix::identity(d, d),
        }
    }

    /// One symmetric positive-definite block per factor (a single block for
    /// non-product manifolds). The product metric is their direct sum.
    pub fn from_blocks(manifold: &ManifoldHandle, blocks: &[DMatrix<f64>]) -> Result<Self> {
        let dims: Vec<usize> = match manifold.kind() {
            ManifoldKind::Product(fs) => fs.iter().map(|m| m.dim()).collect(),
            _ => vec![manifold.dim()],
        };
        check_len("metric blocks", dims.len(), blocks.len())?;
        let d = manifold.dim();
        let mut matrix = DMatrix::zeros(d, d);
        let mut offset = 0;
        for (k, b) in dims.iter().zip(blocks) {
            if b.nrows() != *k || b.ncols() != *k {
                return Err(Error::DimensionMismatch {
                    context: "metric block",
                    expected: *k,
                    found: b.nrows(),
                });
            }
            if (b - b.transpose()).norm() > 1e-12 * b.norm().max(1.0) {
                return Err(Error::Invalid("metric block is not symmetric".into()));
            }
            matrix.view_mut((offset, offset), (*k, *k)).copy_from(b);
            offset += k;
        }
        let chol = matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Invalid("metric block is not positive definite".into()))?;
        let cholesky_inv = chol.inverse();
        Ok(Self { matrix, cholesky_inv })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inner(&self, v: &DVector<f64>, w: &DVector<f64>) -> f64 {
        v.dot(&(&self.matrix * w))
    }

    pub fn norm(&self, v: &DVector<f64>) -> f64 {
        self.inner(v, v).max(0.0).sqrt()
    }

    /// Covector to vector: solves `G v = p`.
    pub fn sharp(&self, p: &DVector<f64>) -> DVector<f64> {
        &self.cholesky_inv * p
    }

    pub fn flat(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.matrix * v
    }

    /// Dual norm `sqrt(pᵀ G⁻¹ p)`.
    pub fn dual_norm(&self, p: &DVector<f64>) -> f64 {
        p.dot(&self.sharp(p)).max(0.0).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Point {
        let a = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        Point::rotation(so3::exp(&a)).unwrap()
    }

    fn random_dvec(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn dimensions() {
        let m = ManifoldHandle::product(vec![ManifoldHandle::euclidean(2), ManifoldHandle::so3()]);
        assert_eq!(m.dim(), 5);
        assert_eq!(m.coord_len(), 11);
        assert_eq!(ManifoldHandle::so3().dim(), 3);
        assert_eq!(ManifoldHandle::euclidean(4).dim(), 4);
    }

    #[test]
    fn euclidean_retraction_is_addition() {
        let x = Point::from_slice(&[1.0, 2.0]);
        let zero = Tangent::zero(x.clone());
        assert_eq!(retract(&x, &zero).unwrap(), x);
        let v = Tangent::new(x.clone(), DVector::from_vec(vec![0.5, -1.0])).unwrap();
        assert_eq!(retract(&x, &v).unwrap().coords().as_slice(), &[1.5, 1.0]);
    }

    #[test]
    fn retraction_rejects_foreign_tangent() {
        let x = Point::from_slice(&[1.0, 2.0]);
        let r = ManifoldHandle::so3().identity();
        let v = Tangent::zero(r);
        assert!(matches!(retract(&x, &v), Err(Error::ManifoldMismatch { .. })));
        assert!(Tangent::new(x, DVector::zeros(3)).is_err());
    }

    #[test]
    fn so3_retraction_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = random_rotation(&mut rng);
        let v = random_dvec(&mut rng, 3);
        // derivative of t ↦ R exp(t v) at 0 is R hat(v)
        let r = base.as_rotation().unwrap();
        let expected = r * so3::hat(&Vector3::new(v[0], v[1], v[2]));
        let errs: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&t| {
                let moved = base.retract_vec(&(&v * t));
                let fd = (moved.as_rotation().unwrap() - r) / t;
                (fd - expected).norm()
            })
            .collect();
        // first-order forward difference: error shrinks by ~10 per decade
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 10.0).abs() < 0.5, "ratio {ratio}");
        }
    }

    #[test]
    fn group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rz = |t: f64| Point::rotation(so3::exp(&Vector3::new(0.0, 0.0, t))).unwrap();
        let half = std::f64::consts::FRAC_PI_2;
        let composed = group_mul(&rz(half), &rz(half)).unwrap();
        assert!(composed.coord_distance(&rz(std::f64::consts::PI)) < 1e-15);
        for _ in 0..50 {
            let (g, h, k) = (random_rotation(&mut rng), random_rotation(&mut rng), random_rotation(&mut rng));
            let e = ManifoldHandle::so3().identity();
            assert!(group_mul(&e, &g).unwrap().coord_distance(&g) < 1e-15);
            let lhs = g.compose(&h).compose(&k);
            let rhs = g.compose(&h.compose(&k));
            assert!(lhs.coord_distance(&rhs) < 1e-12);
            assert!(g.compose(&g.inverse()).coord_distance(&e) < 1e-12);
            let inv_prod = g.compose(&h).inverse();
            let prod_inv = h.inverse().compose(&g.inverse());
            assert!(inv_prod.coord_distance(&prod_inv) < 1e-12);
            assert!(so3::orthogonality_error(lhs.as_rotation().unwrap()) <= so3::ORTHO_TOL);
        }
    }

    #[test]
    fn adjoint_is_conjugation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let g = random_rotation(&mut rng);
            let a = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let r = g.as_rotation().unwrap();
            let conj = r * so3::hat(&a) * r.transpose();
            let ra = r * a;
            assert!((conj - so3::hat(&ra)).norm() < 1e-14);
            let t = Tangent::new(ManifoldHandle::so3().identity(), DVector::from_column_slice(a.as_slice())).unwrap();
            let out = ad(&g, &t).unwrap();
            assert!((out.vec() - DVector::from_column_slice(ra.as_slice())).norm() < 1e-15);
        }
        let e = ManifoldHandle::so3().identity();
        let a = Tangent::new(e.clone(), DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(ad(&e, &a).unwrap(), a);
    }

    #[test]
    fn coadjoint_duality_and_homomorphism() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = ManifoldHandle::so3().identity();
        for _ in 0..100 {
            let g = random_rotation(&mut rng);
            let h = random_rotation(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    let p = Cotangent::new(e.clone(), DVector::from_fn(3, |k, _| (k == i) as u8 as f64)).unwrap();
                    let a = Tangent::new(e.clone(), DVector::from_fn(3, |k, _| (k == j) as u8 as f64)).unwrap();
                    let lhs = pairing(&ad_star(&g, &p).unwrap(), &a).unwrap();
                    let rhs = pairing(&p, &ad(&g.inverse(), &a).unwrap()).unwrap();
                    assert!((lhs - rhs).abs() < 1e-12);
                }
            }
            let gh = g.compose(&h);
            assert!((gh.ad_matrix() - g.ad_matrix() * h.ad_matrix()).norm() < 1e-12);
            assert!((gh.ad_star_matrix() - g.ad_star_matrix() * h.ad_star_matrix()).norm() < 1e-12);
            let p = random_dvec(&mut rng, 3);
            assert!(((g.ad_star_matrix() * &p).norm() - p.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn product_operations_are_factorwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Point::product(vec![Point::from_slice(&[1.0, -1.0]), random_rotation(&mut rng)]);
        let v = random_dvec(&mut rng, 5);
        let q = p.retract_vec(&v);
        assert!((p.local_log(&q) - &v).norm() < 1e-12);
        let back = p.manifold().point_from_coords(q.coords().as_slice()).unwrap();
        assert!(back.coord_distance(&q) < 1e-15);
        let ad_m = p.ad_matrix();
        assert_eq!(ad_m.view((0, 0), (2, 2)).into_owned(), DMatrix::identity(2, 2));
    }

    #[test]
    fn metric_norms() {
        let m = ManifoldHandle::product(vec![ManifoldHandle::euclidean(2), ManifoldHandle::euclidean(1)]);
        let metric = Metric::from_blocks(
            &m,
            &[DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]), DMatrix::from_element(1, 1, 3.0)],
        )
        .unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert!(metric.norm(&v) > 0.0);
        assert_eq!(metric.norm(&DVector::zeros(3)), 0.0);
        let p = metric.flat(&v);
        assert!((metric.sharp(&p) - &v).norm() < 1e-12);
        // product metric is the sum of factor forms
        let a = 2.0 * 1.0 + 2.0 * 0.5 * 1.0 * -2.0 + 1.0 * 4.0;
        assert!((metric.inner(&v, &v) - (a + 3.0 * 0.25)).abs() < 1e-12);
        assert!(Metric::from_blocks(&m, &[DMatrix::identity(2, 2), DMatrix::from_element(1, 1, -1.0)]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn retraction_log_round_trip(x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0) {
            let base = Point::rotation(so3::exp(&Vector3::new(0.4, -1.1, 0.7))).unwrap();
            let mut v = DVector::from_vec(vec![x, y, z]);
            // the local log inverts the retraction inside the injectivity radius π
            if v.norm() > 3.0 {
                v *= 3.0 / v.norm();
            }
            let back = base.local_log(&base.retract_vec(&v));
            proptest::prop_assert!((back - v).norm() < 1e-9);
        }
    }
}
