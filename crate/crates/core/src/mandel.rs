//! Orthonormal (Mandel) representations of symmetric second- and fourth-order tensors.
//!
//! Basis order is {e11, e22, e33, √2 e23, √2 e13, √2 e12}, so the Frobenius product of
//! two symmetric tensors is the dot product of their 6-vectors.

use nalgebra::{DMatrix, Matrix3, Matrix5, Matrix6, SMatrix, Vector3, Vector5, Vector6};
use rand::Rng;

use crate::error::{FdmnError, Result};
use crate::linalg::sym_eigen;

pub type Mat6 = Matrix6<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat5 = Matrix5<f64>;
pub type Vec5 = Vector5<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;
/// Maps a jump vector b (3) to the deviatoric coordinates (5) of sym(b⊗n) − (b·n) n⊗n.
pub type JumpBasis = SMatrix<f64, 5, 3>;

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Relative singular-value cutoff used by every rank decision.
pub const RANK_TOL: f64 = 1e-12;

pub fn to_mandel(m: &Mat3) -> Vec6 {
    Vec6::new(
        m[(0, 0)],
        m[(1, 1)],
        m[(2, 2)],
        SQRT2 * 0.5 * (m[(1, 2)] + m[(2, 1)]),
        SQRT2 * 0.5 * (m[(0, 2)] + m[(2, 0)]),
        SQRT2 * 0.5 * (m[(0, 1)] + m[(1, 0)]),
    )
}

pub fn from_mandel(v: &Vec6) -> Mat3 {
    let (a, b, c) = (v[3] / SQRT2, v[4] / SQRT2, v[5] / SQRT2);
    Mat3::new(v[0], c, b, c, v[1], a, b, a, v[2])
}

/// Mandel vector of sym(a⊗b).
pub fn sym_dyad(a: &Vec3, b: &Vec3) -> Vec6 {
    to_mandel(&(a * b.transpose()))
}

/// Mandel vector of the second-order identity.
pub fn identity_mandel() -> Vec6 {
    Vec6::new(1.0, 1.0, 1.0, 0.0, 0.0, 0.0)
}

/// Orthonormal basis of the traceless subspace (columns), fixed once and for all.
pub fn dev_basis() -> SMatrix<f64, 6, 5> {
    let a = 1.0 / SQRT2;
    let b = 1.0 / 6f64.sqrt();
    let mut m = SMatrix::<f64, 6, 5>::zeros();
    m[(0, 0)] = a;
    m[(1, 0)] = -a;
    m[(0, 1)] = b;
    m[(1, 1)] = b;
    m[(2, 1)] = -2.0 * b;
    m[(3, 2)] = 1.0;
    m[(4, 3)] = 1.0;
    m[(5, 4)] = 1.0;
    m
}

/// Orthogonal projector onto traceless tensors (P2).
pub fn deviatoric_projector() -> Mat6 {
    let i = identity_mandel();
    Mat6::identity() - i * i.transpose() / 3.0
}

pub fn to_dev5(m: &Mat6) -> Mat5 {
    let b = dev_basis();
    b.transpose() * m * b
}

pub fn from_dev5(m: &Mat5) -> Mat6 {
    let b = dev_basis();
    b * m * b.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymTensor(pub Vec6);

impl SymTensor {
    pub fn from_matrix(m: &Mat3) -> Self {
        SymTensor(to_mandel(m))
    }
    pub fn to_matrix(&self) -> Mat3 {
        from_mandel(&self.0)
    }
    pub fn dot(&self, other: &SymTensor) -> f64 {
        self.0.dot(&other.0)
    }
    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[1] + self.0[2]
    }
    pub fn deviator(&self) -> DevTensor {
        DevTensor(self.0 - identity_mandel() * (self.trace() / 3.0))
    }
}

/// Traceless symmetric tensor, convertible to coordinates in [`dev_basis`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevTensor(Vec6);

impl DevTensor {
    pub fn new(t: SymTensor) -> Result<Self> {
        if t.trace().abs() > 1e-12 * t.norm().max(f64::MIN_POSITIVE) {
            return Err(FdmnError::InvalidTensor(format!("trace {:e} is not zero", t.trace())));
        }
        Ok(DevTensor(t.0))
    }
    pub fn zero() -> Self {
        DevTensor(Vec6::zeros())
    }
    pub fn from_coords(c: &Vec5) -> Self {
        DevTensor(dev_basis() * c)
    }
    pub fn coords(&self) -> Vec5 {
        dev_basis().transpose() * self.0
    }
    pub fn mandel(&self) -> Vec6 {
        self.0
    }
    pub fn sym(&self) -> SymTensor {
        SymTensor(self.0)
    }
    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
    pub fn scale(&self, s: f64) -> Self {
        DevTensor(self.0 * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KinematicClass {
    Unconstrained,
    Incompressible,
}

/// Primal tensors are viscosities, dual tensors fluidities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Primal,
    Dual,
}

impl Role {
    pub fn flip(self) -> Role {
        match self {
            Role::Primal => Role::Dual,
            Role::Dual => Role::Primal,
        }
    }
    /// Γ slot matching this role: strain-rate jumps for primal, traction continuity for dual.
    pub fn slot(self) -> Slot {
        match self {
            Role::Primal => Slot::One,
            Role::Dual => Slot::Two,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Regular,
    Rigid,
    Void,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    One,
    Two,
}

/// Unit vector in R³.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction(Vec3);

impl Direction {
    /// Normalizes `v`; fails on a (numerically) zero vector.
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !(n > 1e-300) || !n.is_finite() {
            return Err(FdmnError::InvalidTensor("direction has zero length".into()));
        }
        Ok(Direction(v / n))
    }
    pub fn e(i: usize) -> Self {
        let mut v = Vec3::zeros();
        v[i] = 1.0;
        Direction(v)
    }
    pub fn vec(&self) -> &Vec3 {
        &self.0
    }
    pub fn rotated(&self, r: &Mat3) -> Self {
        Direction(r * self.0)
    }
}

/// Orthonormal basis of the class subspace (6×6 identity or the 6×5 deviatoric basis).
pub fn class_basis(class: KinematicClass) -> DMatrix<f64> {
    match class {
        KinematicClass::Unconstrained => DMatrix::identity(6, 6),
        KinematicClass::Incompressible => {
            let b = dev_basis();
            DMatrix::from_fn(6, 5, |i, j| b[(i, j)])
        }
    }
}

pub fn class_projector(class: KinematicClass) -> Mat6 {
    match class {
        KinematicClass::Unconstrained => Mat6::identity(),
        KinematicClass::Incompressible => deviatoric_projector(),
    }
}

pub(crate) fn to_fixed6(m: &DMatrix<f64>) -> Mat6 {
    Mat6::from_fn(|i, j| m[(i, j)])
}

pub(crate) fn to_dyn6(m: &Mat6) -> DMatrix<f64> {
    DMatrix::from_fn(6, 6, |i, j| m[(i, j)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialTensor {
    matrix: Mat6,
    class: KinematicClass,
    role: Role,
    special: Special,
}

impl MaterialTensor {
    /// Validated constructor for regular tensors: symmetric, kernel I when incompressible,
    /// positive definite on the class subspace.
    pub fn new(matrix: Mat6, class: KinematicClass, role: Role) -> Result<Self> {
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(FdmnError::InvalidTensor("non-finite entry".into()));
        }
        let norm = matrix.norm();
        let asym = (matrix - matrix.transpose()).norm();
        if asym > 1e-10 * norm {
            return Err(FdmnError::InvalidTensor(format!("not symmetric (defect {asym:e})")));
        }
        if class == KinematicClass::Incompressible {
            let k = (matrix * identity_mandel()).norm();
            if k > 1e-12 * norm {
                return Err(FdmnError::InvalidTensor(format!(
                    "identity not in kernel (|M i| = {k:e})"
                )));
            }
        }
        let t = Self::raw(matrix, class, role);
        let ev = t.subspace_eigenvalues();
        if ev[0] <= 0.0 {
            return Err(FdmnError::SingularOnSubspace { min_eigenvalue: ev[0] });
        }
        Ok(t)
    }

    /// Unvalidated constructor that restores exact symmetry and the incompressible kernel.
    pub(crate) fn raw(matrix: Mat6, class: KinematicClass, role: Role) -> Self {
        let sym = (matrix + matrix.transpose()) * 0.5;
        let matrix = match class {
            KinematicClass::Unconstrained => sym,
            KinematicClass::Incompressible => {
                let p = deviatoric_projector();
                p * sym * p
            }
        };
        MaterialTensor { matrix, class, role, special: Special::Regular }
    }

    /// Incompressible tensor from deviatoric coordinates.
    pub fn from_dev5(m: &Mat5, role: Role) -> Self {
        let s = (m + m.transpose()) * 0.5;
        MaterialTensor {
            matrix: from_dev5(&s),
            class: KinematicClass::Incompressible,
            role,
            special: Special::Regular,
        }
    }

    /// Isotropic incompressible viscosity 2η P2.
    pub fn isotropic_viscosity(eta: f64) -> Self {
        MaterialTensor {
            matrix: deviatoric_projector() * (2.0 * eta),
            class: KinematicClass::Incompressible,
            role: Role::Primal,
            special: Special::Regular,
        }
    }

    pub fn identity(class: KinematicClass, role: Role) -> Self {
        MaterialTensor { matrix: class_projector(class), class, role, special: Special::Regular }
    }

    /// Rigid sentinel: zero fluidity.
    pub fn rigid(class: KinematicClass) -> Self {
        MaterialTensor { matrix: Mat6::zeros(), class, role: Role::Dual, special: Special::Rigid }
    }

    /// Void sentinel: zero viscosity.
    pub fn void(class: KinematicClass) -> Self {
        MaterialTensor { matrix: Mat6::zeros(), class, role: Role::Primal, special: Special::Void }
    }

    pub fn matrix(&self) -> &Mat6 {
        &self.matrix
    }
    pub fn class(&self) -> KinematicClass {
        self.class
    }
    pub fn role(&self) -> Role {
        self.role
    }
    pub fn special(&self) -> Special {
        self.special
    }
    pub fn is_regular(&self) -> bool {
        self.special == Special::Regular
    }

    pub fn dev5(&self) -> Mat5 {
        to_dev5(&self.matrix)
    }

    pub fn scaled(&self, s: f64) -> Self {
        MaterialTensor { matrix: self.matrix * s, ..self.clone() }
    }

    /// Uᵀ M U in the class-subspace basis.
    pub fn restricted(&self) -> DMatrix<f64> {
        let u = class_basis(self.class);
        u.transpose() * to_dyn6(&self.matrix) * u
    }

    /// Ascending eigenvalues on the class subspace.
    pub fn subspace_eigenvalues(&self) -> Vec<f64> {
        sym_eigen(&self.restricted()).0
    }

    pub fn apply(&self, d: &Vec6) -> Vec6 {
        self.matrix * d
    }
}

/// Mandel matrix of Γ1/Γ2 for the given class, assembled column-wise from the action formulas.
pub fn gamma_projector(n: &Direction, class: KinematicClass, slot: Slot) -> Mat6 {
    let nv = n.vec();
    let nn = nv * nv.transpose();
    let factor = match class {
        KinematicClass::Unconstrained => 1.0,
        KinematicClass::Incompressible => 2.0,
    };
    let mut g1 = Mat6::zeros();
    for j in 0..6 {
        let mut e = Vec6::zeros();
        e[j] = 1.0;
        let x = from_mandel(&e);
        let xn = x * nv;
        let t = xn * nv.transpose() + nv * xn.transpose() - nn * (factor * nv.dot(&xn));
        g1.set_column(j, &to_mandel(&t));
    }
    let p = class_projector(class);
    let g1 = g1 * p;
    match slot {
        Slot::One => g1,
        Slot::Two => p - g1,
    }
}

/// Orthonormal basis of the range of a symmetric projector.
fn range_basis(p: &Mat6) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(&to_dyn6(p));
    let cols: Vec<usize> = (0..6).filter(|&i| vals[i] > 0.5).collect();
    DMatrix::from_fn(6, cols.len(), |i, j| vecs[(i, cols[j])])
}

/// Γ (Γ A0 Γ)† Γ with the slot chosen by the role of `a0`.
pub fn gamma_weighted(n: &Direction, a0: &MaterialTensor) -> Result<Mat6> {
    gamma_weighted_slot(n, a0, a0.role().slot())
}

pub fn gamma_weighted_slot(n: &Direction, a0: &MaterialTensor, slot: Slot) -> Result<Mat6> {
    let p = gamma_projector(n, a0.class(), slot);
    let w = range_basis(&p);
    let r = w.ncols();
    let m = w.transpose() * to_dyn6(a0.matrix()) * &w;
    let (vals, vecs) = sym_eigen(&m);
    let smax = vals.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let rank = vals.iter().filter(|&&l| l.abs() > RANK_TOL * smax).count();
    if smax <= 0.0 || rank < r {
        return Err(FdmnError::DegenerateReference { rank, expected: r });
    }
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(r, vals.iter().map(|l| 1.0 / l)));
    Ok(to_fixed6(&(&w * (&vecs * d * vecs.transpose()) * w.transpose())))
}

/// 6×6 Mandel matrix Q with mandel(R X Rᵀ) = Q mandel(X).
pub fn mandel_rotation(r: &Mat3) -> Mat6 {
    let mut q = Mat6::zeros();
    for j in 0..6 {
        let mut e = Vec6::zeros();
        e[j] = 1.0;
        let x = from_mandel(&e);
        q.set_column(j, &to_mandel(&(r * x * r.transpose())));
    }
    q
}

pub fn check_rotation(r: &Mat3) -> Result<()> {
    let defect = (r.transpose() * r - Mat3::identity()).norm();
    let det = r.determinant();
    if !(defect <= 1e-12) || !((det - 1.0).abs() <= 1e-12) {
        return Err(FdmnError::NotARotation { defect: defect.max((det - 1.0).abs()) });
    }
    Ok(())
}

/// Rayleigh product R★A.
pub fn rotate_material(a: &MaterialTensor, r: &Mat3) -> Result<MaterialTensor> {
    check_rotation(r)?;
    if !a.is_regular() {
        return Ok(a.clone());
    }
    let q = mandel_rotation(r);
    Ok(MaterialTensor::raw(q * a.matrix() * q.transpose(), a.class(), a.role()))
}

/// Inverse on the class subspace, with kernel I for incompressible tensors; flips the role.
pub fn subspace_pinv(a: &MaterialTensor) -> Result<MaterialTensor> {
    if !a.is_regular() {
        return Err(FdmnError::InvalidTensor("sentinel tensors have no finite inverse".into()));
    }
    let u = class_basis(a.class());
    let r = a.restricted();
    let (vals, vecs) = sym_eigen(&r);
    let amax = vals.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let lmin = *vals.iter().min_by(|x, y| x.abs().partial_cmp(&y.abs()).unwrap()).unwrap();
    if !(lmin.abs() > RANK_TOL * amax) {
        return Err(FdmnError::SingularOnSubspace { min_eigenvalue: lmin });
    }
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(vals.len(), vals.iter().map(|l| 1.0 / l)));
    let inv = &vecs * d * vecs.transpose();
    let full = &u * inv * u.transpose();
    Ok(MaterialTensor::raw(to_fixed6(&full), a.class(), a.role().flip()))
}

/// Rotation by `angle` about the unit axis `axis` (Rodrigues).
pub fn axis_angle_rotation(axis: &Vec3, angle: f64) -> Mat3 {
    let k = Mat3::new(0.0, -axis[2], axis[1], axis[2], 0.0, -axis[0], -axis[1], axis[0], 0.0);
    Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// Uniformly distributed rotation from a random unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    loop {
        let q: [f64; 4] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2: f64 = q.iter().map(|x| x * x).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                q[0], q[1], q[2], q[3],
            ));
            return *uq.to_rotation_matrix().matrix();
        }
    }
}

/// Random unit vector, uniform on the sphere.
pub fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Direction {
    Direction(random_rotation(rng).column(0).into_owned())
}

/// Jump basis V(n): column j holds the deviatoric coordinates of sym(e_j⊗n) − n_j n⊗n.
/// V n = 0, and its range is the 2-dimensional jump space of incompressible laminates.
pub fn jump_basis(n: &Vec3) -> JumpBasis {
    let b = dev_basis();
    let nn = n * n.transpose();
    let mut v = JumpBasis::zeros();
    for j in 0..3 {
        let mut t = nn * (-n[j]);
        for k in 0..3 {
            t[(j, k)] += 0.5 * n[k];
            t[(k, j)] += 0.5 * n[k];
        }
        v.set_column(j, &(b.transpose() * to_mandel(&t)));
    }
    v
}

/// ∂V/∂n_k for k = 0, 1, 2.
pub fn jump_basis_derivative(n: &Vec3) -> [JumpBasis; 3] {
    let b = dev_basis();
    let nn = n * n.transpose();
    let mut out = [JumpBasis::zeros(); 3];
    for (k, dv) in out.iter_mut().enumerate() {
        let mut ek = Vec3::zeros();
        ek[k] = 1.0;
        let dnn = ek * n.transpose() + n * ek.transpose();
        for j in 0..3 {
            let mut t = dnn * (-n[j]);
            if j == k {
                t -= nn;
            }
            t[(j, k)] += 0.5;
            t[(k, j)] += 0.5;
            dv.set_column(j, &(b.transpose() * to_mandel(&t)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd6(rng: &mut ChaCha8Rng, class: KinematicClass) -> MaterialTensor {
        let a = Mat6::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let m = a * a.transpose() + Mat6::identity() * 0.5;
        let p = class_projector(class);
        MaterialTensor::new(p * m * p, class, Role::Primal).unwrap()
    }

    #[test]
    fn mandel_round_trip_and_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let a = a + a.transpose();
            let b = Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let b = b + b.transpose();
            assert!((from_mandel(&to_mandel(&a)) - a).norm() < 1e-15);
            assert_relative_eq!(to_mandel(&a).dot(&to_mandel(&b)), a.dot(&b), epsilon = 1e-13);
        }
    }

    #[test]
    fn dev_basis_is_orthonormal_and_traceless() {
        let b = dev_basis();
        assert!((b.transpose() * b - Mat5::identity()).norm() < 1e-15);
        assert!((b.transpose() * identity_mandel()).norm() < 1e-15);
        let c = Vec5::new(0.3, -1.0, 2.0, 0.1, 0.7);
        assert_relative_eq!(DevTensor::from_coords(&c).norm(), c.norm(), epsilon = 1e-14);
    }

    #[test]
    fn projector_e3_unconstrained_fixes_normal_shears() {
        let p = gamma_projector(&Direction::e(2), KinematicClass::Unconstrained, Slot::One);
        for (i, expect) in [0.0, 0.0, 1.0, 1.0, 1.0, 0.0].iter().enumerate() {
            assert_relative_eq!(p[(i, i)], *expect, epsilon = 1e-15);
        }
        assert!((p - Mat6::from_diagonal(&p.diagonal())).norm() < 1e-15);
    }

    #[test]
    fn projector_ranks() {
        let n = Direction::e(2);
        let rank = |m: Mat6| m.trace().round() as usize;
        assert_eq!(rank(gamma_projector(&n, KinematicClass::Unconstrained, Slot::One)), 3);
        assert_eq!(rank(gamma_projector(&n, KinematicClass::Unconstrained, Slot::Two)), 3);
        assert_eq!(rank(gamma_projector(&n, KinematicClass::Incompressible, Slot::One)), 2);
        assert_eq!(rank(gamma_projector(&n, KinematicClass::Incompressible, Slot::Two)), 3);
    }

    #[test]
    fn weighted_gamma_of_identity_and_isotropic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = random_direction(&mut rng);
        for class in [KinematicClass::Unconstrained, KinematicClass::Incompressible] {
            let id = MaterialTensor::identity(class, Role::Primal);
            let g = gamma_weighted(&n, &id).unwrap();
            assert!((g - gamma_projector(&n, class, Slot::One)).norm() < 1e-13);
        }
        let iso = MaterialTensor::isotropic_viscosity(3.5);
        let g = gamma_weighted(&n, &iso).unwrap();
        let p = gamma_projector(&n, KinematicClass::Incompressible, Slot::One) / 7.0;
        assert!((g - p).norm() < 1e-14);
    }

    #[test]
    fn weighted_gamma_degenerate_reference() {
        let mut m = Mat6::zeros();
        m[(0, 0)] = 1.0;
        let a = MaterialTensor::raw(m, KinematicClass::Unconstrained, Role::Primal);
        let e = gamma_weighted(&Direction::e(2), &a).unwrap_err();
        assert!(matches!(e, FdmnError::DegenerateReference { .. }));
    }

    #[test]
    fn pinv_examples() {
        let iso = MaterialTensor::isotropic_viscosity(2.0);
        let k = subspace_pinv(&iso).unwrap();
        assert!((k.matrix() - deviatoric_projector() / 4.0).norm() < 1e-15);
        assert_eq!(k.role(), Role::Dual);
        let id = MaterialTensor::identity(KinematicClass::Unconstrained, Role::Primal);
        assert!((subspace_pinv(&id).unwrap().matrix() - Mat6::identity()).norm() < 1e-15);
        let mut m = deviatoric_projector();
        m[(0, 0)] = 0.0;
        let s = MaterialTensor::raw(m * 0.0, KinematicClass::Incompressible, Role::Primal);
        assert!(matches!(subspace_pinv(&s), Err(FdmnError::SingularOnSubspace { .. })));
    }

    #[test]
    fn rotation_checks() {
        let mut r = Mat3::identity();
        r[(0, 0)] = -1.0;
        let iso = MaterialTensor::isotropic_viscosity(1.0);
        assert!(matches!(rotate_material(&iso, &r), Err(FdmnError::NotARotation { .. })));
        assert!((rotate_material(&iso, &Mat3::identity()).unwrap().matrix() - iso.matrix()).norm() < 1e-15);
    }

    #[test]
    fn jump_basis_annihilates_normal_and_derivative_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = *random_direction(&mut rng).vec();
        let v = jump_basis(&n);
        assert!((v * n).norm() < 1e-15);
        let dv = jump_basis_derivative(&n);
        let h = 1e-6;
        for (k, dvk) in dv.iter().enumerate() {
            let mut np = n;
            np[k] += h;
            let mut nm = n;
            nm[k] -= h;
            let fd = (jump_basis(&np) - jump_basis(&nm)) / (2.0 * h);
            assert!((fd - dvk).norm() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn projectors_are_orthogonal_and_complementary(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = random_direction(&mut rng);
            for class in [KinematicClass::Unconstrained, KinematicClass::Incompressible] {
                let p1 = gamma_projector(&n, class, Slot::One);
                let p2 = gamma_projector(&n, class, Slot::Two);
                prop_assert!((p1 - p1.transpose()).norm() < 1e-12);
                prop_assert!((p1 * p1 - p1).norm() < 1e-12);
                prop_assert!((p2 * p2 - p2).norm() < 1e-12);
                prop_assert!((p1 * p2).norm() < 1e-12);
                prop_assert!((p1 + p2 - class_projector(class)).norm() < 1e-12);
            }
        }

        #[test]
        fn weighted_gamma_is_generalized_inverse(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = random_direction(&mut rng);
            for class in [KinematicClass::Unconstrained, KinematicClass::Incompressible] {
                let a = random_spd6(&mut rng, class);
                let g = gamma_weighted(&n, &a).unwrap();
                prop_assert!((g * a.matrix() * g - g).norm() < 1e-12 * g.norm());
            }
        }

        #[test]
        fn rotation_is_a_group_action_and_preserves_spectrum(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd6(&mut rng, KinematicClass::Incompressible);
            let r1 = random_rotation(&mut rng);
            let r2 = random_rotation(&mut rng);
            let lhs = rotate_material(&rotate_material(&a, &r2).unwrap(), &r1).unwrap();
            let rhs = rotate_material(&a, &(r1 * r2)).unwrap();
            prop_assert!((lhs.matrix() - rhs.matrix()).norm() < 1e-12 * a.matrix().norm());
            let e1 = a.subspace_eigenvalues();
            let e2 = rhs.subspace_eigenvalues();
            for (x, y) in e1.iter().zip(e2.iter()) {
                prop_assert!((x - y).abs() < 1e-12 * e1[e1.len() - 1]);
            }
            let iso = MaterialTensor::isotropic_viscosity(1.7);
            let riso = rotate_material(&iso, &r1).unwrap();
            prop_assert!((riso.matrix() - iso.matrix()).norm() < 1e-13);
        }

        #[test]
        fn pinv_is_involutive(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for class in [KinematicClass::Unconstrained, KinematicClass::Incompressible] {
                let a = random_spd6(&mut rng, class);
                let k = subspace_pinv(&a).unwrap();
                let err = (a.matrix() * k.matrix() - class_projector(class)).norm(); prop_assert!(err < 1e-12, "err {err:e} class {class:?}");
                let aa = subspace_pinv(&k).unwrap();
                prop_assert!((aa.matrix() - a.matrix()).norm() < 1e-11 * a.matrix().norm());
            }
        }
    }
}
