//! Constitutive models and linear sample generation.
//!
//! Units are nondimensionalized by a reference viscosity of 1 Pa·s and a reference rate of
//! 1 s⁻¹, so sample viscosities are 2·10^p in those units.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{FdmnError, Result};
use crate::mandel::{
    axis_angle_rotation, deviatoric_projector, to_mandel, DevTensor, Direction, KinematicClass, Mat3, Mat5,
    Mat6, MaterialTensor, Role, Vec3, Vec5, Vec6,
};

/// Incompressible viscous response in deviatoric coordinates.
pub trait ViscousLaw: Sync {
    fn stress(&self, d: &Vec5) -> Vec5;
    fn tangent(&self, d: &Vec5) -> Mat5;
    /// Dissipation potential whose gradient is the stress.
    fn potential(&self, d: &Vec5) -> f64;
    fn stress_tangent(&self, d: &Vec5) -> (Vec5, Mat5) {
        (self.stress(d), self.tangent(d))
    }
}

/// Linear viscous phase τ = M D.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearViscous(pub Mat5);

impl LinearViscous {
    pub fn from_tensor(m: &MaterialTensor) -> Self {
        LinearViscous(m.dev5())
    }
}

impl ViscousLaw for LinearViscous {
    fn stress(&self, d: &Vec5) -> Vec5 {
        self.0 * d
    }
    fn tangent(&self, _d: &Vec5) -> Mat5 {
        self.0
    }
    fn potential(&self, d: &Vec5) -> f64 {
        0.5 * d.dot(&(self.0 * d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossFluid {
    pub eta0: f64,
    pub eta_inf: f64,
    pub k: f64,
    pub m: f64,
}

impl CrossFluid {
    pub fn new(eta0: f64, eta_inf: f64, k: f64, m: f64) -> Result<Self> {
        if !(eta_inf > 0.0) {
            return Err(FdmnError::BadInterval { name: "eta_inf", value: eta_inf });
        }
        if !(eta0 > eta_inf) {
            return Err(FdmnError::BadInterval { name: "eta0", value: eta0 });
        }
        if !(k > 0.0) {
            return Err(FdmnError::BadInterval { name: "k", value: k });
        }
        if !(m > 0.0) {
            return Err(FdmnError::BadInterval { name: "m", value: m });
        }
        Ok(CrossFluid { eta0, eta_inf, k, m })
    }

    /// Polyamide 6 at 250 °C.
    pub fn polyamide6() -> Self {
        CrossFluid { eta0: 288.9, eta_inf: 15.0, k: 10.9e-4, m: 1.1 }
    }

    pub fn viscosity(&self, rate: f64) -> f64 {
        self.eta_inf + (self.eta0 - self.eta_inf) / (1.0 + (self.k * rate).powf(self.m))
    }

    /// η'(γ̇)/γ̇, finite for m ≥ 2 and otherwise only evaluated at positive rates.
    fn dviscosity_over_rate(&self, rate: f64) -> f64 {
        let x = (self.k * rate).powf(self.m);
        -(self.eta0 - self.eta_inf) * self.m * x / (rate * rate * (1.0 + x) * (1.0 + x))
    }

    /// ∫₀^γ̇ η(s) s ds.
    pub fn potential_of_rate(&self, rate: f64) -> f64 {
        if rate <= 0.0 {
            return 0.0;
        }
        let x = self.k * rate;
        self.eta_inf * 0.5 * rate * rate
            + (self.eta0 - self.eta_inf) / (self.k * self.k) * reduced_cross_integral(x, self.m)
    }

    pub fn equivalent_rate(d: &Vec5) -> f64 {
        (2.0 * d.dot(d)).sqrt()
    }
}

/// ∫₀^X x/(1+x^m) dx.
fn reduced_cross_integral(x_max: f64, m: f64) -> f64 {
    if m == 1.0 {
        return x_max - x_max.ln_1p();
    }
    let f = |x: f64| x / (1.0 + x.powf(m));
    let head = x_max.min(1.0);
    let mut total = quadrature::integrate(f, 0.0, head, 1e-16 * head * head).integral;
    if x_max > 1.0 {
        // log substitution keeps the slowly decaying tail smooth
        let g = |t: f64| {
            let e = t.exp();
            e * e / (1.0 + e.powf(m))
        };
        let upper = x_max.ln();
        let scale = f(x_max) * x_max;
        total += quadrature::integrate(g, 0.0, upper, 1e-15 * scale.max(1.0) * upper.max(1.0)).integral;
    }
    total
}

impl ViscousLaw for CrossFluid {
    fn stress(&self, d: &Vec5) -> Vec5 {
        d * (2.0 * self.viscosity(Self::equivalent_rate(d)))
    }
    fn tangent(&self, d: &Vec5) -> Mat5 {
        let rate = Self::equivalent_rate(d);
        let mut t = Mat5::identity() * (2.0 * self.viscosity(rate));
        if rate > 0.0 {
            t += d * d.transpose() * (4.0 * self.dviscosity_over_rate(rate));
        }
        t
    }
    fn potential(&self, d: &Vec5) -> f64 {
        self.potential_of_rate(Self::equivalent_rate(d))
    }
    fn stress_tangent(&self, d: &Vec5) -> (Vec5, Mat5) {
        let rate = Self::equivalent_rate(d);
        let eta = self.viscosity(rate);
        let mut t = Mat5::identity() * (2.0 * eta);
        if rate > 0.0 {
            t += d * d.transpose() * (4.0 * self.dviscosity_over_rate(rate));
        }
        (d * (2.0 * eta), t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossResponse {
    pub stress: DevTensor,
    /// ∂τ/∂D as a Mandel matrix acting on traceless tensors.
    pub tangent: MaterialTensor,
    pub potential: f64,
}

pub fn cross_stress(fluid: &CrossFluid, d: &DevTensor) -> CrossResponse {
    let c = d.coords();
    let (s, t) = fluid.stress_tangent(&c);
    CrossResponse {
        stress: DevTensor::from_coords(&s),
        tangent: MaterialTensor::from_dev5(&t, Role::Primal),
        potential: fluid.potential(&c),
    }
}

/// Eigenvalues of the second-order fiber orientation tensor, used as metadata only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationState {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl OrientationState {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let tol = 1e-12;
        if !(lambda1 <= 1.0 + tol && lambda1 >= 1.0 / 3.0 - tol) {
            return Err(FdmnError::BadInterval { name: "lambda1", value: lambda1 });
        }
        if !(lambda2 <= lambda1.min(1.0 - lambda1) + tol && lambda2 >= (1.0 - lambda1) / 2.0 - tol) {
            return Err(FdmnError::BadInterval { name: "lambda2", value: lambda2 });
        }
        Ok(OrientationState { lambda1, lambda2 })
    }

    pub fn isotropic() -> Self {
        OrientationState { lambda1: 1.0 / 3.0, lambda2: 1.0 / 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Teacher,
    ExternalDns,
}

impl Provenance {
    pub fn tag(&self) -> &'static str {
        match self {
            Provenance::Teacher => "teacher",
            Provenance::ExternalDns => "external-dns",
        }
    }
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "teacher" => Some(Provenance::Teacher),
            "external-dns" => Some(Provenance::ExternalDns),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub matrix: MaterialTensor,
    pub fiber: MaterialTensor,
    pub effective: MaterialTensor,
    pub provenance: Provenance,
    pub orientation: OrientationState,
}

impl SampleRecord {
    pub fn new(
        matrix: MaterialTensor,
        effective: MaterialTensor,
        provenance: Provenance,
        orientation: OrientationState,
    ) -> Result<Self> {
        for (name, t) in [("matrix", &matrix), ("effective", &effective)] {
            if t.class() != KinematicClass::Incompressible || !t.is_regular() || t.role() != Role::Primal {
                return Err(FdmnError::InvalidTensor(format!("{name} must be an incompressible viscosity")));
            }
            if !(t.subspace_eigenvalues()[0] > 0.0) {
                return Err(FdmnError::InvalidTensor(format!("{name} is not positive definite on Sym0")));
            }
        }
        Ok(SampleRecord {
            matrix,
            fiber: MaterialTensor::rigid(KinematicClass::Incompressible),
            effective,
            provenance,
            orientation,
        })
    }
}

/// Parameters of one transversely isotropic sample viscosity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub p: f64,
    pub g: f64,
    pub a: [f64; 4],
}

impl SampleSpec {
    pub fn validate(&self) -> Result<()> {
        let tol = 1e-12;
        let checks = [
            ("p", self.p, -3.0, 3.0),
            ("a1", self.a[0], 0.0, 2.0 * PI),
            ("a2 - sin(a2)", self.a[1] - self.a[1].sin(), 0.0, PI),
            ("a3", self.a[2], 0.0, PI),
            ("a4", self.a[3], 0.0, 2.0 * PI),
        ];
        for (name, v, lo, hi) in checks {
            if !(v >= lo - tol && v <= hi + tol) {
                return Err(FdmnError::BadInterval { name, value: v });
            }
        }
        if !(self.g >= 0.0 && self.g < 1.0) {
            return Err(FdmnError::BadInterval { name: "g", value: self.g });
        }
        Ok(())
    }

    /// Pseudo-random spec from the unit cube map used by [`sobol_specs`].
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let u: [f64; 6] = std::array::from_fn(|_| rng.gen::<f64>());
        Self::from_unit_cube(&u)
    }

    pub fn from_unit_cube(u: &[f64; 6]) -> Self {
        SampleSpec {
            p: -3.0 + 6.0 * u[0],
            a: [2.0 * PI * u[1], invert_angle_measure(PI * u[2]), PI * u[3], 2.0 * PI * u[4]],
            g: 0.95 * u[5],
        }
    }
}

/// Solves a − sin(a) = u for a ≥ 0.
pub fn invert_angle_measure(u: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 4.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid - mid.sin() < u {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Unit traceless diagonal tensor A(a1).
pub fn diagonal_perturbation(a1: f64) -> Mat3 {
    // algebraically equal to diag(ξ2 cos, ξ2 sin, 1/√2) / √((ξ1+1)/(2ξ1+1)), but that form
    // cancels catastrophically near cos + sin = 0
    let (s, c) = a1.sin_cos();
    let v = Vec3::new(c, s, -(c + s)) * (-(c + s).signum());
    Mat3::from_diagonal(&v) / (2.0 * (1.0 + c * s)).sqrt()
}

/// A'(a) = Q(a2, a3, a4) A(a1) Qᵀ as a unit Mandel vector.
pub fn perturbation_direction(a: &[f64; 4]) -> Vec6 {
    let (s3, c3) = a[2].sin_cos();
    let (s4, c4) = a[3].sin_cos();
    let axis = Vec3::new(s3 * c4, s3 * s4, c3);
    let q = axis_angle_rotation(&axis, a[1]);
    to_mandel(&(q * diagonal_perturbation(a[0]) * q.transpose()))
}

/// V = 2η2 (P2 − g A'⊗A') with η2 = 10^p.
pub fn sample_viscosity(spec: &SampleSpec) -> Result<MaterialTensor> {
    spec.validate()?;
    let eta2 = 10f64.powf(spec.p);
    let a = perturbation_direction(&spec.a);
    let m: Mat6 = (deviatoric_projector() - a * a.transpose() * spec.g) * (2.0 * eta2);
    Ok(MaterialTensor::raw(m, KinematicClass::Incompressible, Role::Primal))
}

fn scramble_seed(seed: u64) -> u32 {
    (seed as u32) ^ ((seed >> 32) as u32)
}

/// Owen-scrambled Sobol points mapped to sample specs (six dimensions: p, a1..a4, g).
pub fn sobol_specs(count: usize, seed: u64) -> Result<Vec<SampleSpec>> {
    if count == 0 || count > (1 << 16) {
        return Err(FdmnError::InvalidSpec(format!("sample count {count} outside 1..=65536")));
    }
    let s = scramble_seed(seed);
    Ok((0..count as u32)
        .into_par_iter()
        .map(|i| {
            let u: [f64; 6] = std::array::from_fn(|d| sobol_burley::sample(i, d as u32, s) as f64);
            SampleSpec::from_unit_cube(&u)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadCase {
    /// 0-based load direction index.
    pub load: usize,
    pub direction: DevTensor,
    pub rate: f64,
}

impl LoadCase {
    pub fn strain_rate(&self) -> DevTensor {
        self.direction.scale(self.rate)
    }
}

pub fn shear_rates() -> Vec<f64> {
    let mut out = Vec::with_capacity(13);
    for b in 1..=4 {
        for a in [1.0, 2.0, 5.0] {
            out.push(a * 10f64.powi(b));
        }
    }
    out.push(1e5);
    out
}

/// The six unit deviatoric load directions.
pub fn load_directions() -> [DevTensor; 6] {
    let s = (2.0f64 / 3.0).sqrt();
    let t = (1.5f64).sqrt();
    std::array::from_fn(|i| {
        let mut v = Vec6::zeros();
        if i < 3 {
            for j in 0..3 {
                v[j] = if i == j { s } else { -0.5 * s };
            }
        } else {
            v[i] = s * t;
        }
        DevTensor::new(crate::mandel::SymTensor(v)).expect("traceless by construction")
    })
}

/// 6 directions × 13 shear rates, ordered direction-major.
pub fn load_battery() -> Vec<LoadCase> {
    let dirs = load_directions();
    let rates = shear_rates();
    let mut out = Vec::with_capacity(78);
    for (load, d) in dirs.iter().enumerate() {
        for &rate in &rates {
            out.push(LoadCase { load, direction: *d, rate });
        }
    }
    out
}

pub fn random_unit_dev<R: Rng + ?Sized>(rng: &mut R) -> DevTensor {
    let c = Vec5::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    DevTensor::from_coords(&(c / c.norm()))
}

/// Direction helper re-exported for callers building normals from raw vectors.
pub fn direction(x: f64, y: f64, z: f64) -> Result<Direction> {
    Direction::new(Vec3::new(x, y, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_table_values() {
        let f = CrossFluid::polyamide6();
        assert_eq!(f.viscosity(0.0), 288.9);
        assert!((f.viscosity(1e-12) - 288.9).abs() < 1e-9);
        assert!((f.viscosity(1.0 / f.k) - 151.95).abs() < 1e-12);
        assert!((f.viscosity(1e12) - 15.0).abs() < 1e-4);
        let z = cross_stress(&f, &DevTensor::zero());
        assert_eq!(z.stress.norm(), 0.0);
        assert_eq!(z.potential, 0.0);
    }

    #[test]
    fn potential_matches_reference_quadrature() {
        let f = CrossFluid::polyamide6();
        for rate in [1e-3, 0.5, 10.0, 917.0, 3e4, 1e5, 1e8] {
            // composite Simpson on a log grid as an independent reference
            let n = 200_000;
            let (lo, hi) = ((rate * 1e-12f64).ln(), rate.ln());
            let h = (hi - lo) / n as f64;
            let g = |t: f64| {
                let s = t.exp();
                f.viscosity(s) * s * s
            };
            let mut acc = g(lo) + g(hi);
            for i in 1..n {
                acc += g(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let reference = acc * h / 3.0;
            let p = f.potential_of_rate(rate);
            assert!((p - reference).abs() < 1e-10 * reference, "{rate}: {p} vs {reference}");
        }
    }

    #[test]
    fn m_equal_one_closed_form_matches_quadrature() {
        let x = 37.0;
        let closed = reduced_cross_integral(x, 1.0);
        let quad = quadrature::integrate(|t: f64| t / (1.0 + t), 0.0, x, 1e-12).integral;
        assert!((closed - quad).abs() < 1e-11 * closed);
    }

    #[test]
    fn load_battery_shape() {
        let b = load_battery();
        assert_eq!(b.len(), 78);
        for d in load_directions() {
            assert!((d.norm() - 1.0).abs() < 1e-15);
            assert!(d.sym().trace().abs() < 1e-15);
        }
        let d4 = load_directions()[3].mandel();
        assert!((d4[3] - 1.0).abs() < 1e-15);
        assert_eq!(shear_rates()[0], 10.0);
        assert_eq!(shear_rates()[12], 1e5);
    }

    #[test]
    fn isotropic_sample_for_zero_perturbation() {
        let spec = SampleSpec { p: 0.5, g: 0.0, a: [1.0, 1.0, 1.0, 1.0] };
        let v = sample_viscosity(&spec).unwrap();
        let iso = MaterialTensor::isotropic_viscosity(10f64.powf(0.5));
        assert!((v.matrix() - iso.matrix()).norm() < 1e-13 * iso.matrix().norm());
        let bad = SampleSpec { p: 4.0, ..spec };
        assert!(matches!(sample_viscosity(&bad), Err(FdmnError::BadInterval { name: "p", .. })));
    }

    #[test]
    fn angle_measure_inverse() {
        for u in [0.0, 0.1, 1.0, 2.5, PI] {
            let a = invert_angle_measure(u);
            assert!((a - a.sin() - u).abs() < 1e-14);
        }
    }

    #[test]
    fn sobol_is_deterministic_and_in_range() {
        let a = sobol_specs(32, 7).unwrap();
        assert_eq!(a, sobol_specs(32, 7).unwrap());
        assert_ne!(a, sobol_specs(32, 8).unwrap());
        for s in &a {
            s.validate().unwrap();
            assert!(s.g <= 0.95);
        }
    }

    #[test]
    fn orientation_triangle() {
        assert!(OrientationState::new(1.0, 0.0).is_ok());
        assert!(OrientationState::new(0.5, 0.5).is_ok());
        assert!(OrientationState::new(0.5, 0.1).is_err());
        assert!(OrientationState::new(0.2, 0.4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn perturbation_is_unit_and_traceless(a1 in 0.0..2.0 * PI, u in 0.0..PI, a3 in 0.0..PI, a4 in 0.0..2.0 * PI) {
            let a = perturbation_direction(&[a1, invert_angle_measure(u), a3, a4]);
            prop_assert!((a.norm() - 1.0).abs() < 1e-12);
            prop_assert!((a[0] + a[1] + a[2]).abs() < 1e-12);
        }

        #[test]
        fn sample_spectrum(seed in any::<u64>()) {
            let spec = SampleSpec::random(&mut ChaCha8Rng::seed_from_u64(seed));
            let v = sample_viscosity(&spec).unwrap();
            let ev = v.subspace_eigenvalues();
            let e2 = 2.0 * 10f64.powf(spec.p);
            prop_assert!((ev[0] - e2 * (1.0 - spec.g)).abs() < 1e-12 * e2);
            for l in &ev[1..] {
                prop_assert!((l - e2).abs() < 1e-12 * e2);
            }
            prop_assert!((v.matrix() * crate::mandel::identity_mandel()).norm() <= 1e-12 * v.matrix().norm());
        }

        #[test]
        fn cross_tangent_matches_finite_differences(seed in any::<u64>(), lr in -1.0f64..6.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = CrossFluid::polyamide6();
            let d = random_unit_dev(&mut rng).coords() * 10f64.powf(lr);
            let t = f.tangent(&d);
            let h = 1e-7 * d.norm();
            for j in 0..5 {
                let mut e = Vec5::zeros();
                e[j] = h;
                let fd = (f.stress(&(d + e)) - f.stress(&(d - e))) / (2.0 * h);
                prop_assert!((fd - t.column(j)).norm() <= 1e-6 * t.norm());
            }
            let (s, tt) = f.stress_tangent(&d);
            prop_assert_eq!(s, f.stress(&d));
            prop_assert_eq!(tt, t);
        }

        #[test]
        fn cross_potential_gradient_is_stress(seed in any::<u64>(), lr in -1.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = CrossFluid::polyamide6();
            let d = random_unit_dev(&mut rng).coords() * 10f64.powf(lr);
            let h = 1e-5 * d.norm();
            let s = f.stress(&d);
            for j in 0..5 {
                let mut e = Vec5::zeros();
                e[j] = h;
                let fd = (f.potential(&(d + e)) - f.potential(&(d - e))) / (2.0 * h);
                prop_assert!((fd - s[j]).abs() <= 1e-6 * s.norm());
            }
        }

        #[test]
        fn cross_is_monotone(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = CrossFluid::polyamide6();
            let d1 = random_unit_dev(&mut rng).coords() * 10f64.powf(rng.gen_range(-1.0..6.0));
            let d2 = random_unit_dev(&mut rng).coords() * 10f64.powf(rng.gen_range(-1.0..6.0));
            prop_assert!((f.stress(&d1) - f.stress(&d2)).dot(&(d1 - d2)) >= 0.0);
        }
    }
}
