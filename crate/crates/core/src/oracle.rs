//! Brute-force references for tests and acceptance runs.
//!
//! None of these reuse the homogenization kernels they check: layering is redone with an
//! explicit-inverse formula, the nonlinear teacher is solved by secant iteration on phase
//! viscosities with stress localization in fluidity form, and gradients are central differences.

use nalgebra::{DMatrix, SMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FdmnError, Result};
use crate::layered::{ClmSpec, Strictness};
use crate::linalg::sym_eigen;
use crate::mandel::{
    class_basis, dev_basis, gamma_weighted, Direction, KinematicClass, Mat5, Mat6, MaterialTensor, Vec5,
};
use crate::materials::{CrossFluid, LoadCase, OrientationState, Provenance, SampleRecord, SampleSpec, ViscousLaw};
use crate::network::{build_normals, clm_certificates, linear_forward, NetworkParameters, Topology};
use crate::training::{loss_prepared, LinearSample};

// --- layering -----------------------------------------------------------------------------------

fn restrict(m: &Mat6, u: &DMatrix<f64>) -> DMatrix<f64> {
    u.transpose() * DMatrix::from_column_slice(6, 6, m.as_slice()) * u
}

fn expand(r: &DMatrix<f64>, u: &DMatrix<f64>) -> Mat6 {
    let full = u * r * u.transpose();
    Mat6::from_column_slice(full.as_slice())
}

/// One laminate step in the form f1 (Ā − A2)⁻¹ = (A1 − A2)⁻¹ + f2 Γ.
fn explicit_rank1(a1: &DMatrix<f64>, a2: &MaterialTensor, f1: f64, n: &Direction, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a2r = restrict(a2.matrix(), u);
    if f1 == 0.0 {
        return Ok(a2r);
    }
    let delta = a1 - &a2r;
    let dinv = delta.try_inverse().ok_or(FdmnError::NonInvertibleContrast)?;
    let gamma = restrict(&gamma_weighted(n, a2)?, u);
    let x = (dinv + gamma * (1.0 - f1)) / f1;
    Ok(a2r + x.try_inverse().ok_or(FdmnError::NonInvertibleContrast)?)
}

/// Core fraction of the composite after each layering step, reconstructed from c and f2.
pub fn nested_core_fractions(coefficients: &[f64], coating_fraction: f64) -> Vec<f64> {
    let mut phi = vec![1.0];
    for c in coefficients {
        let last = *phi.last().expect("non-empty");
        phi.push((last - coating_fraction * c).max(0.0));
    }
    phi
}

/// CLM evaluated by layering the coating onto the core one normal at a time.
pub fn recursive_rank1(spec: &ClmSpec) -> Result<MaterialTensor> {
    if !spec.core.is_regular() {
        return Err(FdmnError::InvalidSpec("recursive layering needs a regular core".into()));
    }
    if spec.core.role() != spec.coating.role() {
        return Err(FdmnError::PhaseClassMismatch);
    }
    let u = class_basis(spec.coating.class());
    let phi = nested_core_fractions(&spec.coefficients, spec.coating_fraction);
    let mut a = restrict(spec.core.matrix(), &u);
    for (r, n) in spec.normals.iter().enumerate() {
        if phi[r] == 0.0 {
            break;
        }
        // the previous composite occupies φ_r / φ_{r−1} of the new one
        let f1 = phi[r + 1] / phi[r];
        if f1 < 1.0 {
            a = explicit_rank1(&a, &spec.coating, f1, n, &u)?;
        }
    }
    let out = expand(&a, &u);
    Ok(MaterialTensor::raw(0.5 * (out + out.transpose()), spec.coating.class(), spec.coating.role()))
}

/// Three-step Richardson table for a sequence a(h), a(h/q), a(h/q²) converging like hᵖ.
#[derive(Debug, Clone, PartialEq)]
pub struct Richardson {
    pub extrapolated: Mat6,
    pub order: f64,
}

pub fn richardson(seq: &[Mat6; 3], q: f64) -> Richardson {
    let d1 = (seq[1] - seq[0]).norm();
    let d2 = (seq[2] - seq[1]).norm();
    let order = if d2 > 0.0 { (d1 / d2).ln() / q.ln() } else { f64::INFINITY };
    let p = if order.is_finite() { order.max(0.5) } else { 1.0 };
    let s = q.powf(p);
    Richardson { extrapolated: (seq[2] * s - seq[1]) / (s - 1.0), order }
}

/// Voigt (arithmetic) and Reuss (harmonic) averages of two regular tensors on their class.
pub fn voigt_reuss(a1: &MaterialTensor, a2: &MaterialTensor, f1: f64) -> Result<(Mat6, Mat6)> {
    let u = class_basis(a1.class());
    let r1 = restrict(a1.matrix(), &u);
    let r2 = restrict(a2.matrix(), &u);
    let voigt = &r1 * f1 + &r2 * (1.0 - f1);
    let inv = |m: DMatrix<f64>| m.try_inverse().ok_or(FdmnError::SingularOnSubspace { min_eigenvalue: 0.0 });
    let reuss = inv(inv(r1)? * f1 + inv(r2)? * (1.0 - f1))?;
    Ok((expand(&voigt, &u), expand(&reuss, &u)))
}

/// Effective shear viscosities of a stack of two Newtonian layers, from the 1D Stokes flow in a
/// unit cell. Returns (across the layers, along the layers).
pub fn stokes_two_layer(eta1: f64, eta2: f64, f1: f64) -> (f64, f64) {
    // shear across the layers: u(x3) piecewise linear, unknowns are the layer rates and the
    // common traction; mean rate 1, continuity of traction
    let a = SMatrix::<f64, 3, 3>::new(f1, 1.0 - f1, 0.0, eta1, 0.0, -1.0, 0.0, eta2, -1.0);
    let x = a.lu().solve(&nalgebra::Vector3::new(1.0, 0.0, 0.0)).expect("regular 1D system");
    // shear along the layers: every layer carries the mean rate
    let along = f1 * eta1 + (1.0 - f1) * eta2;
    (x[2], along)
}

// --- gradients ----------------------------------------------------------------------------------

/// Central differences of the training loss in every angle and weight coordinate.
pub fn fd_gradient(
    topology: &Topology,
    params: &NetworkParameters,
    batch: &[LinearSample],
    lambda: f64,
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = |p: &NetworkParameters| loss_prepared(topology, p, batch, lambda);
    let mut ga = vec![0.0; params.angles.len()];
    for (i, g) in ga.iter_mut().enumerate() {
        let mut p = params.clone();
        p.angles[i] += h;
        let fp = f(&p)?;
        p.angles[i] -= 2.0 * h;
        *g = (fp - f(&p)?) / (2.0 * h);
    }
    let mut gw = vec![0.0; params.weights.len()];
    for (i, g) in gw.iter_mut().enumerate() {
        let mut p = params.clone();
        p.weights[i] += h;
        let fp = f(&p)?;
        p.weights[i] -= 2.0 * h;
        *g = (fp - f(&p)?) / (2.0 * h);
    }
    Ok((ga, gw))
}

// --- teacher ------------------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec {
    pub seed: u64,
    pub topology: Topology,
    pub params: NetworkParameters,
}

impl TeacherSpec {
    /// Random parameters from `seed`, redrawn until every CLM passes its certificate.
    pub fn new(seed: u64, depth: usize) -> Result<Self> {
        let topology = Topology::new(depth, 3)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let params = NetworkParameters::random(&topology, &mut rng);
            if clm_certificates(&topology, &params)?.iter().all(|c| c.passed()) {
                return Ok(TeacherSpec { seed, topology, params });
            }
        }
        Err(FdmnError::Unsupported("no certificate-passing teacher in 100 draws".into()))
    }

    pub fn depth(&self) -> usize {
        self.topology.depth()
    }

    pub fn effective(&self, matrix: &MaterialTensor) -> Result<MaterialTensor> {
        linear_forward(
            &self.topology,
            &self.params,
            matrix,
            &MaterialTensor::rigid(KinematicClass::Incompressible),
            Strictness::Strict,
        )
    }

    pub fn dataset(&self, specs: &[SampleSpec], orientation: OrientationState) -> Result<Vec<SampleRecord>> {
        specs
            .iter()
            .map(|s| {
                let m = crate::materials::sample_viscosity(s)?;
                let e = self.effective(&m)?;
                SampleRecord::new(m, e, Provenance::Teacher, orientation)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf { weight: f64, rigid: bool },
    Lam { normal: usize, first: usize, second: usize, weight: f64 },
}

/// The teacher as a plain laminate tree: CLMs become chains of coating layers.
struct LaminateTree {
    nodes: Vec<Node>,
    root: usize,
    /// Orthonormal 5×3 bases of the deviatoric stresses whose traction on n is normal to n.
    traction_free: Vec<SMatrix<f64, 5, 3>>,
    leaves: Vec<usize>,
}

impl LaminateTree {
    fn new(topology: &Topology, params: &NetworkParameters) -> Result<Self> {
        let normals = build_normals(topology, &params.angles)?;
        let w = params.normalized_weights();
        let mut nodes = Vec::new();
        let mut dirs = Vec::new();
        let mut leaves = Vec::new();
        let mut clm_root = Vec::new();
        for j in 0..topology.n_clms() {
            nodes.push(Node::Leaf { weight: w[4 * j], rigid: true });
            leaves.push(nodes.len() - 1);
            let mut inner = nodes.len() - 1;
            let mut inner_w = w[4 * j];
            for r in 0..3 {
                nodes.push(Node::Leaf { weight: w[4 * j + r + 1], rigid: false });
                leaves.push(nodes.len() - 1);
                dirs.push(*normals.clm[j][r].vec());
                inner_w += w[4 * j + r + 1];
                nodes.push(Node::Lam { normal: dirs.len() - 1, first: inner, second: nodes.len() - 1, weight: inner_w });
                inner = nodes.len() - 1;
            }
            clm_root.push(inner);
        }
        let ni = topology.n_internal();
        let mut internal = vec![0; ni];
        for h in (0..ni).rev() {
            let [a, b] = topology.children(h).map(|c| match c {
                Ok(k) => internal[k],
                Err(j) => clm_root[j],
            });
            let weight = node_weight(&nodes[a]) + node_weight(&nodes[b]);
            dirs.push(*normals.internal[h].vec());
            nodes.push(Node::Lam { normal: dirs.len() - 1, first: a, second: b, weight });
            internal[h] = nodes.len() - 1;
        }
        let root = if ni > 0 { internal[0] } else { clm_root[0] };
        let b = dev_basis();
        let traction_free = dirs
            .iter()
            .map(|n| {
                let p2 = crate::mandel::gamma_projector(
                    &Direction::new(*n).expect("unit normal"),
                    KinematicClass::Incompressible,
                    crate::mandel::Slot::Two,
                );
                let p5 = b.transpose() * p2 * b;
                let (vals, vecs) = sym_eigen(&DMatrix::from_column_slice(5, 5, p5.as_slice()));
                let cols: Vec<usize> = (0..5).filter(|&i| vals[i] > 0.5).collect();
                assert_eq!(cols.len(), 3, "traction-free space has dimension three");
                SMatrix::<f64, 5, 3>::from_fn(|i, k| vecs[(i, cols[k])])
            })
            .collect();
        Ok(LaminateTree { nodes, root, traction_free, leaves })
    }
}

fn node_weight(n: &Node) -> f64 {
    match *n {
        Node::Leaf { weight, .. } | Node::Lam { weight, .. } => weight,
    }
}

struct Picard<'a> {
    tree: &'a LaminateTree,
    fluidity: Vec<Mat5>,
}

impl Picard<'_> {
    /// Effective fluidities bottom-up; entries of empty subtrees stay `None`.
    fn effective(&self) -> Vec<Option<Mat5>> {
        let mut out: Vec<Option<Mat5>> = vec![None; self.tree.nodes.len()];
        for (i, n) in self.tree.nodes.iter().enumerate() {
            out[i] = match *n {
                Node::Leaf { weight, .. } => (weight > 0.0).then(|| self.fluidity[i]),
                Node::Lam { normal, first, second, weight } => match (out[first], out[second]) {
                    (None, x) | (x, None) => x,
                    (Some(f1m), Some(f2m)) => {
                        let f1 = node_weight(&self.tree.nodes[first]) / weight;
                        let f2 = 1.0 - f1;
                        let y = self.jump_operator(normal, &f1m, &f2m, f1);
                        let df = f1m - f2m;
                        Some(f1m * f1 + f2m * f2 + df * y * (f1 * f2))
                    }
                },
            };
        }
        out
    }

    /// Y = −Q (Qᵀ(f2 F1 + f1 F2) Q)⁻¹ Qᵀ ΔF maps the node stress to the stress jump.
    fn jump_operator(&self, normal: usize, f1m: &Mat5, f2m: &Mat5, f1: f64) -> Mat5 {
        let q = &self.tree.traction_free[normal];
        let s = q.transpose() * (f1m * (1.0 - f1) + f2m * f1) * q;
        let sinv = s.try_inverse().expect("coating fluidity is regular on the traction-free space");
        -(q * sinv * q.transpose()) * (f1m - f2m)
    }

    /// Leaf stresses for the node stress `sigma` at the root.
    fn localize(&self, eff: &[Option<Mat5>], sigma: Vec5) -> Vec<Vec5> {
        let mut s = vec![Vec5::zeros(); self.tree.nodes.len()];
        s[self.tree.root] = sigma;
        for i in (0..self.tree.nodes.len()).rev() {
            if let Node::Lam { normal, first, second, weight } = self.tree.nodes[i] {
                match (eff[first], eff[second]) {
                    (Some(f1m), Some(f2m)) => {
                        let f1 = node_weight(&self.tree.nodes[first]) / weight;
                        let y = self.jump_operator(normal, &f1m, &f2m, f1);
                        let jump = y * s[i];
                        s[first] = s[i] + jump * (1.0 - f1);
                        s[second] = s[i] - jump * f1;
                    }
                    _ => {
                        s[first] = s[i];
                        s[second] = s[i];
                    }
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardOutcome {
    pub stress: crate::mandel::DevTensor,
    pub iterations: usize,
}

/// Stress of the teacher network filled with a Cross fluid, by damped secant iteration on the
/// phase viscosities.
pub fn nonlinear_teacher_stress(
    teacher: &TeacherSpec,
    fluid: &CrossFluid,
    d: &crate::mandel::DevTensor,
) -> Result<PicardOutcome> {
    secant_iteration(&teacher.topology, &teacher.params, fluid, d, 0.5, 1e-10, 500)
}

pub fn secant_iteration(
    topology: &Topology,
    params: &NetworkParameters,
    fluid: &CrossFluid,
    d: &crate::mandel::DevTensor,
    damping: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<PicardOutcome> {
    let tree = LaminateTree::new(topology, params)?;
    let dbar = d.coords();
    if dbar.norm() == 0.0 {
        return Ok(PicardOutcome { stress: crate::mandel::DevTensor::zero(), iterations: 0 });
    }
    let eta0 = fluid.viscosity(CrossFluid::equivalent_rate(&dbar));
    let mut eta = vec![eta0; tree.nodes.len()];
    let mut picard = Picard { tree: &tree, fluidity: vec![Mat5::zeros(); tree.nodes.len()] };
    for it in 1..=max_iterations {
        for &l in &tree.leaves {
            if let Node::Leaf { rigid, .. } = tree.nodes[l] {
                picard.fluidity[l] = if rigid { Mat5::zeros() } else { Mat5::identity() / (2.0 * eta[l]) };
            }
        }
        let eff = picard.effective();
        let root = eff[tree.root].ok_or(FdmnError::DegenerateBlock)?;
        let sigma = root
            .try_inverse()
            .ok_or(FdmnError::SingularEffective { relative_min_eigenvalue: 0.0, reason: "teacher fluidity".into() })?
            * dbar;
        let stresses = picard.localize(&eff, sigma);
        let mut change = 0.0f64;
        for &l in &tree.leaves {
            if let Node::Leaf { rigid: false, weight } = tree.nodes[l] {
                if weight == 0.0 {
                    continue;
                }
                let dl = picard.fluidity[l] * stresses[l];
                let target = fluid.viscosity(CrossFluid::equivalent_rate(&dl));
                change = change.max((target - eta[l]).abs() / eta[l]);
                eta[l] = (1.0 - damping) * eta[l] + damping * target;
            }
        }
        if change <= tolerance {
            return Ok(PicardOutcome { stress: crate::mandel::DevTensor::from_coords(&sigma), iterations: it });
        }
    }
    Err(FdmnError::NoConvergence { iterations: max_iterations, residual: f64::NAN })
}

/// Reference stresses of the teacher for a list of load cases.
pub fn teacher_reference(
    teacher: &TeacherSpec,
    fluid: &CrossFluid,
    cases: &[LoadCase],
) -> Result<Vec<(LoadCase, crate::mandel::DevTensor)>> {
    use rayon::prelude::*;
    cases
        .par_iter()
        .map(|c| nonlinear_teacher_stress(teacher, fluid, &c.strain_rate()).map(|s| (*c, s.stress)))
        .collect()
}

/// Checks a viscous law's stress against central differences of its potential.
pub fn fd_stress<L: ViscousLaw>(law: &L, d: &Vec5, h: f64) -> Vec5 {
    Vec5::from_fn(|i, _| {
        let mut e = Vec5::zeros();
        e[i] = h;
        (law.potential(&(d + e)) - law.potential(&(d - e))) / (2.0 * h)
    })
}
