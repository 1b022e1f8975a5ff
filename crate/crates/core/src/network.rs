//! FDMN tree: parameter layout, weight propagation, normals from angles, linear forward pass.
//!
//! Internal nodes are stored in heap order (root 0, children of h at 2h+1 and 2h+2). The
//! children of the deepest internal layer are the CLM blocks, numbered left to right.
//! Each CLM owns four consecutive weights `[core, coat_1, coat_2, coat_3]`; coating weight r
//! belongs to layering step r along the r-th normal of the block.

use rand::Rng;

use crate::error::{FdmnError, Result};
use crate::layered::{
    clm_effective_singular_core, nonsingularity_certificate, rank1_effective, Certificate, ClmSpec,
    CoreKind, Strictness,
};
use crate::mandel::{subspace_pinv, Direction, KinematicClass, Mat3, MaterialTensor, Special, Vec3};

use std::f64::consts::{FRAC_1_SQRT_2, PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Topology {
    depth: usize,
    rank: usize,
}

impl Topology {
    pub fn new(depth: usize, rank: usize) -> Result<Self> {
        if !(1..=20).contains(&depth) {
            return Err(FdmnError::Unsupported(format!("depth {depth}")));
        }
        if rank != 3 {
            return Err(FdmnError::Unsupported(format!(
                "rank {rank}: normals are generated for rank-three blocks only"
            )));
        }
        Ok(Topology { depth, rank })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn rank(&self) -> usize {
        self.rank
    }
    pub fn n_clms(&self) -> usize {
        1 << (self.depth - 1)
    }
    pub fn n_internal(&self) -> usize {
        self.n_clms() - 1
    }
    pub fn n_normals(&self) -> usize {
        self.n_clms() * (self.rank + 1) - 1
    }
    pub fn n_weights(&self) -> usize {
        self.n_clms() * (self.rank + 1)
    }
    pub fn n_angles(&self) -> usize {
        3 * self.n_clms() + 2 * self.n_internal()
    }

    /// Layer (1 = root) of internal node `h`.
    pub fn layer(&self, h: usize) -> usize {
        (usize::BITS - (h + 1).leading_zeros()) as usize
    }

    /// Position of internal node `h` when internal nodes are listed layer by layer from the
    /// deepest internal layer up to the root, as in the angle and normal vectors.
    pub fn internal_slot(&self, h: usize) -> usize {
        let k = self.layer(h);
        let first = (1usize << (k - 1)) - 1;
        let below: usize = (k + 1..self.depth).map(|l| 1usize << (l - 1)).sum();
        below + (h - first)
    }

    pub fn internal_angle_index(&self, h: usize) -> usize {
        3 * self.n_clms() + 2 * self.internal_slot(h)
    }

    /// Index of the normal of internal node `h` in the global normal vector.
    pub fn internal_normal_index(&self, h: usize) -> usize {
        3 * self.n_clms() + self.internal_slot(h)
    }

    /// Children of internal node `h`: `Ok(heap index)` or `Err(clm index)`.
    pub fn children(&self, h: usize) -> [std::result::Result<usize, usize>; 2] {
        let ni = self.n_internal();
        let map = |c: usize| if c < ni { Ok(c) } else { Err(c - ni) };
        [map(2 * h + 1), map(2 * h + 2)]
    }

    /// Heap index of the parent of CLM `j`, `None` for a single-block network.
    pub fn clm_parent(&self, j: usize) -> Option<usize> {
        if self.depth == 1 {
            None
        } else {
            Some((j + self.n_internal() - 1) / 2)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParameters {
    pub weights: Vec<f64>,
    pub angles: Vec<f64>,
}

impl NetworkParameters {
    pub fn new(topology: &Topology, weights: Vec<f64>, angles: Vec<f64>) -> Result<Self> {
        let p = NetworkParameters { weights, angles };
        p.check(topology)?;
        Ok(p)
    }

    pub fn check(&self, topology: &Topology) -> Result<()> {
        if self.weights.len() != topology.n_weights() {
            return Err(FdmnError::BadParameterLength {
                what: "weights",
                expected: topology.n_weights(),
                got: self.weights.len(),
            });
        }
        if self.angles.len() != topology.n_angles() {
            return Err(FdmnError::BadParameterLength {
                what: "angles",
                expected: topology.n_angles(),
                got: self.angles.len(),
            });
        }
        if self.weights.iter().chain(&self.angles).any(|x| !x.is_finite()) {
            return Err(FdmnError::InvalidSpec("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Uniform angles over their intervals, uniform weights rescaled to unit sum.
    pub fn random<R: Rng + ?Sized>(topology: &Topology, rng: &mut R) -> Self {
        let mut weights: Vec<f64> = (0..topology.n_weights()).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        let mut angles = Vec::with_capacity(topology.n_angles());
        for _ in 0..3 * topology.n_clms() {
            angles.push(rng.gen_range(0.0..2.0 * PI));
        }
        for _ in 0..topology.n_internal() {
            angles.push(rng.gen_range(0.0..2.0 * PI));
            angles.push(rng.gen_range(0.0..PI));
        }
        NetworkParameters { weights, angles }
    }

    /// Weights as seen by the network: magnitudes of the raw parameters.
    pub fn effective_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.abs()).collect()
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let w = self.effective_weights();
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    }
}

/// Q(c, d, e) = Rx(c) Ry(d) Rz(e).
pub fn euler_rotation(c: f64, d: f64, e: f64) -> Mat3 {
    let (sc, cc) = c.sin_cos();
    let (sd, cd) = d.sin_cos();
    let (se, ce) = e.sin_cos();
    let rx = Mat3::new(1.0, 0.0, 0.0, 0.0, cc, -sc, 0.0, sc, cc);
    let ry = Mat3::new(cd, 0.0, sd, 0.0, 1.0, 0.0, -sd, 0.0, cd);
    let rz = Mat3::new(ce, -se, 0.0, se, ce, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// Partial derivatives of [`euler_rotation`] with respect to (c, d, e).
pub fn euler_rotation_derivatives(c: f64, d: f64, e: f64) -> [Mat3; 3] {
    let (sc, cc) = c.sin_cos();
    let (sd, cd) = d.sin_cos();
    let (se, ce) = e.sin_cos();
    let rx = Mat3::new(1.0, 0.0, 0.0, 0.0, cc, -sc, 0.0, sc, cc);
    let ry = Mat3::new(cd, 0.0, sd, 0.0, 1.0, 0.0, -sd, 0.0, cd);
    let rz = Mat3::new(ce, -se, 0.0, se, ce, 0.0, 0.0, 0.0, 1.0);
    let drx = Mat3::new(0.0, 0.0, 0.0, 0.0, -sc, -cc, 0.0, cc, -sc);
    let dry = Mat3::new(-sd, 0.0, cd, 0.0, 0.0, 0.0, -cd, 0.0, -sd);
    let drz = Mat3::new(-se, -ce, 0.0, ce, -se, 0.0, 0.0, 0.0, 0.0);
    [drx * ry * rz, rx * dry * rz, rx * ry * drz]
}

/// Fixed combinations of the rotation columns giving the three CLM normals.
pub fn clm_normal_generators() -> [Vec3; 3] {
    [
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0),
        Vec3::new(FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2),
    ]
}

pub fn clm_normals(c: f64, d: f64, e: f64) -> [Vec3; 3] {
    let q = euler_rotation(c, d, e);
    clm_normal_generators().map(|u| q * u)
}

pub fn spherical_normal(a: f64, b: f64) -> Vec3 {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    Vec3::new(sb * ca, sb * sa, cb)
}

/// ∂n/∂a and ∂n/∂b of [`spherical_normal`].
pub fn spherical_normal_derivatives(a: f64, b: f64) -> [Vec3; 2] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    [Vec3::new(-sb * sa, sb * ca, 0.0), Vec3::new(cb * ca, cb * sa, -sb)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkNormals {
    pub clm: Vec<[Direction; 3]>,
    /// Heap-indexed normals of the internal nodes.
    pub internal: Vec<Direction>,
}

impl NetworkNormals {
    /// All normals in the global order: CLM triples, then internal nodes deepest layer first.
    pub fn flat(&self, topology: &Topology) -> Vec<Direction> {
        let mut out: Vec<Direction> = self.clm.iter().flat_map(|t| t.iter().copied()).collect();
        let mut internal = vec![Direction::e(0); topology.n_internal()];
        for (h, n) in self.internal.iter().enumerate() {
            internal[topology.internal_slot(h)] = *n;
        }
        out.extend(internal);
        out
    }
}

pub fn build_normals(topology: &Topology, angles: &[f64]) -> Result<NetworkNormals> {
    if angles.len() != topology.n_angles() {
        return Err(FdmnError::BadParameterLength {
            what: "angles",
            expected: topology.n_angles(),
            got: angles.len(),
        });
    }
    let clm = (0..topology.n_clms())
        .map(|j| {
            let t = clm_normals(angles[3 * j], angles[3 * j + 1], angles[3 * j + 2]);
            t.map(|v| Direction::new(v).expect("rotated unit vector"))
        })
        .collect();
    let internal = (0..topology.n_internal())
        .map(|h| {
            let i = topology.internal_angle_index(h);
            Direction::new(spherical_normal(angles[i], angles[i + 1])).expect("unit vector")
        })
        .collect();
    Ok(NetworkNormals { clm, internal })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClmCoefficients {
    pub coating_fraction: f64,
    pub coefficients: Vec<f64>,
    /// Core fraction after each layering step, f1^(1..R).
    pub core_fractions: Vec<f64>,
    /// Some coefficient vanishes while a rigid core is present.
    pub rank_collapse_risk: bool,
}

/// Maps block weights `[core, coat_1, .., coat_R]` to CLM fractions and coefficients.
pub fn weights_to_clm_coefficients(w: &[f64]) -> Result<ClmCoefficients> {
    if w.len() < 2 || w.iter().any(|&x| !(x >= 0.0)) {
        return Err(FdmnError::InvalidSpec("block weights must be non-negative".into()));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(FdmnError::DegenerateBlock);
    }
    let w: Vec<f64> = w.iter().map(|x| x / total).collect();
    let core = w[0];
    let mut running = core;
    let mut core_fractions = Vec::with_capacity(w.len() - 1);
    for &ws in &w[1..] {
        running += ws;
        core_fractions.push(if running > 0.0 { core / running } else { 1.0 });
    }
    let f2: f64 = w[1..].iter().sum();
    let mut prev = 1.0;
    let coefficients: Vec<f64> = if f2 > 0.0 {
        core_fractions
            .iter()
            .map(|&f| {
                let c = (prev - f) / f2;
                prev = f;
                c
            })
            .collect()
    } else {
        vec![1.0 / (w.len() - 1) as f64; w.len() - 1]
    };
    let rank_collapse_risk = core > 0.0 && coefficients.iter().any(|&c| c < 1e-12);
    Ok(ClmCoefficients { coating_fraction: f2, coefficients, core_fractions, rank_collapse_risk })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafPhase {
    Core,
    Coating(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedTree {
    /// Heap-indexed weights of the internal nodes.
    pub node_weights: Vec<f64>,
    /// Heap-indexed share of the left child, W_L / (W_L + W_R) (0.5 for empty nodes).
    pub node_fractions: Vec<f64>,
    pub clm_weights: Vec<f64>,
    pub normals: NetworkNormals,
    /// Phase of every leaf weight, in weight order.
    pub leaf_phases: Vec<LeafPhase>,
    /// Normalized leaf weights.
    pub leaf_weights: Vec<f64>,
}

pub fn propagate(topology: &Topology, params: &NetworkParameters) -> Result<PropagatedTree> {
    params.check(topology)?;
    let normals = build_normals(topology, &params.angles)?;
    let leaf_weights = params.normalized_weights();
    let r1 = topology.rank() + 1;
    let clm_weights: Vec<f64> =
        (0..topology.n_clms()).map(|j| leaf_weights[r1 * j..r1 * (j + 1)].iter().sum()).collect();
    let ni = topology.n_internal();
    let mut node_weights = vec![0.0; ni];
    let mut node_fractions = vec![0.5; ni];
    for h in (0..ni).rev() {
        let [l, r] = topology.children(h).map(|c| match c {
            Ok(k) => node_weights[k],
            Err(j) => clm_weights[j],
        });
        node_weights[h] = l + r;
        if l + r > 0.0 {
            node_fractions[h] = l / (l + r);
        }
    }
    let leaf_phases = (0..topology.n_weights())
        .map(|i| match i % r1 {
            0 => LeafPhase::Core,
            r => LeafPhase::Coating(r),
        })
        .collect();
    Ok(PropagatedTree { node_weights, node_fractions, clm_weights, normals, leaf_phases, leaf_weights })
}

/// Certificate of every CLM block of the network.
pub fn clm_certificates(topology: &Topology, params: &NetworkParameters) -> Result<Vec<Certificate>> {
    let normals = build_normals(topology, &params.angles)?;
    Ok(normals
        .clm
        .iter()
        .map(|t| nonsingularity_certificate(t, KinematicClass::Incompressible, CoreKind::Rigid))
        .collect())
}

/// Effective viscosity of one CLM with a rigid core, or `None` if the block is empty.
pub fn clm_block_viscosity(
    block_weights: &[f64],
    normals: &[Direction; 3],
    matrix: &MaterialTensor,
    fiber: &MaterialTensor,
    mode: Strictness,
) -> Result<Option<MaterialTensor>> {
    let total: f64 = block_weights.iter().sum();
    if total == 0.0 {
        return Ok(None);
    }
    if block_weights[0] == 0.0 {
        return Ok(Some(matrix.clone()));
    }
    let coef = weights_to_clm_coefficients(block_weights)?;
    let spec = ClmSpec::new(
        normals.to_vec(),
        coef.coefficients,
        coef.coating_fraction,
        fiber.clone(),
        subspace_pinv(matrix)?,
    )?;
    let out = clm_effective_singular_core(&spec, mode)?;
    subspace_pinv(&out.tensor)
        .map(Some)
        .map_err(|_| FdmnError::SingularEffective {
            relative_min_eigenvalue: out.relative_min_eigenvalue,
            reason: "effective fluidity of a block is singular".into(),
        })
}

/// Root viscosity of the network for an incompressible matrix viscosity and rigid fibers.
pub fn linear_forward(
    topology: &Topology,
    params: &NetworkParameters,
    matrix: &MaterialTensor,
    fiber: &MaterialTensor,
    mode: Strictness,
) -> Result<MaterialTensor> {
    if matrix.class() != KinematicClass::Incompressible || !matrix.is_regular() {
        return Err(FdmnError::InvalidTensor("matrix must be a regular incompressible tensor".into()));
    }
    if fiber.special() != Special::Rigid {
        return Err(FdmnError::InvalidTensor("fiber must be the rigid sentinel".into()));
    }
    let tree = propagate(topology, params)?;
    let r1 = topology.rank() + 1;
    let mut clm_out = Vec::with_capacity(topology.n_clms());
    for j in 0..topology.n_clms() {
        let w = &tree.leaf_weights[r1 * j..r1 * (j + 1)];
        clm_out.push(clm_block_viscosity(w, &tree.normals.clm[j], matrix, fiber, mode)?);
    }
    let ni = topology.n_internal();
    let mut node_out: Vec<Option<MaterialTensor>> = vec![None; ni];
    for h in (0..ni).rev() {
        let [l, r] = topology.children(h).map(|c| match c {
            Ok(k) => node_out[k].take(),
            Err(j) => clm_out[j].take(),
        });
        node_out[h] = match (l, r) {
            (None, None) => None,
            (Some(a), None) | (None, Some(a)) => Some(a),
            (Some(a), Some(b)) => {
                Some(rank1_effective(&a, &b, tree.node_fractions[h], &tree.normals.internal[h])?)
            }
        };
    }
    let root = if ni == 0 { clm_out[0].take() } else { node_out[0].take() };
    root.ok_or(FdmnError::DegenerateBlock)
}
