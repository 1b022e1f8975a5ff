//! Offline fitting of network parameters to linear samples.
//!
//! The forward pass here is a specialised re-implementation of [`crate::network::linear_forward`]
//! for incompressible matrices and rigid cores, written directly in deviatoric coordinates so that
//! a hand-coded reverse sweep can follow it. Both are cross-checked in the tests.
//!
//! With a rigid core the block viscosity collapses to M̄ = M + φ (Σ_r g_r Γ_M(n_r))⁻¹, where φ is
//! the core fraction, g_r the share of layering step r and Γ_M(n) = V (Vᵀ M V)⁺ Vᵀ with V the
//! jump basis of n.

use nalgebra::{Cholesky, SMatrix};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{FdmnError, Result};
use crate::layered::SINGULAR_TOL;
use crate::mandel::{
    dev_basis, jump_basis, jump_basis_derivative, JumpBasis, Mat3, Mat5, Mat6, MaterialTensor, Role, Vec3,
};
use crate::materials::SampleRecord;
use crate::network::{
    clm_normal_generators, euler_rotation, euler_rotation_derivatives, spherical_normal,
    spherical_normal_derivatives, NetworkParameters, Topology,
};

type DevBasis = SMatrix<f64, 6, 5>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_angles: f64,
    pub lr_weights: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub penalty: f64,
    pub train_fraction: f64,
    pub restarts: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 2000,
            lr_angles: 1e-2,
            lr_weights: 1e-2,
            decay_factor: 0.75,
            decay_every: 150,
            penalty: 1.0,
            train_fraction: 0.9,
            restarts: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("batch_size", self.batch_size as f64),
            ("epochs", self.epochs as f64),
            ("lr_angles", self.lr_angles),
            ("lr_weights", self.lr_weights),
            ("decay_factor", self.decay_factor),
            ("decay_every", self.decay_every as f64),
            ("restarts", self.restarts as f64),
            ("eps", self.eps),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FdmnError::BadInterval { name, value: v });
            }
        }
        if !(self.penalty >= 0.0) {
            return Err(FdmnError::BadInterval { name: "penalty", value: self.penalty });
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(FdmnError::BadInterval { name: "train_fraction", value: self.train_fraction });
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(FdmnError::BadInterval { name, value: b });
            }
        }
        Ok(())
    }

    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let s = step_decay(1.0, epoch, self.decay_factor, self.decay_every);
        (self.lr_angles * s, self.lr_weights * s)
    }
}

/// κ0 · f^⌊epoch / every⌋.
pub fn step_decay(lr0: f64, epoch: usize, factor: f64, every: usize) -> f64 {
    lr0 * factor.powi((epoch / every) as i32)
}

// ---------------------------------------------------------------------------------------------
// compiled forward pass and its adjoint

/// Γ_M(n) together with the small inverse needed by the reverse sweep.
#[derive(Debug, Clone, Copy)]
struct GammaTape {
    gamma: Mat5,
    minv: Mat3,
}

fn gamma_ico(m: &Mat5, v: &JumpBasis, n: &Vec3) -> Option<GammaTape> {
    let vm = v.transpose() * m * v;
    // Vᵀ M V has the kernel n; any positive multiple of n⊗n completes it and drops out again
    let c = 0.5 * vm.trace();
    let minv = (vm + n * n.transpose() * c).try_inverse()?;
    Some(GammaTape { gamma: v * minv * v.transpose(), minv })
}

/// Accumulates the adjoints of M and V for a given adjoint of Γ.
fn gamma_backward(m: &Mat5, v: &JumpBasis, t: &GammaTape, gbar: &Mat5, mbar: Option<&mut Mat5>, vbar: &mut JumpBasis) {
    let sym = gbar + gbar.transpose();
    *vbar += sym * v * t.minv;
    let mm = -(t.minv * (v.transpose() * gbar * v) * t.minv);
    *vbar += m * v * (mm + mm.transpose());
    if let Some(mbar) = mbar {
        *mbar -= t.gamma * gbar * t.gamma;
    }
}

#[derive(Debug, Clone)]
struct ClmGeom {
    n: [Vec3; 3],
    v: [JumpBasis; 3],
    core: f64,
    running: [f64; 3],
    phi: [f64; 3],
    g: [f64; 3],
    total: f64,
}

#[derive(Debug, Clone)]
struct NodeGeom {
    n: Vec3,
    v: JumpBasis,
    wl: f64,
    wr: f64,
    f1: f64,
}

/// Sample-independent part of the network for one parameter vector.
#[derive(Debug, Clone)]
pub struct CompiledNetwork {
    topology: Topology,
    sign: Vec<f64>,
    weight_sum: f64,
    clm: Vec<ClmGeom>,
    nodes: Vec<NodeGeom>,
}

impl CompiledNetwork {
    pub fn new(topology: &Topology, params: &NetworkParameters) -> Result<Self> {
        params.check(topology)?;
        let eff = params.effective_weights();
        let sign = params.weights.iter().map(|w| if *w < 0.0 { -1.0 } else { 1.0 }).collect();
        let gens = clm_normal_generators();
        let mut clm = Vec::with_capacity(topology.n_clms());
        for j in 0..topology.n_clms() {
            let q = euler_rotation(params.angles[3 * j], params.angles[3 * j + 1], params.angles[3 * j + 2]);
            let n = gens.map(|u| q * u);
            let w = &eff[4 * j..4 * j + 4];
            let core = w[0];
            let mut running = [0.0; 3];
            let mut phi = [0.0; 3];
            let mut t = core;
            for r in 0..3 {
                t += w[r + 1];
                running[r] = t;
                phi[r] = if t > 0.0 { core / t } else { 1.0 };
            }
            let g = [1.0 - phi[0], phi[0] - phi[1], phi[1] - phi[2]];
            clm.push(ClmGeom { v: n.map(|x| jump_basis(&x)), n, core, running, phi, g, total: t });
        }
        let ni = topology.n_internal();
        let mut wsub = vec![0.0; ni];
        let mut nodes = vec![
            NodeGeom { n: Vec3::zeros(), v: JumpBasis::zeros(), wl: 0.0, wr: 0.0, f1: 0.5 };
            ni
        ];
        for h in (0..ni).rev() {
            let [wl, wr] = topology.children(h).map(|c| match c {
                Ok(k) => wsub[k],
                Err(j) => clm[j].total,
            });
            wsub[h] = wl + wr;
            let i = topology.internal_angle_index(h);
            let n = spherical_normal(params.angles[i], params.angles[i + 1]);
            let f1 = if wl + wr > 0.0 { wl / (wl + wr) } else { 0.5 };
            nodes[h] = NodeGeom { n, v: jump_basis(&n), wl, wr, f1 };
        }
        Ok(CompiledNetwork { topology: *topology, sign, weight_sum: eff.iter().sum(), clm, nodes })
    }

    pub fn weight_sum(&self) -> f64 {
        self.weight_sum
    }

    /// Effective viscosity (deviatoric coordinates) for the matrix viscosity `m`.
    pub fn forward(&self, m: &Mat5) -> Result<Mat5> {
        Ok(self.forward_taped(m)?.root())
    }

    fn forward_taped(&self, m: &Mat5) -> Result<Tape> {
        let mut clm_tapes = Vec::with_capacity(self.clm.len());
        for (j, b) in self.clm.iter().enumerate() {
            clm_tapes.push(clm_forward(b, m, j)?);
        }
        let ni = self.nodes.len();
        let mut node_tapes: Vec<Option<NodeTape>> = vec![None; ni];
        for h in (0..ni).rev() {
            let g = &self.nodes[h];
            let [ml, mr] = self.topology.children(h).map(|c| match c {
                Ok(k) => node_tapes[k].as_ref().expect("children first").out,
                Err(j) => clm_tapes[j].out,
            });
            node_tapes[h] = Some(node_forward(g, &ml, &mr, h)?);
        }
        Ok(Tape { clm: clm_tapes, nodes: node_tapes.into_iter().map(|t| t.expect("filled")).collect() })
    }

    fn backward(&self, m: &Mat5, tape: &Tape, gbar: &Mat5, acc: &mut Adjoints) {
        let ni = self.nodes.len();
        let mut node_bar = vec![Mat5::zeros(); ni];
        let mut clm_bar = vec![Mat5::zeros(); self.clm.len()];
        if ni == 0 {
            clm_bar[0] = *gbar;
        } else {
            node_bar[0] = *gbar;
        }
        for h in 0..ni {
            let g = &self.nodes[h];
            let t = &tape.nodes[h];
            let [cl, cr] = self.topology.children(h);
            let mr = match cr {
                Ok(k) => tape.nodes[k].out,
                Err(j) => tape.clm[j].out,
            };
            let gb = node_bar[h];
            let f2 = 1.0 - g.f1;
            let mut mr_bar = gb;
            acc.f1[h] += gb.dot(&t.e);
            let ebar = gb * g.f1;
            let mut dm_bar = ebar * t.z.transpose();
            let zbar = t.dm.transpose() * ebar;
            let xbar = -(t.z.transpose() * zbar * t.z.transpose());
            let gdm = t.gam.gamma * t.dm;
            let f2bar = xbar.dot(&gdm);
            acc.f1[h] -= f2bar;
            let gam_bar = xbar * t.dm.transpose() * f2;
            dm_bar += t.gam.gamma.transpose() * xbar * f2;
            gamma_backward(&mr, &g.v, &t.gam, &gam_bar, Some(&mut mr_bar), &mut acc.node_v[h]);
            mr_bar -= dm_bar;
            let ml_bar = dm_bar;
            for (c, bar) in [(cl, ml_bar), (cr, mr_bar)] {
                match c {
                    Ok(k) => node_bar[k] += bar,
                    Err(j) => clm_bar[j] += bar,
                }
            }
        }
        for (j, b) in self.clm.iter().enumerate() {
            let t = &tape.clm[j];
            let Some(active) = &t.active else { continue };
            let gb = &clm_bar[j];
            acc.phi[j][2] += gb.dot(&active.z);
            let sbar = -(active.z * gb * active.z) * b.phi[2];
            for r in 0..3 {
                let gr_bar = sbar.dot(&active.gam[r].gamma);
                // g_1 = 1 − φ1, g_r = φ_{r−1} − φ_r
                acc.phi[j][r] -= gr_bar;
                if r > 0 {
                    acc.phi[j][r - 1] += gr_bar;
                }
                gamma_backward(m, &b.v[r], &active.gam[r], &(sbar * b.g[r]), None, &mut acc.clm_v[j][r]);
            }
        }
    }

    /// Chains accumulated adjoints back to raw weights and angles.
    fn parameter_gradient(&self, params: &NetworkParameters, acc: &Adjoints) -> (Vec<f64>, Vec<f64>) {
        let topo = &self.topology;
        let mut gw = vec![0.0; topo.n_weights()];
        let mut ga = vec![0.0; topo.n_angles()];
        let ni = self.nodes.len();
        // subtree weight adjoints, top-down
        let mut wbar = vec![0.0; ni];
        let mut clm_wbar = vec![0.0; self.clm.len()];
        for h in 0..ni {
            let g = &self.nodes[h];
            let w = g.wl + g.wr;
            let (mut bl, mut br) = (wbar[h], wbar[h]);
            if w > 0.0 {
                bl += acc.f1[h] * g.wr / (w * w);
                br -= acc.f1[h] * g.wl / (w * w);
            }
            for (c, bar) in topo.children(h).into_iter().zip([bl, br]) {
                match c {
                    Ok(k) => wbar[k] += bar,
                    Err(j) => clm_wbar[j] += bar,
                }
            }
        }
        for (j, b) in self.clm.iter().enumerate() {
            let base = 4 * j;
            for i in 0..4 {
                gw[base + i] += clm_wbar[j];
            }
            for r in 0..3 {
                let t = b.running[r];
                if t <= 0.0 {
                    continue;
                }
                let pb = acc.phi[j][r];
                gw[base] += pb * (t - b.core) / (t * t);
                for s in 0..=r {
                    gw[base + 1 + s] -= pb * b.core / (t * t);
                }
            }
        }
        // normals
        let gens = clm_normal_generators();
        for (j, b) in self.clm.iter().enumerate() {
            let dq = euler_rotation_derivatives(params.angles[3 * j], params.angles[3 * j + 1], params.angles[3 * j + 2]);
            for r in 0..3 {
                let nbar = normal_adjoint(&b.n[r], &acc.clm_v[j][r]);
                for (k, d) in dq.iter().enumerate() {
                    ga[3 * j + k] += nbar.dot(&(d * gens[r]));
                }
            }
        }
        for h in 0..ni {
            let i = topo.internal_angle_index(h);
            let nbar = normal_adjoint(&self.nodes[h].n, &acc.node_v[h]);
            let dn = spherical_normal_derivatives(params.angles[i], params.angles[i + 1]);
            ga[i] += nbar.dot(&dn[0]);
            ga[i + 1] += nbar.dot(&dn[1]);
        }
        for (g, s) in gw.iter_mut().zip(&self.sign) {
            *g *= s;
        }
        (ga, gw)
    }
}

fn normal_adjoint(n: &Vec3, vbar: &JumpBasis) -> Vec3 {
    let dv = jump_basis_derivative(n);
    Vec3::new(vbar.dot(&dv[0]), vbar.dot(&dv[1]), vbar.dot(&dv[2]))
}

#[derive(Debug, Clone)]
struct ActiveClm {
    gam: [GammaTape; 3],
    z: Mat5,
}

#[derive(Debug, Clone)]
struct ClmTape {
    active: Option<ActiveClm>,
    out: Mat5,
}

#[derive(Debug, Clone)]
struct NodeTape {
    gam: GammaTape,
    dm: Mat5,
    z: Mat5,
    e: Mat5,
    out: Mat5,
}

struct Tape {
    clm: Vec<ClmTape>,
    nodes: Vec<NodeTape>,
}

impl Tape {
    fn root(&self) -> Mat5 {
        self.nodes.first().map(|t| t.out).unwrap_or(self.clm[0].out)
    }
}

fn singular(index: usize, rel: f64, what: &str) -> FdmnError {
    FdmnError::SingularEffective { relative_min_eigenvalue: rel, reason: format!("{what} {index}") }
}

fn clm_forward(b: &ClmGeom, m: &Mat5, j: usize) -> Result<ClmTape> {
    if b.total <= 0.0 || b.phi[2] == 0.0 {
        return Ok(ClmTape { active: None, out: *m });
    }
    let mut gam = [GammaTape { gamma: Mat5::zeros(), minv: Mat3::zeros() }; 3];
    let mut sigma = Mat5::zeros();
    for r in 0..3 {
        gam[r] = gamma_ico(m, &b.v[r], &b.n[r]).ok_or_else(|| singular(j, 0.0, "reference of block"))?;
        sigma += gam[r].gamma * b.g[r];
    }
    let sigma = (sigma + sigma.transpose()) * 0.5;
    let chol = Cholesky::new(sigma).ok_or_else(|| singular(j, 0.0, "rigid-core block"))?;
    let d = chol.l_dirty().diagonal();
    let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), x| (lo.min(x * x), hi.max(x * x)));
    if lo <= SINGULAR_TOL * hi {
        return Err(singular(j, lo / hi, "rigid-core block"));
    }
    let z = chol.inverse();
    Ok(ClmTape { out: m + z * b.phi[2], active: Some(ActiveClm { gam, z }) })
}

fn node_forward(g: &NodeGeom, ml: &Mat5, mr: &Mat5, h: usize) -> Result<NodeTape> {
    let gam = gamma_ico(mr, &g.v, &g.n).ok_or_else(|| singular(h, 0.0, "reference of node"))?;
    let dm = ml - mr;
    let x = Mat5::identity() + gam.gamma * dm * (1.0 - g.f1);
    let z = x.try_inverse().ok_or_else(|| singular(h, 0.0, "contrast of node"))?;
    let e = dm * z;
    let out = mr + e * g.f1;
    if !out.iter().all(|v| v.is_finite()) {
        return Err(singular(h, 0.0, "node"));
    }
    Ok(NodeTape { gam, dm, z, e, out })
}

struct Adjoints {
    phi: Vec<[f64; 3]>,
    f1: Vec<f64>,
    clm_v: Vec<[JumpBasis; 3]>,
    node_v: Vec<JumpBasis>,
}

impl Adjoints {
    fn new(t: &Topology) -> Self {
        Adjoints {
            phi: vec![[0.0; 3]; t.n_clms()],
            f1: vec![0.0; t.n_internal()],
            clm_v: vec![[JumpBasis::zeros(); 3]; t.n_clms()],
            node_v: vec![JumpBasis::zeros(); t.n_internal()],
        }
    }
}

// ---------------------------------------------------------------------------------------------
// loss

/// A linear training sample in deviatoric coordinates.
#[derive(Debug, Clone)]
pub struct LinearSample {
    pub matrix: Mat5,
    pub target: Mat6,
    target_l1: f64,
}

impl LinearSample {
    pub fn new(matrix: Mat5, target: Mat6) -> Result<Self> {
        let target_l1 = target.abs().sum();
        if !(target_l1 > 0.0 && target_l1.is_finite()) {
            return Err(FdmnError::InvalidTensor("target must be non-zero and finite".into()));
        }
        Ok(LinearSample { matrix, target, target_l1 })
    }

    pub fn from_record(r: &SampleRecord) -> Result<Self> {
        Self::new(r.matrix.dev5(), *r.effective.matrix())
    }

    fn relative_error(&self, pred5: &Mat5, b: &DevBasis) -> (f64, Mat6) {
        let diff = b * pred5 * b.transpose() - self.target;
        (diff.abs().sum() / self.target_l1, diff)
    }
}

pub fn prepare(records: &[SampleRecord]) -> Result<Vec<LinearSample>> {
    records.iter().map(LinearSample::from_record).collect()
}

/// Network prediction for one matrix viscosity, through the compiled path.
pub fn predict(topology: &Topology, params: &NetworkParameters, matrix: &MaterialTensor) -> Result<MaterialTensor> {
    let c = CompiledNetwork::new(topology, params)?;
    Ok(MaterialTensor::from_dev5(&c.forward(&matrix.dev5())?, Role::Primal))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub loss: f64,
    pub angles: Vec<f64>,
    pub weights: Vec<f64>,
}

fn aggregate(rel: &[f64]) -> f64 {
    let s = rel.iter().fold(0.0f64, |m, r| m.max(*r));
    if s == 0.0 {
        return 0.0;
    }
    // (Σ r^10)^(1/10) evaluated with the largest term factored out
    s * rel.iter().map(|r| (r / s).powi(10)).sum::<f64>().powf(0.1)
}

fn penalty(c: &CompiledNetwork, lambda: f64) -> f64 {
    let d = c.weight_sum - 1.0;
    lambda * d * d
}

pub fn loss_prepared(topology: &Topology, params: &NetworkParameters, batch: &[LinearSample], lambda: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(FdmnError::DatasetTooSmall { got: 0, needed: 1 });
    }
    let c = CompiledNetwork::new(topology, params)?;
    let b = dev_basis();
    let rel = batch
        .iter()
        .map(|s| Ok(s.relative_error(&c.forward(&s.matrix)?, &b).0))
        .collect::<Result<Vec<f64>>>()?;
    Ok(aggregate(&rel) / batch.len() as f64 + penalty(&c, lambda))
}

/// (1/N_b)(Σ rel^10)^(1/10) + λ(Σ|w| − 1)².
pub fn loss(topology: &Topology, params: &NetworkParameters, batch: &[SampleRecord], lambda: f64) -> Result<f64> {
    loss_prepared(topology, params, &prepare(batch)?, lambda)
}

pub fn gradient_prepared(
    topology: &Topology,
    params: &NetworkParameters,
    batch: &[LinearSample],
    lambda: f64,
) -> Result<Gradient> {
    if batch.is_empty() {
        return Err(FdmnError::DatasetTooSmall { got: 0, needed: 1 });
    }
    let c = CompiledNetwork::new(topology, params)?;
    let b = dev_basis();
    let nb = batch.len() as f64;
    let mut tapes = Vec::with_capacity(batch.len());
    let mut rel = Vec::with_capacity(batch.len());
    for s in batch {
        let tape = c.forward_taped(&s.matrix)?;
        let (r, diff) = s.relative_error(&tape.root(), &b);
        rel.push(r);
        tapes.push((tape, diff));
    }
    let agg = aggregate(&rel);
    let mut acc = Adjoints::new(topology);
    if agg > 0.0 {
        for ((s, (tape, diff)), r) in batch.iter().zip(&tapes).zip(&rel) {
            let dr = (r / agg).powi(9) / nb;
            if dr == 0.0 {
                continue;
            }
            let pbar = diff.map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }) * (dr / s.target_l1);
            let gbar = b.transpose() * pbar * b;
            c.backward(&s.matrix, tape, &gbar, &mut acc);
        }
    }
    let (angles, mut weights) = c.parameter_gradient(params, &acc);
    let d = 2.0 * lambda * (c.weight_sum - 1.0);
    for (g, s) in weights.iter_mut().zip(&c.sign) {
        *g += d * s;
    }
    if let Some(i) = angles.iter().chain(&weights).position(|g| !g.is_finite()) {
        return Err(FdmnError::NonFiniteGradient { node: i });
    }
    Ok(Gradient { loss: agg / nb + penalty(&c, lambda), angles, weights })
}

pub fn gradient(topology: &Topology, params: &NetworkParameters, batch: &[SampleRecord], lambda: f64) -> Result<Gradient> {
    gradient_prepared(topology, params, &prepare(batch)?, lambda)
}

/// Mean relative ℓ1 error over a set of samples.
pub fn mean_error(topology: &Topology, params: &NetworkParameters, samples: &[LinearSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let c = CompiledNetwork::new(topology, params)?;
    let b = dev_basis();
    let mut total = 0.0;
    for s in samples {
        total += s.relative_error(&c.forward(&s.matrix)?, &b).0;
    }
    Ok(total / samples.len() as f64)
}

// ---------------------------------------------------------------------------------------------
// optimizer

/// Rectified Adam, following the PyTorch formulation.
#[derive(Debug, Clone, PartialEq)]
pub struct RAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl RAdam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        RAdam { beta1, beta2, eps, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Length of the approximated simple moving average after `t` steps.
    pub fn rho(&self, t: u32) -> f64 {
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let b2t = self.beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Whether the variance rectification is active at step `t` (1-based).
    pub fn rectified(&self, t: u32) -> bool {
        self.rho(t) > 5.0
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let rho = self.rho(self.t);
        let rect = if rho > 5.0 {
            Some(((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt())
        } else {
            None
        };
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            params[i] -= match rect {
                Some(r) => lr * mhat * r * bc2.sqrt() / (self.v[i].sqrt() + self.eps),
                None => lr * mhat,
            };
        }
    }
}

/// One optimizer state per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub angles: RAdam,
    pub weights: RAdam,
}

impl OptimizerState {
    pub fn new(topology: &Topology, cfg: &TrainConfig) -> Self {
        OptimizerState {
            angles: RAdam::new(topology.n_angles(), cfg.beta1, cfg.beta2, cfg.eps),
            weights: RAdam::new(topology.n_weights(), cfg.beta1, cfg.beta2, cfg.eps),
        }
    }
}

pub fn radam_step(
    state: &mut OptimizerState,
    params: &mut NetworkParameters,
    grads: &Gradient,
    epoch: usize,
    cfg: &TrainConfig,
) {
    let (la, lw) = cfg.learning_rates(epoch);
    state.angles.step(&mut params.angles, &grads.angles, la);
    state.weights.step(&mut params.weights, &grads.weights, lw);
}

// ---------------------------------------------------------------------------------------------
// training driver

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub min: f64,
    pub max: f64,
    pub avg: f64,
}

impl Spread {
    fn of(v: &[f64]) -> Spread {
        if v.is_empty() {
            return Spread { min: f64::NAN, max: f64::NAN, avg: f64::NAN };
        }
        Spread {
            min: v.iter().cloned().fold(f64::INFINITY, f64::min),
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            avg: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: Spread,
    pub validation: Spread,
    pub lr_angles: f64,
    pub lr_weights: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartLog {
    pub index: usize,
    /// (train mean error, validation mean error) after every epoch.
    pub history: Vec<(f64, f64)>,
    pub params: NetworkParameters,
    pub aborted: Option<String>,
}

impl RestartLog {
    pub fn final_errors(&self) -> Option<(f64, f64)> {
        self.history.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Per-epoch spread over the restarts that were still alive.
    pub epochs: Vec<EpochStats>,
    pub restarts: Vec<RestartLog>,
    pub best_restart: usize,
    pub best_params: NetworkParameters,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

impl FitReport {
    pub fn aborted(&self) -> usize {
        self.restarts.iter().filter(|r| r.aborted.is_some()).count()
    }
    pub fn best(&self) -> &RestartLog {
        &self.restarts[self.best_restart]
    }
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic shuffled split into (train, validation) indices.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX)));
    let n_val = ((1.0 - train_fraction) * n as f64).round() as usize;
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

fn run_restart(
    topology: &Topology,
    train: &[LinearSample],
    val: &[LinearSample],
    cfg: &TrainConfig,
    index: usize,
) -> RestartLog {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64));
    let mut params = NetworkParameters::random(topology, &mut rng);
    let mut state = OptimizerState::new(topology, cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            match gradient_prepared(topology, &params, &batch, cfg.penalty) {
                Ok(g) => radam_step(&mut state, &mut params, &g, epoch, cfg),
                Err(e) => {
                    log::warn!("restart {index} aborted in epoch {epoch}: {e}");
                    return RestartLog { index, history, params, aborted: Some(e.to_string()) };
                }
            }
        }
        let errs = mean_error(topology, &params, train).and_then(|t| Ok((t, mean_error(topology, &params, val)?)));
        match errs {
            Ok(e) => history.push(e),
            Err(e) => return RestartLog { index, history, params, aborted: Some(e.to_string()) },
        }
        if epoch % 100 == 0 {
            log::debug!("restart {index} epoch {epoch}: train {:.4e} val {:.4e}", history[epoch].0, history[epoch].1);
        }
    }
    RestartLog { index, history, params, aborted: None }
}

/// Trains `cfg.restarts` independent networks and keeps the one with the lowest final
/// validation error (training error when the validation set is empty).
pub fn train(topology: &Topology, dataset: &[SampleRecord], cfg: &TrainConfig) -> Result<FitReport> {
    cfg.validate()?;
    let samples = prepare(dataset)?;
    let (ti, vi) = split_indices(samples.len(), cfg.train_fraction, cfg.seed);
    if ti.len() < cfg.batch_size {
        return Err(FdmnError::DatasetTooSmall { got: ti.len(), needed: cfg.batch_size });
    }
    let train_set: Vec<LinearSample> = ti.iter().map(|&i| samples[i].clone()).collect();
    let val_set: Vec<LinearSample> = vi.iter().map(|&i| samples[i].clone()).collect();
    let restarts: Vec<RestartLog> = (0..cfg.restarts)
        .into_par_iter()
        .map(|k| run_restart(topology, &train_set, &val_set, cfg, k))
        .collect();
    let score = |r: &RestartLog| -> f64 {
        match (r.aborted.as_ref(), r.final_errors()) {
            (None, Some((t, v))) => if val_set.is_empty() { t } else { v },
            _ => f64::INFINITY,
        }
    };
    let best = (0..restarts.len())
        .min_by(|&a, &b| score(&restarts[a]).total_cmp(&score(&restarts[b])))
        .expect("at least one restart");
    if !score(&restarts[best]).is_finite() {
        return Err(FdmnError::SingularEffective {
            relative_min_eigenvalue: 0.0,
            reason: format!("all {} restarts aborted", restarts.len()),
        });
    }
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let alive: Vec<(f64, f64)> = restarts.iter().filter_map(|r| r.history.get(e).copied()).collect();
        let (la, lw) = cfg.learning_rates(e);
        epochs.push(EpochStats {
            epoch: e,
            train: Spread::of(&alive.iter().map(|x| x.0).collect::<Vec<_>>()),
            validation: Spread::of(&alive.iter().map(|x| x.1).collect::<Vec<_>>()),
            lr_angles: la,
            lr_weights: lw,
        });
    }
    Ok(FitReport {
        epochs,
        best_params: restarts[best].params.clone(),
        best_restart: best,
        restarts,
        train_indices: ti,
        validation_indices: vi,
    })
}

/// Learning-rate range test: the rate grows geometrically from `lo` to `hi` over `steps`
/// mini-batch updates of a single network; returns (rate, batch loss) pairs.
pub fn lr_sweep(
    topology: &Topology,
    dataset: &[SampleRecord],
    cfg: &TrainConfig,
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    if !(lo > 0.0 && hi > lo) || steps < 2 {
        return Err(FdmnError::InvalidSpec("sweep needs 0 < lo < hi and at least two steps".into()));
    }
    let samples = prepare(dataset)?;
    if samples.len() < cfg.batch_size {
        return Err(FdmnError::DatasetTooSmall { got: samples.len(), needed: cfg.batch_size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0));
    let mut params = NetworkParameters::random(topology, &mut rng);
    let mut state = OptimizerState::new(topology, cfg);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(steps);
    let ratio = (hi / lo).powf(1.0 / (steps - 1) as f64);
    let mut k = 0;
    while k < steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(cfg.batch_size) {
            if k == steps {
                break;
            }
            let lr = lo * ratio.powi(k as i32);
            let batch: Vec<LinearSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let g = match gradient_prepared(topology, &params, &batch, cfg.penalty) {
                Ok(g) => g,
                Err(_) => return Ok(out),
            };
            out.push((lr, g.loss));
            state.angles.step(&mut params.angles, &g.angles, lr);
            state.weights.step(&mut params.weights, &g.weights, lr);
            k += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layered::Strictness;
    use crate::mandel::{gamma_weighted, Direction, KinematicClass};
    use crate::materials::{sample_viscosity, OrientationState, Provenance, SampleSpec};
    use crate::network::linear_forward;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_sample<R: Rng>(rng: &mut R) -> LinearSample {
        let m = sample_viscosity(&SampleSpec::random(rng)).unwrap();
        let t = sample_viscosity(&SampleSpec::random(rng)).unwrap();
        LinearSample::new(m.dev5(), *t.matrix()).unwrap()
    }

    fn fd_check(k: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Topology::new(k, 3).unwrap();
        let p = NetworkParameters::random(&t, &mut rng);
        let batch: Vec<LinearSample> = (0..3).map(|_| random_sample(&mut rng)).collect();
        let g = gradient_prepared(&t, &p, &batch, 10.0).unwrap();
        let h = 1e-6;
        let scale = g.angles.iter().chain(&g.weights).fold(0.0f64, |m, x| m.max(x.abs()));
        let f = |q: &NetworkParameters| loss_prepared(&t, q, &batch, 10.0).unwrap();
        for i in 0..p.angles.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.angles[i] += h;
            b.angles[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - g.angles[i]).abs() <= 1e-5 * scale, "angle {i}: {fd} vs {}", g.angles[i]);
        }
        for i in 0..p.weights.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.weights[i] += h;
            b.weights[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - g.weights[i]).abs() <= 1e-5 * scale, "weight {i}: {fd} vs {}", g.weights[i]);
        }
    }

    #[test]
    fn fast_gamma_matches_projector_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = sample_viscosity(&SampleSpec::random(&mut rng)).unwrap();
            let n = crate::mandel::random_direction(&mut rng);
            let fast = gamma_ico(&m.dev5(), &jump_basis(n.vec()), n.vec()).unwrap().gamma;
            let slow5 = crate::mandel::to_dev5(&gamma_weighted(&n, &m).unwrap());
            assert!((fast - slow5).norm() <= 1e-10 * slow5.norm(), "{}", (fast - slow5).norm());
        }
    }

    #[test]
    fn compiled_forward_matches_reference_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 1..=4 {
            let t = Topology::new(k, 3).unwrap();
            for _ in 0..5 {
                let p = NetworkParameters::random(&t, &mut rng);
                let m = sample_viscosity(&SampleSpec::random(&mut rng)).unwrap();
                let rigid = MaterialTensor::rigid(KinematicClass::Incompressible);
                let slow = linear_forward(&t, &p, &m, &rigid, Strictness::Strict).unwrap();
                let fast = predict(&t, &p, &m).unwrap();
                let err = (fast.matrix() - slow.matrix()).norm() / slow.matrix().norm();
                assert!(err < 1e-10, "K={k}: {err}");
            }
        }
    }

    #[test]
    fn loss_examples() {
        let t = Topology::new(1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = NetworkParameters::random(&t, &mut rng);
        let m = sample_viscosity(&SampleSpec::random(&mut rng)).unwrap();
        let pred = predict(&t, &p, &m).unwrap();
        let exact = LinearSample::new(m.dev5(), *pred.matrix()).unwrap();
        assert!(loss_prepared(&t, &p, &[exact.clone()], 1000.0).unwrap() < 1e-13);
        let half = LinearSample::new(m.dev5(), pred.matrix() * 0.5).unwrap();
        assert!((loss_prepared(&t, &p, &[half], 1000.0).unwrap() - 1.0).abs() < 1e-12);
        let mut q = p.clone();
        q.weights.iter_mut().for_each(|w| *w *= 1.1);
        // scaling all weights leaves the prediction unchanged
        assert!((loss_prepared(&t, &q, &[exact.clone()], 1000.0).unwrap() - 10.0).abs() < 1e-9);
        let b = dev_basis();
        let pq = b * CompiledNetwork::new(&t, &q).unwrap().forward(&m.dev5()).unwrap() * b.transpose();
        let exact_q = LinearSample::new(m.dev5(), pq).unwrap();
        let g = gradient_prepared(&t, &q, &[exact_q], 1000.0).unwrap();
        for gw in &g.weights {
            assert!((gw - 200.0).abs() < 1e-6);
        }
        assert!(g.angles.iter().all(|a| a.abs() < 1e-6));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (k, seed) in [(1, 10), (2, 11), (3, 12), (3, 13)] {
            fd_check(k, seed);
        }
    }

    #[test]
    fn radam_behaviour() {
        let mut o = RAdam::new(1, 0.9, 0.999, 1e-8);
        for t in 1..=5 {
            assert!(!o.rectified(t), "{t}");
        }
        assert!(o.rectified(6));
        let mut x = [1.0];
        o.step(&mut x, &[0.0], 0.1);
        assert_eq!(x[0], 1.0);
        // momentum-only first step moves by lr·g
        let mut o = RAdam::new(1, 0.9, 0.999, 1e-8);
        let mut x = [1.0];
        o.step(&mut x, &[2.0], 0.1);
        assert!((x[0] - 0.8).abs() < 1e-15);
        let mut o = RAdam::new(1, 0.9, 0.999, 1e-8);
        let mut x = [1.0];
        for _ in 0..200 {
            let g = [2.0 * x[0]];
            o.step(&mut x, &g, 0.1);
        }
        assert!(x[0].abs() < 1e-2, "{}", x[0]);
        assert_eq!(step_decay(1e-2, 149, 0.75, 150), 1e-2);
        assert_eq!(step_decay(1e-2, 300, 0.75, 150), 1e-2 * 0.5625);
    }

    #[test]
    fn split_is_deterministic() {
        let (a, b) = split_indices(32, 0.9, 4);
        assert_eq!((a.len(), b.len()), (29, 3));
        assert_eq!(split_indices(32, 0.9, 4), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn short_training_is_deterministic_and_improves() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let teacher_t = Topology::new(2, 3).unwrap();
        let teacher = NetworkParameters::random(&teacher_t, &mut rng);
        let data: Vec<SampleRecord> = (0..16)
            .map(|_| {
                let m = sample_viscosity(&SampleSpec::random(&mut rng)).unwrap();
                let e = predict(&teacher_t, &teacher, &m).unwrap();
                SampleRecord::new(m, e, Provenance::Teacher, OrientationState::isotropic()).unwrap()
            })
            .collect();
        let cfg = TrainConfig { epochs: 60, restarts: 2, seed: 5, ..TrainConfig::default() };
        let t = Topology::new(2, 3).unwrap();
        let a = train(&t, &data, &cfg).unwrap();
        let b = train(&t, &data, &cfg).unwrap();
        assert_eq!(a, b);
        let first = a.epochs[0].train.avg;
        let last = a.epochs.last().unwrap().train.avg;
        assert!(last < first, "{first} -> {last}");
        assert_eq!(a.aborted(), 0);
        let too_small = TrainConfig { batch_size: 64, ..cfg };
        assert!(matches!(train(&t, &data, &too_small), Err(FdmnError::DatasetTooSmall { .. })));
    }

    #[test]
    fn unused_angle_has_zero_gradient() {
        // a block without core weight is the matrix itself, so its normals do not matter
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let t = Topology::new(1, 3).unwrap();
        let mut p = NetworkParameters::random(&t, &mut rng);
        p.weights[0] = 0.0;
        let batch = vec![random_sample(&mut rng)];
        let g = gradient_prepared(&t, &p, &batch, 1.0).unwrap();
        assert!(g.angles.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn direction_helper_is_consistent() {
        let d = Direction::new(Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(*d.vec(), spherical_normal(0.0, 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn gradient_property(k in 1usize..=3, seed in any::<u64>()) {
            fd_check(k, seed);
        }
    }
}
