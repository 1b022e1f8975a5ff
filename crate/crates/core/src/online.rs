//! Nonlinear online evaluation of a trained network.
//!
//! Every CLM is expanded into a chain of three rank-one laminates (core, then one coating layer
//! per normal), so the network becomes a binary tree whose leaves are the weighted phases and
//! whose inner nodes each carry one jump vector b. A leaf's strain rate is D̄ plus, for every
//! ancestor, ±(weight share)·V(n) b. The effective dissipation potential is minimized over the
//! jumps by Newton's method. Rigid leaves are held at zero strain rate through Lagrange
//! multipliers, which also provide their reaction stresses.
//!
//! The Hessian only couples a jump with its ancestors, so each Newton system is solved by block
//! elimination from the leaves to the root: one block per CLM (its three jumps and the core
//! multipliers) and one per internal node.

use std::ops::AddAssign;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix};
use rayon::prelude::*;

use crate::error::{FdmnError, Result};
use crate::mandel::{jump_basis, DevTensor, JumpBasis, Mat5, Vec3, Vec5};
use crate::materials::{LoadCase, ViscousLaw};
use crate::network::{build_normals, NetworkParameters, Topology};

type Tangent = SMatrix<f64, 3, 2>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Child {
    Jump(usize),
    Leaf(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpNode {
    pub normal: Vec3,
    pub basis: JumpBasis,
    pub children: [Child; 2],
    /// Weight below each side.
    pub side_weights: [f64; 2],
    /// Multiplier of V b in the strain rate of each side: (W₂/W, −W₁/W).
    pub shares: [f64; 2],
    tangent: Tangent,
}

impl JumpNode {
    /// A jump with an empty side moves no weighted leaf.
    pub fn active(&self) -> bool {
        self.side_weights[0] > 0.0 && self.side_weights[1] > 0.0
    }
}

/// Tree form of the map from jumps to leaf strain-rate fluctuations.
///
/// Jumps follow the global normal order (CLM triples, then internal nodes deepest layer first);
/// leaves follow the weight order (per CLM: core, coating 1..3).
#[derive(Debug, Clone)]
pub struct JumpOperator {
    topology: Topology,
    pub nodes: Vec<JumpNode>,
    pub leaf_weights: Vec<f64>,
    pub leaf_rigid: Vec<bool>,
    top_down: Vec<usize>,
    ancestors: Vec<Vec<(usize, usize)>>,
    leaf_ancestors: Vec<Vec<(usize, usize)>>,
}

fn tangent_basis(n: &Vec3) -> Tangent {
    let k = (0..3).min_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs())).expect("three entries");
    let mut e = Vec3::zeros();
    e[k] = 1.0;
    let t1 = (e - n * n[k]).normalize();
    let t2 = n.cross(&t1);
    Tangent::from_columns(&[t1, t2])
}

pub fn assemble_operator(topology: &Topology, params: &NetworkParameters) -> Result<JumpOperator> {
    params.check(topology)?;
    let normals = build_normals(topology, &params.angles)?;
    let leaf_weights = params.normalized_weights();
    let nc = topology.n_clms();
    let ni = topology.n_internal();
    let internal_jump = |h: usize| 3 * nc + topology.internal_slot(h);
    let blank = |n: Vec3, children| JumpNode {
        normal: n,
        basis: jump_basis(&n),
        children,
        side_weights: [0.0; 2],
        shares: [0.0; 2],
        tangent: tangent_basis(&n),
    };
    let mut nodes: Vec<Option<JumpNode>> = vec![None; topology.n_normals()];
    for j in 0..nc {
        for r in 0..3 {
            let inner = if r == 0 { Child::Leaf(4 * j) } else { Child::Jump(3 * j + r - 1) };
            nodes[3 * j + r] = Some(blank(*normals.clm[j][r].vec(), [inner, Child::Leaf(4 * j + r + 1)]));
        }
    }
    for h in 0..ni {
        let children = topology.children(h).map(|c| match c {
            Ok(k) => Child::Jump(internal_jump(k)),
            Err(j) => Child::Jump(3 * j + 2),
        });
        nodes[internal_jump(h)] = Some(blank(*normals.internal[h].vec(), children));
    }
    let mut nodes: Vec<JumpNode> = nodes.into_iter().map(|n| n.expect("every jump is built")).collect();
    let root = if ni > 0 { internal_jump(0) } else { 2 };

    let mut top_down = vec![root];
    let mut i = 0;
    while i < top_down.len() {
        for c in nodes[top_down[i]].children {
            if let Child::Jump(q) = c {
                top_down.push(q);
            }
        }
        i += 1;
    }
    let mut subtree = vec![0.0; nodes.len()];
    for &p in top_down.iter().rev() {
        let w = nodes[p].children.map(|c| match c {
            Child::Jump(q) => subtree[q],
            Child::Leaf(l) => leaf_weights[l],
        });
        let total = w[0] + w[1];
        subtree[p] = total;
        nodes[p].side_weights = w;
        nodes[p].shares = if total > 0.0 { [w[1] / total, -w[0] / total] } else { [0.0; 2] };
    }
    let mut ancestors = vec![Vec::new(); nodes.len()];
    let mut leaf_ancestors = vec![Vec::new(); leaf_weights.len()];
    for &p in &top_down {
        for (side, c) in nodes[p].children.into_iter().enumerate() {
            let mut chain = vec![(p, side)];
            chain.extend_from_slice(&ancestors[p]);
            match c {
                Child::Jump(q) => ancestors[q] = chain,
                Child::Leaf(l) => leaf_ancestors[l] = chain,
            }
        }
    }
    let leaf_rigid = (0..leaf_weights.len()).map(|l| l % 4 == 0).collect();
    Ok(JumpOperator {
        topology: *topology,
        nodes,
        leaf_weights,
        leaf_rigid,
        top_down,
        ancestors,
        leaf_ancestors,
    })
}

impl JumpOperator {
    pub fn topology(&self) -> &Topology {
        &self.topology
    }
    pub fn n_jumps(&self) -> usize {
        self.nodes.len()
    }
    pub fn n_leaves(&self) -> usize {
        self.leaf_weights.len()
    }

    /// Strain-rate fluctuation of every leaf for jumps `b`.
    pub fn apply(&self, b: &[Vec3]) -> Vec<Vec5> {
        assert_eq!(b.len(), self.nodes.len());
        let mut d_in = vec![Vec5::zeros(); self.nodes.len()];
        let mut out = vec![Vec5::zeros(); self.n_leaves()];
        for &p in &self.top_down {
            let node = &self.nodes[p];
            let j = node.basis * b[p];
            for (side, c) in node.children.into_iter().enumerate() {
                let d = d_in[p] + j * node.shares[side];
                match c {
                    Child::Jump(q) => d_in[q] = d,
                    Child::Leaf(l) => out[l] = d,
                }
            }
        }
        out
    }

    /// Dense (5·leaves) × (3·jumps) matrix of [`JumpOperator::apply`].
    pub fn dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(5 * self.n_leaves(), 3 * self.n_jumps());
        for (l, chain) in self.leaf_ancestors.iter().enumerate() {
            for &(p, side) in chain {
                let block = self.nodes[p].basis * self.nodes[p].shares[side];
                a.view_mut((5 * l, 3 * p), (5, 3)).copy_from(&block);
            }
        }
        a
    }

    /// Leaves that carry weight and are held rigid.
    fn active_core(&self, j: usize) -> bool {
        self.leaf_rigid[4 * j] && self.leaf_weights[4 * j] > 0.0
    }
}

// ---------------------------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NullspaceMode {
    /// Two in-plane coordinates per jump.
    Tangent,
    /// Full jump vectors with β n⊗n added to each diagonal block.
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub mode: NullspaceMode,
    pub tolerance: f64,
    pub absolute_tolerance: f64,
    pub constraint_tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub armijo: f64,
    /// Start each battery point from the previous rate of the same load direction.
    pub warm_start: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            mode: NullspaceMode::Tangent,
            tolerance: 1e-10,
            absolute_tolerance: 1e-14,
            constraint_tolerance: 1e-10,
            max_iterations: 50,
            max_halvings: 20,
            armijo: 1e-4,
            warm_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    /// Jump vectors in the global normal order.
    pub b: Vec<Vec3>,
    /// Reaction stress of each CLM core (zero for empty cores).
    pub multipliers: Vec<Vec5>,
    pub iterations: usize,
    pub residual: f64,
    pub constraint_residual: f64,
    /// Step halvings taken in every Newton iteration.
    pub halvings: Vec<usize>,
    /// Largest pivot ratio met in the block factorizations.
    pub condition: f64,
    /// Effective dissipation potential at the solution.
    pub potential: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub stress: DevTensor,
    pub state: SolverState,
}

struct Eval {
    tau: Vec<[Vec5; 2]>,
    mu: Vec<[Vec5; 2]>,
    tan: Vec<[Mat5; 2]>,
    core_strain: Vec<Vec5>,
    potential: f64,
    stress: Vec5,
}

struct Group {
    core: Option<usize>,
    ancestors: Vec<usize>,
    size: usize,
}

struct Solver<'a, L: ViscousLaw> {
    op: &'a JumpOperator,
    law: &'a L,
    opts: SolverOptions,
    m: usize,
    p: Vec<DMatrix<f64>>,
    groups: Vec<Group>,
    jump_group: Vec<(usize, usize)>,
    order: Vec<usize>,
}

impl<'a, L: ViscousLaw> Solver<'a, L> {
    fn new(op: &'a JumpOperator, law: &'a L, opts: SolverOptions) -> Self {
        let m = match opts.mode {
            NullspaceMode::Tangent => 2,
            NullspaceMode::Augmented => 3,
        };
        let p = op
            .nodes
            .iter()
            .map(|n| {
                let v = DMatrix::from_column_slice(5, 3, n.basis.as_slice());
                match opts.mode {
                    NullspaceMode::Tangent => v * DMatrix::from_column_slice(3, 2, n.tangent.as_slice()),
                    NullspaceMode::Augmented => v,
                }
            })
            .collect();
        let t = &op.topology;
        let nc = t.n_clms();
        let ni = t.n_internal();
        let path = |mut h: Option<usize>| {
            let mut out = Vec::new();
            while let Some(k) = h {
                out.push(nc + k);
                h = if k == 0 { None } else { Some((k - 1) / 2) };
            }
            out
        };
        let mut groups = Vec::with_capacity(nc + ni);
        let mut jump_group = vec![(0, 0); op.n_jumps()];
        for j in 0..nc {
            let core = op.active_core(j).then_some(j);
            for r in 0..3 {
                jump_group[3 * j + r] = (j, r * m);
            }
            groups.push(Group {
                core,
                ancestors: path(t.clm_parent(j)),
                size: 3 * m + if core.is_some() { 5 } else { 0 },
            });
        }
        for h in 0..ni {
            let q = 3 * nc + t.internal_slot(h);
            jump_group[q] = (nc + h, 0);
            groups.push(Group {
                core: None,
                ancestors: path(if h == 0 { None } else { Some((h - 1) / 2) }),
                size: m,
            });
        }
        let order = (0..nc).chain((0..ni).rev().map(|h| nc + h)).collect();
        Solver { op, law, opts, m, p, groups, jump_group, order }
    }

    fn leaf_strains(&self, dbar: &Vec5, b: &[Vec3]) -> Vec<Vec5> {
        let mut d = self.op.apply(b);
        d.iter_mut().for_each(|x| *x += dbar);
        d
    }

    fn potential(&self, dbar: &Vec5, b: &[Vec3]) -> f64 {
        let d = self.leaf_strains(dbar, b);
        let op = self.op;
        (0..op.n_leaves())
            .filter(|&l| !op.leaf_rigid[l] && op.leaf_weights[l] > 0.0)
            .map(|l| op.leaf_weights[l] * self.law.potential(&d[l]))
            .sum()
    }

    fn evaluate(&self, dbar: &Vec5, b: &[Vec3], mu: &[Vec5]) -> Eval {
        let op = self.op;
        let d = self.leaf_strains(dbar, b);
        let nl = op.n_leaves();
        let mut leaf_tau = vec![Vec5::zeros(); nl];
        let mut leaf_tan = vec![Mat5::zeros(); nl];
        let mut leaf_mu = vec![Vec5::zeros(); nl];
        let mut potential = 0.0;
        let mut stress = Vec5::zeros();
        for l in 0..nl {
            let w = op.leaf_weights[l];
            if w == 0.0 {
                continue;
            }
            if op.leaf_rigid[l] {
                leaf_mu[l] = mu[l / 4];
                stress += mu[l / 4];
            } else {
                let (s, t) = self.law.stress_tangent(&d[l]);
                leaf_tau[l] = s * w;
                leaf_tan[l] = t * w;
                potential += w * self.law.potential(&d[l]);
                stress += s * w;
            }
        }
        let nj = op.n_jumps();
        let mut tau = vec![[Vec5::zeros(); 2]; nj];
        let mut mus = vec![[Vec5::zeros(); 2]; nj];
        let mut tan = vec![[Mat5::zeros(); 2]; nj];
        for &p in op.top_down.iter().rev() {
            for (side, c) in op.nodes[p].children.into_iter().enumerate() {
                let (t, m, c5) = match c {
                    Child::Leaf(l) => (leaf_tau[l], leaf_mu[l], leaf_tan[l]),
                    Child::Jump(q) => (tau[q][0] + tau[q][1], mus[q][0] + mus[q][1], tan[q][0] + tan[q][1]),
                };
                tau[p][side] = t;
                mus[p][side] = m;
                tan[p][side] = c5;
            }
        }
        let core_strain = (0..op.topology.n_clms()).map(|j| d[4 * j]).collect();
        Eval { tau, mu: mus, tan, core_strain, potential, stress }
    }

    /// Gradient of the potential (without multipliers) and the full stationarity residual.
    fn residuals(&self, e: &Eval) -> (Vec<DVector<f64>>, f64) {
        let mut g = Vec::with_capacity(self.op.n_jumps());
        let mut full = 0.0;
        for (p, node) in self.op.nodes.iter().enumerate() {
            if !node.active() {
                g.push(DVector::zeros(self.m));
                continue;
            }
            let s = node.shares;
            let t = e.tau[p][0] * s[0] + e.tau[p][1] * s[1];
            let tm = t + e.mu[p][0] * s[0] + e.mu[p][1] * s[1];
            let pt = self.p[p].transpose();
            full += (&pt * DVector::from_column_slice(tm.as_slice())).norm_squared();
            g.push(pt * DVector::from_column_slice(t.as_slice()));
        }
        (g, full.sqrt())
    }

    fn constraint_residual(&self, e: &Eval) -> f64 {
        (0..self.op.topology.n_clms())
            .filter(|&j| self.op.active_core(j))
            .map(|j| e.core_strain[j].norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Solves the Newton saddle system; returns per-jump steps, new multipliers, pivot ratio.
    fn newton_system(&self, e: &Eval, g: &[DVector<f64>]) -> Result<(Vec<DVector<f64>>, Vec<Vec5>, f64)> {
        let op = self.op;
        let m = self.m;
        let ng = self.groups.len();
        let mut diag: Vec<DMatrix<f64>> = self.groups.iter().map(|gr| DMatrix::zeros(gr.size, gr.size)).collect();
        let mut off: Vec<Vec<DMatrix<f64>>> = self
            .groups
            .iter()
            .map(|gr| gr.ancestors.iter().map(|&a| DMatrix::zeros(gr.size, self.groups[a].size)).collect())
            .collect();
        let mut rhs: Vec<DVector<f64>> = self.groups.iter().map(|gr| DVector::zeros(gr.size)).collect();
        let anc_index = |g: usize, a: usize| {
            self.groups[g].ancestors.iter().position(|&x| x == a).expect("ancestor group")
        };
        let to_d = |x: &Mat5| DMatrix::from_column_slice(5, 5, x.as_slice());

        for (q, node) in op.nodes.iter().enumerate() {
            let (gq, oq) = self.jump_group[q];
            if !node.active() {
                diag[gq].view_mut((oq, oq), (m, m)).fill_with_identity();
                continue;
            }
            let s = node.shares;
            let cdiag = to_d(&(e.tan[q][0] * (s[0] * s[0]) + e.tan[q][1] * (s[1] * s[1])));
            let pq = &self.p[q];
            let mut hqq = pq.transpose() * cdiag * pq;
            if self.opts.mode == NullspaceMode::Augmented {
                let beta = hqq.trace() / m as f64;
                let n = DVector::from_column_slice(node.normal.as_slice());
                hqq += &n * n.transpose() * beta;
            }
            diag[gq].view_mut((oq, oq), (m, m)).add_assign(&hqq);
            rhs[gq].rows_mut(oq, m).copy_from(&(-&g[q]));
            let y = to_d(&(e.tan[q][0] * s[0] + e.tan[q][1] * s[1])) * pq;
            for &(p, side) in &op.ancestors[q] {
                if !op.nodes[p].active() {
                    continue;
                }
                let hpq = self.p[p].transpose() * &y * op.nodes[p].shares[side];
                let (gp, op_) = self.jump_group[p];
                if gp == gq {
                    diag[gq].view_mut((op_, oq), (m, m)).add_assign(&hpq);
                    diag[gq].view_mut((oq, op_), (m, m)).add_assign(&hpq.transpose());
                } else {
                    let a = anc_index(gq, gp);
                    off[gq][a].view_mut((oq, op_), (m, m)).add_assign(&hpq.transpose());
                }
            }
        }
        for (gi, gr) in self.groups.iter().enumerate() {
            let Some(j) = gr.core else { continue };
            let o = 3 * m;
            rhs[gi].rows_mut(o, 5).copy_from_slice(&(-e.core_strain[j]).as_slice());
            for &(p, side) in &op.leaf_ancestors[4 * j] {
                if !op.nodes[p].active() {
                    continue;
                }
                let gp_block = &self.p[p] * op.nodes[p].shares[side];
                let (gp, op_) = self.jump_group[p];
                if gp == gi {
                    diag[gi].view_mut((o, op_), (5, m)).add_assign(&gp_block);
                    diag[gi].view_mut((op_, o), (m, 5)).add_assign(&gp_block.transpose());
                } else {
                    let a = anc_index(gi, gp);
                    off[gi][a].view_mut((o, op_), (5, m)).add_assign(&gp_block);
                }
            }
        }

        // eliminate from the leaves towards the root
        let mut xs: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); ng];
        let mut ys: Vec<DVector<f64>> = vec![DVector::zeros(0); ng];
        let mut condition = 1.0f64;
        for &gi in &self.order {
            let lu = diag[gi].clone().lu();
            let u = lu.u();
            let piv = u.diagonal().map(f64::abs);
            let (lo, hi) = (piv.min(), piv.max());
            if !(lo > 0.0) || !lo.is_finite() || !hi.is_finite() {
                return Err(FdmnError::SingularSystem { group: gi });
            }
            condition = condition.max(hi / lo);
            let offg = std::mem::take(&mut off[gi]);
            let x: Vec<DMatrix<f64>> = offg
                .iter()
                .map(|b| lu.solve(b).ok_or(FdmnError::SingularSystem { group: gi }))
                .collect::<Result<_>>()?;
            let y = lu.solve(&rhs[gi]).ok_or(FdmnError::SingularSystem { group: gi })?;
            let anc = self.groups[gi].ancestors.clone();
            for (i, &ai) in anc.iter().enumerate() {
                let bt = offg[i].transpose();
                diag[ai] -= &bt * &x[i];
                rhs[ai] -= &bt * &y;
                for k in i + 1..anc.len() {
                    off[ai][k - i - 1] -= &bt * &x[k];
                }
            }
            xs[gi] = x;
            ys[gi] = y;
        }
        let mut sol: Vec<DVector<f64>> = vec![DVector::zeros(0); ng];
        for &gi in self.order.iter().rev() {
            let mut s = ys[gi].clone();
            for (i, &a) in self.groups[gi].ancestors.iter().enumerate() {
                s -= &xs[gi][i] * &sol[a];
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(FdmnError::SingularSystem { group: gi });
            }
            sol[gi] = s;
        }
        let mut steps = vec![DVector::zeros(m); op.n_jumps()];
        for (q, step) in steps.iter_mut().enumerate() {
            let (gq, oq) = self.jump_group[q];
            *step = sol[gq].rows(oq, m).into_owned();
        }
        let mut mu = vec![Vec5::zeros(); op.topology.n_clms()];
        for (gi, gr) in self.groups.iter().enumerate() {
            if let Some(j) = gr.core {
                mu[j] = Vec5::from_column_slice(sol[gi].rows(3 * m, 5).as_slice());
            }
        }
        Ok((steps, mu, condition))
    }

    fn lift(&self, p: usize, step: &DVector<f64>) -> Vec3 {
        match self.opts.mode {
            NullspaceMode::Tangent => self.op.nodes[p].tangent * nalgebra::Vector2::new(step[0], step[1]),
            NullspaceMode::Augmented => Vec3::new(step[0], step[1], step[2]),
        }
    }

    fn solve(&self, dbar: &Vec5, b0: Option<&[Vec3]>) -> Result<Solution> {
        let op = self.op;
        let nc = op.topology.n_clms();
        let mut b = match b0 {
            Some(b) => b.to_vec(),
            None => vec![Vec3::zeros(); op.n_jumps()],
        };
        let mut mu = vec![Vec5::zeros(); nc];
        let e0 = self.evaluate(dbar, &vec![Vec3::zeros(); op.n_jumps()], &mu);
        let (_, r0) = self.residuals(&e0);
        let reference = r0.max(e0.stress.norm());
        let dnorm = dbar.norm();
        let mut e = if b0.is_some() { self.evaluate(dbar, &b, &mu) } else { e0 };
        let mut halvings = Vec::new();
        let mut condition = 1.0f64;
        let mut first = true;
        for it in 0..=self.opts.max_iterations {
            let (g, res) = self.residuals(&e);
            let cres = self.constraint_residual(&e);
            let ok_res = res <= self.opts.tolerance * reference || res <= self.opts.absolute_tolerance;
            let ok_con = cres <= self.opts.constraint_tolerance * dnorm || cres <= self.opts.absolute_tolerance;
            if ok_res && ok_con && !(first && b0.is_some() && it == 0 && cres > 0.0) {
                let stress = DevTensor::from_coords(&e.stress);
                return Ok(Solution {
                    stress,
                    state: SolverState {
                        b,
                        multipliers: mu,
                        iterations: it,
                        residual: res,
                        constraint_residual: cres,
                        halvings,
                        condition,
                        potential: e.potential,
                    },
                });
            }
            if it == self.opts.max_iterations {
                return Err(FdmnError::NoConvergence { iterations: it, residual: res / reference.max(f64::MIN_POSITIVE) });
            }
            let (steps, mu_new, cond) = self.newton_system(&e, &g)?;
            condition = condition.max(cond);
            let db: Vec<Vec3> = steps.iter().enumerate().map(|(p, s)| self.lift(p, s)).collect();
            let slope: f64 = g.iter().zip(&steps).map(|(a, s)| a.dot(s)).sum();
            let mut t = 1.0;
            let mut halved = 0;
            // the first step restores the rigid constraints, so the potential is no merit there
            if !first && ok_con && slope < 0.0 && slope.abs() > 1e-12 * e.potential.abs() {
                let phi0 = e.potential;
                loop {
                    let trial: Vec<Vec3> = b.iter().zip(&db).map(|(x, d)| x + d * t).collect();
                    let phi = self.potential(dbar, &trial);
                    if phi <= phi0 + self.opts.armijo * t * slope {
                        break;
                    }
                    if halved == self.opts.max_halvings {
                        return Err(FdmnError::LineSearchFailed { iteration: it, halvings: halved });
                    }
                    t *= 0.5;
                    halved += 1;
                }
            }
            halvings.push(halved);
            for (x, d) in b.iter_mut().zip(&db) {
                *x += d * t;
            }
            mu = mu_new;
            first = false;
            e = self.evaluate(dbar, &b, &mu);
        }
        unreachable!("loop returns")
    }
}

/// Effective stress for the prescribed effective strain rate `d`.
pub fn solve_operator<L: ViscousLaw>(op: &JumpOperator, law: &L, d: &DevTensor, opts: &SolverOptions) -> Result<Solution> {
    let c = d.coords();
    if !c.iter().all(|x| x.is_finite()) {
        return Err(FdmnError::InvalidTensor("strain rate must be finite".into()));
    }
    Solver::new(op, law, *opts).solve(&c, None)
}

pub fn solve<L: ViscousLaw>(
    topology: &Topology,
    params: &NetworkParameters,
    law: &L,
    d: &DevTensor,
    opts: &SolverOptions,
) -> Result<Solution> {
    solve_operator(&assemble_operator(topology, params)?, law, d, opts)
}

/// Solves every load case; cases of one load direction share a warm-start chain if requested.
pub fn solve_battery<L: ViscousLaw>(
    op: &JumpOperator,
    law: &L,
    cases: &[LoadCase],
    opts: &SolverOptions,
) -> Vec<Result<Solution>> {
    let solver = Solver::new(op, law, *opts);
    if !opts.warm_start {
        return cases.par_iter().map(|c| solver.solve(&c.strain_rate().coords(), None)).collect();
    }
    let mut loads: Vec<usize> = cases.iter().map(|c| c.load).collect();
    loads.sort_unstable();
    loads.dedup();
    let chains: Vec<Vec<(usize, Result<Solution>)>> = loads
        .par_iter()
        .map(|&load| {
            let mut idx: Vec<usize> = (0..cases.len()).filter(|&i| cases[i].load == load).collect();
            idx.sort_by(|&a, &b| cases[a].rate.total_cmp(&cases[b].rate));
            let mut prev: Option<Vec<Vec3>> = None;
            idx.into_iter()
                .map(|i| {
                    let r = solver.solve(&cases[i].strain_rate().coords(), prev.as_deref());
                    if let Ok(s) = &r {
                        prev = Some(s.state.b.clone());
                    }
                    (i, r)
                })
                .collect()
        })
        .collect();
    let mut out: Vec<Option<Result<Solution>>> = (0..cases.len()).map(|_| None).collect();
    for (i, r) in chains.into_iter().flatten() {
        out[i] = Some(r);
    }
    out.into_iter().map(|r| r.expect("every case solved")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub load: usize,
    pub rate: f64,
    pub stress: DevTensor,
    pub reference: DevTensor,
    pub error: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
    pub max: f64,
    pub mean: f64,
    pub seconds: f64,
}

/// ‖σ − σ_ref‖ / ‖σ_ref‖.
pub fn online_error(stress: &DevTensor, reference: &DevTensor) -> f64 {
    (stress.mandel() - reference.mandel()).norm() / reference.norm()
}

fn find_reference(reference: &[(LoadCase, DevTensor)], case: &LoadCase) -> Result<DevTensor> {
    reference
        .iter()
        .find(|(c, _)| c.load == case.load && (c.rate - case.rate).abs() <= 1e-12 * case.rate.abs())
        .map(|(_, s)| *s)
        .ok_or(FdmnError::ReferenceMismatch { load: case.load, rate: case.rate })
}

/// Solves the battery of `cases` and compares with the reference stresses.
/// Failed solves are returned as errors listing the first failing case.
pub fn evaluate_battery<L: ViscousLaw>(
    op: &JumpOperator,
    law: &L,
    cases: &[LoadCase],
    reference: &[(LoadCase, DevTensor)],
    opts: &SolverOptions,
) -> Result<ErrorTable> {
    let refs = cases.iter().map(|c| find_reference(reference, c)).collect::<Result<Vec<_>>>()?;
    let t0 = Instant::now();
    let sols = solve_battery(op, law, cases, opts);
    let seconds = t0.elapsed().as_secs_f64();
    let mut rows = Vec::with_capacity(cases.len());
    for ((c, s), r) in cases.iter().zip(sols).zip(refs) {
        let s = s?;
        rows.push(ErrorRow {
            load: c.load,
            rate: c.rate,
            error: online_error(&s.stress, &r),
            stress: s.stress,
            reference: r,
            iterations: s.state.iterations,
        });
    }
    let max = rows.iter().map(|r| r.error).fold(0.0, f64::max);
    let mean = rows.iter().map(|r| r.error).sum::<f64>() / rows.len().max(1) as f64;
    Ok(ErrorTable { rows, max, mean, seconds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layered::Strictness;
    use crate::mandel::{KinematicClass, MaterialTensor};
    use crate::materials::{random_unit_dev, CrossFluid, LinearViscous};
    use crate::network::linear_forward;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_b<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn counts_and_zero_jump() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Topology::new(1, 3).unwrap();
        let p = NetworkParameters::random(&t, &mut rng);
        let op = assemble_operator(&t, &p).unwrap();
        assert_eq!((3 * op.n_jumps(), op.n_leaves()), (9, 4));
        assert!(op.apply(&vec![Vec3::zeros(); 3]).iter().all(|d| d.norm() == 0.0));
        let t8 = Topology::new(8, 3).unwrap();
        let op8 = assemble_operator(&t8, &NetworkParameters::random(&t8, &mut rng)).unwrap();
        assert_eq!((op8.n_jumps(), op8.n_leaves()), (3 * 128 + 127, 512));
    }

    #[test]
    fn dense_matches_apply_and_has_zero_weighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Topology::new(3, 3).unwrap();
        let op = assemble_operator(&t, &NetworkParameters::random(&t, &mut rng)).unwrap();
        let a = op.dense();
        for _ in 0..1000 {
            let b = random_b(&mut rng, op.n_jumps());
            let d = op.apply(&b);
            let flat = DVector::from_iterator(3 * b.len(), b.iter().flat_map(|x| x.iter().copied()));
            let ad = &a * flat;
            let mut mean = Vec5::zeros();
            for (l, dl) in d.iter().enumerate() {
                assert!((ad.rows(5 * l, 5) - dl).norm() < 1e-14);
                mean += dl * op.leaf_weights[l];
            }
            assert!(mean.norm() < 1e-14);
        }
    }

    #[test]
    fn laminate_form_of_columns() {
        // every column is orthogonal to n⊗n
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Topology::new(2, 3).unwrap();
        let op = assemble_operator(&t, &NetworkParameters::random(&t, &mut rng)).unwrap();
        for node in &op.nodes {
            let n = node.normal;
            let b = node.basis * Vec3::new(0.3, -0.2, 0.7);
            let t3 = crate::mandel::from_mandel(&(crate::mandel::dev_basis() * b));
            assert!((n.transpose() * t3 * n)[0].abs() < 1e-14);
        }
    }

    #[test]
    fn zero_strain_gives_zero_stress() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Topology::new(2, 3).unwrap();
        let p = NetworkParameters::random(&t, &mut rng);
        let s = solve(&t, &p, &CrossFluid::polyamide6(), &DevTensor::zero(), &SolverOptions::default()).unwrap();
        assert_eq!(s.stress.norm(), 0.0);
        assert!(s.state.b.iter().all(|b| b.norm() == 0.0));
    }

    fn linear_check(k: usize, seed: u64, mode: NullspaceMode) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Topology::new(k, 3).unwrap();
        let p = NetworkParameters::random(&t, &mut rng);
        let eta = 10f64.powf(rng.gen_range(-1.0..2.0));
        let m = MaterialTensor::isotropic_viscosity(eta);
        let lin = linear_forward(&t, &p, &m, &MaterialTensor::rigid(KinematicClass::Incompressible), Strictness::Strict)
            .unwrap();
        let d = random_unit_dev(&mut rng).scale(rng.gen_range(0.1..10.0));
        let opts = SolverOptions { mode, ..SolverOptions::default() };
        let s = solve(&t, &p, &LinearViscous::from_tensor(&m), &d, &opts).unwrap();
        let expect = lin.dev5() * d.coords();
        let err = (s.stress.coords() - expect).norm() / expect.norm();
        assert!(err < 1e-8, "K={k}: {err}");
        assert!(s.state.iterations <= 2);
        for (q, b) in s.state.b.iter().enumerate() {
            assert!(b.dot(&assemble_operator(&t, &p).unwrap().nodes[q].normal).abs() <= 1e-10 * (1.0 + b.norm()));
        }
    }

    #[test]
    fn linear_consistency() {
        for (k, seed) in [(1, 5), (2, 6), (3, 7), (4, 8)] {
            linear_check(k, seed, NullspaceMode::Tangent);
            linear_check(k, seed, NullspaceMode::Augmented);
        }
    }

    #[test]
    fn homogeneous_medium() {
        let t = Topology::new(1, 3).unwrap();
        let p = NetworkParameters::new(&t, vec![0.0, 1.0, 0.0, 0.0], vec![0.1, 0.2, 0.3]).unwrap();
        let f = CrossFluid::polyamide6();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = random_unit_dev(&mut rng).scale(300.0);
        let s = solve(&t, &p, &f, &d, &SolverOptions::default()).unwrap();
        let expect = crate::materials::cross_stress(&f, &d).stress;
        assert!((s.stress.mandel() - expect.mandel()).norm() <= 1e-12 * expect.norm());
    }

    #[test]
    fn cross_solution_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = Topology::new(3, 3).unwrap();
        let p = NetworkParameters::random(&t, &mut rng);
        let f = CrossFluid::polyamide6();
        let op = assemble_operator(&t, &p).unwrap();
        let d = random_unit_dev(&mut rng).scale(2000.0);
        let a = solve_operator(&op, &f, &d, &SolverOptions::default()).unwrap();
        let aug = SolverOptions { mode: NullspaceMode::Augmented, ..SolverOptions::default() };
        let b = solve_operator(&op, &f, &d, &aug).unwrap();
        let rel = (a.stress.mandel() - b.stress.mandel()).norm() / a.stress.norm();
        assert!(rel < 1e-9, "{rel}");
        for (x, y) in a.state.b.iter().zip(&b.state.b) {
            assert!((x - y).norm() <= 1e-9 * (1.0 + x.norm()));
        }
        // rigid cores do not deform
        let strains = op.apply(&a.state.b);
        for j in 0..t.n_clms() {
            assert!((strains[4 * j] + d.coords()).norm() <= 1e-10 * d.norm());
        }
        // stress is the derivative of the effective potential
        let h = 1e-4 * d.norm();
        for i in 0..5 {
            let mut e = Vec5::zeros();
            e[i] = h;
            let plus = solve_operator(&op, &f, &DevTensor::from_coords(&(d.coords() + e)), &SolverOptions::default()).unwrap();
            let minus = solve_operator(&op, &f, &DevTensor::from_coords(&(d.coords() - e)), &SolverOptions::default()).unwrap();
            let fd = (plus.state.potential - minus.state.potential) / (2.0 * h);
            assert!((fd - a.stress.coords()[i]).abs() <= 1e-6 * a.stress.norm(), "{i}: {fd} vs {}", a.stress.coords()[i]);
        }
    }

    #[test]
    fn monotone_along_battery_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Topology::new(2, 3).unwrap();
        let p = NetworkParameters::random(&t, &mut rng);
        let op = assemble_operator(&t, &p).unwrap();
        let cases = crate::materials::load_battery();
        let sols = solve_battery(&op, &CrossFluid::polyamide6(), &cases, &SolverOptions::default());
        for w in cases.windows(2).zip(sols.windows(2)) {
            let (c, s) = w;
            if c[0].load == c[1].load {
                let (a, b) = (s[0].as_ref().unwrap(), s[1].as_ref().unwrap());
                assert!(b.stress.norm() >= a.stress.norm() * (1.0 - 1e-12));
            }
        }
        let warm = SolverOptions { warm_start: true, ..SolverOptions::default() };
        let sw = solve_battery(&op, &CrossFluid::polyamide6(), &cases, &warm);
        for (a, b) in sols.iter().zip(&sw) {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            assert!((a.stress.mandel() - b.stress.mandel()).norm() <= 1e-8 * a.stress.norm());
        }
    }

    #[test]
    fn battery_error_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = Topology::new(2, 3).unwrap();
        let p = NetworkParameters::random(&t, &mut rng);
        let op = assemble_operator(&t, &p).unwrap();
        let f = CrossFluid::polyamide6();
        let cases: Vec<LoadCase> = crate::materials::load_battery().into_iter().step_by(7).collect();
        let own: Vec<(LoadCase, DevTensor)> = cases
            .iter()
            .map(|c| (*c, solve_operator(&op, &f, &c.strain_rate(), &SolverOptions::default()).unwrap().stress))
            .collect();
        let tab = evaluate_battery(&op, &f, &cases, &own, &SolverOptions::default()).unwrap();
        assert_eq!(tab.max, 0.0);
        let scaled: Vec<(LoadCase, DevTensor)> = own.iter().map(|(c, s)| (*c, s.scale(1.0 / 1.05))).collect();
        let tab = evaluate_battery(&op, &f, &cases, &scaled, &SolverOptions::default()).unwrap();
        assert!((tab.max - 0.05).abs() < 1e-12 && (tab.mean - 0.05).abs() < 1e-12);
        assert!(matches!(
            evaluate_battery(&op, &f, &cases, &own[1..], &SolverOptions::default()),
            Err(FdmnError::ReferenceMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn objectivity(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Topology::new(2, 3).unwrap();
            let p = NetworkParameters::random(&t, &mut rng);
            let op = assemble_operator(&t, &p).unwrap();
            let r = crate::mandel::random_rotation(&mut rng);
            let mut rot = op.clone();
            for n in rot.nodes.iter_mut() {
                n.normal = r * n.normal;
                n.basis = jump_basis(&n.normal);
                n.tangent = tangent_basis(&n.normal);
            }
            let f = CrossFluid::polyamide6();
            let d = random_unit_dev(&mut rng).scale(500.0);
            let q = crate::mandel::mandel_rotation(&r);
            let drot = DevTensor::from_coords(&(crate::mandel::dev_basis().transpose() * (q * d.mandel())));
            let a = solve_operator(&op, &f, &d, &SolverOptions::default()).unwrap();
            let b = solve_operator(&rot, &f, &drot, &SolverOptions::default()).unwrap();
            let expect = q * a.stress.mandel();
            prop_assert!((b.stress.mandel() - expect).norm() <= 1e-9 * a.stress.norm());
        }
    }
}
