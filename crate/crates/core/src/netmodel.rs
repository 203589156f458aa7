//! Per-unit network representation: admittance and weighted admittance
//! matrices, nodal power injections, Kron reduction, the direct
//! feed-through factors of a radial corridor, and the SMIB steady state.
//!
//! Node ordering is fixed throughout: machine nodes, then algebraic
//! nodes, then the infinite bus. Each machine's internal EMF node is tied
//! to its terminal through `x'_d` and carries the shunt `b_Δ = 1/(x_d - x'_d)`,
//! so the unweighted machine diagonal is `-j(b'_d + b_Δ)`.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lineariser::{AvrParams, MachineParams};

const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Machine,
    Algebraic,
    Infinite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    /// Shunt admittance `y_i = r_i - j b_i` in pu.
    pub shunt: Complex64,
}

impl Node {
    pub fn new(id: impl Into<String>, kind: NodeKind) -> Self {
        Self { id: id.into(), kind, shunt: Complex64::new(0.0, 0.0) }
    }

    pub fn with_shunt(mut self, shunt: Complex64) -> Self {
        self.shunt = shunt;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: String,
    pub from: String,
    pub to: String,
    /// Series impedance `z = r + jx` in pu.
    pub z: Complex64,
}

impl Branch {
    pub fn new(id: impl Into<String>, from: impl Into<String>, to: impl Into<String>, z: Complex64) -> Self {
        Self { id: id.into(), from: from.into(), to: to.into(), z }
    }

    pub fn reactance(id: impl Into<String>, from: impl Into<String>, to: impl Into<String>, x: f64) -> Self {
        Self::new(id, from, to, Complex64::new(0.0, x))
    }

    pub fn admittance(&self) -> Complex64 {
        1.0 / self.z
    }
}

/// A machine attached to the network: its internal EMF node and the
/// terminal node it connects to through `x'_d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub node: String,
    pub terminal: String,
    pub params: MachineParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub nodes: Vec<Node>,
    pub branches: Vec<Branch>,
    pub machines: Vec<Machine>,
    /// Infinite-bus voltage magnitude `E_N` (pu); its angle is the reference.
    pub e_n: f64,
    /// Nominal frequency in Hz.
    pub f_nom: f64,
}

impl NetworkModel {
    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn node(&self, id: &str) -> Result<&Node> {
        Ok(&self.nodes[self.index_of(id)?])
    }

    pub fn machine_for(&self, node: &str) -> Option<&Machine> {
        self.machines.iter().find(|m| m.node == node)
    }

    pub fn infinite_node(&self) -> Result<&Node> {
        let inf: Vec<&Node> = self.nodes.iter().filter(|n| n.kind == NodeKind::Infinite).collect();
        match inf.as_slice() {
            [one] => Ok(one),
            other => Err(Error::InfiniteNodeCount(other.len())),
        }
    }

    /// Ids, kinds, references and impedances. Enough for `build_admittance`.
    pub fn validate_structure(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                return Err(Error::DuplicateNode(n.id.clone()));
            }
        }
        for b in &self.branches {
            self.index_of(&b.from)?;
            self.index_of(&b.to)?;
            if b.z.norm() == 0.0 || !b.z.norm().is_finite() {
                return Err(Error::ZeroImpedance(b.id.clone()));
            }
            if b.from == b.to {
                return Err(Error::Topology(format!("branch `{}` is a self-loop", b.id)));
            }
        }
        for m in &self.machines {
            m.params.validate()?;
            let node = self.node(&m.node)?;
            if node.kind != NodeKind::Machine {
                return Err(Error::Topology(format!("machine node `{}` is not of kind machine", m.node)));
            }
            if self.node(&m.terminal)?.kind != NodeKind::Algebraic {
                return Err(Error::Topology(format!("terminal `{}` must be an algebraic node", m.terminal)));
            }
        }
        for n in self.nodes.iter().filter(|n| n.kind == NodeKind::Machine) {
            let count = self.machines.iter().filter(|m| m.node == n.id).count();
            if count != 1 {
                return Err(Error::Topology(format!("machine node `{}` needs exactly one machine record", n.id)));
            }
        }
        if !(self.e_n > 0.0) {
            return Err(Error::InvalidParameter("infinite-bus voltage must be positive".into()));
        }
        if !(self.f_nom > 0.0) {
            return Err(Error::InvalidParameter("nominal frequency must be positive".into()));
        }
        Ok(())
    }

    /// Full validation: structure, one infinite node, connectivity.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        let inf = self.infinite_node()?;
        let adj = self.adjacency();
        let start = self.index_of(&inf.id)?;
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            for &k in &adj[i] {
                if !seen[k] {
                    seen[k] = true;
                    queue.push_back(k);
                }
            }
        }
        let lost: Vec<String> = self
            .nodes
            .iter()
            .zip(&seen)
            .filter(|(_, s)| !**s)
            .map(|(n, _)| n.id.clone())
            .collect();
        if lost.is_empty() {
            Ok(())
        } else {
            Err(Error::NotConnected(lost))
        }
    }

    /// Validation plus the single-machine requirement.
    pub fn validate_smib(&self) -> Result<&Machine> {
        self.validate()?;
        match self.machines.as_slice() {
            [m] => Ok(m),
            other => Err(Error::MachineCount(other.len())),
        }
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (i, k, _) in self.effective_branches() {
            adj[i].push(k);
            adj[k].push(i);
        }
        adj
    }

    /// Series elements as `(from, to, y)` index triples, including the
    /// `x'_d` coupling of every machine.
    pub fn effective_branches(&self) -> Vec<(usize, usize, Complex64)> {
        let mut out = Vec::with_capacity(self.branches.len() + self.machines.len());
        for b in &self.branches {
            if let (Ok(i), Ok(k)) = (self.index_of(&b.from), self.index_of(&b.to)) {
                out.push((i, k, b.admittance()));
            }
        }
        for m in &self.machines {
            if let (Ok(i), Ok(k)) = (self.index_of(&m.node), self.index_of(&m.terminal)) {
                out.push((i, k, Complex64::new(0.0, -m.params.b_d_prime())));
            }
        }
        out
    }

    /// Shunt admittance per node, including `-j b_Δ` at machine nodes.
    pub fn effective_shunts(&self) -> Vec<Complex64> {
        self.nodes
            .iter()
            .map(|n| {
                let extra = self
                    .machine_for(&n.id)
                    .map(|m| Complex64::new(0.0, -m.params.b_delta()))
                    .unwrap_or_default();
                n.shunt + extra
            })
            .collect()
    }

    /// Node indices in matrix order: machines, algebraic, infinite.
    pub fn ordering(&self) -> Vec<usize> {
        let by_kind = |k: NodeKind| {
            self.nodes
                .iter()
                .enumerate()
                .filter(move |(_, n)| n.kind == k)
                .map(|(i, _)| i)
        };
        by_kind(NodeKind::Machine)
            .chain(by_kind(NodeKind::Algebraic))
            .chain(by_kind(NodeKind::Infinite))
            .collect()
    }

    pub fn without_branch(&self, id: &str) -> Result<Self> {
        let mut out = self.clone();
        let before = out.branches.len();
        out.branches.retain(|b| b.id != id);
        if out.branches.len() == before {
            return Err(Error::Topology(format!("no branch `{id}`")));
        }
        Ok(out)
    }

    pub fn with_added_shunt(&self, node: &str, y: Complex64) -> Result<Self> {
        let mut out = self.clone();
        let i = out.index_of(node)?;
        out.nodes[i].shunt += y;
        Ok(out)
    }
}

/// Dense `Y` in matrix order.
#[derive(Clone, Debug)]
pub struct AdmittanceMatrix {
    pub y: DMatrix<Complex64>,
    pub ids: Vec<String>,
    pub kinds: Vec<NodeKind>,
}

impl AdmittanceMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// Retained nodes for Kron reduction: machines and the infinite bus.
    pub fn dynamic_indices(&self) -> Vec<usize> {
        indices_where(&self.kinds, |k| k != NodeKind::Algebraic)
    }

    pub fn machine_indices(&self) -> Vec<usize> {
        indices_where(&self.kinds, |k| k == NodeKind::Machine)
    }

    pub fn algebraic_indices(&self) -> Vec<usize> {
        indices_where(&self.kinds, |k| k == NodeKind::Algebraic)
    }
}

fn indices_where(kinds: &[NodeKind], f: impl Fn(NodeKind) -> bool) -> Vec<usize> {
    kinds.iter().enumerate().filter(|(_, k)| f(**k)).map(|(i, _)| i).collect()
}

pub fn build_admittance(net: &NetworkModel) -> Result<AdmittanceMatrix> {
    net.validate_structure()?;
    let order = net.ordering();
    let mut pos = vec![0usize; net.nodes.len()];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    let n = order.len();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for (i, k, yik) in net.effective_branches() {
        let (pi, pk) = (pos[i], pos[k]);
        y[(pi, pk)] -= yik;
        y[(pk, pi)] -= yik;
        y[(pi, pi)] += yik;
        y[(pk, pk)] += yik;
    }
    for (i, ysh) in net.effective_shunts().into_iter().enumerate() {
        y[(pos[i], pos[i])] += ysh;
    }
    Ok(AdmittanceMatrix {
        y,
        ids: order.iter().map(|&i| net.nodes[i].id.clone()).collect(),
        kinds: order.iter().map(|&i| net.nodes[i].kind).collect(),
    })
}

/// `𝒴` evaluated at a voltage profile (amplitudes and angles in matrix order).
#[derive(Clone, Debug)]
pub struct WeightedAdmittance {
    pub w: DMatrix<Complex64>,
    pub ids: Vec<String>,
    pub kinds: Vec<NodeKind>,
    pub magnitudes: Vec<f64>,
    pub angles: Vec<f64>,
}

impl WeightedAdmittance {
    /// `S = 𝒴 1`.
    pub fn row_sums(&self) -> Vec<Complex64> {
        self.w.row_iter().map(|r| r.iter().sum()).collect()
    }

    pub fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<Complex64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, k| self.w[(rows[i], cols[k])])
    }

    pub fn dynamic_indices(&self) -> Vec<usize> {
        indices_where(&self.kinds, |k| k != NodeKind::Algebraic)
    }

    pub fn algebraic_indices(&self) -> Vec<usize> {
        indices_where(&self.kinds, |k| k == NodeKind::Algebraic)
    }

    /// The four partition blocks `(𝒴_δδ, 𝒴_δθ, 𝒴_θδ, 𝒴_θθ)`, with the
    /// infinite bus counted among the retained (δ) nodes.
    #[allow(clippy::type_complexity)]
    pub fn partition(
        &self,
    ) -> (DMatrix<Complex64>, DMatrix<Complex64>, DMatrix<Complex64>, DMatrix<Complex64>) {
        let d = self.dynamic_indices();
        let a = self.algebraic_indices();
        (self.block(&d, &d), self.block(&d, &a), self.block(&a, &d), self.block(&a, &a))
    }
}

pub fn weight_admittance(y: &AdmittanceMatrix, magnitudes: &[f64], angles: &[f64]) -> Result<WeightedAdmittance> {
    let n = y.len();
    for len in [magnitudes.len(), angles.len()] {
        if len != n {
            return Err(Error::LengthMismatch { expected: n, got: len });
        }
    }
    if let Some(i) = magnitudes.iter().position(|&u| !(u > 0.0)) {
        return Err(Error::NonPositiveVoltage(y.ids[i].clone()));
    }
    let w = DMatrix::from_fn(n, n, |i, k| {
        y.y[(i, k)].conj() * magnitudes[i] * magnitudes[k] * Complex64::from_polar(1.0, angles[i] - angles[k])
    });
    Ok(WeightedAdmittance {
        w,
        ids: y.ids.clone(),
        kinds: y.kinds.clone(),
        magnitudes: magnitudes.to_vec(),
        angles: angles.to_vec(),
    })
}

/// Per-node `P_i + jQ_i` from the explicit sine/cosine sums over branch
/// conductances and susceptances. Voltages and output are in matrix order.
pub fn injected_power(net: &NetworkModel, magnitudes: &[f64], angles: &[f64]) -> Result<Vec<Complex64>> {
    net.validate_structure()?;
    let order = net.ordering();
    let n = order.len();
    for len in [magnitudes.len(), angles.len()] {
        if len != n {
            return Err(Error::LengthMismatch { expected: n, got: len });
        }
    }
    let mut pos = vec![0usize; n];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    // y_ik per unordered pair, parallel elements summed
    let mut pair: BTreeMap<(usize, usize), Complex64> = BTreeMap::new();
    for (i, k, yik) in net.effective_branches() {
        let (a, b) = (pos[i].min(pos[k]), pos[i].max(pos[k]));
        *pair.entry((a, b)).or_default() += yik;
    }
    let mut y_ii = vec![Complex64::new(0.0, 0.0); n];
    for (i, ysh) in net.effective_shunts().into_iter().enumerate() {
        y_ii[pos[i]] += ysh;
    }
    let mut neighbours: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); n];
    for (&(a, b), &yab) in &pair {
        y_ii[a] += yab;
        y_ii[b] += yab;
        neighbours[a].push((b, yab));
        neighbours[b].push((a, yab));
    }
    let out = (0..n)
        .map(|i| {
            let (g_ii, b_ii) = (y_ii[i].re, -y_ii[i].im);
            let ui = magnitudes[i];
            let mut p = g_ii * ui * ui;
            let mut q = b_ii * ui * ui;
            for &(k, yik) in &neighbours[i] {
                let (g, b) = (yik.re, -yik.im);
                let dphi = angles[i] - angles[k];
                let uu = ui * magnitudes[k];
                p += uu * (b * dphi.sin() - g * dphi.cos());
                q -= uu * (b * dphi.cos() + g * dphi.sin());
            }
            Complex64::new(p, q)
        })
        .collect();
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct KronReduction {
    pub y_red: DMatrix<Complex64>,
    /// `diag(𝒴_red 1)`.
    pub y_shunt: DMatrix<Complex64>,
    /// `𝒴_red - 𝒴_♯`, zero row sums.
    pub y_a: DMatrix<Complex64>,
    pub retained: Vec<String>,
    /// `-𝒴_θθ^{-1}`, reused by the linearisation.
    pub y_d: DMatrix<Complex64>,
}

pub fn kron_reduce(w: &WeightedAdmittance) -> Result<KronReduction> {
    let d = w.dynamic_indices();
    let a = w.algebraic_indices();
    let (wdd, wda, wad, waa) = w.partition();
    let inv = if a.is_empty() {
        Some(DMatrix::zeros(0, 0))
    } else {
        let lu = waa.clone().lu();
        let scale = waa.iter().fold(0.0f64, |m, z| m.max(z.norm()));
        let pivot_min = (0..a.len()).fold(f64::INFINITY, |m, i| m.min(lu.u()[(i, i)].norm()));
        if pivot_min <= 1e-13 * scale {
            None
        } else {
            lu.try_inverse()
        }
    };
    let Some(inv) = inv else {
        return Err(Error::SingularAlgebraicBlock(islanded_algebraic(w, &d, &a)));
    };
    let y_d = -inv;
    let y_red = &wdd + &wda * &y_d * &wad;
    let sums: Vec<Complex64> = y_red.row_iter().map(|r| r.iter().sum()).collect();
    let y_shunt = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sums));
    let y_a = &y_red - &y_shunt;
    Ok(KronReduction {
        y_red,
        y_shunt,
        y_a,
        retained: d.iter().map(|&i| w.ids[i].clone()).collect(),
        y_d,
    })
}

fn islanded_algebraic(w: &WeightedAdmittance, d: &[usize], a: &[usize]) -> Vec<String> {
    let n = w.ids.len();
    let mut seen = vec![false; n];
    let mut queue: VecDeque<usize> = d.iter().copied().collect();
    for &i in d {
        seen[i] = true;
    }
    while let Some(i) = queue.pop_front() {
        for k in 0..n {
            if !seen[k] && k != i && w.w[(i, k)].norm() > 0.0 {
                seen[k] = true;
                queue.push_back(k);
            }
        }
    }
    let lost: Vec<String> = a.iter().filter(|&&i| !seen[i]).map(|&i| w.ids[i].clone()).collect();
    if lost.is_empty() {
        a.iter().map(|&i| w.ids[i].clone()).collect()
    } else {
        lost
    }
}

// ---------------------------------------------------------------------------
// Operating point
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineState {
    pub id: String,
    pub delta: f64,
    pub e_q: f64,
    pub e_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeVoltage {
    pub id: String,
    pub v: f64,
    pub theta: f64,
}

/// Steady state of the machine(s) and the network. Machine and node
/// entries follow the matrix order of `build_admittance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub machines: Vec<MachineState>,
    pub nodes: Vec<NodeVoltage>,
    pub e_n: f64,
    /// Active power exported by the (first) machine.
    pub p_e: f64,
    /// Reactive power exported by the (first) machine, excluding the `b_Δ` shunt.
    pub q_e: f64,
    pub k_a: f64,
    pub v_ref: Option<f64>,
}

impl OperatingPoint {
    pub fn delta(&self) -> f64 {
        self.machines[0].delta
    }

    pub fn e_q(&self) -> f64 {
        self.machines[0].e_q
    }

    pub fn e_f(&self) -> f64 {
        self.machines[0].e_f
    }

    pub fn node(&self, id: &str) -> Result<&NodeVoltage> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// `ε_i = δ - θ_i` against the first machine.
    pub fn load_angle(&self, id: &str) -> Result<f64> {
        Ok(self.delta() - self.node(id)?.theta)
    }

    /// Amplitudes and angles in the matrix order of `y`.
    pub fn profile(&self, y: &AdmittanceMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut mags = Vec::with_capacity(y.len());
        let mut angs = Vec::with_capacity(y.len());
        for (id, kind) in y.ids.iter().zip(&y.kinds) {
            let (u, phi) = match kind {
                NodeKind::Machine => {
                    let m = self
                        .machines
                        .iter()
                        .find(|m| &m.id == id)
                        .ok_or_else(|| Error::UnknownNode(id.clone()))?;
                    (m.e_q, m.delta)
                }
                NodeKind::Algebraic => {
                    let n = self.node(id)?;
                    (n.v, n.theta)
                }
                NodeKind::Infinite => (self.e_n, 0.0),
            };
            mags.push(u);
            angs.push(phi);
        }
        Ok((mags, angs))
    }

    /// Builds the operating point implied by given machine internal voltages
    /// with zero injections at the algebraic nodes: the network is linear, so
    /// node voltages follow from one complex solve. Field voltages close the
    /// flux equation; `v_ref` closes the AVR equation when `K_A > 0`.
    pub fn from_machine_states(net: &NetworkModel, states: &[(f64, f64)], avr: Option<&AvrParams>) -> Result<Self> {
        net.validate()?;
        if states.len() != net.machines.len() {
            return Err(Error::LengthMismatch { expected: net.machines.len(), got: states.len() });
        }
        let y = build_admittance(net)?;
        let d = y.dynamic_indices();
        let a = y.algebraic_indices();
        let mut volt = vec![Complex64::new(0.0, 0.0); y.len()];
        for &p in &y.machine_indices() {
            let k = net.machines.iter().position(|m| m.node == y.ids[p]).expect("validated");
            let (delta, e_q) = states[k];
            volt[p] = Complex64::from_polar(e_q, delta);
        }
        for &p in &d {
            if y.kinds[p] == NodeKind::Infinite {
                volt[p] = Complex64::new(net.e_n, 0.0);
            }
        }
        let yaa = DMatrix::from_fn(a.len(), a.len(), |i, k| y.y[(a[i], a[k])]);
        let yad = DMatrix::from_fn(a.len(), d.len(), |i, k| y.y[(a[i], d[k])]);
        let vd = DMatrix::from_fn(d.len(), 1, |i, _| volt[d[i]]);
        let rhs = -(yad * vd);
        let va = yaa
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularAlgebraicBlock(a.iter().map(|&i| y.ids[i].clone()).collect()))?;
        for (i, &p) in a.iter().enumerate() {
            volt[p] = va[(i, 0)];
        }
        let s = nodal_power(&y.y, &volt);
        let mut machines = Vec::new();
        for m in &net.machines {
            let p = y.position(&m.node)?;
            let e_q = volt[p].norm();
            let e_f = s[p].im / (e_q * m.params.b_delta());
            machines.push(MachineState { id: m.node.clone(), delta: volt[p].arg(), e_q, e_f });
        }
        let nodes = a
            .iter()
            .map(|&p| NodeVoltage { id: y.ids[p].clone(), v: volt[p].norm(), theta: volt[p].arg() })
            .collect::<Vec<_>>();
        let first = &net.machines[0];
        let p0 = y.position(&first.node)?;
        let e0 = volt[p0].norm();
        let mut op = OperatingPoint {
            machines,
            nodes,
            e_n: net.e_n,
            p_e: s[p0].re,
            q_e: s[p0].im - first.params.b_delta() * e0 * e0,
            k_a: 0.0,
            v_ref: None,
        };
        if let Some(avr) = avr {
            op.k_a = avr.k_a;
            if avr.k_a > 0.0 {
                let v = op.node(&avr.node)?.v;
                op.v_ref = Some(v + op.e_f() / avr.k_a);
            }
        }
        Ok(op)
    }
}

/// `S = V ∘ conj(Y V)`.
pub fn nodal_power(y: &DMatrix<Complex64>, volt: &[Complex64]) -> Vec<Complex64> {
    let n = volt.len();
    (0..n)
        .map(|i| {
            let current: Complex64 = (0..n).map(|k| y[(i, k)] * volt[k]).sum();
            volt[i] * current.conj()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Radial corridor (SMIB chain)
// ---------------------------------------------------------------------------

/// Electrical positions along a lossless radial corridor from the machine
/// internal node to the infinite bus.
#[derive(Clone, Debug)]
pub struct SmibChain {
    /// Series reactance from the machine internal node to each algebraic node.
    pub x_from_machine: HashMap<String, f64>,
    pub x_total: f64,
    pub machine: String,
    pub infinite: String,
}

impl SmibChain {
    pub fn from_network(net: &NetworkModel) -> Result<Self> {
        let machine = net.validate_smib()?;
        for b in &net.branches {
            if b.z.re != 0.0 {
                return Err(Error::LossyCorridor(b.id.clone()));
            }
            if !(b.z.im > 0.0) {
                return Err(Error::Topology(format!("branch `{}` must be inductive for the corridor model", b.id)));
            }
        }
        for n in &net.nodes {
            if n.kind == NodeKind::Algebraic && n.shunt.norm() != 0.0 {
                return Err(Error::CorridorShunt(n.id.clone()));
            }
        }
        // merged susceptance between adjacent nodes
        let mut pair: HashMap<(String, String), f64> = HashMap::new();
        for b in &net.branches {
            let key = if b.from < b.to { (b.from.clone(), b.to.clone()) } else { (b.to.clone(), b.from.clone()) };
            *pair.entry(key).or_default() += 1.0 / b.z.im;
        }
        let mut adj: HashMap<&str, Vec<(&str, f64)>> = HashMap::new();
        for ((a, b), s) in &pair {
            adj.entry(a.as_str()).or_default().push((b.as_str(), 1.0 / s));
            adj.entry(b.as_str()).or_default().push((a.as_str(), 1.0 / s));
        }
        let inf = net.infinite_node()?.id.clone();
        let algebraic = net.nodes.iter().filter(|n| n.kind == NodeKind::Algebraic).count();
        let mut x_from_machine = HashMap::new();
        let mut prev: Option<&str> = None;
        let mut cur = machine.terminal.as_str();
        let mut x = machine.params.x_d_prime;
        loop {
            x_from_machine.insert(cur.to_string(), x);
            if cur == inf {
                break;
            }
            let next: Vec<&(&str, f64)> = adj
                .get(cur)
                .map(|v| v.iter().filter(|(k, _)| Some(*k) != prev).collect())
                .unwrap_or_default();
            match next.as_slice() {
                [(k, dx)] => {
                    if x_from_machine.contains_key(*k) {
                        return Err(Error::Topology("corridor contains a loop".into()));
                    }
                    prev = Some(cur);
                    cur = k;
                    x += dx;
                }
                [] => return Err(Error::Topology(format!("corridor ends at `{cur}` before the infinite bus"))),
                _ => return Err(Error::Topology(format!("node `{cur}` branches; a radial corridor is required"))),
            }
        }
        let x_total = x_from_machine.remove(&inf).expect("inserted above");
        if x_from_machine.len() != algebraic {
            return Err(Error::Topology("some algebraic nodes are off the machine-to-infinite-bus corridor".into()));
        }
        Ok(Self { x_from_machine, x_total, machine: machine.node.clone(), infinite: inf })
    }

    /// Series reactance from the machine internal node.
    pub fn x_of(&self, id: &str) -> Result<f64> {
        self.x_from_machine.get(id).copied().ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn b_sigma(&self) -> f64 {
        1.0 / self.x_total
    }

    /// `b'_1i`: series susceptance from the machine internal node.
    pub fn b_from_machine(&self, id: &str) -> Result<f64> {
        Ok(1.0 / self.x_of(id)?)
    }

    /// `b_iN`: series susceptance to the infinite bus.
    pub fn b_to_infinite(&self, id: &str) -> Result<f64> {
        Ok(1.0 / (self.x_total - self.x_of(id)?))
    }

    /// `β_i = b'_1i / (b'_1i + b_iN)`.
    pub fn beta(&self, id: &str) -> Result<f64> {
        Ok((self.x_total - self.x_of(id)?) / self.x_total)
    }

    /// Whether `i` is at least as close to the machine as `k`.
    pub fn is_closer(&self, i: &str, k: &str) -> Result<bool> {
        Ok(self.x_of(i)? <= self.x_of(k)?)
    }

    /// `b̸_ik = b'_1i + b'_1i b_kN / b_ik + b_kN` for `i` closer than `k`;
    /// for coinciding nodes the `b_ik → ∞` limit `b'_1i + b_iN`.
    pub fn b_slash(&self, i: &str, k: &str) -> Result<f64> {
        let (xi, xk) = (self.x_of(i)?, self.x_of(k)?);
        let (near, far) = if xi <= xk { (xi, xk) } else { (xk, xi) };
        let b1i = 1.0 / near;
        let bkn = 1.0 / (self.x_total - far);
        let between = far - near;
        if between <= 1e-12 * self.x_total {
            Ok(b1i + 1.0 / (self.x_total - near))
        } else {
            Ok(b1i + b1i * bkn * between + bkn)
        }
    }
}

/// Closed-form direct feed-through block of a node pair on the corridor.
#[derive(Clone, Debug)]
pub struct FeedthroughPair {
    /// `-𝒴_θθ^{-1}` restricted to `(i, k)`.
    pub y_d: [[Complex64; 2]; 2],
    pub b_slash: f64,
    /// `ε_ik = θ_i - θ_k`.
    pub eps_ik: f64,
}

pub fn direct_feedthrough_pair(net: &NetworkModel, op: &OperatingPoint, i: &str, k: &str) -> Result<FeedthroughPair> {
    let chain = SmibChain::from_network(net)?;
    if !chain.is_closer(i, k)? {
        return Err(Error::Ordering { closer: i.to_string(), farther: k.to_string() });
    }
    let (ni, nk) = (op.node(i)?, op.node(k)?);
    let eps = ni.theta - nk.theta;
    let bs = chain.b_slash(i, k)?;
    let (vi, vk) = (ni.v, nk.v);
    // the corridor impedance matrix is Z_ik = j / b̸_ik, so the weighted
    // inverse is diagonal-scaled by the node phasors
    let (bii, bkk) = (chain.b_slash(i, i)?, chain.b_slash(k, k)?);
    let off = J * Complex64::from_polar(1.0, eps) / (vi * vk * bs);
    let y_d = [[J / (vi * vi * bii), off], [J * Complex64::from_polar(1.0, -eps) / (vi * vk * bs), J / (vk * vk * bkk)]];
    Ok(FeedthroughPair { y_d, b_slash: bs, eps_ik: eps })
}

// ---------------------------------------------------------------------------
// Steady-state solver
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSpec {
    /// AVR setpoint; requires `K_A > 0`.
    Vref(f64),
    /// Constant field voltage.
    FieldVoltage(f64),
    /// Voltage magnitude at the AVR measurement node.
    TerminalVoltage(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub p_e: f64,
    pub field: FieldSpec,
}

const NEWTON_MAX_ITER: usize = 50;
const NEWTON_TOL: f64 = 1e-12;

struct SmibEquations<'a> {
    y: AdmittanceMatrix,
    machine_pos: usize,
    infinite_pos: usize,
    alg: Vec<usize>,
    avr_pos: usize,
    params: &'a MachineParams,
    e_n: f64,
}

impl SmibEquations<'_> {
    // unknowns: [delta, e_q, e_f, theta_a.., v_a..]
    fn voltages(&self, x: &[f64]) -> Vec<Complex64> {
        let na = self.alg.len();
        let mut volt = vec![Complex64::new(0.0, 0.0); self.y.len()];
        volt[self.machine_pos] = Complex64::from_polar(x[1], x[0]);
        volt[self.infinite_pos] = Complex64::new(self.e_n, 0.0);
        for (i, &p) in self.alg.iter().enumerate() {
            volt[p] = Complex64::from_polar(x[3 + na + i], x[3 + i]);
        }
        volt
    }

    /// Network balance and flux equilibrium; the caller appends the
    /// dispatch and field equations.
    fn core_residual(&self, x: &[f64]) -> (Vec<f64>, Vec<Complex64>, Vec<Complex64>) {
        let volt = self.voltages(x);
        let s = nodal_power(&self.y.y, &volt);
        let sm = s[self.machine_pos];
        let mut r = Vec::with_capacity(2 + 2 * self.alg.len());
        r.push(-sm.im / x[1] + self.params.b_delta() * x[2]);
        for &p in &self.alg {
            r.push(s[p].re);
        }
        for &p in &self.alg {
            r.push(s[p].im);
        }
        (r, s, volt)
    }
}

fn fd_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> DMatrix<f64> {
    let f0 = f(x);
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let h = 1e-7 * x[k].abs().max(1.0);
        let orig = xp[k];
        xp[k] = orig + h;
        let fp = f(&xp);
        xp[k] = orig - h;
        let fm = f(&xp);
        xp[k] = orig;
        for i in 0..f0.len() {
            jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Damped Newton with step halving on residual increase.
fn damped_newton(f: &dyn Fn(&[f64]) -> Vec<f64>, x0: Vec<f64>) -> Result<Vec<f64>> {
    let mut x = x0;
    let mut r = f(&x);
    let mut norm = inf_norm(&r);
    for _ in 0..NEWTON_MAX_ITER {
        if norm <= NEWTON_TOL {
            return Ok(x);
        }
        let jac = fd_jacobian(f, &x);
        let rhs = nalgebra::DVector::from_vec(r.iter().map(|v| -v).collect());
        let Some(dx) = jac.lu().solve(&rhs) else {
            return Err(Error::NonConvergence { iterations: 0, residual: norm });
        };
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, b)| a + step * b).collect();
            let rt = f(&trial);
            let nt = inf_norm(&rt);
            if nt.is_finite() && nt < norm {
                x = trial;
                r = rt;
                norm = nt;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if norm <= NEWTON_TOL * 100.0 {
        return Ok(x);
    }
    Err(Error::NonConvergence { iterations: NEWTON_MAX_ITER, residual: norm })
}

/// SMIB equilibrium for a dispatch: damped Newton on the stacked machine
/// equilibrium and nodal balance equations from a flat start.
pub fn solve_smib_steady_state(net: &NetworkModel, dispatch: &Dispatch, avr: &AvrParams) -> Result<OperatingPoint> {
    let machine = net.validate_smib()?;
    if let FieldSpec::Vref(_) = dispatch.field {
        if !(avr.k_a > 0.0) {
            return Err(Error::InvalidParameter("a voltage setpoint needs K_A > 0".into()));
        }
    }
    let y = build_admittance(net)?;
    let eqs = SmibEquations {
        machine_pos: y.position(&machine.node)?,
        infinite_pos: y.position(&net.infinite_node()?.id)?,
        alg: y.algebraic_indices(),
        avr_pos: y.position(&avr.node)?,
        params: &machine.params,
        e_n: net.e_n,
        y,
    };
    let na = eqs.alg.len();
    let avr_alg = eqs
        .alg
        .iter()
        .position(|&p| p == eqs.avr_pos)
        .ok_or_else(|| Error::Topology(format!("AVR node `{}` must be algebraic", avr.node)))?;
    let field_residual = |x: &[f64]| -> f64 {
        let v_meas = x[3 + na + avr_alg];
        match dispatch.field {
            FieldSpec::FieldVoltage(ef) => x[2] - ef,
            FieldSpec::Vref(vr) => x[2] - avr.k_a * (vr - v_meas),
            FieldSpec::TerminalVoltage(vt) => v_meas - vt,
        }
    };
    let full = |x: &[f64]| -> Vec<f64> {
        let (core, s, _) = eqs.core_residual(x);
        let mut r = vec![s[eqs.machine_pos].re - dispatch.p_e, field_residual(x)];
        r.extend(core);
        r
    };
    let mut x0 = vec![0.0, 1.0, 1.0];
    x0.extend(std::iter::repeat_n(0.0, na));
    x0.extend(std::iter::repeat_n(1.0, na));
    let solved = damped_newton(&full, x0.clone());
    let x = match solved {
        Ok(x) if x[0].cos() > 0.0 && x[1] > 0.0 => x,
        other => {
            // classify: is the request beyond the transfer limit?
            let limit = static_transfer_limit(&eqs, &field_residual, x0, dispatch.p_e.signum())?;
            if dispatch.p_e.abs() >= limit {
                return Err(Error::BeyondStaticLimit { requested: dispatch.p_e, limit });
            }
            match other {
                Ok(_) => return Err(Error::NonConvergence { iterations: NEWTON_MAX_ITER, residual: f64::NAN }),
                Err(e) => return Err(e),
            }
        }
    };
    let volt = eqs.voltages(&x);
    let s = nodal_power(&eqs.y.y, &volt);
    let e_q = x[1];
    let op = OperatingPoint {
        machines: vec![MachineState { id: machine.node.clone(), delta: x[0], e_q, e_f: x[2] }],
        nodes: eqs
            .alg
            .iter()
            .enumerate()
            .map(|(i, &p)| NodeVoltage { id: eqs.y.ids[p].clone(), v: x[3 + na + i], theta: x[3 + i] })
            .collect(),
        e_n: net.e_n,
        p_e: s[eqs.machine_pos].re,
        q_e: s[eqs.machine_pos].im - machine.params.b_delta() * e_q * e_q,
        k_a: avr.k_a,
        v_ref: (avr.k_a > 0.0).then(|| x[3 + na + avr_alg] + x[2] / avr.k_a),
    };
    Ok(op)
}

/// Largest `|P_e|` reachable on the equilibrium manifold, scanning the
/// rotor angle with the remaining equations solved at each angle.
fn static_transfer_limit(
    eqs: &SmibEquations,
    field_residual: &dyn Fn(&[f64]) -> f64,
    x0: Vec<f64>,
    sign: f64,
) -> Result<f64> {
    let sign = if sign == 0.0 { 1.0 } else { sign };
    let mut best = 0.0f64;
    let mut guess = x0[1..].to_vec();
    for step in 1..=180 {
        let delta = sign * std::f64::consts::PI * step as f64 / 180.0;
        let reduced = |z: &[f64]| -> Vec<f64> {
            let mut x = vec![delta];
            x.extend_from_slice(z);
            let (core, _, _) = eqs.core_residual(&x);
            let mut r = vec![field_residual(&x)];
            r.extend(core);
            r
        };
        let Ok(z) = damped_newton(&reduced, guess.clone()) else {
            continue;
        };
        let mut x = vec![delta];
        x.extend_from_slice(&z);
        let (_, s, _) = eqs.core_residual(&x);
        best = best.max(s[eqs.machine_pos].re.abs());
        guess = z;
    }
    Ok(best)
}

/// Residual of the equilibrium equations at an operating point: nodal
/// balance at algebraic nodes, flux equilibrium, and the AVR law when
/// `K_A > 0`.
pub fn equilibrium_residual(net: &NetworkModel, op: &OperatingPoint, avr: Option<&AvrParams>) -> Result<f64> {
    let y = build_admittance(net)?;
    let (mags, angs) = op.profile(&y)?;
    let volt: Vec<Complex64> = mags.iter().zip(&angs).map(|(&u, &a)| Complex64::from_polar(u, a)).collect();
    let s = nodal_power(&y.y, &volt);
    let mut worst = 0.0f64;
    for p in y.algebraic_indices() {
        worst = worst.max(s[p].norm());
    }
    for (m, st) in net.machines.iter().zip(&op.machines) {
        let p = y.position(&m.node)?;
        worst = worst.max((-s[p].im / st.e_q + m.params.b_delta() * st.e_f).abs());
    }
    if let (Some(avr), Some(vr)) = (avr, op.v_ref) {
        if avr.k_a > 0.0 {
            let v = op.node(&avr.node)?.v;
            worst = worst.max((op.e_f() - avr.k_a * (vr - v)).abs());
        }
    }
    Ok(worst)
}

#[derive(Serialize)]
pub struct ComplexMatrixJson {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `[re, im]` pairs.
    pub data: Vec<Vec<[f64; 2]>>,
}

impl From<&DMatrix<Complex64>> for ComplexMatrixJson {
    fn from(m: &DMatrix<Complex64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.row_iter().map(|r| r.iter().map(|z| [z.re, z.im]).collect()).collect(),
        }
    }
}
