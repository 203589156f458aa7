//! Nonlinear one-axis SMIB simulation with fault and line-trip events,
//! optional POD feedback, synchrony-loss detection and ringdown damping.
//!
//! State layout: `[δ, ω, E'_q, E_f, x_pod..]`. With `T_e = 0` the field
//! voltage is algebraic and its slot carries the current value with a zero
//! derivative; with `K_A = 0` it is held constant.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lineariser::AvrParams;
use crate::linalg::inverse_complex;
use crate::netmodel::{build_admittance, solve_smib_steady_state, Dispatch, FieldSpec, NetworkModel, NodeKind, OperatingPoint};
use crate::podctl::PodController;

/// Fault shunt admittance (pu).
pub const FAULT_ADMITTANCE: Complex64 = Complex64 { re: 0.0, im: -1e4 };
/// Below this voltage the POD actuator behaves as a constant impedance.
pub const ACTUATOR_VMIN: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Fault { node: String },
    ClearFault { node: String },
    Trip { branch: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Rectangular input pulse on a linear-model input label
/// (`P[id]`, `Q[id]`, `Pm[G]`, `Ef[G]`, `upss[G]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub input: String,
    pub amplitude: f64,
    pub start: f64,
    pub duration: f64,
}

/// POD feedback `u = -K(s) y` from output label `y` to injection label `u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PodLoop {
    pub controller: PodController,
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub network: NetworkModel,
    pub avr: AvrParams,
    pub dispatch: Dispatch,
    pub pod: Option<PodLoop>,
    pub events: Vec<Event>,
    pub pulses: Vec<Pulse>,
    pub horizon: f64,
    pub step: f64,
    /// Optional symmetric field-voltage ceiling.
    pub e_f_max: Option<f64>,
    /// Holds `E'_q` constant (classical model).
    pub freeze_flux: bool,
    /// Ends the run at the first loss of synchrony.
    pub stop_on_loss: bool,
}

impl Scenario {
    pub fn new(network: NetworkModel, avr: AvrParams, dispatch: Dispatch) -> Self {
        Self {
            network,
            avr,
            dispatch,
            pod: None,
            events: Vec::new(),
            pulses: Vec::new(),
            horizon: 10.0,
            step: 1e-3,
            e_f_max: None,
            freeze_flux: false,
            stop_on_loss: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.network.machines.len() != 1 {
            return Err(Error::MachineCount(self.network.machines.len()));
        }
        self.network.machines[0].params.validate()?;
        self.avr.validate()?;
        if !(self.horizon > 0.0) || !(self.step > 0.0) || self.step > self.horizon {
            return Err(Error::InvalidParameter("need 0 < step <= horizon".into()));
        }
        if self.events.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(Error::InvalidParameter("events must be time-ordered".into()));
        }
        if self.events.iter().any(|e| !(e.time >= 0.0)) {
            return Err(Error::InvalidParameter("event times must be non-negative".into()));
        }
        for p in &self.pulses {
            if !(p.duration > 0.0) || !(p.start >= 0.0) {
                return Err(Error::InvalidParameter(format!("pulse on `{}` needs start >= 0 and duration > 0", p.input)));
            }
        }
        if let Some(p) = &self.pod {
            p.controller.validate()?;
        }
        Ok(())
    }

    /// Network after every event has been applied.
    pub fn final_network(&self) -> Result<NetworkModel> {
        let mut net = self.network.clone();
        for e in &self.events {
            net = apply_event(&net, &e.kind)?;
        }
        Ok(net)
    }
}

fn apply_event(net: &NetworkModel, kind: &EventKind) -> Result<NetworkModel> {
    match kind {
        EventKind::Fault { node } => net.with_added_shunt(node, FAULT_ADMITTANCE),
        EventKind::ClearFault { node } => net.with_added_shunt(node, -FAULT_ADMITTANCE),
        EventKind::Trip { branch } => net.without_branch(branch),
    }
}

/// Algebraic network of one topology phase, pre-factored around the
/// machine and infinite-bus sources.
#[derive(Clone, Debug)]
pub struct NetworkSolver {
    ids: Vec<String>,
    y_m: Vec<Complex64>,
    y_mm: Complex64,
    y_mi: Complex64,
    /// `V_a = g E e^{jδ} + h + Z_aa I_a`.
    g: Vec<Complex64>,
    h: Vec<Complex64>,
    z: DMatrix<Complex64>,
    e_n: f64,
}

/// Network quantities for one machine state.
#[derive(Clone, Debug)]
pub struct NetworkSolution {
    pub v: Vec<Complex64>,
    /// Complex power leaving the machine internal node, shunt included.
    pub s_machine: Complex64,
}

impl NetworkSolver {
    pub fn new(net: &NetworkModel) -> Result<Self> {
        let y = build_admittance(net)?;
        let m = y.machine_indices();
        if m.len() != 1 {
            return Err(Error::MachineCount(m.len()));
        }
        let m = m[0];
        let inf = y.kinds.iter().position(|k| *k == NodeKind::Infinite).ok_or(Error::InfiniteNodeCount(0))?;
        let a = y.algebraic_indices();
        let yaa = DMatrix::from_fn(a.len(), a.len(), |i, k| y.y[(a[i], a[k])]);
        let z = inverse_complex(&yaa)
            .ok_or_else(|| Error::SingularAlgebraicBlock(a.iter().map(|&i| y.ids[i].clone()).collect()))?;
        let ya_m = DMatrix::from_fn(a.len(), 1, |i, _| y.y[(a[i], m)]);
        let ya_i = DMatrix::from_fn(a.len(), 1, |i, _| y.y[(a[i], inf)]);
        let g = -(&z * ya_m);
        let h = -(&z * ya_i) * Complex64::new(net.e_n, 0.0);
        Ok(Self {
            ids: a.iter().map(|&i| y.ids[i].clone()).collect(),
            y_m: a.iter().map(|&i| y.y[(m, i)]).collect(),
            y_mm: y.y[(m, m)],
            y_mi: y.y[(m, inf)],
            g: g.iter().copied().collect(),
            h: h.iter().copied().collect(),
            z,
            e_n: net.e_n,
        })
    }

    /// Algebraic node ids in solution order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.ids.iter().position(|x| x == id).ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// Solves the network with complex power `s` injected at the listed
    /// algebraic positions. Injections are constant power above
    /// [`ACTUATOR_VMIN`] and constant impedance below it.
    pub fn solve(&self, delta: f64, e_q: f64, injections: &[(usize, Complex64)]) -> Option<NetworkSolution> {
        let e = Complex64::from_polar(e_q, delta);
        let v0: Vec<Complex64> = self.g.iter().zip(&self.h).map(|(g, h)| g * e + h).collect();
        let active: Vec<(usize, Complex64)> = injections.iter().copied().filter(|(_, s)| s.norm() > 0.0).collect();
        let mut v = v0.clone();
        if !active.is_empty() {
            let current = |vk: Complex64, s: Complex64| -> Complex64 {
                if vk.norm() >= ACTUATOR_VMIN {
                    (s / vk).conj()
                } else {
                    s.conj() * vk / (ACTUATOR_VMIN * ACTUATOR_VMIN)
                }
            };
            let mut converged = false;
            for _ in 0..200 {
                let mut next = v0.clone();
                for &(k, s) in &active {
                    let ik = current(v[k], s);
                    for (r, x) in next.iter_mut().enumerate() {
                        *x += self.z[(r, k)] * ik;
                    }
                }
                let change = next.iter().zip(&v).fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
                v = next;
                if change <= 1e-14 {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return None;
            }
        }
        if v.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
            return None;
        }
        let i_m = self.y_mm * e + self.y_m.iter().zip(&v).map(|(y, x)| y * x).sum::<Complex64>() + self.y_mi * self.e_n;
        Some(NetworkSolution { v, s_machine: e * i_m.conj() })
    }
}

/// Input values that are constant over one integration segment.
#[derive(Clone, Debug, Default)]
pub struct SegmentInputs {
    pub d_pm: f64,
    pub d_ef: f64,
    pub d_upss: f64,
    /// Additional injections `(algebraic position, S)`.
    pub injections: Vec<(usize, Complex64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Channel {
    Theta(usize),
    Voltage(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Actuator {
    P(usize),
    Q(usize),
}

/// Prepared simulation: operating point, controller realisation and the
/// network of every topology phase.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub scenario: Scenario,
    pub op: OperatingPoint,
    pub p_m: f64,
    pub v_ref: f64,
    /// Equilibrium rotor angle of the final topology, if one exists.
    pub delta_post: Option<f64>,
    phases: Vec<NetworkSolver>,
    /// `(time, phase index after the event, description)`.
    switches: Vec<(f64, usize, String)>,
    avr_pos: usize,
    pod: Option<(DMatrix<f64>, Vec<f64>, Vec<f64>, Channel, Actuator)>,
}

fn parse_label(label: &str) -> Option<(&str, &str)> {
    let (head, rest) = label.split_once('[')?;
    Some((head, rest.strip_suffix(']')?))
}

impl Simulator {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let op = solve_smib_steady_state(&scenario.network, &scenario.dispatch, &scenario.avr)?;
        let mut phases = vec![NetworkSolver::new(&scenario.network)?];
        let mut switches = Vec::new();
        let mut net = scenario.network.clone();
        for e in &scenario.events {
            net = apply_event(&net, &e.kind)?;
            phases.push(NetworkSolver::new(&net)?);
            let what = match &e.kind {
                EventKind::Fault { node } => format!("fault at {node}"),
                EventKind::ClearFault { node } => format!("fault cleared at {node}"),
                EventKind::Trip { branch } => format!("trip {branch}"),
            };
            switches.push((e.time, phases.len() - 1, what));
        }
        let base = &phases[0];
        let avr_pos = base.position(&scenario.avr.node)?;
        let v_ref = match (scenario.avr.v_ref, op.v_ref) {
            (Some(v), _) | (None, Some(v)) => v,
            _ => 0.0,
        };
        let pod = match &scenario.pod {
            None => None,
            Some(p) => {
                let (ak, bk, ck) = p.controller.realization();
                let ch = match parse_label(&p.output) {
                    Some(("theta", id)) => Channel::Theta(base.position(id)?),
                    Some(("V", id)) => Channel::Voltage(base.position(id)?),
                    _ => return Err(Error::UnknownChannel(p.output.clone())),
                };
                let act = match parse_label(&p.input) {
                    Some(("P", id)) => Actuator::P(base.position(id)?),
                    Some(("Q", id)) => Actuator::Q(base.position(id)?),
                    _ => return Err(Error::UnknownChannel(p.input.clone())),
                };
                let ck: Vec<f64> = ck.iter().map(|c| c * p.controller.k_pod).collect();
                Some((ak, bk.iter().copied().collect(), ck, ch, act))
            }
        };
        for p in &scenario.pulses {
            match parse_label(&p.input) {
                Some(("P" | "Q", id)) => {
                    base.position(id)?;
                }
                Some(("Pm" | "Ef" | "upss", _)) => {}
                _ => return Err(Error::UnknownChannel(p.input.clone())),
            }
        }
        let final_net = scenario.final_network()?;
        let field = if scenario.avr.k_a > 0.0 { FieldSpec::Vref(v_ref) } else { FieldSpec::FieldVoltage(op.e_f()) };
        let delta_post = solve_smib_steady_state(&final_net, &Dispatch { p_e: op.p_e, field }, &scenario.avr)
            .ok()
            .map(|o| o.delta());
        Ok(Self { p_m: op.p_e, v_ref, delta_post, scenario: scenario.clone(), op, phases, switches, avr_pos, pod })
    }

    pub fn n_states(&self) -> usize {
        4 + self.pod.as_ref().map_or(0, |p| p.1.len())
    }

    /// Equilibrium state vector.
    pub fn initial_state(&self) -> Vec<f64> {
        let mut x = vec![self.op.delta(), 0.0, self.op.e_q(), self.op.e_f()];
        if let Some((ak, bk, _, ch, _)) = &self.pod {
            // controller at rest for a constant measurement: x = -A_k^{-1} B_k y0
            let sol = self.phases[0].solve(x[0], x[2], &[]).expect("steady state solves");
            let y0 = measure(*ch, &sol);
            let rhs = nalgebra::DVector::from_iterator(bk.len(), bk.iter().map(|b| -b * y0));
            let xk = ak.clone().lu().solve(&rhs).expect("controller poles are nonzero");
            x.extend(xk.iter());
        }
        x
    }

    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }

    pub fn solver(&self, phase: usize) -> &NetworkSolver {
        &self.phases[phase]
    }

    fn pod_injection(&self, x: &[f64]) -> Option<(usize, Complex64)> {
        let (_, _, ck, _, act) = self.pod.as_ref()?;
        let u = -ck.iter().zip(&x[4..]).map(|(c, xi)| c * xi).sum::<f64>();
        Some(match *act {
            Actuator::P(k) => (k, Complex64::new(u, 0.0)),
            Actuator::Q(k) => (k, Complex64::new(0.0, u)),
        })
    }

    /// Segment inputs from the pulses active at time `t`.
    pub fn inputs_at(&self, t: f64) -> SegmentInputs {
        let mut inp = SegmentInputs::default();
        let base = &self.phases[0];
        for p in &self.scenario.pulses {
            if !(t >= p.start && t < p.start + p.duration) {
                continue;
            }
            match parse_label(&p.input) {
                Some(("Pm", _)) => inp.d_pm += p.amplitude,
                Some(("Ef", _)) => inp.d_ef += p.amplitude,
                Some(("upss", _)) => inp.d_upss += p.amplitude,
                Some(("P", id)) => inp.injections.push((base.position(id).expect("checked"), Complex64::new(p.amplitude, 0.0))),
                Some(("Q", id)) => inp.injections.push((base.position(id).expect("checked"), Complex64::new(0.0, p.amplitude))),
                _ => {}
            }
        }
        inp
    }

    /// Network solution and effective field voltage at state `x`.
    pub fn network(&self, x: &[f64], phase: usize, inputs: &SegmentInputs) -> Option<(NetworkSolution, f64)> {
        let mut inj = inputs.injections.clone();
        inj.extend(self.pod_injection(x));
        let sol = self.phases[phase].solve(x[0], x[2], &inj)?;
        let avr = &self.scenario.avr;
        let e_f = if avr.k_a > 0.0 && avr.t_e == 0.0 {
            self.clamp(avr.k_a * (self.v_ref - sol.v[self.avr_pos].norm() + inputs.d_upss))
        } else {
            x[3]
        };
        Some((sol, e_f))
    }

    fn clamp(&self, e_f: f64) -> f64 {
        match self.scenario.e_f_max {
            Some(c) => e_f.clamp(-c, c),
            None => e_f,
        }
    }

    /// State derivative in topology `phase` under `inputs`.
    pub fn derivative(&self, x: &[f64], phase: usize, inputs: &SegmentInputs) -> Option<Vec<f64>> {
        let params = &self.scenario.network.machines[0].params;
        let avr = &self.scenario.avr;
        let (sol, e_f) = self.network(x, phase, inputs)?;
        let mut dx = vec![0.0; x.len()];
        dx[0] = x[1];
        dx[1] = (self.p_m + inputs.d_pm - sol.s_machine.re - params.d_m * x[1]) / params.m;
        if !self.scenario.freeze_flux {
            let b_d = params.b_delta();
            dx[2] = (-sol.s_machine.im / x[2] + b_d * (e_f + inputs.d_ef)) / (params.t_do * b_d);
        }
        if avr.k_a > 0.0 && avr.t_e > 0.0 {
            let target = avr.k_a * (self.v_ref - sol.v[self.avr_pos].norm() + inputs.d_upss);
            let mut d = (target - x[3]) / avr.t_e;
            if let Some(c) = self.scenario.e_f_max {
                if (x[3] >= c && d > 0.0) || (x[3] <= -c && d < 0.0) {
                    d = 0.0;
                }
            }
            dx[3] = d;
        }
        if let Some((ak, bk, _, ch, _)) = &self.pod {
            let y = measure(*ch, &sol);
            let xk = &x[4..];
            for i in 0..bk.len() {
                dx[4 + i] = (0..bk.len()).map(|j| ak[(i, j)] * xk[j]).sum::<f64>() + bk[i] * y;
            }
        }
        dx.iter().all(|v| v.is_finite()).then_some(dx)
    }

    fn rk4(&self, x: &[f64], h: f64, phase: usize, inp: &SegmentInputs) -> Option<Vec<f64>> {
        let add = |a: &[f64], b: &[f64], s: f64| a.iter().zip(b).map(|(p, q)| p + s * q).collect::<Vec<_>>();
        let k1 = self.derivative(x, phase, inp)?;
        let k2 = self.derivative(&add(x, &k1, h / 2.0), phase, inp)?;
        let k3 = self.derivative(&add(x, &k2, h / 2.0), phase, inp)?;
        let k4 = self.derivative(&add(x, &k3, h), phase, inp)?;
        Some((0..x.len()).map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
    }

    fn record(&self, trace: &mut TimeTrace, t: f64, x: &[f64], phase: usize, inp: &SegmentInputs) -> bool {
        let Some((sol, e_f)) = self.network(x, phase, inp) else {
            return false;
        };
        trace.time.push(t);
        trace.delta.push(x[0]);
        trace.omega.push(x[1]);
        trace.e_q.push(x[2]);
        trace.e_f.push(e_f);
        for (k, v) in sol.v.iter().enumerate() {
            trace.v[k].push(v.norm());
            trace.theta[k].push(v.arg());
        }
        trace.injection.push(self.pod_injection(x).map_or(0.0, |(_, s)| s.re + s.im));
        true
    }

    /// Runs from `x0` (equilibrium when `None`).
    pub fn run_from(&self, x0: Option<Vec<f64>>) -> TimeTrace {
        let sc = &self.scenario;
        let mut x = x0.unwrap_or_else(|| self.initial_state());
        let ids = self.phases[0].ids().to_vec();
        let mut trace = TimeTrace {
            nodes: ids.clone(),
            v: vec![Vec::new(); ids.len()],
            theta: vec![Vec::new(); ids.len()],
            delta_post: self.delta_post,
            delta_0: self.op.delta(),
            ..TimeTrace::default()
        };
        // breakpoints: events, pulse edges and the horizon
        let mut breaks: Vec<f64> = self.switches.iter().map(|s| s.0).collect();
        for p in &sc.pulses {
            breaks.push(p.start);
            breaks.push(p.start + p.duration);
        }
        breaks.retain(|&t| t > 0.0 && t < sc.horizon);
        breaks.push(sc.horizon);
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup();

        let phase_at = |t: f64| self.switches.iter().filter(|s| s.0 <= t).map(|s| s.1).max().unwrap_or(0);
        let mut t0 = 0.0;
        let mut phase = phase_at(0.0);
        let inp0 = self.inputs_at(0.0);
        for s in self.switches.iter().filter(|s| s.0 <= 0.0) {
            trace.events.push((s.0, s.2.clone()));
        }
        if !self.record(&mut trace, 0.0, &x, phase, &inp0) {
            trace.failure = Some(Error::VoltageCollapse { time: 0.0 }.to_string());
            return trace;
        }
        for &t1 in &breaks {
            let n = ((t1 - t0) / sc.step - 1e-9).ceil().max(1.0) as usize;
            let h = (t1 - t0) / n as f64;
            let inp = self.inputs_at(0.5 * (t0 + t1));
            for k in 1..=n {
                let Some(next) = self.rk4(&x, h, phase, &inp) else {
                    trace.failure = Some(Error::VoltageCollapse { time: t0 + (k - 1) as f64 * h }.to_string());
                    return trace;
                };
                x = next;
                let t = if k == n { t1 } else { t0 + k as f64 * h };
                if !self.record(&mut trace, t, &x, phase, &inp) {
                    trace.failure = Some(Error::VoltageCollapse { time: t }.to_string());
                    return trace;
                }
                if sc.stop_on_loss && trace.lost_at_last() {
                    return trace;
                }
            }
            t0 = t1;
            for s in self.switches.iter().filter(|s| s.0 == t1) {
                trace.events.push((s.0, s.2.clone()));
            }
            phase = phase_at(t1);
        }
        trace
    }
}

fn measure(ch: Channel, sol: &NetworkSolution) -> f64 {
    match ch {
        Channel::Theta(k) => sol.v[k].arg(),
        Channel::Voltage(k) => sol.v[k].norm(),
    }
}

pub fn simulate(scenario: &Scenario) -> Result<TimeTrace> {
    Ok(Simulator::new(scenario)?.run_from(None))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeTrace {
    pub time: Vec<f64>,
    pub delta: Vec<f64>,
    pub omega: Vec<f64>,
    pub e_q: Vec<f64>,
    pub e_f: Vec<f64>,
    pub nodes: Vec<String>,
    pub v: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    /// POD actuator output.
    pub injection: Vec<f64>,
    pub events: Vec<(f64, String)>,
    pub delta_0: f64,
    pub delta_post: Option<f64>,
    /// Reason the run ended early, if it did.
    pub failure: Option<String>,
}

impl TimeTrace {
    fn reference_angle(&self) -> f64 {
        self.delta_post.unwrap_or(self.delta_0)
    }

    fn lost_at_last(&self) -> bool {
        self.delta.last().is_some_and(|d| (d - self.reference_angle()).abs() > std::f64::consts::PI)
    }

    /// Named column: `delta`, `omega`, `eq`, `ef`, `injection`, `V[id]`, `theta[id]`.
    pub fn series(&self, label: &str) -> Option<&[f64]> {
        match label {
            "delta" => Some(&self.delta),
            "omega" => Some(&self.omega),
            "eq" => Some(&self.e_q),
            "ef" => Some(&self.e_f),
            "injection" => Some(&self.injection),
            _ => {
                let (head, id) = parse_label(label)?;
                let k = self.nodes.iter().position(|n| n == id)?;
                match head {
                    "V" => Some(&self.v[k]),
                    "theta" => Some(&self.theta[k]),
                    _ => None,
                }
            }
        }
    }

    pub fn final_state(&self) -> Option<[f64; 4]> {
        Some([*self.delta.last()?, *self.omega.last()?, *self.e_q.last()?, *self.e_f.last()?])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s,delta_rad,omega_rad_per_s,eq_pu,ef_pu");
        for id in &self.nodes {
            out.push_str(&format!(",V[{id}]_pu,theta[{id}]_rad"));
        }
        out.push_str(",injection_pu\n");
        for i in 0..self.time.len() {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.time[i], self.delta[i], self.omega[i], self.e_q[i], self.e_f[i]
            ));
            for k in 0..self.nodes.len() {
                out.push_str(&format!(",{:.16e},{:.16e}", self.v[k][i], self.theta[k][i]));
            }
            out.push_str(&format!(",{:.16e}\n", self.injection[i]));
        }
        out
    }
}

/// First time `|δ - δ_post| > π`.
pub fn detect_loss_of_synchrony(trace: &TimeTrace) -> Option<f64> {
    let r = trace.reference_angle();
    trace.time.iter().zip(&trace.delta).find(|(_, d)| (*d - r).abs() > std::f64::consts::PI).map(|(t, _)| *t)
}

/// Synchrony is lost before the rotor angle turns back after the last
/// event, i.e. in the first swing.
pub fn lost_in_first_swing(trace: &TimeTrace) -> Option<bool> {
    let t_los = detect_loss_of_synchrony(trace)?;
    let t_last = trace.events.last().map_or(0.0, |e| e.0);
    let turned = trace
        .time
        .windows(2)
        .zip(trace.omega.windows(2))
        .any(|(t, w)| t[0] >= t_last && t[1] < t_los && w[0] > 0.0 && w[1] <= 0.0);
    Some(!turned)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DampingEstimate {
    pub zeta: f64,
    /// Decay rate `σ` (1/s), positive when decaying.
    pub sigma: f64,
    pub omega_d: f64,
    /// RMS residual of the log-amplitude fit.
    pub residual: f64,
    pub peaks: usize,
}

/// Log-decrement estimate from successive half-cycle swings after `t_from`.
pub fn damping_estimate(time: &[f64], y: &[f64], t_from: f64) -> Result<DampingEstimate> {
    if time.len() != y.len() {
        return Err(Error::LengthMismatch { expected: time.len(), got: y.len() });
    }
    // extrema refined by a parabola through three samples
    let mut ext: Vec<(f64, f64, bool)> = Vec::new();
    for i in 1..y.len().saturating_sub(1) {
        if time[i] < t_from {
            continue;
        }
        let (a, b, c) = (y[i - 1], y[i], y[i + 1]);
        let is_max = b > a && b >= c;
        let is_min = b < a && b <= c;
        if !(is_max || is_min) {
            continue;
        }
        let den = a - 2.0 * b + c;
        let (dt, yv) = if den != 0.0 {
            let off = 0.5 * (a - c) / den;
            (off, b - 0.25 * (a - c) * off)
        } else {
            (0.0, b)
        };
        let h = 0.5 * (time[i + 1] - time[i - 1]);
        if ext.last().is_some_and(|e| e.2 == is_max) {
            continue;
        }
        ext.push((time[i] + dt * h, yv, is_max));
    }
    let maxima = ext.iter().filter(|e| e.2).count();
    if maxima < 3 {
        return Err(Error::InsufficientRingdown(maxima));
    }
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let mut first = None;
    for w in ext.windows(2) {
        let amp = (w[1].1 - w[0].1).abs();
        let a0 = *first.get_or_insert(amp);
        if amp <= 1e-9 * a0 || amp == 0.0 {
            break;
        }
        pts.push((0.5 * (w[0].0 + w[1].0), amp.ln()));
    }
    if pts.len() < 4 {
        return Err(Error::InsufficientRingdown(maxima));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    let slope = sxy / sxx;
    let residual = (pts.iter().map(|p| (p.1 - ml - slope * (p.0 - mt)).powi(2)).sum::<f64>() / n).sqrt();
    let used = pts.len() + 1;
    let half_period = (ext[used - 1].0 - ext[0].0) / (used - 1) as f64;
    let omega_d = std::f64::consts::PI / half_period;
    let sigma = -slope;
    Ok(DampingEstimate { zeta: sigma / sigma.hypot(omega_d), sigma, omega_d, residual, peaks: maxima })
}

/// Fault at `node` at `t_fault`, cleared after `clearing` by tripping `branch`.
pub fn fault_events(node: &str, branch: &str, t_fault: f64, clearing: f64) -> Vec<Event> {
    vec![
        Event { time: t_fault, kind: EventKind::Fault { node: node.into() } },
        Event { time: t_fault + clearing, kind: EventKind::ClearFault { node: node.into() } },
        Event { time: t_fault + clearing, kind: EventKind::Trip { branch: branch.into() } },
    ]
}

/// What counts as keeping synchrony in a clearing-time sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynchronyCriterion {
    /// No loss of synchrony before the rotor angle first turns back.
    FirstSwing,
    /// No loss of synchrony over the whole horizon.
    Horizon,
}

/// Window after clearing within which a first-swing loss shows up.
const FIRST_SWING_WINDOW: f64 = 5.0;

/// Whether the scenario keeps synchrony with the given clearing time.
pub fn survives(
    base: &Scenario,
    node: &str,
    branch: &str,
    t_fault: f64,
    clearing: f64,
    criterion: SynchronyCriterion,
) -> Result<bool> {
    let mut sc = base.clone();
    sc.events = fault_events(node, branch, t_fault, clearing);
    sc.stop_on_loss = true;
    if criterion == SynchronyCriterion::FirstSwing {
        sc.horizon = sc.horizon.min(t_fault + clearing + FIRST_SWING_WINDOW).max(t_fault + clearing + sc.step);
    }
    let tr = simulate(&sc)?;
    if tr.failure.is_some() {
        return Ok(false);
    }
    Ok(match criterion {
        SynchronyCriterion::FirstSwing => lost_in_first_swing(&tr) != Some(true),
        SynchronyCriterion::Horizon => detect_loss_of_synchrony(&tr).is_none(),
    })
}

/// Longest clearing time in `[lo, hi]` that keeps synchrony: a parallel
/// scan over `scan` points brackets the boundary, bisection refines it to
/// `tol`. `None` when even `lo` loses synchrony; `hi` when nothing does.
#[allow(clippy::too_many_arguments)]
pub fn critical_clearing_time(
    base: &Scenario,
    node: &str,
    branch: &str,
    t_fault: f64,
    (lo, hi): (f64, f64),
    scan: usize,
    tol: f64,
    criterion: SynchronyCriterion,
) -> Result<Option<f64>> {
    let scan = scan.max(2);
    let grid: Vec<f64> = (0..scan).map(|k| lo + (hi - lo) * k as f64 / (scan - 1) as f64).collect();
    let ok: Vec<bool> =
        grid.par_iter().map(|&c| survives(base, node, branch, t_fault, c, criterion)).collect::<Result<_>>()?;
    let Some(first_bad) = ok.iter().position(|s| !s) else {
        return Ok(Some(hi));
    };
    if first_bad == 0 {
        return Ok(None);
    }
    let (mut a, mut b) = (grid[first_bad - 1], grid[first_bad]);
    while b - a > tol {
        let m = 0.5 * (a + b);
        if survives(base, node, branch, t_fault, m, criterion)? {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(Some(a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_decay() {
        let t: Vec<f64> = (0..20000).map(|k| k as f64 * 1e-3).collect();
        let y: Vec<f64> = t.iter().map(|t| (-0.5 * t).exp() * (7.0 * t).cos()).collect();
        let est = damping_estimate(&t, &y, 0.0).unwrap();
        let want = 0.5 / (0.25f64 + 49.0).sqrt();
        assert!((est.zeta - want).abs() < 0.02 * want, "{est:?}");
    }

    #[test]
    fn synthetic_undamped() {
        let t: Vec<f64> = (0..10000).map(|k| k as f64 * 1e-3).collect();
        let y: Vec<f64> = t.iter().map(|t| 0.3 + (5.0 * t).sin()).collect();
        let est = damping_estimate(&t, &y, 0.0).unwrap();
        assert!(est.zeta.abs() < 1e-3, "{est:?}");
    }

    #[test]
    fn too_few_peaks() {
        let t: Vec<f64> = (0..1000).map(|k| k as f64 * 1e-3).collect();
        let y: Vec<f64> = t.iter().map(|t| (3.0 * t).sin()).collect();
        assert!(matches!(damping_estimate(&t, &y, 0.0), Err(Error::InsufficientRingdown(_))));
    }

    #[test]
    fn ramp_crosses_pi() {
        let time: Vec<f64> = (0..=600).map(|k| k as f64 * 0.01).collect();
        let delta: Vec<f64> = time.iter().map(|t| t * std::f64::consts::PI / 3.0 + 1e-9).collect();
        let tr = TimeTrace { time: time.clone(), delta, delta_post: Some(0.0), ..TimeTrace::default() };
        let t = detect_loss_of_synchrony(&tr).unwrap();
        assert!((t - 3.0).abs() < 1e-12);
    }

    #[test]
    fn flat_trace_keeps_synchrony() {
        let tr = TimeTrace { time: vec![0.0, 1.0], delta: vec![0.5, 0.5], delta_0: 0.5, ..TimeTrace::default() };
        assert_eq!(detect_loss_of_synchrony(&tr), None);
    }
}
