#![allow(dead_code)]

use num_complex::Complex64;
use proptest::prelude::*;
use smib_core::lineariser::{linearize, smib_closed_form, AvrParams, MachineParams, SmibMatrices, StateSpaceModel};
use smib_core::netmodel::{
    solve_smib_steady_state, Branch, Dispatch, FieldSpec, Machine, NetworkModel, Node, NodeKind, OperatingPoint,
};

/// Radial corridor G -x'd- 1 -x12- 2 -x23- 3 -x3n- N.
pub fn chain(x12: f64, x23: f64, x3n: f64, params: MachineParams) -> NetworkModel {
    NetworkModel {
        nodes: vec![
            Node::new("G", NodeKind::Machine),
            Node::new("1", NodeKind::Algebraic),
            Node::new("2", NodeKind::Algebraic),
            Node::new("3", NodeKind::Algebraic),
            Node::new("N", NodeKind::Infinite),
        ],
        branches: vec![
            Branch::reactance("l12", "1", "2", x12),
            Branch::reactance("l23", "2", "3", x23),
            Branch::reactance("l3n", "3", "N", x3n),
        ],
        machines: vec![Machine { node: "G".into(), terminal: "1".into(), params }],
        e_n: 1.0,
        f_nom: 60.0,
    }
}

pub fn machine() -> MachineParams {
    MachineParams::from_inertia(3.5, 60.0, 0.0, 8.0, 1.81, 0.3)
}

pub fn avr(k_a: f64) -> AvrParams {
    AvrParams::new(k_a, "1")
}

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// The bundled reference system: two parallel circuits between buses 2 and 3.
pub fn reference_network() -> NetworkModel {
    NetworkModel {
        nodes: vec![
            Node::new("G", NodeKind::Machine),
            Node::new("1", NodeKind::Algebraic),
            Node::new("2", NodeKind::Algebraic),
            Node::new("3", NodeKind::Algebraic),
            Node::new("N", NodeKind::Infinite),
        ],
        branches: vec![
            Branch::reactance("tr", "1", "2", 0.15),
            Branch::reactance("c1", "2", "3", 0.5),
            Branch::reactance("c2", "2", "3", 0.93),
            Branch::reactance("l3n", "3", "N", 0.1),
        ],
        machines: vec![Machine { node: "G".into(), terminal: "1".into(), params: machine() }],
        e_n: 0.995,
        f_nom: 60.0,
    }
}

pub fn reference_dispatch() -> Dispatch {
    Dispatch { p_e: 0.9, field: FieldSpec::TerminalVoltage(1.0) }
}

pub fn reference_avr() -> AvrParams {
    AvrParams { t_e: 0.02, ..AvrParams::new(200.0, "1") }
}

/// Raw draw of one operating point; `build` turns it into a solved case.
#[derive(Clone, Debug)]
pub struct Sample {
    pub h: f64,
    pub d_m: f64,
    pub t_do: f64,
    pub x_d: f64,
    pub x_dp: f64,
    pub x12: f64,
    pub x23: f64,
    pub x3n: f64,
    pub e_n: f64,
    pub p: f64,
    pub v_t: f64,
}

pub fn sample() -> impl Strategy<Value = Sample> {
    (
        (2.0..8.0f64, 0.0..(3.0 / (2.0 * std::f64::consts::PI * 60.0)), 3.0..10.0f64, 1.0..2.2f64, 0.15..0.45f64),
        (0.05..0.3f64, 0.05..0.6f64, 0.05..0.4f64, 0.95..1.05f64, -1.2..1.2f64, 0.95..1.1f64),
    )
        .prop_map(|((h, d_m, t_do, x_d, x_dp), (x12, x23, x3n, e_n, p, v_t))| Sample {
            h,
            d_m,
            t_do,
            x_d,
            x_dp,
            x12,
            x23,
            x3n,
            e_n,
            p,
            v_t,
        })
}

pub struct Case {
    pub net: NetworkModel,
    pub avr: AvrParams,
    pub op: OperatingPoint,
    pub model: StateSpaceModel,
    pub smib: SmibMatrices,
}

impl Sample {
    pub fn network(&self) -> NetworkModel {
        let params = MachineParams::from_inertia(self.h, 60.0, self.d_m, self.t_do, self.x_d, self.x_dp);
        let mut net = chain(self.x12, self.x23, self.x3n, params);
        net.e_n = self.e_n;
        net
    }

    /// Solved case with `|δ| <= 1.2`, or `None` when the draw is infeasible.
    pub fn build(&self, k_a: f64, measure: &str, control: &str) -> Option<Case> {
        let net = self.network();
        let avr = avr(k_a);
        let dispatch = Dispatch { p_e: self.p, field: FieldSpec::TerminalVoltage(self.v_t) };
        let op = solve_smib_steady_state(&net, &dispatch, &avr).ok()?;
        if op.delta().abs() > 1.2 {
            return None;
        }
        let model = linearize(&net, &op, &avr).ok()?;
        let smib = smib_closed_form(&net, &avr, &op, measure, control).ok()?;
        Some(Case { net, avr, op, model, smib })
    }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
