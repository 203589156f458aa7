//! Scenario files: TOML with fixed sections, unknown keys rejected.
//!
//! All electrical quantities are per unit on the `[base]` power and
//! frequency; times are in seconds, angles in radians.

use std::path::Path;

use serde::{Deserialize, Serialize};
use smib_core::netmodel::{Branch, Dispatch, FieldSpec, Machine, NetworkModel, Node, NodeKind};
use smib_core::podctl::{default_gain_grid, log_grid};
use smib_core::{AvrParams, Complex64, Event, EventKind, LoopId, MachineParams};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub base: Base,
    pub network: NetworkSection,
    pub machine: MachineSection,
    pub avr: AvrSection,
    pub dispatch: DispatchSection,
    pub pod: Option<PodSection>,
    #[serde(default)]
    pub events: Vec<EventEntry>,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Base {
    pub power_mva: f64,
    pub frequency_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub infinite_bus: String,
    pub infinite_voltage: f64,
    /// Algebraic buses.
    pub buses: Vec<String>,
    pub branches: Vec<BranchEntry>,
    #[serde(default)]
    pub shunts: Vec<ShuntEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchEntry {
    pub id: String,
    pub from: String,
    pub to: String,
    pub x: f64,
    #[serde(default)]
    pub r: f64,
}

/// Shunt admittance `g - j b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShuntEntry {
    pub bus: String,
    #[serde(default)]
    pub g: f64,
    #[serde(default)]
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineSection {
    pub id: String,
    pub terminal: String,
    /// Inertia constant (s).
    pub h: f64,
    #[serde(default)]
    pub damping: f64,
    pub t_do: f64,
    pub x_d: f64,
    pub x_d_prime: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvrSection {
    pub k_a: f64,
    #[serde(default)]
    pub t_e: f64,
    pub bus: String,
    pub e_f_max: Option<f64>,
}

/// Active power plus exactly one field condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatchSection {
    pub p: f64,
    pub terminal_voltage: Option<f64>,
    pub v_ref: Option<f64>,
    pub e_f: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measurement {
    Theta,
    V,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PodSection {
    pub bus: String,
    #[serde(default = "default_measurement")]
    pub measurement: Measurement,
    /// Fixed gain; the best-damping gain of the root locus when absent.
    pub gain: Option<f64>,
    /// Lead-lag corners (rad/s); residue-tuned when absent.
    pub t1: Option<f64>,
    pub t2: Option<f64>,
}

fn default_measurement() -> Measurement {
    Measurement::Theta
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventEntry {
    pub time: f64,
    pub kind: EventTag,
    pub bus: Option<String>,
    pub branch: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventTag {
    Fault,
    ClearFault,
    Trip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ConstantEf,
    Avr,
    AvrPod,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ConstantEf => "constant_ef",
            Self::Avr => "avr",
            Self::AvrPod => "avr_pod",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    /// Ringdown window start; defaults to 0.5 s after the last event.
    pub ringdown_from: Option<f64>,
    /// Clearing-time sweep `[min, max]` for the critical clearing time.
    pub clearing_range: Option<[f64; 2]>,
}

fn default_horizon() -> f64 {
    15.0
}

fn default_step() -> f64 {
    1e-3
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::ConstantEf, Variant::Avr, Variant::AvrPod]
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            step: default_step(),
            variants: default_variants(),
            ringdown_from: None,
            clearing_range: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub measure: Option<String>,
    pub control: Option<String>,
    pub loops: Option<Vec<String>>,
    #[serde(default)]
    pub rootlocus_buses: Vec<String>,
    pub gain_min: Option<f64>,
    pub gain_max: Option<f64>,
    pub gain_points: Option<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { measure: None, control: None, loops: None, rootlocus_buses: Vec::new(), gain_min: None, gain_max: None, gain_points: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: String,
}

fn default_out() -> String {
    "out".into()
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

impl ScenarioFile {
    /// Parses and checks a scenario document. Syntax and schema errors
    /// report line and column.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| {
            let loc = e
                .span()
                .map(|s| {
                    let before = &text[..s.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
                    format!("line {line}, column {col}: ")
                })
                .unwrap_or_default();
            input(format!("{loc}{}", e.message()))
        })?;
        file.check()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Semantic checks beyond the schema.
    pub fn check(&self) -> Result<(), CliError> {
        if !(self.base.power_mva > 0.0) || !(self.base.frequency_hz > 0.0) {
            return Err(input("[base] power_mva and frequency_hz must be positive"));
        }
        let d = &self.dispatch;
        let n_field = [d.terminal_voltage, d.v_ref, d.e_f].iter().filter(|x| x.is_some()).count();
        if n_field != 1 {
            return Err(input("[dispatch] needs exactly one of terminal_voltage, v_ref, e_f"));
        }
        for e in &self.events {
            match e.kind {
                EventTag::Fault | EventTag::ClearFault if e.bus.is_none() => {
                    return Err(input(format!("event at t = {}: `bus` is required", e.time)));
                }
                EventTag::Trip if e.branch.is_none() => {
                    return Err(input(format!("event at t = {}: `branch` is required", e.time)));
                }
                _ => {}
            }
        }
        if let Some(p) = &self.pod {
            if p.t1.is_some() != p.t2.is_some() {
                return Err(input("[pod] t1 and t2 go together"));
            }
        }
        if let Some(loops) = &self.analysis.loops {
            for l in loops {
                LoopId::parse(l).ok_or_else(|| input(format!("unknown loop id `{l}`")))?;
            }
        }
        let net = self.network().map_err(CliError::from)?;
        net.validate().map_err(CliError::from)?;
        self.avr(None).validate().map_err(CliError::from)?;
        Ok(())
    }

    pub fn machine_params(&self) -> MachineParams {
        let m = &self.machine;
        MachineParams::from_inertia(m.h, self.base.frequency_hz, m.damping, m.t_do, m.x_d, m.x_d_prime)
    }

    pub fn network(&self) -> smib_core::Result<NetworkModel> {
        let n = &self.network;
        let mut nodes = vec![Node::new(self.machine.id.clone(), NodeKind::Machine)];
        nodes.extend(n.buses.iter().map(|b| Node::new(b.clone(), NodeKind::Algebraic)));
        nodes.push(Node::new(n.infinite_bus.clone(), NodeKind::Infinite));
        for s in &n.shunts {
            let node = nodes
                .iter_mut()
                .find(|x| x.id == s.bus)
                .ok_or_else(|| smib_core::Error::UnknownNode(s.bus.clone()))?;
            node.shunt += Complex64::new(s.g, -s.b);
        }
        let net = NetworkModel {
            nodes,
            branches: n.branches.iter().map(|b| Branch::new(b.id.clone(), b.from.clone(), b.to.clone(), Complex64::new(b.r, b.x))).collect(),
            machines: vec![Machine { node: self.machine.id.clone(), terminal: self.machine.terminal.clone(), params: self.machine_params() }],
            e_n: n.infinite_voltage,
            f_nom: self.base.frequency_hz,
        };
        net.validate_structure()?;
        Ok(net)
    }

    /// AVR parameters, optionally with `K_A` overridden.
    pub fn avr(&self, k_a: Option<f64>) -> AvrParams {
        AvrParams { k_a: k_a.unwrap_or(self.avr.k_a), t_e: self.avr.t_e, v_ref: None, node: self.avr.bus.clone() }
    }

    pub fn dispatch(&self) -> Dispatch {
        let d = &self.dispatch;
        let field = match (d.terminal_voltage, d.v_ref, d.e_f) {
            (Some(v), _, _) => FieldSpec::TerminalVoltage(v),
            (_, Some(v), _) => FieldSpec::Vref(v),
            (_, _, Some(e)) => FieldSpec::FieldVoltage(e),
            _ => unreachable!("checked on load"),
        };
        Dispatch { p_e: d.p, field }
    }

    pub fn events(&self) -> Vec<Event> {
        self.events
            .iter()
            .map(|e| Event {
                time: e.time,
                kind: match e.kind {
                    EventTag::Fault => EventKind::Fault { node: e.bus.clone().expect("checked") },
                    EventTag::ClearFault => EventKind::ClearFault { node: e.bus.clone().expect("checked") },
                    EventTag::Trip => EventKind::Trip { branch: e.branch.clone().expect("checked") },
                },
            })
            .collect()
    }

    /// Measurement and control buses of the closed-form analysis.
    pub fn analysis_buses(&self) -> (String, String) {
        let buses = &self.network.buses;
        let fallback = |k: usize| buses.get(k.min(buses.len().saturating_sub(1))).cloned().unwrap_or_default();
        (
            self.analysis.measure.clone().unwrap_or_else(|| fallback(1)),
            self.analysis.control.clone().unwrap_or_else(|| fallback(2)),
        )
    }

    pub fn loops(&self) -> Vec<LoopId> {
        match &self.analysis.loops {
            Some(l) => l.iter().filter_map(|s| LoopId::parse(s)).collect(),
            None => LoopId::ALL.to_vec(),
        }
    }

    pub fn gain_grid(&self, min: Option<f64>, max: Option<f64>, points: Option<usize>) -> Result<Vec<f64>, CliError> {
        let a = &self.analysis;
        let (lo, hi, n) = (min.or(a.gain_min), max.or(a.gain_max), points.or(a.gain_points));
        if lo.is_none() && hi.is_none() && n.is_none() {
            return Ok(default_gain_grid());
        }
        let (lo, hi, n) = (lo.unwrap_or(1e-2), hi.unwrap_or(1e3), n.unwrap_or(200));
        if !(lo > 0.0 && hi > lo && n >= 2) {
            return Err(input("gain grid needs 0 < gain_min < gain_max and at least 2 points"));
        }
        Ok(log_grid(lo, hi, n))
    }

    /// First fault bus and the branch tripped with its clearing.
    pub fn fault_spec(&self) -> Option<(String, String, f64, f64)> {
        let fault = self.events.iter().find(|e| e.kind == EventTag::Fault)?;
        let clear = self.events.iter().find(|e| e.kind == EventTag::ClearFault && e.time >= fault.time)?;
        let trip = self.events.iter().find(|e| e.kind == EventTag::Trip && e.time == clear.time)?;
        Some((fault.bus.clone()?, trip.branch.clone()?, fault.time, clear.time - fault.time))
    }
}
