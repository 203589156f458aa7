//! Command implementations behind the `smib` binary.
//!
//! Every command reads one scenario file, runs one analysis from
//! `smib-core` and writes CSV/JSON artifacts into the output directory.
//! Identical inputs give byte-identical artifacts.

pub mod output;
pub mod scenario;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use smib_core::linalg::eigenvalues;
use smib_core::lineariser::{linearize, smib_closed_form};
use smib_core::netmodel::{solve_smib_steady_state, Dispatch, FieldSpec, NetworkModel, OperatingPoint};
use smib_core::podctl::{required_phase, residue, root_locus, tune_phase, PodController, RootLocusTrace};
use smib_core::timesim::{
    critical_clearing_time, damping_estimate, detect_loss_of_synchrony, lost_in_first_swing, simulate, DampingEstimate,
    Event, PodLoop, Scenario, SynchronyCriterion,
};
use smib_core::validate::{run_validation, FaultInjection, ValidationInput, ValidationReport};
use smib_core::zeroanalysis::{catalog, em_pair, infinite_bus_entry, omega_em, stability_check, zeros_numeric, ZeroCatalog, ZeroSet};
use smib_core::{AvrParams, Complex64, LoopId, SmibMatrices, StateSpaceModel};

use crate::output::{json17, reformat};
use crate::scenario::{Measurement, ScenarioFile, Variant};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("{0} validation check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    /// 2 for bad input, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 2,
            Self::Numeric(_) | Self::ChecksFailed(_) => 3,
        }
    }
}

impl From<smib_core::Error> for CliError {
    fn from(e: smib_core::Error) -> Self {
        if e.is_input() {
            Self::Input(e.to_string())
        } else {
            Self::Numeric(e.to_string())
        }
    }
}

/// Command-line overrides of scenario-file settings.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub k_a: Option<f64>,
    pub out: Option<PathBuf>,
    pub loop_id: Option<String>,
    pub bus: Option<String>,
    pub gain_min: Option<f64>,
    pub gain_max: Option<f64>,
    pub gain_points: Option<usize>,
    pub step: Option<f64>,
    pub horizon: Option<f64>,
    /// Also compute first-swing critical clearing times.
    pub cct: bool,
    /// Test hook: corrupt `a31` before the closed-form zero formulas.
    pub inject_a31_flip: bool,
}

/// Loaded scenario with overrides applied.
pub struct Context {
    pub file: ScenarioFile,
    pub network: NetworkModel,
    pub avr: AvrParams,
    pub dispatch: Dispatch,
    pub out: PathBuf,
    pub opts: Options,
}

impl Context {
    pub fn load(path: &Path, opts: &Options) -> Result<Self, CliError> {
        let file = ScenarioFile::load(path)?;
        Self::from_file(file, opts)
    }

    pub fn from_file(file: ScenarioFile, opts: &Options) -> Result<Self, CliError> {
        let network = file.network()?;
        let avr = file.avr(opts.k_a);
        avr.validate()?;
        for (name, v) in [("--step", opts.step), ("--horizon", opts.horizon)] {
            if v.is_some_and(|x| !(x > 0.0)) {
                return Err(CliError::Input(format!("{name} must be positive")));
            }
        }
        let out = opts.out.clone().unwrap_or_else(|| PathBuf::from(&file.output.dir));
        Ok(Self { dispatch: file.dispatch(), network, avr, out, opts: opts.clone(), file })
    }

    pub fn operating_point(&self) -> Result<OperatingPoint, CliError> {
        Ok(solve_smib_steady_state(&self.network, &self.dispatch, &self.avr)?)
    }

    pub fn model(&self, op: &OperatingPoint) -> Result<StateSpaceModel, CliError> {
        Ok(linearize(&self.network, op, &self.avr)?)
    }

    pub fn closed_form(&self, op: &OperatingPoint) -> Result<SmibMatrices, CliError> {
        let (m, c) = self.file.analysis_buses();
        Ok(smib_closed_form(&self.network, &self.avr, op, &m, &c)?)
    }

    fn header(&self) -> String {
        format!(
            "# base {} MVA, {} Hz; quantities in pu on the machine base, angles in rad, rates in rad/s, time in s\n",
            self.file.base.power_mva, self.file.base.frequency_hz
        )
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Input(format!("cannot create {}: {e}", self.out.display())))?;
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn write_csv(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        self.write(name, &(self.header() + body))
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        self.write(name, &json17(value))
    }

    fn gain_grid(&self) -> Result<Vec<f64>, CliError> {
        let o = &self.opts;
        self.file.gain_grid(o.gain_min, o.gain_max, o.gain_points)
    }

    fn base_json(&self) -> serde_json::Value {
        serde_json::json!({ "power_mva": self.file.base.power_mva, "frequency_hz": self.file.base.frequency_hz })
    }
}

/// Upper-half-plane electromechanical eigenvalue of `model`.
pub fn electromechanical_mode(model: &StateSpaceModel, omega: Option<f64>) -> Result<Complex64, CliError> {
    let eigs = eigenvalues(&model.a)?;
    omega
        .and_then(|w| em_pair(&eigs, w).map(|p| p.0))
        .filter(|z| z.im > 0.0)
        .or_else(|| eigs.iter().filter(|z| z.im > 0.0).max_by(|a, b| a.im.total_cmp(&b.im)).copied())
        .ok_or_else(|| CliError::Numeric("no oscillatory electromechanical mode".into()))
}

fn eigenvalue_csv(eigs: &[Complex64]) -> String {
    let mut s = String::from("index,re_per_s,im_rad_per_s,zeta,freq_hz\n");
    for (i, z) in eigs.iter().enumerate() {
        let zeta = smib_core::zeroanalysis::damping_ratio(*z);
        let f = z.im.abs() / (2.0 * std::f64::consts::PI);
        s.push_str(&format!("{i},{:.16e},{:.16e},{zeta:.16e},{f:.16e}\n", z.re, z.im));
    }
    s
}

pub fn cmd_linearize(path: &Path, opts: &Options) -> Result<Vec<PathBuf>, CliError> {
    let ctx = Context::load(path, opts)?;
    let op = ctx.operating_point()?;
    let model = ctx.model(&op)?;
    let report = stability_check(&ctx.closed_form(&op)?)?;
    Ok(vec![
        ctx.write("state_space.json", &reformat(&model.to_json()?))?,
        ctx.write_csv("eigenvalues.csv", &eigenvalue_csv(&report.eigenvalues))?,
        ctx.write("stability.json", &reformat(&report.to_json()))?,
    ])
}

pub fn zero_catalog(ctx: &Context) -> Result<ZeroCatalog, CliError> {
    let loops = match &ctx.opts.loop_id {
        Some(l) => vec![LoopId::parse(l).ok_or_else(|| CliError::Input(format!("unknown loop id `{l}`")))?],
        None => ctx.file.loops(),
    };
    let op = ctx.operating_point()?;
    let model = ctx.model(&op)?;
    let (measure, control) = ctx.file.analysis_buses();
    let infinite = &ctx.file.network.infinite_bus;
    if &measure == infinite {
        // the infinite-bus phasor is fixed, so every loop measured there is blind
        let machine = &ctx.file.machine.id;
        let em_pole = electromechanical_mode(&model, None).ok();
        let entries = loops.iter().map(|&l| infinite_bus_entry(l, machine, infinite, &control)).collect();
        return Ok(ZeroCatalog { omega: None, em_pole, entries });
    }
    let mut s = ctx.closed_form(&op)?;
    if ctx.opts.inject_a31_flip {
        s.a31 = -s.a31;
    }
    Ok(catalog(&model, &s, &loops)?)
}

pub fn cmd_zeros(path: &Path, opts: &Options) -> Result<Vec<PathBuf>, CliError> {
    let ctx = Context::load(path, opts)?;
    let cat = zero_catalog(&ctx)?;
    Ok(vec![ctx.write_csv("zeros.csv", &cat.to_csv())?, ctx.write("zeros.json", &reformat(&cat.to_json()))?])
}

/// Residue-tuned controller and root locus on one bus.
#[derive(Clone, Debug, Serialize)]
pub struct LocusSummary {
    pub bus: String,
    pub input: String,
    pub output: String,
    pub mode: Complex64,
    pub residue: Complex64,
    pub required_phase_deg: f64,
    pub t1: f64,
    pub t2: f64,
    pub best_gain: f64,
    pub best_zeta: f64,
    pub crossing_gain: Option<f64>,
    pub stabilizable: bool,
    pub endpoint: Option<Complex64>,
    pub nearest_zero: Option<Complex64>,
    /// `|endpoint - zero| / |zero|`.
    pub endpoint_zero_distance: Option<f64>,
    pub gain_points: usize,
}

fn channel(bus: &str, m: Measurement) -> (String, String) {
    let out = match m {
        Measurement::Theta => format!("theta[{bus}]"),
        Measurement::V => format!("V[{bus}]"),
    };
    (format!("P[{bus}]"), out)
}

/// Tunes (unless `corners` is given) and traces the POD loop at `bus`.
pub fn design_loop(
    ctx: &Context,
    op: &OperatingPoint,
    model: &StateSpaceModel,
    bus: &str,
    measurement: Measurement,
    corners: Option<(f64, f64)>,
) -> Result<(LocusSummary, RootLocusTrace), CliError> {
    let (input, output) = channel(bus, measurement);
    let omega = ctx.closed_form(op).ok().and_then(|s| omega_em(&s).ok());
    let mode = electromechanical_mode(model, omega)?;
    let r = residue(model, &input, &output, mode)?;
    let phase = required_phase(r, mode)?;
    let (t1, t2) = match corners {
        Some(c) => c,
        None => tune_phase(r, mode).map_err(|e| {
            CliError::Numeric(format!("tuning failed at bus {bus} (required phase {:.2} deg): {e}", phase.to_degrees()))
        })?,
    };
    let shape = PodController::new(t1, t2, 1.0)?;
    let grid = ctx.gain_grid()?;
    let trace = root_locus(model, &shape, &input, &output, mode, &grid)?;
    let endpoint = trace.endpoint();
    let nearest_zero = match (zeros_numeric(model, &input, &output)?, endpoint) {
        (ZeroSet::Finite { zeros, .. }, Some(e)) => {
            zeros.iter().copied().min_by(|a, b| (a - e).norm().total_cmp(&(b - e).norm()))
        }
        _ => None,
    };
    let summary = LocusSummary {
        bus: bus.into(),
        input,
        output,
        mode,
        residue: r,
        required_phase_deg: phase.to_degrees(),
        t1,
        t2,
        best_gain: trace.best_gain,
        best_zeta: trace.best_zeta,
        crossing_gain: trace.crossing_gain,
        stabilizable: trace.stabilizable,
        endpoint,
        endpoint_zero_distance: nearest_zero.zip(endpoint).map(|(z, e)| (e - z).norm() / z.norm()),
        nearest_zero,
        gain_points: grid.len(),
    };
    Ok((summary, trace))
}

fn rootlocus_buses(ctx: &Context) -> Vec<String> {
    if let Some(b) = &ctx.opts.bus {
        return vec![b.clone()];
    }
    if !ctx.file.analysis.rootlocus_buses.is_empty() {
        return ctx.file.analysis.rootlocus_buses.clone();
    }
    match &ctx.file.pod {
        Some(p) => vec![p.bus.clone()],
        None => vec![ctx.file.analysis_buses().1],
    }
}

pub fn cmd_rootlocus(path: &Path, opts: &Options) -> Result<Vec<PathBuf>, CliError> {
    let ctx = Context::load(path, opts)?;
    let op = ctx.operating_point()?;
    let model = ctx.model(&op)?;
    let measurement = ctx.file.pod.as_ref().map_or(Measurement::Theta, |p| p.measurement);
    let mut written = Vec::new();
    for bus in rootlocus_buses(&ctx) {
        ctx.network.node(&bus)?;
        // corners fixed in the file apply to the POD bus only
        let corners = ctx.file.pod.as_ref().filter(|p| p.bus == bus).and_then(|p| p.t1.zip(p.t2));
        let (summary, trace) = design_loop(&ctx, &op, &model, &bus, measurement, corners)?;
        written.push(ctx.write_csv(&format!("rootlocus_{bus}.csv"), &trace.to_csv())?);
        written.push(ctx.write(&format!("rootlocus_{bus}.json"), &reformat(&trace.to_json()))?);
        written.push(ctx.write_json(&format!("rootlocus_{bus}_summary.json"), &summary)?);
    }
    Ok(written)
}

/// POD loop from the `[pod]` section: missing corners are residue-tuned,
/// a missing gain is the best-damping gain of the root locus.
pub fn pod_loop(ctx: &Context, op: &OperatingPoint) -> Result<Option<PodLoop>, CliError> {
    let Some(p) = &ctx.file.pod else {
        return Ok(None);
    };
    let (input, output) = channel(&p.bus, p.measurement);
    let corners = p.t1.zip(p.t2);
    let (t1, t2, gain) = match (corners, p.gain) {
        (Some((t1, t2)), Some(g)) => (t1, t2, g),
        _ => {
            let model = ctx.model(op)?;
            let (s, _) = design_loop(ctx, op, &model, &p.bus, p.measurement, corners)?;
            (s.t1, s.t2, p.gain.unwrap_or(s.best_gain))
        }
    };
    Ok(Some(PodLoop { controller: PodController::new(t1, t2, gain)?, input, output }))
}

fn variant_scenario(ctx: &Context, op: &OperatingPoint, v: Variant, pod: Option<&PodLoop>) -> Result<Scenario, CliError> {
    let (avr, dispatch) = match v {
        // same pre-fault point, field voltage frozen at its equilibrium value
        Variant::ConstantEf => (
            AvrParams { k_a: 0.0, ..ctx.avr.clone() },
            Dispatch { p_e: ctx.dispatch.p_e, field: FieldSpec::FieldVoltage(op.e_f()) },
        ),
        _ => (ctx.avr.clone(), ctx.dispatch),
    };
    let sim = &ctx.file.simulation;
    let mut sc = Scenario::new(ctx.network.clone(), avr, dispatch);
    sc.events = ctx.file.events();
    sc.horizon = ctx.opts.horizon.unwrap_or(sim.horizon);
    sc.step = ctx.opts.step.unwrap_or(sim.step);
    sc.e_f_max = ctx.file.avr.e_f_max;
    if v == Variant::AvrPod {
        let p = pod.ok_or_else(|| CliError::Input("variant avr_pod needs a [pod] section".into()))?;
        sc.pod = Some(p.clone());
    }
    Ok(sc)
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub trace_file: String,
    pub samples: usize,
    pub end_time: Option<f64>,
    pub loss_of_synchrony: Option<f64>,
    pub first_swing_loss: Option<bool>,
    pub delta_post: Option<f64>,
    /// Log-decrement estimate on the rotor speed.
    pub ringdown: Option<DampingEstimate>,
    pub ringdown_note: Option<String>,
    pub failure: Option<String>,
    /// First-swing critical clearing time, when requested.
    pub critical_clearing_time: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationSummary {
    pub base: serde_json::Value,
    pub horizon: f64,
    pub step: f64,
    pub events: Vec<Event>,
    pub pod: Option<PodLoop>,
    pub ringdown_from: f64,
    pub clearing_range: Option<[f64; 2]>,
    pub variants: Vec<VariantSummary>,
}

pub const DEFAULT_CLEARING_RANGE: [f64; 2] = [0.05, 0.3];
const CCT_SCAN: usize = 11;
const CCT_TOL: f64 = 1e-3;

pub fn cmd_simulate(path: &Path, opts: &Options) -> Result<Vec<PathBuf>, CliError> {
    let ctx = Context::load(path, opts)?;
    let (written, summary) = run_simulations(&ctx)?;
    if let Some(f) = summary.variants.iter().find_map(|v| v.failure.as_ref().map(|f| (v.variant.clone(), f.clone()))) {
        return Err(CliError::Numeric(format!("variant {}: {} (partial trace written)", f.0, f.1)));
    }
    Ok(written)
}

/// Runs every configured variant, writes one trace per variant plus the
/// summary, and returns the summary. Failed runs still write their
/// partial traces.
pub fn run_simulations(ctx: &Context) -> Result<(Vec<PathBuf>, SimulationSummary), CliError> {
    let op = ctx.operating_point()?;
    let variants = ctx.file.simulation.variants.clone();
    let pod = if variants.contains(&Variant::AvrPod) { pod_loop(ctx, &op)? } else { None };
    let scenarios: Vec<(Variant, Scenario)> = variants
        .iter()
        .map(|&v| Ok((v, variant_scenario(ctx, &op, v, pod.as_ref())?)))
        .collect::<Result<_, CliError>>()?;
    for (_, sc) in &scenarios {
        sc.validate()?;
    }
    let traces = scenarios.par_iter().map(|(_, sc)| simulate(sc)).collect::<smib_core::Result<Vec<_>>>()?;

    let sim = &ctx.file.simulation;
    let last_event = scenarios.first().and_then(|(_, s)| s.events.last()).map_or(0.0, |e| e.time);
    let ringdown_from = sim.ringdown_from.unwrap_or(last_event + 0.5);
    let clearing_range = sim.clearing_range.or(ctx.opts.cct.then_some(DEFAULT_CLEARING_RANGE));
    let fault = match clearing_range {
        Some(_) => Some(ctx.file.fault_spec().ok_or_else(|| {
            CliError::Input("critical clearing time needs a fault, a clearing and a trip at the clearing time".into())
        })?),
        None => None,
    };
    let ccts: Vec<Option<f64>> = match (clearing_range, &fault) {
        (Some([lo, hi]), Some((bus, branch, t_fault, _))) => scenarios
            .iter()
            .map(|(_, sc)| {
                critical_clearing_time(sc, bus, branch, *t_fault, (lo, hi), CCT_SCAN, CCT_TOL, SynchronyCriterion::FirstSwing)
            })
            .collect::<smib_core::Result<_>>()?,
        _ => vec![None; scenarios.len()],
    };

    let mut written = Vec::new();
    let mut summaries = Vec::new();
    for (((v, _), tr), cct) in scenarios.iter().zip(&traces).zip(ccts) {
        let name = format!("trace_{}.csv", v.as_str());
        written.push(ctx.write_csv(&name, &tr.to_csv())?);
        let los = detect_loss_of_synchrony(tr);
        let (ringdown, note) = if los.is_some() {
            (None, Some("synchrony lost".to_string()))
        } else if tr.failure.is_some() {
            (None, Some("run ended early".to_string()))
        } else {
            match damping_estimate(&tr.time, &tr.omega, ringdown_from) {
                Ok(d) => (Some(d), None),
                Err(e) => (None, Some(e.to_string())),
            }
        };
        summaries.push(VariantSummary {
            variant: v.as_str().into(),
            trace_file: name,
            samples: tr.time.len(),
            end_time: tr.time.last().copied(),
            loss_of_synchrony: los,
            first_swing_loss: lost_in_first_swing(tr),
            delta_post: tr.delta_post,
            ringdown,
            ringdown_note: note,
            failure: tr.failure.clone(),
            critical_clearing_time: cct,
        });
    }
    let summary = SimulationSummary {
        base: ctx.base_json(),
        horizon: scenarios.first().map_or(sim.horizon, |s| s.1.horizon),
        step: scenarios.first().map_or(sim.step, |s| s.1.step),
        events: ctx.file.events(),
        pod,
        ringdown_from,
        clearing_range,
        variants: summaries,
    };
    written.push(ctx.write_json("simulate_summary.json", &summary)?);
    Ok((written, summary))
}

pub fn validation_report(ctx: &Context) -> Result<ValidationReport, CliError> {
    let op = ctx.operating_point()?;
    let pod = pod_loop(ctx, &op)?;
    let (measure, control) = ctx.file.analysis_buses();
    let input = ValidationInput {
        network: &ctx.network,
        avr: &ctx.avr,
        dispatch: &ctx.dispatch,
        measure: &measure,
        control: &control,
        pod: pod.as_ref(),
    };
    Ok(run_validation(&input, FaultInjection { flip_a31_sign: ctx.opts.inject_a31_flip })?)
}

pub fn cmd_validate(path: &Path, opts: &Options) -> Result<(Vec<PathBuf>, ValidationReport), CliError> {
    let ctx = Context::load(path, opts)?;
    let report = validation_report(&ctx)?;
    let written = vec![ctx.write("validation.json", &reformat(&report.to_json()))?];
    Ok((written, report))
}
