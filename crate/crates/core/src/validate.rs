//! Cross-oracle checks run against one operating point. Each check pits two
//! independent computations of the same quantity against each other.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{eigenvalues, match_roots, poly_roots};
use crate::lineariser::{finite_difference_jacobian, linearize, smib_closed_form, AvrParams, StateSpaceModel};
use crate::netmodel::{
    build_admittance, injected_power, kron_reduce, nodal_power, solve_smib_steady_state, weight_admittance, Dispatch,
    NetworkModel,
};
use crate::podctl::closed_loop;
use crate::timesim::{PodLoop, Pulse, Scenario, SegmentInputs, Simulator};
use crate::zeroanalysis::{catalog, char_poly, siso_zeros, LoopId, ZeroSet};

pub const TOL_ZEROS: f64 = 1e-7;
pub const TOL_JACOBIAN: f64 = 1e-5;
pub const TOL_KRON: f64 = 1e-10;
pub const TOL_DUAL_POWER: f64 = 1e-12;
pub const TOL_CHARPOLY: f64 = 1e-9;
pub const TOL_ZERO_INVARIANCE: f64 = 1e-8;
pub const TOL_SMALL_SIGNAL: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), value, tolerance, pass: value <= tolerance, detail: detail.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub all_pass: bool,
}

impl ValidationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

pub struct ValidationInput<'a> {
    pub network: &'a NetworkModel,
    pub avr: &'a AvrParams,
    pub dispatch: &'a Dispatch,
    pub measure: &'a str,
    pub control: &'a str,
    pub pod: Option<&'a PodLoop>,
}

/// Test hooks that deliberately corrupt one side of a comparison.
#[derive(Clone, Copy, Debug, Default)]
pub struct FaultInjection {
    /// Negates `a31` in the closed-form element list before the zero formulas.
    pub flip_a31_sign: bool,
}

pub fn run_validation(input: &ValidationInput, faults: FaultInjection) -> Result<ValidationReport> {
    let net = input.network;
    let op = solve_smib_steady_state(net, input.dispatch, input.avr)?;
    let model = linearize(net, &op, input.avr)?;
    let mut s = smib_closed_form(net, input.avr, &op, input.measure, input.control)?;
    if faults.flip_a31_sign {
        s.a31 = -s.a31;
    }
    let mut checks = Vec::new();

    let cat = catalog(&model, &s, &LoopId::ALL)?;
    let worst = cat
        .entries
        .iter()
        .map(|e| e.max_rel_deviation.filter(|d| d.is_finite()).unwrap_or(f64::INFINITY))
        .fold(0.0f64, f64::max);
    checks.push(Check::new("zeros_analytic_vs_numeric", worst, TOL_ZEROS, format!("{} loops", cat.entries.len())));

    checks.push(jacobian_check(net, input.avr, input.dispatch, &model)?);

    let y = build_admittance(net)?;
    let (mags, angs) = op.profile(&y)?;
    let w = weight_admittance(&y, &mags, &angs)?;
    let kr = kron_reduce(&w)?;
    let volt: Vec<Complex64> = mags.iter().zip(&angs).map(|(&u, &a)| Complex64::from_polar(u, a)).collect();
    let s_full = nodal_power(&y.y, &volt);
    let kron_err = y
        .dynamic_indices()
        .iter()
        .enumerate()
        .map(|(r, &p)| (kr.y_red.row(r).iter().sum::<Complex64>() - s_full[p]).norm())
        .fold(0.0f64, f64::max);
    checks.push(Check::new("kron_power_conservation", kron_err, TOL_KRON, "reduced row sums vs full injections"));

    let trig = injected_power(net, &mags, &angs)?;
    let dual = trig.iter().zip(&s_full).map(|(a, b)| (a - b).norm()).fold(0.0f64, f64::max);
    checks.push(Check::new("dual_power_formula", dual, TOL_DUAL_POWER, "trigonometric sums vs V conj(YV)"));

    let roots = poly_roots(&char_poly(&s))?;
    let eigs = eigenvalues(&model.a)?;
    let cp = match_roots(&roots, &eigs, 1.0).unwrap_or(f64::INFINITY);
    checks.push(Check::new("charpoly_vs_eigenvalues", cp, TOL_CHARPOLY, "closed-form cubic vs assembled spectrum"));

    checks.push(zero_invariance_check(&model, input)?);
    checks.push(small_signal_check(net, input.avr, input.dispatch, input.pod)?);

    let all_pass = checks.iter().all(|c| c.pass);
    Ok(ValidationReport { checks, all_pass })
}

/// Proportional AVR in the simulator (`T_e = 0`) so that the nonlinear
/// right-hand side and the linear model describe the same system.
fn algebraic_avr(avr: &AvrParams) -> AvrParams {
    AvrParams { t_e: 0.0, ..avr.clone() }
}

fn jacobian_check(net: &NetworkModel, avr: &AvrParams, dispatch: &Dispatch, model: &StateSpaceModel) -> Result<Check> {
    let sim = Simulator::new(&Scenario::new(net.clone(), algebraic_avr(avr), *dispatch))?;
    let x0 = sim.initial_state();
    let inp = SegmentInputs::default();
    let f = |x: &[f64]| -> Result<Vec<f64>> {
        let mut full = x.to_vec();
        full.push(x0[3]);
        let dx = sim.derivative(&full, 0, &inp).ok_or(crate::Error::NonFinite("state derivative"))?;
        Ok(dx[..3].to_vec())
    };
    let jac = finite_difference_jacobian(&f, &x0[..3], 1e-6)?;
    let scale = model.a.amax();
    let err = (&jac - &model.a).amax() / scale;
    Ok(Check::new("jacobian_fd", err, TOL_JACOBIAN, "central differences of the nonlinear rhs vs A"))
}

fn zero_invariance_check(model: &StateSpaceModel, input: &ValidationInput) -> Result<Check> {
    let (ctrl, inp, out) = match input.pod {
        Some(p) => (p.controller.clone(), p.input.clone(), p.output.clone()),
        None => (
            crate::podctl::PodController::new(1.0, 1.0, 1.0)?,
            format!("P[{}]", input.control),
            format!("theta[{}]", input.measure),
        ),
    };
    let ctrl = if ctrl.k_pod == 0.0 { ctrl.with_gain(1.0) } else { ctrl };
    let cl = closed_loop(model, &ctrl, &inp, &out)?;
    let open = crate::zeroanalysis::zeros_numeric(model, &inp, &out)?;
    let (a, b, c, d) = cl.siso(&inp, &out)?;
    let closed = siso_zeros(&a, &b, &c, d)?;
    let (ZeroSet::Finite { zeros: zo, .. }, ZeroSet::Finite { zeros: zc, .. }) = (&open, &closed) else {
        let same = matches!((&open, &closed), (ZeroSet::IdenticallyZero, ZeroSet::IdenticallyZero));
        return Ok(Check::new(
            "zero_invariance_feedback",
            if same { 0.0 } else { f64::INFINITY },
            TOL_ZERO_INVARIANCE,
            "channel identically zero",
        ));
    };
    let worst = zo
        .iter()
        .map(|z| zc.iter().map(|w| (z - w).norm()).fold(f64::INFINITY, f64::min) / z.norm().max(1.0))
        .fold(0.0f64, f64::max);
    Ok(Check::new(
        "zero_invariance_feedback",
        worst,
        TOL_ZERO_INVARIANCE,
        format!("{} open-loop zeros located among {} closed-loop zeros", zo.len(), zc.len()),
    ))
}

/// Zero-order-hold discretisation `(Φ, Γ)` from the exponential of the
/// augmented matrix `[[A, b], [0, 0]] h`.
pub fn discretize(a: &DMatrix<f64>, b: &DVector<f64>, h: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = a.nrows();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(&(a * h));
    m.view_mut((0, n), (n, 1)).copy_from(&(b * h));
    let e = m.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, 1)).column(0).into_owned())
}

pub const PULSE_AMPLITUDE: f64 = 1e-4;

fn small_signal_check(net: &NetworkModel, avr: &AvrParams, dispatch: &Dispatch, pod: Option<&PodLoop>) -> Result<Check> {
    let machine = net.validate_smib()?.node.clone();
    let input = format!("Pm[{machine}]");
    let (start, duration, horizon, step) = (0.5, 0.1, 10.0, 1e-3);
    let mut sc = Scenario::new(net.clone(), algebraic_avr(avr), *dispatch);
    sc.pod = pod.cloned();
    sc.horizon = horizon;
    sc.step = step;
    sc.pulses = vec![Pulse { input: input.clone(), amplitude: PULSE_AMPLITUDE, start, duration }];
    let sim = Simulator::new(&sc)?;
    let trace = sim.run_from(None);
    if let Some(f) = &trace.failure {
        return Ok(Check::new("small_signal_linear_vs_nonlinear", f64::INFINITY, TOL_SMALL_SIGNAL, f.clone()));
    }
    let mut model = linearize(net, &sim.op, avr)?;
    if let Some(p) = pod {
        model = closed_loop(&model, &p.controller, &p.input, &p.output)?;
    }
    let k = model.input_index(&input)?;
    let b = model.b.column(k).into_owned();
    let (phi, gamma) = discretize(&model.a, &b, step);
    let mut x = DVector::zeros(model.n_states());
    let delta0 = trace.delta[0];
    let (mut peak, mut err) = (0.0f64, 0.0f64);
    for i in 1..trace.time.len() {
        let mid = 0.5 * (trace.time[i - 1] + trace.time[i]);
        let u = if mid >= start && mid < start + duration { PULSE_AMPLITUDE } else { 0.0 };
        x = &phi * &x + &gamma * u;
        let nl = trace.delta[i] - delta0;
        peak = peak.max(nl.abs());
        err = err.max((nl - x[0]).abs());
    }
    Ok(Check::new(
        "small_signal_linear_vs_nonlinear",
        if peak > 0.0 { err / peak } else { f64::INFINITY },
        TOL_SMALL_SIGNAL,
        format!("rotor angle, {PULSE_AMPLITUDE:e} pu mechanical power pulse, peak {peak:.3e} rad"),
    ))
}
