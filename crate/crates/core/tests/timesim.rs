mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use smib_core::lineariser::linearize;
use smib_core::netmodel::{Dispatch, FieldSpec};
use smib_core::timesim::{
    critical_clearing_time, damping_estimate, detect_loss_of_synchrony, fault_events, lost_in_first_swing, simulate,
    Pulse, Scenario, SegmentInputs, Simulator, SynchronyCriterion,
};
use smib_core::zeroanalysis::damping_ratio;
use smib_core::{linalg::eigenvalues, AvrParams};

fn reference() -> Scenario {
    Scenario::new(reference_network(), reference_avr(), reference_dispatch())
}

fn faulted(mut sc: Scenario, clearing: f64) -> Scenario {
    sc.events = fault_events("2", "c2", 1.0, clearing);
    sc
}

fn max_dev(series: &[f64]) -> f64 {
    series.iter().map(|v| (v - series[0]).abs()).fold(0.0, f64::max)
}

#[test]
fn equilibrium_is_a_fixed_point() {
    let sim = Simulator::new(&reference()).unwrap();
    let dx = sim.derivative(&sim.initial_state(), 0, &SegmentInputs::default()).unwrap();
    assert!(dx.iter().all(|v| v.abs() <= 1e-10), "{dx:?}");
}

#[test]
fn undisturbed_run_stays_flat() {
    let tr = simulate(&reference()).unwrap();
    assert!(tr.failure.is_none());
    assert_eq!(*tr.time.last().unwrap(), 10.0);
    for s in ["delta", "omega", "eq", "ef", "V[2]", "theta[3]"] {
        assert!(max_dev(tr.series(s).unwrap()) <= 1e-8, "{s}");
    }
    assert_eq!(detect_loss_of_synchrony(&tr), None);
}

#[test]
fn mechanical_step_accelerates_at_dp_over_m() {
    let sc = Scenario::new(reference_network(), AvrParams::new(0.0, "1"), reference_dispatch());
    let sim = Simulator::new(&sc).unwrap();
    let inp = SegmentInputs { d_pm: 0.05, ..SegmentInputs::default() };
    let dx = sim.derivative(&sim.initial_state(), 0, &inp).unwrap();
    let m = sc.network.machines[0].params.m;
    assert!(rel(dx[1], 0.05 / m) <= 1e-9, "{} vs {}", dx[1], 0.05 / m);
}

#[test]
fn halving_the_step_converges() {
    let run = |h: f64| {
        let mut sc = faulted(reference(), 0.1);
        sc.horizon = 4.0;
        sc.step = h;
        simulate(&sc).unwrap().final_state().unwrap()
    };
    let (a, b) = (run(1e-3), run(5e-4));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-6, "{a:?} vs {b:?}");
    }
}

#[test]
fn classical_model_conserves_energy() {
    let params = smib_core::MachineParams::from_inertia(3.5, 60.0, 0.0, 8.0, 1.81, 0.3);
    let net = chain(0.15, 0.4, 0.1, params.clone());
    let mut sc = Scenario::new(net, AvrParams::new(0.0, "1"), Dispatch { p_e: 0.7, field: FieldSpec::TerminalVoltage(1.0) });
    sc.freeze_flux = true;
    let sim = Simulator::new(&sc).unwrap();
    let mut x0 = sim.initial_state();
    x0[0] += 0.4;
    let tr = sim.run_from(Some(x0));
    let b = 1.0 / (0.3 + 0.15 + 0.4 + 0.1);
    let e_q = tr.e_q[0];
    let energy: Vec<f64> = (0..tr.time.len())
        .map(|i| 0.5 * params.m * tr.omega[i].powi(2) - sim.p_m * tr.delta[i] - b * e_q * 1.0 * tr.delta[i].cos())
        .collect();
    assert!(max_dev(tr.series("omega").unwrap()) > 0.1, "swing too small to mean anything");
    assert!(max_dev(&energy) <= 1e-6, "{:e}", max_dev(&energy));
}

/// Linear response by the same fixed-step scheme on `x' = A x + b u(t)`.
fn linear_response(a: &DMatrix<f64>, b: &DVector<f64>, u: impl Fn(f64) -> f64, h: f64, n: usize) -> Vec<DVector<f64>> {
    let mut x = DVector::zeros(a.nrows());
    let mut out = vec![x.clone()];
    for k in 0..n {
        // input constant over each step, matching segment inputs
        let uk = u((k as f64 + 0.5) * h);
        let f = |x: &DVector<f64>| a * x + b * uk;
        let k1 = f(&x);
        let k2 = f(&(&x + &k1 * (h / 2.0)));
        let k3 = f(&(&x + &k2 * (h / 2.0)));
        let k4 = f(&(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        out.push(x.clone());
    }
    out
}

#[test]
fn small_pulse_matches_linear_model() {
    // algebraic AVR so both models carry the same dynamics
    let a = AvrParams::new(50.0, "1");
    let mut sc = Scenario::new(reference_network(), a.clone(), reference_dispatch());
    sc.pulses = vec![Pulse { input: "P[3]".into(), amplitude: 1e-4, start: 0.5, duration: 0.1 }];
    let sim = Simulator::new(&sc).unwrap();
    let tr = sim.run_from(None);
    let model = linearize(&sc.network, &sim.op, &a).unwrap();
    let (_, b, _, _) = model.siso("P[3]", "theta[2]").unwrap();
    let lin = linear_response(&model.a, &b, |t| if (0.5..0.6).contains(&t) { 1e-4 } else { 0.0 }, sc.step, tr.time.len() - 1);
    let d0 = tr.delta[0];
    let peak = tr.delta.iter().map(|d| (d - d0).abs()).fold(0.0, f64::max);
    let err = tr.delta.iter().zip(&lin).map(|(d, x)| (d - d0 - x[0]).abs()).fold(0.0, f64::max);
    assert!(peak > 0.0 && err <= 0.01 * peak, "err {err:e} peak {peak:e}");
}

#[test]
fn ringdown_damping_matches_eigenvalue() {
    let a = AvrParams::new(0.0, "1");
    let mut sc = Scenario::new(reference_network(), a.clone(), reference_dispatch());
    sc.horizon = 20.0;
    sc.pulses = vec![Pulse { input: "Pm[G]".into(), amplitude: 1e-3, start: 0.2, duration: 0.1 }];
    let sim = Simulator::new(&sc).unwrap();
    let tr = sim.run_from(None);
    let model = linearize(&sc.network, &sim.op, &a).unwrap();
    let em = eigenvalues(&model.a).unwrap().into_iter().max_by(|x, y| x.im.total_cmp(&y.im)).unwrap();
    let zeta = damping_ratio(em);
    assert!(zeta > 0.0 && zeta < 0.1, "{zeta}");
    let est = damping_estimate(&tr.time, &tr.omega, 0.5).unwrap();
    assert!(est.peaks >= 5);
    assert!((est.zeta - zeta).abs() <= 0.1 * zeta, "{} vs {zeta}", est.zeta);
    assert!((est.omega_d - em.im).abs() <= 0.02 * em.im);
}

#[test]
fn states_continuous_across_events() {
    let tr = simulate(&faulted(reference(), 0.1)).unwrap();
    let h = 1e-3;
    for &(te, _) in &tr.events {
        let i = tr.time.iter().position(|&t| (t - te).abs() < 1e-12).unwrap();
        // exactly one sample lands on the event
        assert_eq!(tr.time.iter().filter(|&&t| (t - te).abs() < 1e-12).count(), 1);
        for s in ["delta", "omega", "eq"] {
            let x = tr.series(s).unwrap();
            let step = |k: usize| (x[k + 1] - x[k]).abs();
            let around = (i.saturating_sub(10)..i + 10).filter(|&k| k != i).map(step).fold(0.0, f64::max);
            assert!(step(i) <= 2.0 * around + 1e-12, "{s} at {te}");
        }
        let d = &tr.delta;
        assert!((d[i + 1] - d[i]).abs() <= h * tr.omega[i].abs().max(tr.omega[i + 1].abs()) * 1.5 + 1e-12);
    }
    // the faulted bus voltage does jump
    let v = tr.series("V[2]").unwrap();
    let i = tr.time.iter().position(|&t| t == 1.0).unwrap();
    assert!(v[i] - v[i + 1] > 0.5);
}

#[test]
fn constant_field_loses_first_swing_and_avr_survives_it() {
    let mut constant = reference();
    let e_f = Simulator::new(&constant).unwrap().op.e_f();
    constant.avr = AvrParams::new(0.0, "1");
    constant.dispatch.field = FieldSpec::FieldVoltage(e_f);
    let tr = simulate(&faulted(constant, 0.1)).unwrap();
    assert!(detect_loss_of_synchrony(&tr).is_some());
    assert_eq!(lost_in_first_swing(&tr), Some(true));

    let tr = simulate(&faulted(reference(), 0.1)).unwrap();
    assert_ne!(lost_in_first_swing(&tr), Some(true));
}

#[test]
fn avr_extends_critical_clearing_time() {
    let mut constant = reference();
    let e_f = Simulator::new(&constant).unwrap().op.e_f();
    constant.avr = AvrParams::new(0.0, "1");
    constant.dispatch.field = FieldSpec::FieldVoltage(e_f);
    let cct = |sc: &Scenario| {
        critical_clearing_time(sc, "2", "c2", 1.0, (0.01, 0.3), 8, 1e-3, SynchronyCriterion::FirstSwing).unwrap()
    };
    let (c0, c1) = (cct(&constant).unwrap(), cct(&reference()).unwrap());
    assert!(c1 > c0, "{c1} vs {c0}");
}

#[test]
fn invalid_scenarios_rejected() {
    let mut sc = reference();
    sc.events = fault_events("2", "c2", 1.0, 0.1);
    sc.events.reverse();
    assert!(simulate(&sc).is_err());
    let mut sc = reference();
    sc.step = 0.0;
    assert!(simulate(&sc).is_err());
    let mut sc = reference();
    sc.events = fault_events("2", "nope", 1.0, 0.1);
    assert!(simulate(&sc).is_err());
}
