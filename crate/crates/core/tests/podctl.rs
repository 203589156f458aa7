mod common;

use common::*;
use num_complex::Complex64;
use proptest::prelude::*;
use smib_core::linalg::{eigenvalues, match_roots};
use smib_core::lineariser::{linearize, StateSpaceModel};
use smib_core::netmodel::solve_smib_steady_state;
use smib_core::podctl::{
    best_damping, closed_loop, controller_response, default_gain_grid, log_grid, residue, root_locus, tune_phase,
    LocusPoint, PodController, RootLocusTrace,
};
use smib_core::zeroanalysis::{em_pair, omega_em, zeros_numeric, SisoDynamics, ZeroSet};

const INPUT: &str = "P[3]";

fn reference_model() -> StateSpaceModel {
    let net = reference_network();
    let a = reference_avr();
    let op = solve_smib_steady_state(&net, &reference_dispatch(), &a).unwrap();
    linearize(&net, &op, &a).unwrap()
}

fn mode(model: &StateSpaceModel) -> Complex64 {
    eigenvalues(&model.a).unwrap().into_iter().max_by(|a, b| a.im.total_cmp(&b.im)).unwrap()
}

fn finite(z: ZeroSet) -> Vec<Complex64> {
    match z {
        ZeroSet::Finite { zeros, .. } => zeros,
        ZeroSet::IdenticallyZero => panic!("channel identically zero"),
    }
}

/// Residue-tuned unit-gain controller for the angle at `bus`.
fn tuned(model: &StateSpaceModel, bus: &str) -> (Complex64, Complex64, PodController) {
    let lambda = mode(model);
    let r = residue(model, INPUT, &format!("theta[{bus}]"), lambda).unwrap();
    let (t1, t2) = tune_phase(r, lambda).unwrap();
    (lambda, r, PodController::new(t1, t2, 1.0).unwrap())
}

#[test]
fn residue_matches_limit() {
    let model = reference_model();
    let lambda = mode(&model);
    let g = SisoDynamics::new(&model, INPUT, "theta[2]").unwrap();
    let r = residue(&model, INPUT, "theta[2]", lambda).unwrap();
    // symmetric difference cancels the first-order term
    let eps = 1e-5 * lambda.norm();
    let lim = |h: Complex64| h * g.eval(lambda + h).unwrap();
    let est = 0.5 * (lim(Complex64::new(eps, 0.0)) + lim(Complex64::new(-eps, 0.0)));
    assert!((est - r).norm() <= 1e-6 * r.norm(), "{est} vs {r}");
}

#[test]
fn residues_sum_to_first_markov_parameter() {
    let model = reference_model();
    for out in ["theta[2]", "V[2]", "theta[3]"] {
        let (_, b, c, _) = model.siso(INPUT, out).unwrap();
        let sum: Complex64 =
            eigenvalues(&model.a).unwrap().iter().map(|&l| residue(&model, INPUT, out, l).unwrap()).sum();
        let cb = c.dot(&b);
        let scale = c.amax() * b.amax();
        assert!((sum - cb).norm() <= 1e-8 * scale, "{out}: {sum} vs {cb}");
    }
}

#[test]
fn tuned_controller_pushes_mode_left() {
    let model = reference_model();
    for bus in ["2", "3"] {
        let (lambda, r, k) = tuned(&model, bus);
        assert!((k.t1 * k.t2 - lambda.norm_sqr()).abs() <= 1e-9 * lambda.norm_sqr());
        let shift = -r * controller_response(&k, lambda).unwrap();
        assert!(shift.im.abs() <= 1e-6 * shift.norm(), "bus {bus}: {shift}");
        assert!(shift.re < 0.0);
    }
}

#[test]
fn first_order_pole_motion() {
    let model = reference_model();
    let (lambda, r, k) = tuned(&model, "2");
    let predicted_unit = -r * controller_response(&k, lambda).unwrap();
    let gain = 1e-3 * lambda.norm() / predicted_unit.norm();
    let cl = closed_loop(&model, &k.with_gain(gain), INPUT, "theta[2]").unwrap();
    let eigs = eigenvalues(&cl.a).unwrap();
    let moved = *eigs.iter().min_by(|a, b| (*a - lambda).norm().total_cmp(&(*b - lambda).norm())).unwrap();
    let (actual, predicted) = (moved - lambda, predicted_unit * gain);
    assert!((actual - predicted).norm() <= 0.05 * predicted.norm(), "{actual} vs {predicted}");
}

#[test]
fn zero_gain_adds_controller_poles_only() {
    let model = reference_model();
    let (_, _, k) = tuned(&model, "2");
    let cl = closed_loop(&model, &k.with_gain(0.0), INPUT, "theta[2]").unwrap();
    let mut want = eigenvalues(&model.a).unwrap();
    want.extend(k.poles());
    let got = eigenvalues(&cl.a).unwrap();
    assert!(match_roots(&got, &want, 1.0).unwrap() <= 1e-6);
}

#[test]
fn feedback_does_not_move_channel_zeros() {
    let model = reference_model();
    for bus in ["2", "3"] {
        let out = format!("theta[{bus}]");
        let (_, _, k) = tuned(&model, bus);
        let open = finite(zeros_numeric(&model, INPUT, &out).unwrap());
        for gain in [0.05, 0.3, 5.0] {
            let cl = closed_loop(&model, &k.with_gain(gain), INPUT, &out).unwrap();
            let closed = finite(zeros_numeric(&cl, INPUT, &out).unwrap());
            assert_eq!(closed.len(), open.len() + 4);
            for z in &open {
                let d = closed.iter().map(|q| (q - z).norm()).fold(f64::INFINITY, f64::min);
                assert!(d <= 1e-8 * z.norm().max(1.0), "bus {bus} gain {gain}: {z} off by {d:e}");
            }
            // the rest are the controller poles
            let mut extra: Vec<Complex64> = closed
                .iter()
                .copied()
                .filter(|q| open.iter().all(|z| (q - z).norm() > 1e-8 * z.norm().max(1.0)))
                .collect();
            extra.sort_by(|a, b| a.re.total_cmp(&b.re));
            assert!(match_roots(&extra, &k.poles(), 1.0).unwrap() <= 1e-4);
        }
    }
}

#[test]
fn locus_starts_at_open_loop_pair_and_stays_conjugate_closed() {
    let model = reference_model();
    let (lambda, _, k) = tuned(&model, "2");
    let mut gains = vec![0.0];
    gains.extend(log_grid(1e-2, 1e3, 60));
    let trace = root_locus(&model, &k, INPUT, "theta[2]", lambda, &gains).unwrap();
    assert!((trace.points[0].tracked - lambda).norm() <= 1e-9 * lambda.norm());
    for p in &trace.points {
        let scale = p.eigenvalues.iter().map(|e| e.norm()).fold(1.0, f64::max);
        for e in &p.eigenvalues {
            let d = p.eigenvalues.iter().map(|q| (q - e.conj()).norm()).fold(f64::INFINITY, f64::min);
            assert!(d <= 1e-9 * scale, "gain {}: {e}", p.gain);
        }
    }
}

#[test]
fn best_gain_stable_under_grid_refinement() {
    let model = reference_model();
    let (lambda, _, k) = tuned(&model, "2");
    let coarse = root_locus(&model, &k, INPUT, "theta[2]", lambda, &default_gain_grid()).unwrap();
    let fine = root_locus(&model, &k, INPUT, "theta[2]", lambda, &log_grid(1e-2, 1e3, 400)).unwrap();
    assert!(rel(coarse.best_gain, fine.best_gain) <= 1e-3, "{} vs {}", coarse.best_gain, fine.best_gain);
    assert!((coarse.best_zeta - fine.best_zeta).abs() <= 1e-3);
    assert!(coarse.stabilizable && coarse.crossing_gain.is_some());
}

#[test]
fn unsorted_grid_rejected() {
    let model = reference_model();
    let (lambda, _, k) = tuned(&model, "2");
    assert!(root_locus(&model, &k, INPUT, "theta[2]", lambda, &[1.0, 0.5]).is_err());
    assert!(root_locus(&model, &k, INPUT, "theta[2]", lambda, &[]).is_err());
}

#[test]
fn phase_beyond_one_section_rejected() {
    let lambda = Complex64::new(-0.1, 5.0);
    // a residue that needs roughly 180 degrees of lead
    let r = -controller_response(&PodController::new(5.0, 5.0, 1.0).unwrap(), lambda).unwrap().conj();
    assert!(tune_phase(r, lambda).is_err());
    assert!(tune_phase(Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)).is_err());
}

fn synthetic(zetas: &[f64]) -> RootLocusTrace {
    let points = zetas
        .iter()
        .enumerate()
        .map(|(i, &z)| LocusPoint {
            gain: 10f64.powf(i as f64 / 4.0 - 2.0),
            eigenvalues: vec![],
            tracked: Complex64::new(-z, 1.0),
            zeta: z,
            stable: true,
            split: false,
        })
        .collect();
    RootLocusTrace {
        start: Complex64::new(0.0, 1.0),
        points,
        crossing_gain: None,
        best_gain: 0.0,
        best_zeta: 0.0,
        stabilizable: true,
    }
}

#[test]
fn monotone_decreasing_trace_returns_first_gain() {
    let t = synthetic(&[0.3, 0.2, 0.1, 0.05, 0.0]);
    assert_eq!(best_damping(&t, None), (t.points[0].gain, 0.3));
}

#[test]
fn symmetric_unimodal_trace_returns_peak() {
    let t = synthetic(&[0.1, 0.2, 0.3, 0.4, 0.3, 0.2, 0.1]);
    assert_eq!(best_damping(&t, None), (t.points[3].gain, 0.4));
    // a smooth peak centred on the grid point refines onto itself
    let peak = t.points[3].gain.ln();
    let f = |g: f64| Ok(0.4 - 0.01 * (g.ln() - peak).powi(2));
    let (g, z) = best_damping(&t, Some(&f));
    assert!(rel(g, t.points[3].gain) <= 1e-3 && (z - 0.4).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 40, ..ProptestConfig::default() })]

    #[test]
    fn small_gain_moves_mode_left(sm in sample(), k_a in 0.0..200.0f64) {
        let case = sm.build(k_a, "2", "3");
        prop_assume!(case.is_some());
        let case = case.unwrap();
        let model = case.model;
        let eigs = eigenvalues(&model.a).unwrap();
        let lambda = omega_em(&case.smib).ok().and_then(|w| em_pair(&eigs, w));
        prop_assume!(lambda.is_some_and(|l| l.0.im > 0.0));
        let lambda = lambda.unwrap().0;
        let r = residue(&model, INPUT, "theta[2]", lambda).unwrap();
        prop_assume!(r.norm() > 1e-9);
        let tuning = tune_phase(r, lambda);
        prop_assume!(tuning.is_ok());
        let (t1, t2) = tuning.unwrap();
        let shift = -r * controller_response(&PodController::new(t1, t2, 1.0).unwrap(), lambda).unwrap();
        prop_assert!(shift.re < 0.0 && shift.im.abs() <= 1e-6 * shift.norm());
    }
}
