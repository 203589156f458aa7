//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one result line whether or not it passes.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smib_cli::scenario::Measurement;
use smib_cli::{design_loop, run_simulations, Context, Options};
use smib_core::linalg::eigenvalues;
use smib_core::lineariser::{linearize, smib_closed_form};
use smib_core::netmodel::solve_smib_steady_state;
use smib_core::podctl::closed_loop;
use smib_core::zeroanalysis::{
    catalog, compare_zero_sets, em_pair, omega_em, stability_check, zero_poly_p_theta, zero_poly_p_voltage,
    zeros_numeric, AnalyticZeros, PvAssumption, ZeroSet,
};
use smib_core::{
    AvrParams, Branch, Complex64, Dispatch, FieldSpec, LoopId, Machine, MachineParams, NetworkModel, Node, NodeKind,
    OperatingPoint, SmibMatrices, StateSpaceModel,
};

const ZERO_TOL: f64 = 1e-7;
const ZERO_RUNTIME_S: f64 = 60.0;
const KA_GRID: usize = 1000;
const PV_COEFF_TOL: f64 = 1e-8;
const PV_DOMINANT_TOL: f64 = 0.02;
const PV_OMEGA_FACTOR: f64 = 10.0;
const PV_ORDER_FACTOR: f64 = 3.0;
const FAR_ZERO_FACTOR: f64 = 1.5;
const ENDPOINT_TOL: f64 = 0.05;
const RINGDOWN_ZETA_MIN: f64 = 0.03;
const SIM_RUNTIME_S: f64 = 30.0;

type Outcome = Result<String, String>;

fn scenario_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/reference.scenario")
}

fn reference_context(out: &Path) -> Context {
    let opts = Options { out: Some(out.to_path_buf()), ..Options::default() };
    Context::load(&scenario_path(), &opts).expect("bundled scenario loads")
}

/// G -x'd- 1 -x12- 2 -x23- 3 -x3n- N.
fn chain(x: [f64; 3], params: MachineParams, e_n: f64) -> NetworkModel {
    NetworkModel {
        nodes: ["G", "1", "2", "3", "N"]
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let kind = match i {
                    0 => NodeKind::Machine,
                    4 => NodeKind::Infinite,
                    _ => NodeKind::Algebraic,
                };
                Node::new(*id, kind)
            })
            .collect(),
        branches: vec![
            Branch::reactance("l12", "1", "2", x[0]),
            Branch::reactance("l23", "2", "3", x[1]),
            Branch::reactance("l3n", "3", "N", x[2]),
        ],
        machines: vec![Machine { node: "G".into(), terminal: "1".into(), params }],
        e_n,
        f_nom: 60.0,
    }
}

struct Point {
    net: NetworkModel,
    avr: AvrParams,
    op: OperatingPoint,
    model: StateSpaceModel,
}

/// Draws until an admissible point comes out: solvable, `|δ| <= 1.2`,
/// load angles of one sign and bounded by `δ`.
fn draw(rng: &mut ChaCha8Rng, k_a: f64, typical_machine: bool) -> Point {
    loop {
        let params = if typical_machine {
            MachineParams::from_inertia(
                rng.gen_range(3.0..6.5),
                60.0,
                0.0,
                rng.gen_range(5.0..10.0),
                rng.gen_range(1.6..2.0),
                rng.gen_range(0.25..0.35),
            )
        } else {
            MachineParams::from_inertia(
                rng.gen_range(2.0..8.0),
                60.0,
                rng.gen_range(0.0..3.0 / (2.0 * std::f64::consts::PI * 60.0)),
                rng.gen_range(3.0..10.0),
                rng.gen_range(1.0..2.2),
                rng.gen_range(0.15..0.45),
            )
        };
        let x = [rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.4)];
        let net = chain(x, params, rng.gen_range(0.95..1.05));
        let p = if typical_machine { rng.gen_range(0.3..1.0) } else { rng.gen_range(-1.2..1.2) };
        let dispatch = Dispatch { p_e: p, field: FieldSpec::TerminalVoltage(rng.gen_range(0.95..1.1)) };
        let avr = AvrParams::new(k_a, "1");
        let Ok(op) = solve_smib_steady_state(&net, &dispatch, &avr) else { continue };
        let d = op.delta();
        let uniform = ["1", "2", "3"].iter().all(|id| op.load_angle(id).is_ok_and(|e| e * d >= 0.0 && e.abs() <= d.abs() + 1e-12));
        if d.abs() > 1.2 || !uniform {
            continue;
        }
        let Ok(model) = linearize(&net, &op, &avr) else { continue };
        return Point { net, avr, op, model };
    }
}

fn closed_form(p: &Point, measure: &str, control: &str) -> SmibMatrices {
    smib_closed_form(&p.net, &p.avr, &p.op, measure, control).expect("closed form")
}

fn em_mode(model: &StateSpaceModel, s: &SmibMatrices) -> Option<Complex64> {
    let eigs = eigenvalues(&model.a).ok()?;
    em_pair(&eigs, omega_em(s).ok()?).map(|p| p.0)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let gains = [0.0, 20.0, 50.0, 200.0];
    let (mut worst, mut worst_same) = (0.0f64, 0.0f64);
    for i in 0..500 {
        let p = draw(&mut rng, gains[i % gains.len()], false);
        let s = closed_form(&p, "2", "3");
        let cat = catalog(&p.model, &s, &LoopId::ALL).map_err(|e| e.to_string())?;
        for e in &cat.entries {
            let d = e.max_rel_deviation.filter(|d| d.is_finite()).ok_or(format!("point {i}: {:?} not comparable", e.loop_id))?;
            worst = worst.max(d);
        }
        // quadratic with measurement and injection on one bus
        let s = closed_form(&p, "2", "2");
        let q = zero_poly_p_voltage(&s, PvAssumption::SameBus).map_err(|e| e.to_string())?;
        let num = zeros_numeric(&p.model, "P[2]", "V[2]").map_err(|e| e.to_string())?;
        let d = compare_zero_sets(&AnalyticZeros::Zeros { zeros: q.zeros }, &num)
            .filter(|d| d.is_finite())
            .ok_or(format!("point {i}: same-bus quadratic not comparable"))?;
        worst_same = worst_same.max(d);
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let msg = format!("worst {worst:.2e} (six loops), {worst_same:.2e} (same-bus P-V) over 500 points in {elapsed:.1} s");
    if worst.max(worst_same) <= ZERO_TOL && elapsed <= ZERO_RUNTIME_S {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_2() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ctx = reference_context(dir.path());
    let d_m = ctx.network.machines[0].params.d_m;
    if d_m != 0.0 {
        return Err(format!("reference machine has D = {d_m}"));
    }
    let op = ctx.operating_point().map_err(|e| e.to_string())?;
    let k_max = 400.0;
    let (mut eig_side, mut cond_side) = (Vec::new(), Vec::new());
    for k in 0..KA_GRID {
        let avr = AvrParams::new(k_max * k as f64 / (KA_GRID - 1) as f64, "1");
        let model = linearize(&ctx.network, &op, &avr).map_err(|e| e.to_string())?;
        let s = smib_closed_form(&ctx.network, &avr, &op, "2", "3").map_err(|e| e.to_string())?;
        let em = em_mode(&model, &s).ok_or("no electromechanical pair")?;
        eig_side.push(em.re < 0.0);
        cond_side.push(stability_check(&s).map_err(|e| e.to_string())?.destab_cond.holds);
    }
    let flip = |v: &[bool]| v.windows(2).position(|w| w[0] != w[1]);
    let (Some(i), Some(j)) = (flip(&eig_side), flip(&cond_side)) else {
        return Err("no crossing on the K_A grid".into());
    };
    let step = k_max / (KA_GRID - 1) as f64;
    let msg = format!("eigenvalue crossing at K_A ~ {:.2}, condition at {:.2} (grid step {step:.3})", i as f64 * step, j as f64 * step);
    if i.abs_diff(j) <= 1 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Electromechanical real part and P-θ cubic verdict at AVR gain `k_a`.
fn gain_status(p: &Point, k_a: f64) -> Option<(Complex64, bool, StateSpaceModel)> {
    let avr = AvrParams::new(k_a, "1");
    let model = linearize(&p.net, &p.op, &avr).ok()?;
    let s = smib_closed_form(&p.net, &avr, &p.op, "2", "3").ok()?;
    let em = em_mode(&model, &s)?;
    Some((em, zero_poly_p_theta(&s).ok()?.hurwitz, model))
}

/// Bisects the gain where `pred` changes, given `pred(lo) != pred(hi)`.
fn boundary(p: &Point, (mut lo, mut hi): (f64, f64), pred: impl Fn(&(Complex64, bool, StateSpaceModel)) -> bool) -> Option<f64> {
    let at_lo = pred(&gain_status(p, lo)?);
    while hi - lo > 1e-10 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if pred(&gain_status(p, mid)?) == at_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn criterion_3() -> Outcome {
    // the AVR pushes the mode across the axis slightly before the zeros
    // cross; the witness sits between the two boundaries
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let step = 2.0;
    for attempt in 1..=500 {
        let p = draw(&mut rng, 0.0, false);
        let Some(k) = (0..200).map(|i| i as f64 * step).find(|&k| gain_status(&p, k).is_some_and(|st| st.0.re > 0.0)) else {
            continue;
        };
        if k == 0.0 || !gain_status(&p, k - step).is_some_and(|st| st.1) {
            continue;
        }
        let Some(k_mode) = boundary(&p, (k - step, k), |st| st.0.re > 0.0) else { continue };
        let Some(k_zero) = boundary(&p, (k - step, k + step), |st| st.1) else { continue };
        if k_zero <= k_mode {
            continue;
        }
        let k_a = 0.5 * (k_mode + k_zero);
        let Some((em, hurwitz, model)) = gain_status(&p, k_a) else { continue };
        let ZeroSet::Finite { zeros, .. } = zeros_numeric(&model, "P[3]", "theta[2]").map_err(|e| e.to_string())? else {
            continue;
        };
        let zero_margin = zeros.iter().map(|q| -q.re / q.norm()).fold(f64::INFINITY, f64::min);
        // both margins well above eigenvalue round-off
        if hurwitz && em.re > 1e-9 * em.norm() && zero_margin > 1e-9 {
            return Ok(format!(
                "draw {attempt}: K_A {k_a:.4} between mode boundary {k_mode:.4} and zero boundary {k_zero:.4}; \
                 mode {:.2e}{:+.4}j, slowest zero margin {zero_margin:.1e}",
                em.re, em.im
            ));
        }
    }
    Err("no unstable operating point with a Hurwitz P-theta cubic found".into())
}

fn criterion_4() -> Outcome {
    let mut notes = Vec::new();
    // terminal placement: coefficients do not depend on the AVR gain
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    let mut coeff_var = 0.0f64;
    for _ in 0..50 {
        let p = draw(&mut rng, 0.0, false);
        let mut first: Option<[f64; 4]> = None;
        for k in 0..=20 {
            let avr = AvrParams::new(10.0 * k as f64, "1");
            let s = smib_closed_form(&p.net, &avr, &p.op, "1", "1").map_err(|e| e.to_string())?;
            let z = zero_poly_p_voltage(&s, PvAssumption::Terminal).map_err(|e| e.to_string())?;
            let c = z.coeffs.map(|c| c / z.coeffs[1]);
            let f = *first.get_or_insert(c);
            for (a, b) in c.iter().zip(&f) {
                coeff_var = coeff_var.max((a - b).abs() / b.abs().max(1e-300));
            }
        }
    }
    notes.push(format!("coefficient variation {coeff_var:.1e}"));
    if coeff_var > PV_COEFF_TOL {
        return Err(notes.join("; "));
    }

    // dominant linear coefficient: the RHP zero sits at -α1
    let mut dominant = (0usize, 0.0f64);
    let mut order = (0usize, 0.0f64, f64::INFINITY);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0044);
    for _ in 0..300 {
        let p = draw(&mut rng, 200.0, true);
        let s = closed_form(&p, "1", "1");
        let z = zero_poly_p_voltage(&s, PvAssumption::Terminal).map_err(|e| e.to_string())?;
        let Some((a1, a2)) = z.alpha else { continue };
        let Some(rhp) = z.zeros.iter().filter(|q| q.re > 0.0).map(|q| q.re).reduce(f64::max) else {
            return Err(format!("no RHP zero at δ = {:.3}", s.delta));
        };
        if a1.abs() >= 10.0 * a2.abs().sqrt() {
            dominant.0 += 1;
            dominant.1 = dominant.1.max((rhp + a1).abs() / a1.abs());
        }
        let ratio = rhp / (-z.alpha1_terminal);
        order = (order.0 + 1, order.1.max(ratio), order.2.min(ratio));
    }
    notes.push(format!("dominant cases {} with worst |q + α1|/|α1| {:.2e}", dominant.0, dominant.1));
    notes.push(format!("zero/(E²T'do bΔ/M) in [{:.2}, {:.2}] over {} draws", order.2, order.1, order.0));
    if dominant.0 == 0 || dominant.1 > PV_DOMINANT_TOL || order.1 > PV_ORDER_FACTOR || order.2 < 1.0 / PV_ORDER_FACTOR {
        return Err(notes.join("; "));
    }

    // reference scenario: the RHP zero lies well above the mode
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ctx = reference_context(dir.path());
    let op = ctx.operating_point().map_err(|e| e.to_string())?;
    let s = smib_closed_form(&ctx.network, &ctx.avr, &op, "1", "1").map_err(|e| e.to_string())?;
    let z = zero_poly_p_voltage(&s, PvAssumption::Terminal).map_err(|e| e.to_string())?;
    let omega = omega_em(&s).map_err(|e| e.to_string())?;
    let rhp = z.zeros.iter().filter(|q| q.re > 0.0).map(|q| q.norm()).fold(0.0, f64::max);
    notes.push(format!("reference RHP zero {rhp:.1} rad/s = {:.1} Ω", rhp / omega));
    if rhp > PV_OMEGA_FACTOR * omega {
        Ok(notes.join("; "))
    } else {
        Err(notes.join("; "))
    }
}

fn criterion_5() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ctx = reference_context(dir.path());
    let op = ctx.operating_point().map_err(|e| e.to_string())?;
    let model = ctx.model(&op).map_err(|e| e.to_string())?;
    let (near, near_trace) = design_loop(&ctx, &op, &model, "2", Measurement::Theta, None).map_err(|e| e.to_string())?;
    let (far, _) = design_loop(&ctx, &op, &model, "3", Measurement::Theta, None).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    if near.mode.re <= 0.0 {
        problems.push(format!("open loop not destabilized ({})", near.mode));
    }
    let (g_lo, g_hi) = (near_trace.points.first().unwrap().gain, near_trace.points.last().unwrap().gain);
    let interior = near.best_gain > g_lo && near.best_gain < g_hi;
    let shape = smib_core::PodController::new(near.t1, near.t2, near.best_gain).map_err(|e| e.to_string())?;
    let cl = closed_loop(&model, &shape, &near.input, &near.output).map_err(|e| e.to_string())?;
    let stable = eigenvalues(&cl.a).map_err(|e| e.to_string())?.iter().all(|e| e.re < 0.0);
    if !(near.stabilizable && interior && stable && near.best_zeta > 0.0) {
        problems.push("near bus lacks a stable interior optimum".into());
    }
    let far_zero = match zeros_numeric(&model, &far.input, &far.output).map_err(|e| e.to_string())? {
        ZeroSet::Finite { zeros, .. } => zeros.into_iter().filter(|z| z.re > 0.0).map(|z| z.norm()).reduce(f64::min),
        ZeroSet::IdenticallyZero => None,
    };
    let within = far_zero.is_some_and(|z| z <= FAR_ZERO_FACTOR * far.mode.norm());
    if !within {
        problems.push(format!("far-bus RHP zero {far_zero:?} not within 1.5x of |λ| {:.3}", far.mode.norm()));
    }
    if far.stabilizable {
        problems.push("far bus stabilizable".into());
    }
    for l in [&near, &far] {
        if !l.endpoint_zero_distance.is_some_and(|d| d <= ENDPOINT_TOL) {
            problems.push(format!("bus {} endpoint {:?} not at a zero", l.bus, l.endpoint_zero_distance));
        }
    }
    let msg = format!(
        "bus 2: best ζ {:.4} at gain {:.4}; bus 3: no stabilizing gain, best ζ {:.4}, RHP zero {:.3} vs |λ| {:.3}; endpoints {:.1e}, {:.1e}",
        near.best_zeta,
        near.best_gain,
        far.best_zeta,
        far_zero.unwrap_or(f64::NAN),
        far.mode.norm(),
        near.endpoint_zero_distance.unwrap_or(f64::NAN),
        far.endpoint_zero_distance.unwrap_or(f64::NAN)
    );
    if problems.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; {}", problems.join("; ")))
    }
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ctx = reference_context(dir.path());
    let clearing = ctx.file.fault_spec().map(|f| f.3).ok_or("reference scenario has no fault sequence")?;
    if !(0.05..=0.3).contains(&clearing) {
        return Err(format!("clearing time {clearing} outside [0.05, 0.3]"));
    }
    let t0 = Instant::now();
    let (_, summary) = run_simulations(&ctx).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed().as_secs_f64();
    let get = |name: &str| summary.variants.iter().find(|v| v.variant == name).ok_or(format!("variant {name} missing"));
    let (c, a, p) = (get("constant_ef")?, get("avr")?, get("avr_pod")?);
    let mut problems = Vec::new();
    if c.first_swing_loss != Some(true) {
        problems.push("constant Ef keeps the first swing".to_string());
    }
    if !(a.first_swing_loss == Some(false) && a.loss_of_synchrony.is_some()) {
        problems.push("AVR variant does not diverge after the first swing".into());
    }
    let zeta = p.ringdown.as_ref().map(|r| r.zeta);
    if p.loss_of_synchrony.is_some() || p.failure.is_some() || !zeta.is_some_and(|z| z >= RINGDOWN_ZETA_MIN) {
        problems.push(format!("AVR+POD not bounded with ζ >= 0.03 ({zeta:?})"));
    }
    if elapsed > SIM_RUNTIME_S {
        problems.push(format!("runtime {elapsed:.1} s"));
    }
    let msg = format!(
        "clearing {clearing:.3} s: constant Ef lost at {:.3} s (first swing), AVR lost at {:.3} s, AVR+POD ringdown ζ {:.3}; {elapsed:.1} s",
        c.loss_of_synchrony.unwrap_or(f64::NAN),
        a.loss_of_synchrony.unwrap_or(f64::NAN),
        zeta.unwrap_or(f64::NAN)
    );
    if problems.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; {}", problems.join("; ")))
    }
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_smib"))
        .arg("validate")
        .arg(scenario_path())
        .arg("--out")
        .arg(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    let report = std::fs::read_to_string(dir.path().join("validation.json")).map_err(|e| e.to_string())?;
    let json: serde_json::Value = serde_json::from_str(&report).map_err(|e| e.to_string())?;
    let checks = json["checks"].as_array().ok_or("no checks")?;
    let want = [
        "jacobian_fd",
        "kron_power_conservation",
        "dual_power_formula",
        "charpoly_vs_eigenvalues",
        "zero_invariance_feedback",
        "small_signal_linear_vs_nonlinear",
    ];
    let mut parts = Vec::new();
    let mut ok = out.status.code() == Some(0);
    for name in want {
        match checks.iter().find(|c| c["name"] == name) {
            Some(c) => {
                let pass = c["pass"].as_bool() == Some(true);
                ok &= pass;
                parts.push(format!("{name} {:.1e}", c["value"].as_f64().unwrap_or(f64::NAN)));
            }
            None => {
                ok = false;
                parts.push(format!("{name} missing"));
            }
        }
    }
    let msg = format!("exit {:?}; {}", out.status.code(), parts.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("analytic-zero equivalence", criterion_1),
        ("AVR destabilization boundary", criterion_2),
        ("minimum phase though unstable", criterion_3),
        ("P-V non-minimum-phase structure", criterion_4),
        ("bus-dependent stabilizability", criterion_5),
        ("time-domain narrative", criterion_6),
        ("oracle suites via validate", criterion_7),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match r {
            Ok(m) => println!("criterion {} {name}: PASS ({m})", i + 1),
            Err(m) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({m})", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
