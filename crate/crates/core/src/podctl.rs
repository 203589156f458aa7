//! Power-oscillation-damping controller: residue-based phase tuning,
//! closed-loop assembly, root loci and damping optimisation.
//!
//! The controller is `K(s) = (s+T1)/(s+T2) · s · (100/(s+100))² · s/(s+1/1.5) · K_POD`
//! with `T1`, `T2` corner frequencies in rad/s, fed back negatively:
//! `u = -K(s) y`. Under that sign a small gain moves a simple pole by
//! `Δλ = -R K(λ)`, where `R` is the channel residue.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eigenvalues, null_vector, to_complex};
use crate::lineariser::StateSpaceModel;
use crate::zeroanalysis::damping_ratio;

/// Low-pass corner (rad/s), applied twice.
pub const LOWPASS: f64 = 100.0;
/// Washout corner `1/1.5` rad/s.
pub const WASHOUT: f64 = 1.0 / 1.5;
/// Largest phase one lead-lag section is asked to provide.
pub const MAX_SECTION_PHASE_DEG: f64 = 80.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PodController {
    /// Lead-lag zero corner (rad/s).
    pub t1: f64,
    /// Lead-lag pole corner (rad/s).
    pub t2: f64,
    pub k_pod: f64,
}

impl PodController {
    pub fn new(t1: f64, t2: f64, k_pod: f64) -> Result<Self> {
        let c = Self { t1, t2, k_pod };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t2 > 0.0) || !self.t1.is_finite() {
            return Err(Error::InvalidParameter("lead-lag needs T2 > 0 and finite T1".into()));
        }
        if !(self.k_pod >= 0.0) {
            return Err(Error::InvalidParameter("K_POD must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_gain(&self, k_pod: f64) -> Self {
        Self { k_pod, ..self.clone() }
    }

    /// Controller poles: `-T2`, `-100` (twice), `-1/1.5`.
    pub fn poles(&self) -> [Complex64; 4] {
        [-WASHOUT, -self.t2, -LOWPASS, -LOWPASS].map(|p| Complex64::new(p, 0.0))
    }

    /// Series realisation `(A_k, B_k, C_k)`, `D_k = 0`, unit gain. Blocks in
    /// order: washout, lead-lag, differentiating low-pass, low-pass.
    pub fn realization(&self) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        // (pole, zero-or-None, numerator gain); None marks a strictly proper block
        let blocks: [(f64, Option<f64>, f64); 4] =
            [(WASHOUT, Some(0.0), 1.0), (self.t2, Some(self.t1), 1.0), (LOWPASS, Some(0.0), LOWPASS), (LOWPASS, None, LOWPASS)];
        let mut a = DMatrix::zeros(4, 4);
        let mut b = DVector::zeros(4);
        // block input as (row of state coefficients, coefficient of the loop input)
        let mut in_x = DVector::<f64>::zeros(4);
        let mut in_u = 1.0;
        for (i, &(p, z, g)) in blocks.iter().enumerate() {
            // x' = -p x + input
            a[(i, i)] -= p;
            for j in 0..4 {
                a[(i, j)] += in_x[j];
            }
            b[i] += in_u;
            // output = g·((z - p) x + input) or g·x
            let mut out_x = DVector::zeros(4);
            let out_u;
            match z {
                Some(z) => {
                    out_x = &in_x * g;
                    out_x[i] += g * (z - p);
                    out_u = g * in_u;
                }
                None => {
                    out_x[i] = g;
                    out_u = 0.0;
                }
            }
            in_x = out_x;
            in_u = out_u;
        }
        debug_assert!(in_u == 0.0, "controller must be strictly proper");
        (a, b, in_x)
    }
}

/// Fixed part of `K(s)`: differentiator, low-pass pair and washout.
pub fn structure_response(s: Complex64) -> Result<Complex64> {
    guard_pole(s, LOWPASS)?;
    guard_pole(s, WASHOUT)?;
    let lp = LOWPASS / (s + LOWPASS);
    Ok(s * lp * lp * s / (s + WASHOUT))
}

fn guard_pole(s: Complex64, p: f64) -> Result<()> {
    if (s + p).norm() <= 1e-12 * p.max(1.0) {
        return Err(Error::AtPole(format!("{s}")));
    }
    Ok(())
}

pub fn lead_lag(t1: f64, t2: f64, s: Complex64) -> Result<Complex64> {
    guard_pole(s, t2)?;
    Ok((s + t1) / (s + t2))
}

/// `K(s)` including the gain.
pub fn controller_response(c: &PodController, s: Complex64) -> Result<Complex64> {
    Ok(lead_lag(c.t1, c.t2, s)? * structure_response(s)? * c.k_pod)
}

/// Residue of the channel at the simple pole nearest `lambda`:
/// `R = (c v)(wᵀ b) / (wᵀ v)` with right/left eigenvectors `v`, `w`.
pub fn residue(model: &StateSpaceModel, input: &str, output: &str, lambda: Complex64) -> Result<Complex64> {
    let (a, b, c, _) = model.siso(input, output)?;
    residue_abc(&a, &b, &c, lambda)
}

pub const CLUSTER_TOL: f64 = 1e-8;

pub fn residue_abc(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>, lambda: Complex64) -> Result<Complex64> {
    let eigs = eigenvalues(a)?;
    let (idx, _) = eigs
        .iter()
        .enumerate()
        .map(|(i, z)| (i, (z - lambda).norm()))
        .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
        .ok_or(Error::Empty("state matrix"))?;
    let lam = eigs[idx];
    if eigs.iter().enumerate().any(|(i, z)| i != idx && (z - lam).norm() <= CLUSTER_TOL) {
        return Err(Error::ClusteredPole(format!("{lam}")));
    }
    let n = a.nrows();
    let shift = |m: DMatrix<Complex64>| {
        let mut m = m;
        for i in 0..n {
            m[(i, i)] -= lam;
        }
        m
    };
    let ac = to_complex(a);
    let v = null_vector(&shift(ac.clone()));
    let w = null_vector(&shift(ac.transpose()));
    let cv: Complex64 = c.iter().zip(v.iter()).map(|(&ci, &vi)| vi * ci).sum();
    let wb: Complex64 = w.iter().zip(b.iter()).map(|(&wi, &bi)| wi * bi).sum();
    let wv: Complex64 = w.iter().zip(v.iter()).map(|(&wi, &vi)| wi * vi).sum();
    if wv.norm() == 0.0 {
        return Err(Error::ClusteredPole(format!("{lam}")));
    }
    Ok(cv * wb / wv)
}

fn wrap(phi: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut p = phi % two_pi;
    if p > std::f64::consts::PI {
        p -= two_pi;
    } else if p <= -std::f64::consts::PI {
        p += two_pi;
    }
    p
}

/// Lead-lag phase the loop needs at `lambda` so that `-R K(λ)` is a
/// negative real number.
pub fn required_phase(r: Complex64, lambda: Complex64) -> Result<f64> {
    Ok(wrap(-(r * structure_response(lambda)?).arg()))
}

/// Corner frequencies with `T1 T2 = |λ|²` giving the required phase at `λ`.
pub fn tune_phase(r: Complex64, lambda: Complex64) -> Result<(f64, f64)> {
    if !(lambda.im > 0.0) {
        return Err(Error::InvalidParameter("tuning needs an eigenvalue with positive imaginary part".into()));
    }
    let phi = required_phase(r, lambda)?;
    if phi.abs() > MAX_SECTION_PHASE_DEG.to_radians() {
        return Err(Error::PhaseOutOfRange { required_deg: phi.to_degrees(), limit_deg: MAX_SECTION_PHASE_DEG });
    }
    let w = lambda.norm();
    let phase_at = |x: f64| ((lambda + w * x.exp()) / (lambda + w * (-x).exp())).arg();
    // phase decreases monotonically in x = ln(T1/|λ|)
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    if phi == 0.0 {
        return Ok((w, w));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phase_at(mid) > phi {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let x = 0.5 * (lo + hi);
    Ok((w * x.exp(), w * (-x).exp()))
}

/// Plant with the controller closed around `input`/`output`, keeping all
/// original channels. Four controller states `pod1..pod4` are appended.
pub fn closed_loop(model: &StateSpaceModel, c: &PodController, input: &str, output: &str) -> Result<StateSpaceModel> {
    c.validate()?;
    let (i, o) = (model.input_index(input)?, model.output_index(output)?);
    let (ak, bk, ck) = c.realization();
    let ck = ck * c.k_pod;
    let n = model.n_states();
    let nk = ak.nrows();
    let bi = model.b.column(i).into_owned();
    let co = model.c.row(o).transpose();
    let d_oi = model.d[(o, i)];
    let mut a = DMatrix::zeros(n + nk, n + nk);
    a.view_mut((0, 0), (n, n)).copy_from(&model.a);
    a.view_mut((0, n), (n, nk)).copy_from(&(-&bi * ck.transpose()));
    a.view_mut((n, 0), (nk, n)).copy_from(&(&bk * co.transpose()));
    a.view_mut((n, n), (nk, nk)).copy_from(&(&ak - &bk * ck.transpose() * d_oi));
    let mut b = DMatrix::zeros(n + nk, model.b.ncols());
    b.view_mut((0, 0), (n, model.b.ncols())).copy_from(&model.b);
    b.view_mut((n, 0), (nk, model.b.ncols())).copy_from(&(&bk * model.d.row(o)));
    let mut cm = DMatrix::zeros(model.c.nrows(), n + nk);
    cm.view_mut((0, 0), (model.c.nrows(), n)).copy_from(&model.c);
    cm.view_mut((0, n), (model.c.nrows(), nk)).copy_from(&(-model.d.column(i) * ck.transpose()));
    let mut states = model.states.clone();
    states.extend((1..=nk).map(|k| format!("pod{k}")));
    Ok(StateSpaceModel {
        a,
        b,
        c: cm,
        d: model.d.clone(),
        states,
        inputs: model.inputs.clone(),
        outputs: model.outputs.clone(),
        op: model.op.clone(),
    })
}

/// `n` log-spaced gains in `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

pub fn default_gain_grid() -> Vec<f64> {
    log_grid(1e-2, 1e3, 200)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocusPoint {
    pub gain: f64,
    pub eigenvalues: Vec<Complex64>,
    /// Tracked electromechanical eigenvalue (upper half plane).
    pub tracked: Complex64,
    pub zeta: f64,
    /// All closed-loop eigenvalues in the open left half plane.
    pub stable: bool,
    /// Another eigenvalue lies within 1e-9 of the tracked one.
    pub split: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootLocusTrace {
    pub start: Complex64,
    pub points: Vec<LocusPoint>,
    /// Gain where the tracked path crosses the imaginary axis.
    pub crossing_gain: Option<f64>,
    pub best_gain: f64,
    pub best_zeta: f64,
    /// Some gain on the grid yields a fully stable closed loop.
    pub stabilizable: bool,
}

/// One controlled channel with a fixed controller shape.
#[derive(Clone, Debug)]
pub struct LoopDesign {
    pub model: StateSpaceModel,
    pub shape: PodController,
    pub input: String,
    pub output: String,
    /// Open-loop electromechanical eigenvalue, upper half plane.
    pub start: Complex64,
}

const TRACK_JUMP: f64 = 0.05;

impl LoopDesign {
    pub fn eigenvalues_at(&self, gain: f64) -> Result<Vec<Complex64>> {
        let cl = closed_loop(&self.model, &self.shape.with_gain(gain), &self.input, &self.output)?;
        eigenvalues(&cl.a)
    }

    fn nearest_upper(eigs: &[Complex64], prev: Complex64) -> Complex64 {
        *eigs
            .iter()
            .filter(|z| z.im >= 0.0)
            .min_by(|x, y| (*x - prev).norm().partial_cmp(&(*y - prev).norm()).unwrap())
            .unwrap_or(&prev)
    }

    /// Continues the tracked eigenvalue from `(g0, z0)` to gain `g1`,
    /// subdividing in log-gain when the step jumps too far.
    fn track(&self, g0: f64, z0: Complex64, g1: f64, depth: u32) -> Result<(Complex64, Vec<Complex64>)> {
        let eigs = self.eigenvalues_at(g1)?;
        let z1 = Self::nearest_upper(&eigs, z0);
        if depth < 10 && (z1 - z0).norm() > TRACK_JUMP * z0.norm().max(1.0) {
            let gm = if g0 <= 0.0 { 0.5 * g1 } else { (g0 * g1).sqrt() };
            let (zm, _) = self.track(g0, z0, gm, depth + 1)?;
            let z1 = Self::nearest_upper(&eigs, zm);
            return Ok((z1, eigs));
        }
        Ok((z1, eigs))
    }

    pub fn root_locus(&self, gains: &[f64]) -> Result<RootLocusTrace> {
        if gains.is_empty() {
            return Err(Error::Empty("gain grid"));
        }
        if gains.windows(2).any(|w| !(w[1] > w[0])) || gains[0] < 0.0 {
            return Err(Error::InvalidParameter("gain grid must be ascending and non-negative".into()));
        }
        // closed-loop spectra are independent across the grid
        let spectra: Vec<Vec<Complex64>> =
            gains.par_iter().map(|&g| self.eigenvalues_at(g)).collect::<Result<_>>()?;
        let mut points = Vec::with_capacity(gains.len());
        let (mut g_prev, mut z_prev) = (0.0, self.start);
        for (&g, eigs) in gains.iter().zip(spectra) {
            let mut z = Self::nearest_upper(&eigs, z_prev);
            if (z - z_prev).norm() > TRACK_JUMP * z_prev.norm().max(1.0) {
                z = self.track(g_prev, z_prev, g, 0)?.0;
            }
            let split = eigs.iter().filter(|e| (**e - z).norm() <= 1e-9).count() > 1;
            points.push(LocusPoint {
                gain: g,
                stable: eigs.iter().all(|e| e.re < 0.0),
                tracked: z,
                zeta: damping_ratio(z),
                split,
                eigenvalues: eigs,
            });
            g_prev = g;
            z_prev = z;
        }
        let points = self.refine_crossings(points)?;
        let crossing_gain = self.crossing_gain(&points)?;
        let stabilizable = points.iter().any(|p| p.stable);
        let mut trace = RootLocusTrace {
            start: self.start,
            points,
            crossing_gain,
            best_gain: 0.0,
            best_zeta: 0.0,
            stabilizable,
        };
        let (g, z) = best_damping(&trace, Some(&|g: f64| self.zeta_near(&trace_snapshot(&trace), g)));
        trace.best_gain = g;
        trace.best_zeta = z;
        Ok(trace)
    }

    /// Inserts three log-spaced gains inside each interval where the
    /// tracked path changes half plane.
    fn refine_crossings(&self, points: Vec<LocusPoint>) -> Result<Vec<LocusPoint>> {
        let mut out: Vec<LocusPoint> = Vec::with_capacity(points.len());
        for p in points {
            if let Some(prev) = out.last().cloned() {
                if (prev.tracked.re < 0.0) != (p.tracked.re < 0.0) && prev.gain > 0.0 {
                    let (mut gz, mut zz) = (prev.gain, prev.tracked);
                    for k in 1..4 {
                        let g = prev.gain * (p.gain / prev.gain).powf(k as f64 / 4.0);
                        let (z, eigs) = self.track(gz, zz, g, 0)?;
                        out.push(LocusPoint {
                            gain: g,
                            stable: eigs.iter().all(|e| e.re < 0.0),
                            tracked: z,
                            zeta: damping_ratio(z),
                            split: eigs.iter().filter(|e| (**e - z).norm() <= 1e-9).count() > 1,
                            eigenvalues: eigs,
                        });
                        gz = g;
                        zz = z;
                    }
                }
            }
            out.push(p);
        }
        Ok(out)
    }

    /// First axis crossing of the tracked path, bisected in log-gain.
    fn crossing_gain(&self, points: &[LocusPoint]) -> Result<Option<f64>> {
        let start_side = self.start.re < 0.0;
        let Some(k) = points.iter().position(|p| (p.tracked.re < 0.0) != start_side) else {
            return Ok(None);
        };
        if k == 0 {
            return Ok(Some(points[0].gain));
        }
        let (mut lo, mut hi) = (points[k - 1].gain, points[k].gain);
        let mut z_lo = points[k - 1].tracked;
        if lo <= 0.0 {
            return Ok(Some(hi));
        }
        for _ in 0..40 {
            let mid = (lo * hi).sqrt();
            let (z, _) = self.track(lo, z_lo, mid, 0)?;
            if (z.re < 0.0) == start_side {
                lo = mid;
                z_lo = z;
            } else {
                hi = mid;
            }
            if hi / lo - 1.0 < 1e-9 {
                break;
            }
        }
        Ok(Some((lo * hi).sqrt()))
    }

    fn zeta_near(&self, snapshot: &[(f64, Complex64)], gain: f64) -> Result<f64> {
        let (g0, z0) = snapshot
            .iter()
            .min_by(|a, b| (a.0.ln() - gain.ln()).abs().partial_cmp(&(b.0.ln() - gain.ln()).abs()).unwrap())
            .copied()
            .ok_or(Error::Empty("trace"))?;
        let (z, _) = self.track(g0, z0, gain, 0)?;
        Ok(damping_ratio(z))
    }
}

fn trace_snapshot(t: &RootLocusTrace) -> Vec<(f64, Complex64)> {
    t.points.iter().filter(|p| p.gain > 0.0).map(|p| (p.gain, p.tracked)).collect()
}

/// Root locus of the tracked electromechanical eigenvalue nearest `start`.
pub fn root_locus(
    model: &StateSpaceModel,
    shape: &PodController,
    input: &str,
    output: &str,
    start: Complex64,
    gains: &[f64],
) -> Result<RootLocusTrace> {
    LoopDesign {
        model: model.clone(),
        shape: shape.clone(),
        input: input.into(),
        output: output.into(),
        start: if start.im < 0.0 { start.conj() } else { start },
    }
    .root_locus(gains)
}

/// Grid argmax of `ζ` along the tracked path; with `refine`, a golden-section
/// search in log-gain between the neighbouring grid points to 1e-3 relative.
pub fn best_damping(trace: &RootLocusTrace, refine: Option<&dyn Fn(f64) -> Result<f64>>) -> (f64, f64) {
    let pts = &trace.points;
    if pts.is_empty() {
        return (0.0, f64::NAN);
    }
    let (k, best) = pts
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, p)| if p.zeta > acc.1 { (i, p.zeta) } else { acc });
    let interior = k > 0 && k + 1 < pts.len() && pts[k - 1].gain > 0.0;
    let Some(f) = refine.filter(|_| interior) else {
        return (pts[k].gain, best);
    };
    let (mut a, mut b) = (pts[k - 1].gain.ln(), pts[k + 1].gain.ln());
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let eval = |x: f64| f(x.exp()).unwrap_or(f64::NEG_INFINITY);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (eval(x1), eval(x2));
    while b - a > 1e-4 {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = eval(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = eval(x2);
        }
    }
    let (x, fx) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
    if fx >= best {
        (x.exp(), fx)
    } else {
        (pts[k].gain, best)
    }
}

impl RootLocusTrace {
    /// `gain,re,im,zeta` of the tracked path.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gain,re,im,zeta\n");
        for p in &self.points {
            out.push_str(&format!("{:.16e},{:.16e},{:.16e},{:.16e}\n", p.gain, p.tracked.re, p.tracked.im, p.zeta));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    pub fn endpoint(&self) -> Option<Complex64> {
        self.points.last().map(|p| p.tracked)
    }
}
