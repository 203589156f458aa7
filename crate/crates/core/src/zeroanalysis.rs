//! Poles, transmission zeros and the closed-form zero expressions of the
//! SMIB loops.
//!
//! Numeric zeros come from a structure-preserving deflation of the SISO
//! system matrix pencil: while the feed-through vanishes, an orthogonal
//! transform folds the input direction into one state, which then acts as
//! the input of a system one order smaller. Once the feed-through is
//! nonzero the finite zeros are the eigenvalues of `A - b c / d`.
//!
//! Closed forms keep the machine damping term `a22`; with `D_m = 0` they
//! reduce to the textbook expressions.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{channel_response, eigenvalues, match_roots, poly_roots, polyval};
use crate::lineariser::{SmibMatrices, StateSpaceModel};

/// Zeros above this magnitude are treated as infinite.
pub const INFINITE_ZERO: f64 = 1e12;
/// `sin ε` or `cos ε` below this is a singular point of a closed form.
pub const TRIG_SINGULAR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZeroSet {
    Finite { zeros: Vec<Complex64>, gain: f64 },
    /// The channel transfer function vanishes identically.
    IdenticallyZero,
}

#[derive(Clone, Debug)]
pub struct SisoDynamics {
    pub input: String,
    pub output: String,
    pub poles: Vec<Complex64>,
    pub zeros: ZeroSet,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub d: f64,
}

impl SisoDynamics {
    pub fn new(model: &StateSpaceModel, input: &str, output: &str) -> Result<Self> {
        let (a, b, c, d) = model.siso(input, output)?;
        Ok(Self {
            input: input.to_string(),
            output: output.to_string(),
            poles: eigenvalues(&a)?,
            zeros: siso_zeros(&a, &b, &c, d)?,
            a,
            b,
            c,
            d,
        })
    }

    /// `G(s)` from the pole/zero/gain form.
    pub fn eval_zpk(&self, s: Complex64) -> Complex64 {
        match &self.zeros {
            ZeroSet::IdenticallyZero => Complex64::new(0.0, 0.0),
            ZeroSet::Finite { zeros, gain } => {
                let num: Complex64 = zeros.iter().map(|z| s - z).product();
                let den: Complex64 = self.poles.iter().map(|p| s - p).product();
                num / den * *gain
            }
        }
    }

    /// `G(s) = c (sI - A)^{-1} b + d`.
    pub fn eval(&self, s: Complex64) -> Option<Complex64> {
        channel_response(&self.a, &self.b, &self.c, self.d, s)
    }
}

pub fn poles(model: &StateSpaceModel) -> Result<Vec<Complex64>> {
    eigenvalues(&model.a)
}

pub fn zeros_numeric(model: &StateSpaceModel, input: &str, output: &str) -> Result<ZeroSet> {
    let (a, b, c, d) = model.siso(input, output)?;
    siso_zeros(&a, &b, &c, d)
}

/// Invariant zeros and high-frequency gain of `(A, b, c, d)`.
pub fn siso_zeros(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>, d: f64) -> Result<ZeroSet> {
    let scale = a.amax().max(1.0);
    let mut a = a.clone();
    let mut b = b.clone();
    let mut c = c.clone();
    let mut d = d;
    let mut gain = 1.0;
    let tiny = 1e-14;
    let b_ref = b.amax().max(f64::MIN_POSITIVE);
    let c_ref = c.amax().max(f64::MIN_POSITIVE);
    loop {
        let n = a.nrows();
        let (nb, nc) = (b.norm(), c.norm());
        let strictly_proper_scale = nb * nc / scale;
        let d_counts = d != 0.0 && strictly_proper_scale <= INFINITE_ZERO * d.abs();
        if d_counts {
            let mut abcd = a.clone();
            abcd -= &b * c.transpose() / d;
            let zeros = eigenvalues(&abcd)?
                .into_iter()
                .filter(|z| z.norm() <= INFINITE_ZERO)
                .collect();
            return Ok(ZeroSet::Finite { zeros, gain: gain * d });
        }
        if n == 0 || nb <= tiny * b_ref || nc <= tiny * c_ref {
            return Ok(ZeroSet::IdenticallyZero);
        }
        // Householder reflector with H b = β e_n
        let last = n - 1;
        let beta = if b[last] >= 0.0 { -nb } else { nb };
        let mut v = b.clone();
        v[last] -= beta;
        let vv = v.dot(&v);
        let h = if vv == 0.0 {
            DMatrix::identity(n, n)
        } else {
            DMatrix::identity(n, n) - &v * v.transpose() * (2.0 / vv)
        };
        let at = &h * &a * &h;
        let ct = h.transpose() * &c;
        gain *= beta;
        a = at.view((0, 0), (last, last)).into_owned();
        b = at.view((0, last), (last, 1)).column(0).into_owned();
        d = ct[last];
        c = ct.rows(0, last).into_owned();
    }
}

// ---------------------------------------------------------------------------
// Closed forms
// ---------------------------------------------------------------------------

/// `p(s)` coefficients, highest degree first.
pub fn char_poly(s: &SmibMatrices) -> [f64; 4] {
    [
        1.0,
        s.a22 + s.a33,
        s.a22 * s.a33 + s.a21,
        s.a21 * s.a33 - s.a23 * s.a31,
    ]
}

/// `Ω`, the undamped electromechanical frequency.
pub fn omega_em(s: &SmibMatrices) -> Result<f64> {
    let c = s.delta.cos();
    if c <= 0.0 {
        return Err(Error::BeyondStaticLimit { requested: s.delta, limit: std::f64::consts::FRAC_PI_2 });
    }
    Ok((s.b_sigma / s.m * s.e_q * s.e_n * c).sqrt())
}

pub fn damping_ratio(l: Complex64) -> f64 {
    if l.norm() == 0.0 {
        0.0
    } else {
        -l.re / l.norm()
    }
}

/// Electromechanical pair among `eigs`: the complex pair with smallest
/// `||λ| - Ω|`, ties toward larger imaginary part. Without complex pairs,
/// the two roots closest to `±jΩ`. Returned with nonnegative imaginary
/// part first.
pub fn em_pair(eigs: &[Complex64], omega: f64) -> Option<(Complex64, Complex64)> {
    let key = |z: &Complex64| (z.norm() - omega).abs();
    let upper: Vec<&Complex64> = eigs.iter().filter(|z| z.im > 0.0).collect();
    if let Some(best) = upper.iter().copied().min_by(|x, y| {
        key(x).partial_cmp(&key(y)).unwrap().then(y.im.partial_cmp(&x.im).unwrap())
    }) {
        return Some((*best, best.conj()));
    }
    let mut real: Vec<Complex64> = eigs.to_vec();
    if real.len() < 2 {
        return None;
    }
    let target = Complex64::new(0.0, omega);
    real.sort_by(|x, y| (x - target).norm().partial_cmp(&(y - target).norm()).unwrap());
    let (x, y) = (real[0], real[1]);
    Some(if x.re >= y.re { (x, y) } else { (y, x) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub holds: bool,
    /// Left side minus right side of the inequality.
    pub margin: f64,
}

impl Criterion {
    fn from_margin(margin: f64) -> Self {
        Self { holds: margin > 0.0, margin }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub eigenvalues: Vec<Complex64>,
    pub omega: f64,
    pub em_pair: Option<[Complex64; 2]>,
    pub damping_ratio: Option<f64>,
    /// AVR/network interaction does not flip the sign of `a31`.
    pub destab_cond: Criterion,
    /// Constant term of `p(s)` positive.
    pub constant_term: Criterion,
    /// Routh condition including machine damping.
    pub stab_with_damping: Criterion,
    /// `a23 a31 > 0`.
    pub stab_no_damping: Criterion,
    pub hurwitz: bool,
    /// `|δ*| ≤ 1.2` and `K_A ≥ 20`.
    pub within_validity_region: bool,
}

impl StabilityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

pub const VALIDITY_MAX_DELTA: f64 = 1.2;
pub const VALIDITY_MIN_KA: f64 = 20.0;

pub fn stability_check(s: &SmibMatrices) -> Result<StabilityReport> {
    let eigs = eigenvalues(&s.a())?;
    let omega = omega_em(s).unwrap_or(f64::NAN);
    let pair = em_pair(&eigs, if omega.is_nan() { 0.0 } else { omega });
    let (sd, se1) = (s.delta.sin(), s.eps[0].sin());
    let destab = (s.b_sigma / s.b_delta * s.e_n * sd).abs() - (s.k_a * s.beta[0] * s.e_q * se1).abs();
    let constant = s.beta[0] * s.k_a * (s.delta.cos() * s.eps[0].cos() + sd * se1)
        + (s.b_delta + s.b_sigma) / s.b_delta * (s.delta.cos() - s.e_n / s.e_q * sd * sd);
    let with_damp = s.a22 * (s.a22 * s.a33 + s.a21 + s.a33 * s.a33) + s.a23 * s.a31;
    Ok(StabilityReport {
        hurwitz: eigs.iter().all(|z| z.re < 0.0),
        eigenvalues: eigs,
        omega,
        em_pair: pair.map(|(x, y)| [x, y]),
        damping_ratio: pair.map(|(x, _)| damping_ratio(x)),
        destab_cond: Criterion::from_margin(destab),
        constant_term: Criterion::from_margin(constant),
        stab_with_damping: Criterion::from_margin(with_damp),
        stab_no_damping: Criterion::from_margin(s.a23 * s.a31),
        within_validity_region: s.delta.abs() <= VALIDITY_MAX_DELTA && s.k_a >= VALIDITY_MIN_KA,
    })
}

/// Closed-form zeros of one loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticZeros {
    Zeros { zeros: Vec<Complex64> },
    /// Singular trigonometric point: the zeros escape to infinity along
    /// the real axis in the given direction (0 for a symmetric pair).
    AtInfinity { direction: f64 },
    Unobservable,
}

impl AnalyticZeros {
    pub fn finite(&self) -> &[Complex64] {
        match self {
            Self::Zeros { zeros } => zeros,
            _ => &[],
        }
    }
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<Complex64> {
    // a s² + b s + c, a ≠ 0
    let disc = b * b - 4.0 * a * c;
    if disc >= 0.0 {
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
        let mut v = vec![Complex64::new(r1, 0.0), Complex64::new(r2, 0.0)];
        v.sort_by(|x, y| y.re.partial_cmp(&x.re).unwrap());
        v
    } else {
        let re = -b / (2.0 * a);
        let im = (-disc).sqrt() / (2.0 * a.abs());
        vec![Complex64::new(re, im), Complex64::new(re, -im)]
    }
}

/// `(θ2, u_pss)`: roots of `s² + a22 s + a21 - E cot ε2 a23`.
pub fn zero_pss_theta(s: &SmibMatrices) -> AnalyticZeros {
    if s.beta[1] == 0.0 {
        return AnalyticZeros::Unobservable;
    }
    let se = s.eps[1].sin();
    if se.abs() < TRIG_SINGULAR {
        return AnalyticZeros::AtInfinity { direction: 0.0 };
    }
    let k = s.a21 - s.e_q * s.eps[1].cos() / se * s.a23;
    AnalyticZeros::Zeros { zeros: quadratic_roots(1.0, s.a22, k) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoltagePssZeros {
    pub zeros: AnalyticZeros,
    /// Pair within 5 % of `Ω`.
    pub near_mode: bool,
}

/// `(V2, u_pss)`: roots of `s² + a22 s + a21 + E tan ε2 a23`.
pub fn zero_pss_voltage(s: &SmibMatrices) -> VoltagePssZeros {
    let omega = omega_em(s).unwrap_or(f64::NAN);
    if s.beta[1] == 0.0 {
        return VoltagePssZeros { zeros: AnalyticZeros::Unobservable, near_mode: false };
    }
    let ce = s.eps[1].cos();
    if ce.abs() < TRIG_SINGULAR {
        return VoltagePssZeros { zeros: AnalyticZeros::AtInfinity { direction: 0.0 }, near_mode: false };
    }
    let k = s.a21 + s.e_q * s.eps[1].sin() / ce * s.a23;
    let zeros = quadratic_roots(1.0, s.a22, k);
    let near_mode = zeros.iter().all(|z| ((z.norm() - omega) / omega).abs() <= 0.05);
    VoltagePssZeros { zeros: AnalyticZeros::Zeros { zeros }, near_mode }
}

/// `(θ2, P_m)`: `q = -a33 + tan ε2 a31 / E`.
pub fn zero_gov_theta(s: &SmibMatrices) -> AnalyticZeros {
    if s.beta[1] == 0.0 {
        return AnalyticZeros::Unobservable;
    }
    let ce = s.eps[1].cos();
    if ce.abs() < TRIG_SINGULAR {
        let direction = (s.eps[1].sin() * ce.signum() * s.a31).signum();
        return AnalyticZeros::AtInfinity { direction };
    }
    let q = -s.a33 + s.eps[1].sin() / ce * s.a31 / s.e_q;
    AnalyticZeros::Zeros { zeros: vec![Complex64::new(q, 0.0)] }
}

/// `(V2, P_m)`: `q = -a33 - cot ε2 a31 / E`.
pub fn zero_gov_voltage(s: &SmibMatrices) -> AnalyticZeros {
    if s.beta[1] == 0.0 {
        return AnalyticZeros::Unobservable;
    }
    let se = s.eps[1].sin();
    if se.abs() < TRIG_SINGULAR {
        // cot ε2 diverges with the sign of ε2, or of δ at ε2 = 0
        let sgn = if se != 0.0 { se.signum() } else { s.delta.sin().signum() };
        return AnalyticZeros::AtInfinity { direction: -(sgn * s.a31).signum() };
    }
    let q = -s.a33 - s.eps[1].cos() / se * s.a31 / s.e_q;
    AnalyticZeros::Zeros { zeros: vec![Complex64::new(q, 0.0)] }
}

/// Numerator of `c_θ x + d u` for the input column `[0, b2, b3]`, output
/// row `[c1, 0, c3]` and feed-through `d`; highest degree first.
pub fn injection_zero_poly(s: &SmibMatrices, c1: f64, c3: f64, d: f64) -> [f64; 4] {
    let (b2, b3) = (s.b2, s.b3);
    [
        d,
        d * (s.a22 + s.a33) + c3 * b3,
        d * (s.a22 * s.a33 + s.a21) + c1 * b2 + c3 * s.a22 * b3,
        d * (s.a21 * s.a33 - s.a23 * s.a31) + c1 * s.a33 * b2 - c1 * s.a23 * b3 + c3 * s.a21 * b3
            - c3 * s.a31 * b2,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PThetaZeros {
    /// Raw zero polynomial (leading coefficient `d`).
    pub coeffs: [f64; 4],
    /// Monic normalization; absent when `d = 0`.
    pub monic: Option<[f64; 4]>,
    pub zeros: Vec<Complex64>,
    pub hurwitz: bool,
    pub cond1: Criterion,
    /// Primary verdict: signed condition under uniform load-angle signs.
    pub cond2: Criterion,
    /// Summary form with absolute values; absent when `d = 0`.
    pub destab_cond_sum: Option<Criterion>,
    /// `cond2` and the summary form disagree.
    pub summary_disagrees: bool,
    pub em_zero_pair: Option<[Complex64; 2]>,
    /// `|q_em| ≥ Ω`.
    pub em_pair_above_omega: Option<bool>,
    /// `sqrt(b'_12 E² cos δ / M)`.
    pub approx_imag: f64,
}

pub fn zero_poly_p_theta(s: &SmibMatrices) -> Result<PThetaZeros> {
    let coeffs = injection_zero_poly(s, s.c1, s.c3, s.d);
    let zeros = poly_roots(&coeffs)?;
    let omega = omega_em(s).unwrap_or(f64::NAN);
    let monic = (s.d != 0.0).then(|| coeffs.map(|c| c / s.d));
    let cond1 = (s.c3 * s.b2 + s.d * s.a23) * (s.c1 * s.b3 + s.d * s.a31);
    let cond2 = s.delta.sin() * (s.c1 * s.b3 + s.d * s.a31);
    let sum = (s.d != 0.0).then(|| {
        (s.t_do / s.d * s.c1 * s.b3 + s.b_sigma / s.b_delta * s.e_n * s.delta.sin()).abs()
            - (s.k_a * s.beta[0] * s.e_q * s.eps[0].sin()).abs()
    });
    let destab_cond_sum = sum.map(Criterion::from_margin);
    let pair = zeros
        .iter()
        .filter(|z| z.im > 0.0)
        .max_by(|x, y| x.im.partial_cmp(&y.im).unwrap())
        .map(|z| [*z, z.conj()]);
    Ok(PThetaZeros {
        coeffs,
        monic,
        hurwitz: zeros.iter().all(|z| z.re < 0.0),
        em_pair_above_omega: pair.map(|p| p[0].norm() >= omega),
        em_zero_pair: pair,
        zeros,
        cond1: Criterion::from_margin(cond1),
        cond2: Criterion::from_margin(cond2),
        summary_disagrees: destab_cond_sum.as_ref().is_some_and(|c| c.holds != (cond2 > 0.0)),
        destab_cond_sum,
        approx_imag: (s.b_prime_12 / s.m * s.e_q * s.e_q * s.delta.cos()).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PvAssumption {
    /// No simplification: full cubic with `d'`.
    None,
    /// Control and measurement at the same bus.
    SameBus,
    /// Both at the machine terminal (the AVR node).
    Terminal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PVoltageZeros {
    pub assumption: PvAssumption,
    /// Raw numerator, highest degree first (cubic; leading `d'`).
    pub coeffs: [f64; 4],
    /// `(α1, α2)` of the normalized quadratic under the same-bus assumption.
    pub alpha: Option<(f64, f64)>,
    pub zeros: Vec<Complex64>,
    /// `-E² T'do b_Δ / M`.
    pub alpha1_terminal: f64,
    /// `-E² (b_Σ + b_Δ) / M`.
    pub alpha2_approx: f64,
    /// Same-bus approximation at the control node.
    pub q_same_bus: Option<f64>,
    /// Separated-bus approximation `E² T'do b_Δ / M · tan ε2 / tan ε3`.
    pub q_separated: Option<f64>,
    pub nmp_zeros: Vec<Complex64>,
    /// Smallest RHP zero over `Ω`.
    pub nmp_over_omega: Option<f64>,
}

const SAME_BUS_TOL: f64 = 1e-12;

pub fn zero_poly_p_voltage(s: &SmibMatrices, assumption: PvAssumption) -> Result<PVoltageZeros> {
    match assumption {
        PvAssumption::None => {}
        PvAssumption::SameBus => {
            if s.eps_23.abs() > SAME_BUS_TOL || s.nodes[1] != s.nodes[2] && s.d_v.abs() > SAME_BUS_TOL {
                return Err(Error::InvalidParameter("same-bus assumption needs θ2 = θ3".into()));
            }
        }
        PvAssumption::Terminal => {
            if s.eps_23.abs() > SAME_BUS_TOL || s.eps_13.abs() > SAME_BUS_TOL {
                return Err(Error::InvalidParameter("terminal assumption needs θ1 = θ2 = θ3".into()));
            }
        }
    }
    let d_v = if assumption == PvAssumption::None { s.d_v } else { 0.0 };
    let coeffs = injection_zero_poly(s, s.c1_v, s.c3_v, d_v);
    let zeros = poly_roots(&coeffs)?;
    let alpha = (d_v == 0.0 && coeffs[1] != 0.0).then(|| (coeffs[2] / coeffs[1], coeffs[3] / coeffs[1]));
    let k = s.e_q * s.e_q * s.t_do * s.b_delta / s.m;
    let (s2, s3) = (s.eps[1].sin(), s.eps[2].sin());
    let b3_avr = s.b3_avr;
    let same_den = s3 - b3_avr;
    let q_same_bus = (same_den.abs() >= TRIG_SINGULAR).then(|| k * s3 / same_den);
    let (t2, t3) = (s.eps[1].tan(), s.eps[2].tan());
    let q_separated = (t3.abs() >= TRIG_SINGULAR && s2.is_finite()).then(|| k * t2 / t3);
    let omega = omega_em(s).unwrap_or(f64::NAN);
    let nmp_zeros: Vec<Complex64> = zeros.iter().filter(|z| z.re > 0.0).copied().collect();
    let nmp_over_omega = nmp_zeros
        .iter()
        .map(|z| z.norm())
        .min_by(|a, b| a.partial_cmp(b).unwrap())
        .map(|m| m / omega);
    Ok(PVoltageZeros {
        assumption,
        coeffs,
        alpha,
        zeros,
        alpha1_terminal: -k,
        alpha2_approx: -s.e_q * s.e_q * (s.b_sigma + s.b_delta) / s.m,
        q_same_bus,
        q_separated,
        nmp_zeros,
        nmp_over_omega,
    })
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoopId {
    #[serde(rename = "theta2_upss")]
    ThetaPss,
    #[serde(rename = "V2_upss")]
    VoltagePss,
    #[serde(rename = "theta2_Pm")]
    ThetaGov,
    #[serde(rename = "V2_Pm")]
    VoltageGov,
    #[serde(rename = "theta2_P3")]
    ThetaP,
    #[serde(rename = "V2_P3")]
    VoltageP,
}

impl LoopId {
    pub const ALL: [LoopId; 6] =
        [Self::ThetaPss, Self::VoltagePss, Self::ThetaGov, Self::VoltageGov, Self::ThetaP, Self::VoltageP];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ThetaPss => "theta2_upss",
            Self::VoltagePss => "V2_upss",
            Self::ThetaGov => "theta2_Pm",
            Self::VoltageGov => "V2_Pm",
            Self::ThetaP => "theta2_P3",
            Self::VoltageP => "V2_P3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }

    /// Input and output labels; the PSS loops use the field-voltage column,
    /// which differs from `upss` only by the factor `K_A`.
    pub fn channel(self, machine: &str, measure: &str, control: &str) -> (String, String) {
        let theta = format!("theta[{measure}]");
        let volt = format!("V[{measure}]");
        match self {
            Self::ThetaPss => (format!("Ef[{machine}]"), theta),
            Self::VoltagePss => (format!("Ef[{machine}]"), volt),
            Self::ThetaGov => (format!("Pm[{machine}]"), theta),
            Self::VoltageGov => (format!("Pm[{machine}]"), volt),
            Self::ThetaP => (format!("P[{control}]"), theta),
            Self::VoltageP => (format!("P[{control}]"), volt),
        }
    }

    pub fn analytic(self, s: &SmibMatrices) -> Result<AnalyticZeros> {
        Ok(match self {
            Self::ThetaPss => zero_pss_theta(s),
            Self::VoltagePss => zero_pss_voltage(s).zeros,
            Self::ThetaGov => zero_gov_theta(s),
            Self::VoltageGov => zero_gov_voltage(s),
            Self::ThetaP => {
                if s.beta[1] == 0.0 {
                    AnalyticZeros::Unobservable
                } else {
                    AnalyticZeros::Zeros { zeros: zero_poly_p_theta(s)?.zeros }
                }
            }
            Self::VoltageP => {
                if s.beta[1] == 0.0 {
                    AnalyticZeros::Unobservable
                } else {
                    AnalyticZeros::Zeros { zeros: zero_poly_p_voltage(s, PvAssumption::None)?.zeros }
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub loop_id: LoopId,
    pub input: String,
    pub output: String,
    pub analytic: AnalyticZeros,
    pub numeric: ZeroSet,
    /// Worst relative analytic/numeric distance over matched zeros.
    pub max_rel_deviation: Option<f64>,
    pub nmp: bool,
    /// Distance from the nearest zero to the electromechanical pole.
    pub distance_to_mode: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroCatalog {
    pub omega: Option<f64>,
    pub em_pole: Option<Complex64>,
    pub entries: Vec<CatalogEntry>,
}

/// Analytic/numeric distance floor for zeros at the origin.
pub const ZERO_ABS_FLOOR: f64 = 1e-2;

pub fn compare_zero_sets(analytic: &AnalyticZeros, numeric: &ZeroSet) -> Option<f64> {
    match (analytic, numeric) {
        (AnalyticZeros::Zeros { zeros }, ZeroSet::Finite { zeros: num, .. }) => match_roots(zeros, num, ZERO_ABS_FLOOR),
        (AnalyticZeros::Unobservable, ZeroSet::IdenticallyZero) => Some(0.0),
        (AnalyticZeros::AtInfinity { .. }, ZeroSet::Finite { zeros: num, .. }) => {
            // the escaping pair is absent from the finite set
            Some(if num.is_empty() { 0.0 } else { f64::NAN })
        }
        _ => None,
    }
}

pub fn catalog(model: &StateSpaceModel, s: &SmibMatrices, loops: &[LoopId]) -> Result<ZeroCatalog> {
    if model.n_states() == 0 {
        return Ok(ZeroCatalog { omega: None, em_pole: None, entries: Vec::new() });
    }
    let omega = omega_em(s).ok();
    let eigs = poles(model)?;
    let em_pole = omega.and_then(|w| em_pair(&eigs, w)).map(|p| p.0);
    let machine = model.op.machines[0].id.clone();
    let entries = loops
        .iter()
        .map(|&l| -> Result<CatalogEntry> {
            let (input, output) = l.channel(&machine, &s.nodes[1], &s.nodes[2]);
            let analytic = l.analytic(s)?;
            let numeric = match model.output_index(&output) {
                Ok(_) => zeros_numeric(model, &input, &output)?,
                Err(_) => ZeroSet::IdenticallyZero,
            };
            let zs: &[Complex64] = match &numeric {
                ZeroSet::Finite { zeros, .. } => zeros,
                ZeroSet::IdenticallyZero => &[],
            };
            Ok(CatalogEntry {
                loop_id: l,
                max_rel_deviation: compare_zero_sets(&analytic, &numeric),
                nmp: zs.iter().any(|z| z.re > 0.0),
                distance_to_mode: em_pole
                    .and_then(|p| zs.iter().map(|z| (z - p).norm()).min_by(|a, b| a.partial_cmp(b).unwrap())),
                input,
                output,
                analytic,
                numeric,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ZeroCatalog { omega, em_pole, entries })
}

/// Catalog entry for a measurement taken at the infinite bus, whose
/// voltage phasor is fixed.
pub fn infinite_bus_entry(loop_id: LoopId, machine: &str, infinite: &str, control: &str) -> CatalogEntry {
    let (input, output) = loop_id.channel(machine, infinite, control);
    CatalogEntry {
        loop_id,
        input,
        output,
        analytic: AnalyticZeros::Unobservable,
        numeric: ZeroSet::IdenticallyZero,
        max_rel_deviation: Some(0.0),
        nmp: false,
        distance_to_mode: None,
    }
}

impl ZeroCatalog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// One row per zero: `loop,source,index,re,im,nmp,max_rel_deviation`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("loop,source,index,re,im,nmp,max_rel_deviation\n");
        let fmt = |x: f64| format!("{x:.16e}");
        for e in &self.entries {
            let dev = e.max_rel_deviation.map(fmt).unwrap_or_default();
            let mut push = |source: &str, zs: &[Complex64]| {
                if zs.is_empty() {
                    out.push_str(&format!("{},{source},,,,{},{dev}\n", e.loop_id.as_str(), e.nmp));
                }
                for (i, z) in zs.iter().enumerate() {
                    out.push_str(&format!(
                        "{},{source},{i},{},{},{},{dev}\n",
                        e.loop_id.as_str(),
                        fmt(z.re),
                        fmt(z.im),
                        e.nmp
                    ));
                }
            };
            push("analytic", e.analytic.finite());
            match &e.numeric {
                ZeroSet::Finite { zeros, .. } => push("numeric", zeros),
                ZeroSet::IdenticallyZero => push("numeric", &[]),
            }
        }
        out
    }
}

/// `p(s)` evaluated at `s`, for callers holding raw coefficients.
pub fn eval_poly(coeffs: &[f64], s: Complex64) -> Complex64 {
    polyval(coeffs, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn canonical_first_order_zero() {
        // (s + 1)/(s² + 2s + 5) in controllable canonical form
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -5.0, -2.0]);
        let b = DVector::from_vec(vec![0.0, 1.0]);
        let cv = DVector::from_vec(vec![1.0, 1.0]);
        match siso_zeros(&a, &b, &cv, 0.0).unwrap() {
            ZeroSet::Finite { zeros, gain } => {
                assert_eq!(zeros.len(), 1);
                assert!((zeros[0] - c(-1.0, 0.0)).norm() < 1e-12);
                assert!((gain - 1.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_count_with_feedthrough() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -5.0, -2.0]);
        let b = DVector::from_vec(vec![0.0, 1.0]);
        let cv = DVector::from_vec(vec![1.0, 1.0]);
        // d + (s+1)/(s²+2s+5) with d = 2: 2s² + 5s + 11
        let ZeroSet::Finite { zeros, gain } = siso_zeros(&a, &b, &cv, 2.0).unwrap() else { panic!() };
        assert_eq!(zeros.len(), 2);
        assert!((gain - 2.0).abs() < 1e-12);
        for z in zeros {
            assert!(polyval(&[2.0, 5.0, 11.0], z).norm() < 1e-10);
        }
    }

    #[test]
    fn uncontrollable_channel_is_identically_zero() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let cv = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(siso_zeros(&a, &b, &cv, 0.0).unwrap(), ZeroSet::IdenticallyZero);
    }

    #[test]
    fn em_pair_prefers_complex_pair_near_omega() {
        let eigs = [c(-0.1, 6.0), c(-0.1, -6.0), c(-20.0, 0.0), c(-1.0, 30.0), c(-1.0, -30.0)];
        let (p, q) = em_pair(&eigs, 6.1).unwrap();
        assert_eq!(p, c(-0.1, 6.0));
        assert_eq!(q, c(-0.1, -6.0));
    }

    #[test]
    fn damping_ratio_convention() {
        assert!((damping_ratio(c(-0.5, 7.0)) - 0.5 / (0.25f64 + 49.0).sqrt()).abs() < 1e-15);
    }
}
