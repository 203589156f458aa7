//! Linear state-space models of machines behind a network.
//!
//! States are ordered `[δ.., ω.., E'_q..]`. Network inputs are `[P.., Q..]`
//! at the algebraic nodes, followed by one `Pm`, `Ef` and `upss` column per
//! machine. Outputs are `[θ.., V..]` at the algebraic nodes.
//!
//! `upss` enters the AVR summing junction, so its column is `K_A/T'_do` on
//! the flux row and vanishes without AVR. `Ef` is the same direction with
//! unit gain and stays well defined at `K_A = 0`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{
    build_admittance, direct_feedthrough_pair, kron_reduce, weight_admittance, NetworkModel, OperatingPoint,
    SmibChain,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineParams {
    /// Inertia `M = 2H/ω_base`.
    pub m: f64,
    pub d_m: f64,
    pub t_do: f64,
    pub x_d: f64,
    pub x_d_prime: f64,
}

impl MachineParams {
    /// Builds the parameters from an inertia constant `H` in seconds.
    pub fn from_inertia(h: f64, f_nom: f64, d_m: f64, t_do: f64, x_d: f64, x_d_prime: f64) -> Self {
        Self { m: 2.0 * h / (2.0 * std::f64::consts::PI * f_nom), d_m, t_do, x_d, x_d_prime }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidMachine(what.to_string()));
        if !(self.m > 0.0) {
            return bad("inertia must be positive");
        }
        if !(self.d_m >= 0.0) {
            return bad("damping must be non-negative");
        }
        if !(self.t_do > 0.0) {
            return bad("T'do must be positive");
        }
        if !(self.x_d_prime > 0.0) {
            return bad("x'd must be positive");
        }
        if !(self.x_d > self.x_d_prime) {
            return bad("xd must exceed x'd");
        }
        Ok(())
    }

    pub fn x_delta(&self) -> f64 {
        self.x_d - self.x_d_prime
    }

    pub fn b_delta(&self) -> f64 {
        1.0 / self.x_delta()
    }

    pub fn b_d_prime(&self) -> f64 {
        1.0 / self.x_d_prime
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvrParams {
    pub k_a: f64,
    /// Exciter time constant; the linear model treats the AVR as proportional.
    pub t_e: f64,
    /// Setpoint; `None` means "whatever holds the operating point".
    pub v_ref: Option<f64>,
    /// Measurement node, normally the machine terminal.
    pub node: String,
}

impl AvrParams {
    pub fn new(k_a: f64, node: impl Into<String>) -> Self {
        Self { k_a, t_e: 0.0, v_ref: None, node: node.into() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_a >= 0.0) || !self.k_a.is_finite() {
            return Err(Error::InvalidParameter("K_A must be finite and non-negative".into()));
        }
        if !(self.t_e >= 0.0) {
            return Err(Error::InvalidParameter("T_e must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub states: Vec<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub op: OperatingPoint,
}

impl StateSpaceModel {
    pub fn input_index(&self, label: &str) -> Result<usize> {
        self.inputs.iter().position(|l| l == label).ok_or_else(|| Error::UnknownChannel(label.to_string()))
    }

    pub fn output_index(&self, label: &str) -> Result<usize> {
        self.outputs.iter().position(|l| l == label).ok_or_else(|| Error::UnknownChannel(label.to_string()))
    }

    pub fn state_index(&self, label: &str) -> Result<usize> {
        self.states.iter().position(|l| l == label).ok_or_else(|| Error::UnknownChannel(label.to_string()))
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    /// `(A, b, c, d)` of one input/output pair.
    pub fn siso(&self, input: &str, output: &str) -> Result<(DMatrix<f64>, nalgebra::DVector<f64>, nalgebra::DVector<f64>, f64)> {
        let (i, o) = (self.input_index(input)?, self.output_index(output)?);
        Ok((
            self.a.clone(),
            self.b.column(i).into_owned(),
            self.c.row(o).transpose(),
            self.d[(o, i)],
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&StateSpaceJson::from(self)).map_err(|e| Error::InvalidParameter(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: StateSpaceJson = serde_json::from_str(text).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        j.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct StateSpaceJson {
    states: Vec<String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    d: Vec<Vec<f64>>,
    operating_point: OperatingPoint,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidParameter(format!("matrix {what} does not match its channel labels")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, k| rows[i][k]))
}

impl From<&StateSpaceModel> for StateSpaceJson {
    fn from(m: &StateSpaceModel) -> Self {
        Self {
            states: m.states.clone(),
            inputs: m.inputs.clone(),
            outputs: m.outputs.clone(),
            a: rows_of(&m.a),
            b: rows_of(&m.b),
            c: rows_of(&m.c),
            d: rows_of(&m.d),
            operating_point: m.op.clone(),
        }
    }
}

impl TryFrom<StateSpaceJson> for StateSpaceModel {
    type Error = Error;

    fn try_from(j: StateSpaceJson) -> Result<Self> {
        let (n, m, p) = (j.states.len(), j.inputs.len(), j.outputs.len());
        Ok(Self {
            a: from_rows(&j.a, n, n, "a")?,
            b: from_rows(&j.b, n, m, "b")?,
            c: from_rows(&j.c, p, n, "c")?,
            d: from_rows(&j.d, p, m, "d")?,
            states: j.states,
            inputs: j.inputs,
            outputs: j.outputs,
            op: j.operating_point,
        })
    }
}

fn re(m: &DMatrix<Complex64>) -> DMatrix<f64> {
    m.map(|z| z.re)
}

fn im(m: &DMatrix<Complex64>) -> DMatrix<f64> {
    m.map(|z| z.im)
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v))
}

/// Linear model without AVR at `op`.
pub fn assemble_multimachine(net: &NetworkModel, op: &OperatingPoint) -> Result<StateSpaceModel> {
    net.validate()?;
    let y = build_admittance(net)?;
    let (mags, angs) = op.profile(&y)?;
    let w = weight_admittance(&y, &mags, &angs)?;
    let kr = kron_reduce(&w)?;
    let mach = y.machine_indices();
    let alg = y.algebraic_indices();
    let (nd, na) = (mach.len(), alg.len());
    if op.machines.len() != nd {
        return Err(Error::LengthMismatch { expected: nd, got: op.machines.len() });
    }

    // retained ordering is machines first, so the machine block is leading
    let y_a = kr.y_a.view((0, 0), (nd, nd)).into_owned();
    let y_sh = kr.y_shunt.view((0, 0), (nd, nd)).into_owned();
    let w_dt = w.block(&mach, &alg);
    let w_td = w.block(&alg, &mach);
    let y_d = kr.y_d.clone();
    let y_b = &w_dt * &y_d;
    let y_c = &y_d * &w_td;

    let params: Vec<_> = mach
        .iter()
        .map(|&p| net.machine_for(&y.ids[p]).map(|m| m.params.clone()).ok_or_else(|| Error::UnknownNode(y.ids[p].clone())))
        .collect::<Result<_>>()?;
    let e: Vec<f64> = mach.iter().map(|&p| mags[p]).collect();
    let v: Vec<f64> = alg.iter().map(|&p| mags[p]).collect();
    let m_inv = diag(&params.iter().map(|p| 1.0 / p.m).collect::<Vec<_>>());
    let d_m = diag(&params.iter().map(|p| p.d_m).collect::<Vec<_>>());
    let t_inv = diag(&params.iter().zip(&e).map(|(p, e)| 1.0 / (p.t_do * p.b_delta() * e)).collect::<Vec<_>>());
    let e_inv = diag(&e.iter().map(|x| 1.0 / x).collect::<Vec<_>>());
    let v_d = diag(&v);

    let n = 3 * nd;
    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, nd), (nd, nd)).copy_from(&DMatrix::identity(nd, nd));
    a.view_mut((nd, 0), (nd, nd)).copy_from(&(-&m_inv * im(&y_a)));
    a.view_mut((nd, nd), (nd, nd)).copy_from(&(-&m_inv * &d_m));
    a.view_mut((nd, 2 * nd), (nd, nd)).copy_from(&(-&m_inv * re(&(&y_a + &y_sh * Complex64::from(2.0))) * &e_inv));
    a.view_mut((2 * nd, 0), (nd, nd)).copy_from(&(&t_inv * re(&y_a)));
    a.view_mut((2 * nd, 2 * nd), (nd, nd)).copy_from(&(-&t_inv * im(&(&y_a + &y_sh)) * &e_inv));

    let n_in = 2 * na + 3 * nd;
    let mut b = DMatrix::zeros(n, n_in);
    b.view_mut((nd, 0), (nd, na)).copy_from(&(&m_inv * re(&y_b)));
    b.view_mut((nd, na), (nd, na)).copy_from(&(-&m_inv * im(&y_b)));
    b.view_mut((2 * nd, 0), (nd, na)).copy_from(&(&t_inv * im(&y_b)));
    b.view_mut((2 * nd, na), (nd, na)).copy_from(&(&t_inv * re(&y_b)));
    for (i, p) in params.iter().enumerate() {
        b[(nd + i, 2 * na + i)] = 1.0 / p.m;
        b[(2 * nd + i, 2 * na + nd + i)] = 1.0 / p.t_do;
    }

    let mut c = DMatrix::zeros(2 * na, n);
    c.view_mut((0, 0), (na, nd)).copy_from(&re(&y_c));
    c.view_mut((0, 2 * nd), (na, nd)).copy_from(&(-im(&y_c) * &e_inv));
    c.view_mut((na, 0), (na, nd)).copy_from(&(&v_d * im(&y_c)));
    c.view_mut((na, 2 * nd), (na, nd)).copy_from(&(&v_d * re(&y_c) * &e_inv));

    let mut d = DMatrix::zeros(2 * na, n_in);
    d.view_mut((0, 0), (na, na)).copy_from(&im(&y_d));
    d.view_mut((0, na), (na, na)).copy_from(&re(&y_d));
    d.view_mut((na, 0), (na, na)).copy_from(&(-&v_d * re(&y_d)));
    d.view_mut((na, na), (na, na)).copy_from(&(&v_d * im(&y_d)));

    let mach_ids: Vec<&String> = mach.iter().map(|&p| &y.ids[p]).collect();
    let alg_ids: Vec<&String> = alg.iter().map(|&p| &y.ids[p]).collect();
    let label = |pre: &str, ids: &[&String]| ids.iter().map(|id| format!("{pre}[{id}]")).collect::<Vec<_>>();
    let states = [label("delta", &mach_ids), label("omega", &mach_ids), label("eq", &mach_ids)].concat();
    let inputs = [
        label("P", &alg_ids),
        label("Q", &alg_ids),
        label("Pm", &mach_ids),
        label("Ef", &mach_ids),
        label("upss", &mach_ids),
    ]
    .concat();
    let outputs = [label("theta", &alg_ids), label("V", &alg_ids)].concat();

    let mut op = op.clone();
    op.k_a = 0.0;
    Ok(StateSpaceModel { a, b, c, d, states, inputs, outputs, op })
}

/// Closes the proportional AVR of machine `machine` around the model.
/// `K_A = 0` returns the input unchanged.
pub fn apply_avr_to(model: &StateSpaceModel, machine: usize, avr: &AvrParams) -> Result<StateSpaceModel> {
    avr.validate()?;
    let nd = model.op.machines.len();
    if machine >= nd {
        return Err(Error::LengthMismatch { expected: nd, got: machine + 1 });
    }
    if avr.k_a == 0.0 {
        return Ok(model.clone());
    }
    let mid = &model.op.machines[machine].id;
    let row_v = model.output_index(&format!("V[{}]", avr.node))?;
    let t_do = model.b[(2 * nd + machine, model.input_index(&format!("Ef[{mid}]"))?)].recip();
    let g = avr.k_a / t_do;
    let e_row = 2 * nd + machine;
    let mut out = model.clone();
    for k in 0..out.a.ncols() {
        out.a[(e_row, k)] -= g * model.c[(row_v, k)];
    }
    for k in 0..out.b.ncols() {
        out.b[(e_row, k)] -= g * model.d[(row_v, k)];
    }
    out.b[(e_row, model.input_index(&format!("upss[{mid}]"))?)] += g;
    out.op.k_a += avr.k_a;
    Ok(out)
}

/// Single-machine shorthand for [`apply_avr_to`].
pub fn apply_avr(model: &StateSpaceModel, avr: &AvrParams) -> Result<StateSpaceModel> {
    apply_avr_to(model, 0, avr)
}

/// Assembled model with the AVR closed.
pub fn linearize(net: &NetworkModel, op: &OperatingPoint, avr: &AvrParams) -> Result<StateSpaceModel> {
    apply_avr(&assemble_multimachine(net, op)?, avr)
}

/// Closed-form SMIB scalars for AVR node 1, measurement node 2 and
/// control node 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmibMatrices {
    pub a21: f64,
    pub a22: f64,
    pub a23: f64,
    pub a31: f64,
    pub a33: f64,
    pub b_sigma: f64,
    pub b_delta: f64,
    pub m: f64,
    pub t_do: f64,
    pub k_a: f64,
    pub e_q: f64,
    pub e_n: f64,
    pub delta: f64,
    /// `(β_i, ε_i)` for the AVR, measurement and control nodes.
    pub beta: [f64; 3],
    pub eps: [f64; 3],
    pub v: [f64; 3],
    /// `b'_12`: series susceptance from the machine to the measurement node.
    pub b_prime_12: f64,
    pub b_slash_13: f64,
    pub b_slash_23: f64,
    pub eps_13: f64,
    pub eps_23: f64,
    pub b2: f64,
    pub b3: f64,
    pub b3_avr: f64,
    pub c1: f64,
    pub c3: f64,
    pub c1_v: f64,
    pub c3_v: f64,
    pub d: f64,
    pub d_v: f64,
    pub nodes: [String; 3],
}

impl SmibMatrices {
    pub fn a(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -self.a21, -self.a22, -self.a23, -self.a31, 0.0, -self.a33])
    }
}

/// Evaluates the SMIB element list at `op`. Nodes: `avr.node` (1),
/// `measure` (2), `control` (3).
pub fn smib_closed_form(
    net: &NetworkModel,
    avr: &AvrParams,
    op: &OperatingPoint,
    measure: &str,
    control: &str,
) -> Result<SmibMatrices> {
    let chain = SmibChain::from_network(net)?;
    let machine = net.validate_smib()?;
    let p = &machine.params;
    let (bd, bs) = (p.b_delta(), chain.b_sigma());
    let (e, en, delta, ka, m, tdo) = (op.e_q(), net.e_n, op.delta(), avr.k_a, p.m, p.t_do);
    let ids = [avr.node.as_str(), measure, control];
    let mut beta = [0.0; 3];
    let mut eps = [0.0; 3];
    let mut v = [0.0; 3];
    for (k, id) in ids.iter().enumerate() {
        beta[k] = chain.beta(id)?;
        eps[k] = op.load_angle(id)?;
        v[k] = op.node(id)?.v;
    }
    let b_slash_13 = chain.b_slash(ids[0], ids[2])?;
    let b_slash_23 = chain.b_slash(ids[1], ids[2])?;
    let theta = |k: usize| delta - eps[k];
    let (eps_13, eps_23) = (theta(0) - theta(2), theta(1) - theta(2));
    let b3_avr = bd * ka * eps_13.sin() / (beta[2] * b_slash_13);
    Ok(SmibMatrices {
        a21: bs / m * e * en * delta.cos(),
        a22: p.d_m / m,
        a23: bs / m * en * delta.sin(),
        a31: bs / (tdo * bd) * en * delta.sin() - ka / tdo * beta[0] * e * eps[0].sin(),
        a33: (bd + bs) / (tdo * bd) + ka / tdo * beta[0] * eps[0].cos(),
        b_sigma: bs,
        b_delta: bd,
        m,
        t_do: tdo,
        k_a: ka,
        e_q: e,
        e_n: en,
        delta,
        beta,
        eps,
        v,
        b_prime_12: chain.b_from_machine(ids[1])?,
        b_slash_13,
        b_slash_23,
        eps_13,
        eps_23,
        b2: beta[2] * e / (m * v[2]) * eps[2].cos(),
        // the AVR part reduces to -K_A sin ε13 / (T'do V3 b̸13); this form
        // stays finite when β3 = 0
        b3: beta[2] / (tdo * bd * v[2]) * eps[2].sin() - ka * eps_13.sin() / (tdo * v[2] * b_slash_13),
        b3_avr,
        c1: beta[1] * e / v[1] * eps[1].cos(),
        c3: beta[1] / v[1] * eps[1].sin(),
        c1_v: -beta[1] * e * eps[1].sin(),
        c3_v: beta[1] * eps[1].cos(),
        d: eps_23.cos() / (b_slash_23 * v[1] * v[2]),
        d_v: eps_23.sin() / (b_slash_23 * v[2]),
        nodes: ids.map(str::to_string),
    })
}

/// Closed-form feed-through pair exposed for cross-checks: `(d, d')`
/// reproduced through the dense `D` formula.
pub fn feedthrough_from_pair(net: &NetworkModel, op: &OperatingPoint, i: &str, k: &str) -> Result<(f64, f64)> {
    let pair = direct_feedthrough_pair(net, op, i, k)?;
    let vi = op.node(i)?.v;
    // D(θ_i, P_k) = Im Y_D[i,k], D(V_i, P_k) = -V_i Re Y_D[i,k]
    Ok((pair.y_d[0][1].im, -vi * pair.y_d[0][1].re))
}

/// Central-difference Jacobian of `f` at `x`.
pub fn finite_difference_jacobian(f: &dyn Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], h: f64) -> Result<DMatrix<f64>> {
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::InvalidParameter(format!("difference step {h} outside [1e-8, 1e-4]")));
    }
    let f0 = f(x)?;
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let orig = xp[k];
        xp[k] = orig + h;
        let fp = f(&xp)?;
        xp[k] = orig - h;
        let fm = f(&xp)?;
        xp[k] = orig;
        for i in 0..f0.len() {
            let val = (fp[i] - fm[i]) / (2.0 * h);
            if !val.is_finite() {
                return Err(Error::NonFinite("finite-difference Jacobian"));
            }
            jac[(i, k)] = val;
        }
    }
    Ok(jac)
}
