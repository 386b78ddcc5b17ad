//! Gated recurrent cells (LSTM with diagonal peepholes, GRU) and the dense
//! forecasting head.
//!
//! Gate pre-activations carry no bias terms. The dense head is affine with a
//! linear output.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{init_weights, sigmoid_scalar, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Config(format!("unknown cell kind `{other}`"))),
        }
    }
}

/// Which memory cell the output-gate peephole reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputPeephole {
    /// `o_t = σ(W_o x_t + U_o h_{t-1} + V_o c_t)`, the freshly updated cell.
    Current,
    /// `o_t = σ(W_o x_t + U_o h_{t-1} + V_o c_{t-1})`.
    Previous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmConfig {
    pub peepholes: bool,
    pub output_peephole: OutputPeephole,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            peepholes: true,
            output_peephole: OutputPeephole::Current,
        }
    }
}

/// LSTM weights. `w_*` are `units × input_dim`, `u_*` are `units × units`,
/// `v_*` hold the peephole diagonals as `units × 1` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_i: Matrix,
    pub w_f: Matrix,
    pub w_o: Matrix,
    pub w_c: Matrix,
    pub u_i: Matrix,
    pub u_f: Matrix,
    pub u_o: Matrix,
    pub u_c: Matrix,
    pub v_i: Matrix,
    pub v_f: Matrix,
    pub v_o: Matrix,
    pub config: LstmConfig,
}

/// GRU weights. `w_*` are `units × input_dim`, `u_*` are `units × units`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_h: Matrix,
}

/// Affine output head: `steps × units` weights and a `steps × 1` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub w_d: Matrix,
    pub b_d: Matrix,
}

impl LstmParams {
    pub fn zeros(units: usize, input_dim: usize, config: LstmConfig) -> Self {
        let w = || Matrix::zeros(units, input_dim);
        let u = || Matrix::zeros(units, units);
        let v = || Matrix::zeros(units, 1);
        LstmParams {
            w_i: w(),
            w_f: w(),
            w_o: w(),
            w_c: w(),
            u_i: u(),
            u_f: u(),
            u_o: u(),
            u_c: u(),
            v_i: v(),
            v_f: v(),
            v_o: v(),
            config,
        }
    }

    pub fn init(units: usize, input_dim: usize, config: LstmConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = LstmParams::zeros(units, input_dim, config);
        for w in [&mut p.w_i, &mut p.w_f, &mut p.w_o, &mut p.w_c] {
            *w = init_weights(units, input_dim, rng)?;
        }
        for u in [&mut p.u_i, &mut p.u_f, &mut p.u_o, &mut p.u_c] {
            *u = init_weights(units, units, rng)?;
        }
        if config.peepholes {
            // Diagonal entries share the recurrent fan-in bound.
            for v in [&mut p.v_i, &mut p.v_f, &mut p.v_o] {
                let row = init_weights(1, units, rng)?;
                *v = Matrix::new(units, 1, row.into_vec())?;
            }
        }
        Ok(p)
    }

    pub fn units(&self) -> usize {
        self.u_i.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.cols()
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 11] {
        [
            ("W_i", &self.w_i),
            ("W_f", &self.w_f),
            ("W_o", &self.w_o),
            ("W_c", &self.w_c),
            ("U_i", &self.u_i),
            ("U_f", &self.u_f),
            ("U_o", &self.u_o),
            ("U_c", &self.u_c),
            ("V_i", &self.v_i),
            ("V_f", &self.v_f),
            ("V_o", &self.v_o),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 11] {
        [
            ("W_i", &mut self.w_i),
            ("W_f", &mut self.w_f),
            ("W_o", &mut self.w_o),
            ("W_c", &mut self.w_c),
            ("U_i", &mut self.u_i),
            ("U_f", &mut self.u_f),
            ("U_o", &mut self.u_o),
            ("U_c", &mut self.u_c),
            ("V_i", &mut self.v_i),
            ("V_f", &mut self.v_f),
            ("V_o", &mut self.v_o),
        ]
    }

    fn validate(&self) -> Result<()> {
        let (units, input) = (self.units(), self.input_dim());
        for w in [&self.w_f, &self.w_o, &self.w_c] {
            if w.shape() != (units, input) {
                return Err(Error::shape("LstmParams", w.shape(), (units, input)));
            }
        }
        for u in [&self.u_i, &self.u_f, &self.u_o, &self.u_c] {
            if u.shape() != (units, units) {
                return Err(Error::shape("LstmParams", u.shape(), (units, units)));
            }
        }
        for v in [&self.v_i, &self.v_f, &self.v_o] {
            if v.shape() != (units, 1) {
                return Err(Error::shape("LstmParams", v.shape(), (units, 1)));
            }
        }
        Ok(())
    }
}

impl GruParams {
    pub fn zeros(units: usize, input_dim: usize) -> Self {
        let w = || Matrix::zeros(units, input_dim);
        let u = || Matrix::zeros(units, units);
        GruParams {
            w_z: w(),
            w_r: w(),
            w_h: w(),
            u_z: u(),
            u_r: u(),
            u_h: u(),
        }
    }

    pub fn init(units: usize, input_dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = GruParams::zeros(units, input_dim);
        for w in [&mut p.w_z, &mut p.w_r, &mut p.w_h] {
            *w = init_weights(units, input_dim, rng)?;
        }
        for u in [&mut p.u_z, &mut p.u_r, &mut p.u_h] {
            *u = init_weights(units, units, rng)?;
        }
        Ok(p)
    }

    pub fn units(&self) -> usize {
        self.u_z.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("W_z", &self.w_z),
            ("W_r", &self.w_r),
            ("W_h", &self.w_h),
            ("U_z", &self.u_z),
            ("U_r", &self.u_r),
            ("U_h", &self.u_h),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 6] {
        [
            ("W_z", &mut self.w_z),
            ("W_r", &mut self.w_r),
            ("W_h", &mut self.w_h),
            ("U_z", &mut self.u_z),
            ("U_r", &mut self.u_r),
            ("U_h", &mut self.u_h),
        ]
    }

    fn validate(&self) -> Result<()> {
        let (units, input) = (self.units(), self.input_dim());
        for w in [&self.w_z, &self.w_r, &self.w_h] {
            if w.shape() != (units, input) {
                return Err(Error::shape("GruParams", w.shape(), (units, input)));
            }
        }
        for u in [&self.u_z, &self.u_r, &self.u_h] {
            if u.shape() != (units, units) {
                return Err(Error::shape("GruParams", u.shape(), (units, units)));
            }
        }
        Ok(())
    }
}

impl DenseParams {
    pub fn zeros(steps: usize, units: usize) -> Self {
        DenseParams {
            w_d: Matrix::zeros(steps, units),
            b_d: Matrix::zeros(steps, 1),
        }
    }

    pub fn init(steps: usize, units: usize, rng: &mut Rng) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("dense head needs at least one output step".into()));
        }
        Ok(DenseParams {
            w_d: init_weights(steps, units, rng)?,
            b_d: Matrix::zeros(steps, 1),
        })
    }

    pub fn steps(&self) -> usize {
        self.w_d.rows()
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 2] {
        [("W_d", &self.w_d), ("b_d", &self.b_d)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 2] {
        [("W_d", &mut self.w_d), ("b_d", &mut self.b_d)]
    }

    /// `W_d · h + b_d`.
    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.w_d.cols() {
            return Err(Error::shape("dense", (h.len(), 1), self.w_d.shape()));
        }
        let mut out = self.b_d.as_slice().to_vec();
        self.w_d.matvec_acc(h, &mut out);
        Ok(out)
    }
}

/// Recurrent state carried between steps. `c` is empty for GRU cells.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl CellState {
    pub fn zero_lstm(units: usize) -> Self {
        CellState {
            h: vec![0.0; units],
            c: vec![0.0; units],
        }
    }

    pub fn zero_gru(units: usize) -> Self {
        CellState {
            h: vec![0.0; units],
            c: Vec::new(),
        }
    }
}

/// Everything one LSTM step computed, kept for backpropagation.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStep {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub c_tilde: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Everything one GRU step computed. `uh` is `U_h · h_prev` before the
/// reset gate is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct GruStep {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub uh: Vec<f64>,
    pub h_tilde: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ForwardTrace {
    Lstm(Vec<LstmStep>),
    Gru(Vec<GruStep>),
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        match self {
            ForwardTrace::Lstm(s) => s.len(),
            ForwardTrace::Gru(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_step_shapes(units: usize, input_dim: usize, x: &[f64], prev: &CellState, lstm: bool) -> Result<()> {
    if x.len() != input_dim {
        return Err(Error::shape("cell input", (x.len(), 1), (input_dim, 1)));
    }
    if prev.h.len() != units {
        return Err(Error::shape("cell state h", (prev.h.len(), 1), (units, 1)));
    }
    if lstm && prev.c.len() != units {
        return Err(Error::shape("cell state c", (prev.c.len(), 1), (units, 1)));
    }
    Ok(())
}

fn pre_activation(w: &Matrix, x: &[f64], u: &Matrix, h: &[f64]) -> Vec<f64> {
    let mut a = vec![0.0; w.rows()];
    w.matvec_acc(x, &mut a);
    u.matvec_acc(h, &mut a);
    a
}

/// One LSTM step. Evaluation order is candidate, forget and input gates,
/// new cell, output gate, activation.
pub fn lstm_step(p: &LstmParams, x: &[f64], prev: &CellState) -> Result<(CellState, LstmStep)> {
    let units = p.units();
    check_step_shapes(units, p.input_dim(), x, prev, true)?;
    let peep = p.config.peepholes;

    let c_tilde: Vec<f64> = pre_activation(&p.w_c, x, &p.u_c, &prev.h)
        .into_iter()
        .map(f64::tanh)
        .collect();

    let mut a_f = pre_activation(&p.w_f, x, &p.u_f, &prev.h);
    let mut a_i = pre_activation(&p.w_i, x, &p.u_i, &prev.h);
    if peep {
        for j in 0..units {
            a_f[j] += p.v_f.as_slice()[j] * prev.c[j];
            a_i[j] += p.v_i.as_slice()[j] * prev.c[j];
        }
    }
    let f: Vec<f64> = a_f.into_iter().map(sigmoid_scalar).collect();
    let i: Vec<f64> = a_i.into_iter().map(sigmoid_scalar).collect();

    let c: Vec<f64> = (0..units)
        .map(|j| f[j] * prev.c[j] + i[j] * c_tilde[j])
        .collect();

    let mut a_o = pre_activation(&p.w_o, x, &p.u_o, &prev.h);
    if peep {
        let peek = match p.config.output_peephole {
            OutputPeephole::Current => &c,
            OutputPeephole::Previous => &prev.c,
        };
        for j in 0..units {
            a_o[j] += p.v_o.as_slice()[j] * peek[j];
        }
    }
    let o: Vec<f64> = a_o.into_iter().map(sigmoid_scalar).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = o.iter().zip(&tanh_c).map(|(o, t)| o * t).collect();

    if h.iter().chain(&c).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("LSTM step produced a non-finite state".into()));
    }
    let state = CellState {
        h: h.clone(),
        c: c.clone(),
    };
    let record = LstmStep {
        x: x.to_vec(),
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        i,
        f,
        o,
        c_tilde,
        c,
        tanh_c,
        h,
    };
    Ok((state, record))
}

/// One GRU step: `h = (1 - z) ⊙ h_prev + z ⊙ h̃`.
pub fn gru_step(p: &GruParams, x: &[f64], prev: &CellState) -> Result<(CellState, GruStep)> {
    let units = p.units();
    check_step_shapes(units, p.input_dim(), x, prev, false)?;

    let z: Vec<f64> = pre_activation(&p.w_z, x, &p.u_z, &prev.h)
        .into_iter()
        .map(sigmoid_scalar)
        .collect();
    let r: Vec<f64> = pre_activation(&p.w_r, x, &p.u_r, &prev.h)
        .into_iter()
        .map(sigmoid_scalar)
        .collect();
    let mut uh = vec![0.0; units];
    p.u_h.matvec_acc(&prev.h, &mut uh);
    let mut a_h = vec![0.0; units];
    p.w_h.matvec_acc(x, &mut a_h);
    let h_tilde: Vec<f64> = (0..units)
        .map(|j| (a_h[j] + r[j] * uh[j]).tanh())
        .collect();
    let h: Vec<f64> = (0..units)
        .map(|j| (1.0 - z[j]) * prev.h[j] + z[j] * h_tilde[j])
        .collect();

    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("GRU step produced a non-finite state".into()));
    }
    let state = CellState {
        h: h.clone(),
        c: Vec::new(),
    };
    let record = GruStep {
        x: x.to_vec(),
        h_prev: prev.h.clone(),
        z,
        r,
        uh,
        h_tilde,
        h,
    };
    Ok((state, record))
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum CellParams {
    Lstm(LstmParams),
    Gru(GruParams),
}

impl CellParams {
    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Lstm(_) => CellKind::Lstm,
            CellParams::Gru(_) => CellKind::Gru,
        }
    }

    pub fn units(&self) -> usize {
        match self {
            CellParams::Lstm(p) => p.units(),
            CellParams::Gru(p) => p.units(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            CellParams::Lstm(p) => p.input_dim(),
            CellParams::Gru(p) => p.input_dim(),
        }
    }
}

/// One recurrent layer followed by the dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub cell: CellParams,
    pub dense: DenseParams,
}

impl Network {
    /// Random initialization for a univariate network. Draw order: cell
    /// input weights, recurrent weights, peepholes, dense weights.
    pub fn init(
        kind: CellKind,
        units: usize,
        steps: usize,
        lstm: LstmConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if units == 0 {
            return Err(Error::Config("units must be at least 1".into()));
        }
        let cell = match kind {
            CellKind::Lstm => CellParams::Lstm(LstmParams::init(units, 1, lstm, rng)?),
            CellKind::Gru => CellParams::Gru(GruParams::init(units, 1, rng)?),
        };
        let dense = DenseParams::init(steps, units, rng)?;
        Ok(Network { cell, dense })
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.tensors_mut() {
            m.as_mut_slice().fill(0.0);
        }
        z
    }

    pub fn kind(&self) -> CellKind {
        self.cell.kind()
    }

    pub fn units(&self) -> usize {
        self.cell.units()
    }

    pub fn steps(&self) -> usize {
        self.dense.steps()
    }

    /// Named parameter tensors in a fixed order (cell first, then head).
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out: Vec<(&'static str, &Matrix)> = match &self.cell {
            CellParams::Lstm(p) => p.tensors().into_iter().collect(),
            CellParams::Gru(p) => p.tensors().into_iter().collect(),
        };
        out.extend(self.dense.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out: Vec<(&'static str, &mut Matrix)> = match &mut self.cell {
            CellParams::Lstm(p) => p.tensors_mut().into_iter().collect(),
            CellParams::Gru(p) => p.tensors_mut().into_iter().collect(),
        };
        out.extend(self.dense.tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// All parameters concatenated in [`Network::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, m) in self.tensors() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("set_flat", (flat.len(), 1), (self.param_count(), 1)));
        }
        let mut offset = 0;
        for (_, m) in self.tensors_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match &self.cell {
            CellParams::Lstm(p) => p.validate()?,
            CellParams::Gru(p) => p.validate()?,
        }
        let units = self.units();
        if self.dense.w_d.cols() != units {
            return Err(Error::shape("DenseParams", self.dense.w_d.shape(), (self.steps(), units)));
        }
        if self.dense.b_d.shape() != (self.steps(), 1) {
            return Err(Error::shape("DenseParams", self.dense.b_d.shape(), (self.steps(), 1)));
        }
        if self.steps() == 0 {
            return Err(Error::Config("dense head needs at least one output step".into()));
        }
        Ok(())
    }
}

/// Runs the cell over a scalar window from the zero state and applies the
/// dense head to the final activation. The trace is only built when asked
/// for; predictions are identical either way.
pub fn forward_window(
    net: &Network,
    window: &[f64],
    keep_trace: bool,
) -> Result<(Vec<f64>, Option<ForwardTrace>)> {
    if window.is_empty() {
        return Err(Error::Precondition("window must not be empty".into()));
    }
    let units = net.units();
    let (h_last, trace) = match &net.cell {
        CellParams::Lstm(p) => {
            let mut state = CellState::zero_lstm(units);
            let mut steps = Vec::with_capacity(if keep_trace { window.len() } else { 0 });
            for &x in window {
                let (next, rec) = lstm_step(p, &[x], &state)?;
                state = next;
                if keep_trace {
                    steps.push(rec);
                }
            }
            (state.h, keep_trace.then_some(ForwardTrace::Lstm(steps)))
        }
        CellParams::Gru(p) => {
            let mut state = CellState::zero_gru(units);
            let mut steps = Vec::with_capacity(if keep_trace { window.len() } else { 0 });
            for &x in window {
                let (next, rec) = gru_step(p, &[x], &state)?;
                state = next;
                if keep_trace {
                    steps.push(rec);
                }
            }
            (state.h, keep_trace.then_some(ForwardTrace::Gru(steps)))
        }
    };
    let pred = net.dense.apply(&h_last)?;
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("dense head produced a non-finite prediction".into()));
    }
    Ok((pred, trace))
}
