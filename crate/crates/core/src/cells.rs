//! Discrete-time spiking cells (LIF, ALIF, sLSTM), layer stacking and the
//! linear readout.
//!
//! Conventions: `W_in` is `n_in × width` and `W_rec` is `n_rec × width`, so a
//! layer's input current is the row-vector product `z·W_in + x_{t−1}·W_rec`.
//! For LIF/ALIF `width = n_rec`; the sLSTM stacks its four gate blocks
//! `[input | forget | output | candidate]` side by side, `width = 4·n_rec`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::surrogate::{heaviside, Shape, SurrogateSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lif,
    Alif,
    Slstm,
}

impl CellKind {
    pub fn name(&self) -> &'static str {
        match self {
            CellKind::Lif => "lif",
            CellKind::Alif => "alif",
            CellKind::Slstm => "slstm",
        }
    }

    /// Number of pre-activation blocks per neuron.
    pub fn blocks(&self) -> usize {
        match self {
            CellKind::Slstm => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lif" => Ok(CellKind::Lif),
            "alif" => Ok(CellKind::Alif),
            "slstm" => Ok(CellKind::Slstm),
            other => Err(Error::Parameter(format!("unknown cell kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reset {
    Subtractive,
    Multiplicative,
}

impl Reset {
    pub fn name(&self) -> &'static str {
        match self {
            Reset::Subtractive => "subtractive",
            Reset::Multiplicative => "multiplicative",
        }
    }
}

impl FromStr for Reset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "subtractive" => Ok(Reset::Subtractive),
            "multiplicative" => Ok(Reset::Multiplicative),
            other => Err(Error::Parameter(format!("unknown reset '{other}'"))),
        }
    }
}

/// Forward nonlinearity. `Soft` replaces every Heaviside by `sigmoid(4v)`,
/// whose exact derivative is the unit ∂sigmoid surrogate; it exists to check
/// the backward pass against finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Hard,
    Soft,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Hard => heaviside(v),
            Activation::Soft => 1.0 / (1.0 + (-4.0 * v).exp()),
        }
    }
}

/// Per-layer neuron constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CellConfig {
    pub kind: CellKind,
    pub n_in: usize,
    pub n_rec: usize,
    pub alpha: Vec<f64>,
    pub thr: Vec<f64>,
    pub reset: Reset,
    pub surrogate: SurrogateSpec,
    /// ALIF adaptation decay.
    pub rho: f64,
    /// ALIF adaptation strength.
    pub beta: f64,
}

impl CellConfig {
    pub fn new(
        kind: CellKind,
        n_in: usize,
        n_rec: usize,
        alpha: f64,
        thr: f64,
        surrogate: SurrogateSpec,
    ) -> Self {
        CellConfig {
            kind,
            n_in,
            n_rec,
            alpha: vec![alpha; n_rec],
            thr: vec![thr; n_rec],
            reset: Reset::Subtractive,
            surrogate,
            rho: 0.9,
            beta: 0.0,
        }
    }

    pub fn lif(n_in: usize, n_rec: usize, alpha: f64, thr: f64, surrogate: SurrogateSpec) -> Self {
        Self::new(CellKind::Lif, n_in, n_rec, alpha, thr, surrogate)
    }

    pub fn width(&self) -> usize {
        self.kind.blocks() * self.n_rec
    }

    pub fn mean_alpha(&self) -> f64 {
        self.alpha.iter().sum::<f64>() / self.alpha.len() as f64
    }

    pub fn mean_thr(&self) -> f64 {
        self.thr.iter().sum::<f64>() / self.thr.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rec == 0 || self.n_in == 0 {
            return Err(Error::Shape("layer sizes must be positive".into()));
        }
        if self.alpha.len() != self.n_rec || self.thr.len() != self.n_rec {
            return Err(Error::Shape(format!(
                "per-neuron constants must have length {}",
                self.n_rec
            )));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::Parameter(format!("decay must lie in (0, 1), got {a}")));
        }
        if let Some(t) = self.thr.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::Parameter(format!("threshold must be positive, got {t}")));
        }
        if self.kind == CellKind::Alif {
            if !(self.rho >= 0.0 && self.rho < 1.0) {
                return Err(Error::Parameter(format!("rho must lie in [0, 1), got {}", self.rho)));
            }
            if !(self.beta >= 0.0 && self.beta.is_finite()) {
                return Err(Error::Parameter(format!("beta must be >= 0, got {}", self.beta)));
            }
        }
        self.surrogate.validate()
    }
}

/// Trainable weights of one layer. The diagonal of every `n_rec × n_rec`
/// block of `w_rec` is kept at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub w_in: Matrix,
    pub w_rec: Matrix,
    pub bias: Vec<f64>,
}

impl WeightSet {
    pub fn zeros(cfg: &CellConfig) -> Self {
        WeightSet {
            w_in: Matrix::zeros(cfg.n_in, cfg.width()),
            w_rec: Matrix::zeros(cfg.n_rec, cfg.width()),
            bias: vec![0.0; cfg.width()],
        }
    }

    pub fn check(&self, cfg: &CellConfig) -> Result<()> {
        let width = cfg.width();
        if self.w_in.shape() != (cfg.n_in, width) {
            return Err(Error::Shape(format!(
                "W_in is {:?}, expected {:?}",
                self.w_in.shape(),
                (cfg.n_in, width)
            )));
        }
        if self.w_rec.shape() != (cfg.n_rec, width) {
            return Err(Error::Shape(format!(
                "W_rec is {:?}, expected {:?}",
                self.w_rec.shape(),
                (cfg.n_rec, width)
            )));
        }
        if self.bias.len() != width {
            return Err(Error::Shape(format!("bias has length {}, expected {width}", self.bias.len())));
        }
        Ok(())
    }

    /// Zero the self-connections of every recurrent block.
    pub fn mask_recurrent_diagonal(&mut self, n_rec: usize) {
        mask_block_diagonal(&mut self.w_rec, n_rec);
    }
}

pub(crate) fn mask_block_diagonal(m: &mut Matrix, n_rec: usize) {
    let blocks = m.cols() / n_rec.max(1);
    for b in 0..blocks {
        for i in 0..n_rec.min(m.rows()) {
            m.set(i, b * n_rec + i, 0.0);
        }
    }
}

pub(crate) fn block_diagonal_is_zero(m: &Matrix, n_rec: usize) -> bool {
    let blocks = m.cols() / n_rec.max(1);
    (0..blocks).all(|b| (0..n_rec.min(m.rows())).all(|i| m.get(i, b * n_rec + i) == 0.0))
}

/// Runtime state of a layer. `x` is the layer output (spikes; for the sLSTM
/// the hidden vector `h`).
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

impl CellState {
    pub fn zeros(n_rec: usize) -> Self {
        CellState {
            y: vec![0.0; n_rec],
            x: vec![0.0; n_rec],
            a: vec![0.0; n_rec],
            c: vec![0.0; n_rec],
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.y, &self.x, &self.a, &self.c]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Forward quantities of one layer at one time step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepRecord {
    /// Layer input `z_t`.
    pub z: Vec<f64>,
    /// `z_t·W_in`.
    pub input_current: Vec<f64>,
    /// `x_{t−1}·W_rec`.
    pub recurrent_current: Vec<f64>,
    /// Voltage `y_t` (sLSTM: cell state `c_t`).
    pub y: Vec<f64>,
    /// Argument of the output nonlinearity: `y_t − thr` (ALIF `y_t − A_t`,
    /// sLSTM `c_t`).
    pub v: Vec<f64>,
    /// Layer output.
    pub x: Vec<f64>,
    /// ALIF adaptation `a_t`.
    pub adapt: Vec<f64>,
    /// ALIF effective threshold `A_t`.
    pub thr_eff: Vec<f64>,
    /// sLSTM gate pre-activations, `4·n_rec`.
    pub pre: Vec<f64>,
    /// sLSTM gate activations `[i, f, o, g̃]`, `4·n_rec`.
    pub gates: Vec<f64>,
    /// sLSTM output nonlinearity `1 − 2H(c_t)`.
    pub cell_out: Vec<f64>,
}

fn check_step_inputs(cfg: &CellConfig, w: &WeightSet, state: &CellState, z: &[f64]) -> Result<()> {
    w.check(cfg)?;
    if z.len() != cfg.n_in {
        return Err(Error::Shape(format!("input has length {}, expected {}", z.len(), cfg.n_in)));
    }
    if state.y.len() != cfg.n_rec || state.x.len() != cfg.n_rec {
        return Err(Error::Shape("state width does not match layer".into()));
    }
    if !state.is_finite() {
        return Err(Error::Numeric("non-finite cell state".into()));
    }
    Ok(())
}

/// Advance one layer by one step, returning the new state and its record.
pub fn step(
    cfg: &CellConfig,
    w: &WeightSet,
    state: &CellState,
    z: &[f64],
    act: Activation,
) -> Result<(CellState, StepRecord)> {
    check_step_inputs(cfg, w, state, z)?;
    let out = match cfg.kind {
        CellKind::Lif | CellKind::Alif => spiking_step(cfg, w, state, z, act),
        CellKind::Slstm => slstm_forward(cfg, w, state, z, act),
    };
    if !out.0.is_finite() {
        return Err(Error::Numeric("non-finite state after step".into()));
    }
    Ok(out)
}

fn currents(w: &WeightSet, prev_out: &[f64], z: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut input_current = vec![0.0; width];
    w.w_in.acc_vec_mul(z, &mut input_current);
    let mut recurrent_current = vec![0.0; width];
    w.w_rec.acc_vec_mul(prev_out, &mut recurrent_current);
    (input_current, recurrent_current)
}

fn spiking_step(
    cfg: &CellConfig,
    w: &WeightSet,
    state: &CellState,
    z: &[f64],
    act: Activation,
) -> (CellState, StepRecord) {
    let n = cfg.n_rec;
    let (input_current, recurrent_current) = currents(w, &state.x, z, n);
    let adaptive = cfg.kind == CellKind::Alif;
    let mut adapt = Vec::new();
    let mut thr_eff = Vec::new();
    if adaptive {
        adapt = (0..n).map(|i| cfg.rho * state.a[i] + state.x[i]).collect();
        thr_eff = (0..n).map(|i| cfg.thr[i] + cfg.beta * adapt[i]).collect();
    }
    let mut y = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut x = vec![0.0; n];
    for i in 0..n {
        let current = w.bias[i] + input_current[i] + recurrent_current[i];
        let threshold = if adaptive { thr_eff[i] } else { cfg.thr[i] };
        y[i] = match cfg.reset {
            Reset::Subtractive => {
                cfg.alpha[i] * state.y[i] + current - threshold * state.x[i]
            }
            Reset::Multiplicative => cfg.alpha[i] * (state.y[i] + current) * (1.0 - state.x[i]),
        };
        v[i] = y[i] - threshold;
        x[i] = act.apply(v[i]);
    }
    let next = CellState {
        y: y.clone(),
        x: x.clone(),
        a: if adaptive { adapt.clone() } else { vec![0.0; n] },
        c: vec![0.0; n],
    };
    let record = StepRecord {
        z: z.to_vec(),
        input_current,
        recurrent_current,
        y,
        v,
        x,
        adapt,
        thr_eff,
        ..Default::default()
    };
    (next, record)
}

fn slstm_forward(
    cfg: &CellConfig,
    w: &WeightSet,
    state: &CellState,
    z: &[f64],
    act: Activation,
) -> (CellState, StepRecord) {
    let n = cfg.n_rec;
    let (input_current, recurrent_current) = currents(w, &state.x, z, 4 * n);
    let pre: Vec<f64> = (0..4 * n)
        .map(|k| w.bias[k] + input_current[k] + recurrent_current[k])
        .collect();
    let mut gates = vec![0.0; 4 * n];
    for k in 0..3 * n {
        gates[k] = act.apply(pre[k]);
    }
    for k in 3 * n..4 * n {
        gates[k] = 1.0 - 2.0 * act.apply(pre[k]);
    }
    let mut c = vec![0.0; n];
    let mut cell_out = vec![0.0; n];
    let mut h = vec![0.0; n];
    for i in 0..n {
        c[i] = gates[n + i] * state.c[i] + gates[i] * gates[3 * n + i];
        cell_out[i] = 1.0 - 2.0 * act.apply(c[i]);
        h[i] = gates[2 * n + i] * cell_out[i];
    }
    let next = CellState {
        y: c.clone(),
        x: h.clone(),
        a: vec![0.0; n],
        c: c.clone(),
    };
    let record = StepRecord {
        z: z.to_vec(),
        input_current,
        recurrent_current,
        y: c.clone(),
        v: c,
        x: h,
        pre,
        gates,
        cell_out,
        ..Default::default()
    };
    (next, record)
}

fn require_kind(cfg: &CellConfig, kind: CellKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::Usage(format!("{} step called on a {} layer", kind, cfg.kind)));
    }
    Ok(())
}

/// One LIF step (subtractive or multiplicative reset).
pub fn lif_step(cfg: &CellConfig, w: &WeightSet, state: &CellState, z: &[f64]) -> Result<CellState> {
    require_kind(cfg, CellKind::Lif)?;
    step(cfg, w, state, z, Activation::Hard).map(|(s, _)| s)
}

/// One ALIF step: threshold `thr + β·a_t` with `a_t = ρ·a_{t−1} + x_{t−1}`.
pub fn alif_step(cfg: &CellConfig, w: &WeightSet, state: &CellState, z: &[f64]) -> Result<CellState> {
    require_kind(cfg, CellKind::Alif)?;
    step(cfg, w, state, z, Activation::Hard).map(|(s, _)| s)
}

/// One sLSTM step with Heaviside gates and `1 − 2H(·)` candidate/output.
pub fn slstm_step(cfg: &CellConfig, w: &WeightSet, state: &CellState, z: &[f64]) -> Result<CellState> {
    require_kind(cfg, CellKind::Slstm)?;
    step(cfg, w, state, z, Activation::Hard).map(|(s, _)| s)
}

/// A recurrent layer: neuron constants plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub cfg: CellConfig,
    pub w: WeightSet,
}

/// Linear map from the top layer's output to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub w: Matrix,
    pub bias: Vec<f64>,
}

impl Readout {
    pub fn zeros(n_top: usize, n_out: usize) -> Self {
        Readout {
            w: Matrix::zeros(n_top, n_out),
            bias: vec![0.0; n_out],
        }
    }

    pub fn n_out(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        self.w.acc_vec_mul(x, &mut out);
        out
    }
}

/// A stack of recurrent layers feeding a per-step linear readout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub readout: Readout,
}

/// Recorded forward pass of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    pub activation: Activation,
    pub steps: usize,
    /// `records[layer][t]`.
    pub records: Vec<Vec<StepRecord>>,
    /// Logits, `steps × n_out`.
    pub logits: Matrix,
}

impl Tape {
    pub fn n_layers(&self) -> usize {
        self.records.len()
    }

    /// Verify that every layer holds exactly `steps` records.
    pub fn check_complete(&self) -> Result<()> {
        for (l, layer) in self.records.iter().enumerate() {
            if layer.len() != self.steps {
                return Err(Error::State(format!(
                    "layer {l} has {} of {} recorded steps",
                    layer.len(),
                    self.steps
                )));
            }
        }
        if self.logits.rows() != self.steps {
            return Err(Error::State("logit record is incomplete".into()));
        }
        Ok(())
    }
}

impl Network {
    pub fn n_in(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cfg.n_in)
    }

    pub fn n_out(&self) -> usize {
        self.readout.n_out()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.cfg.validate()?;
            layer.w.check(&layer.cfg)?;
            if l > 0 && layer.cfg.n_in != self.layers[l - 1].cfg.n_rec {
                return Err(Error::Shape(format!(
                    "layer {l} expects {} inputs but layer {} has {} neurons",
                    layer.cfg.n_in,
                    l - 1,
                    self.layers[l - 1].cfg.n_rec
                )));
            }
        }
        let top = self.layers.last().map(|l| l.cfg.n_rec).unwrap_or(0);
        if self.readout.w.rows() != top || self.readout.w.cols() != self.readout.bias.len() {
            return Err(Error::Shape("readout does not match the top layer".into()));
        }
        Ok(())
    }

    /// Run the stack over `inputs` (`T × n_in`) from zero initial state.
    /// Layer `l > 0` receives the outputs of layer `l − 1` from the same step.
    pub fn forward(&self, inputs: &Matrix, act: Activation) -> Result<Tape> {
        self.validate()?;
        if inputs.cols() != self.n_in() {
            return Err(Error::Shape(format!(
                "input has {} channels, network expects {}",
                inputs.cols(),
                self.n_in()
            )));
        }
        let steps = inputs.rows();
        let mut states: Vec<CellState> =
            self.layers.iter().map(|l| CellState::zeros(l.cfg.n_rec)).collect();
        let mut records: Vec<Vec<StepRecord>> =
            self.layers.iter().map(|_| Vec::with_capacity(steps)).collect();
        let mut logits = Matrix::zeros(steps, self.n_out());
        for t in 0..steps {
            let mut z = inputs.row(t).to_vec();
            for (l, layer) in self.layers.iter().enumerate() {
                let (next, rec) = step(&layer.cfg, &layer.w, &states[l], &z, act)
                    .map_err(|e| match e {
                        Error::Numeric(m) => Error::Numeric(format!("{m} (layer {l}, step {t})")),
                        other => other,
                    })?;
                z = rec.x.clone();
                states[l] = next;
                records[l].push(rec);
            }
            logits.row_mut(t).copy_from_slice(&self.readout.logits(&z));
        }
        Ok(Tape {
            activation: act,
            steps,
            records,
            logits,
        })
    }

    /// Forward pass returning the per-step outputs and, if `record` is set,
    /// the full tape.
    pub fn stack_forward(&self, inputs: &Matrix, record: bool) -> Result<(Matrix, Option<Tape>)> {
        let tape = self.forward(inputs, Activation::Hard)?;
        let logits = tape.logits.clone();
        Ok((logits, record.then_some(tape)))
    }

    /// Check that soft mode is allowed: every layer uses the unit ∂sigmoid.
    pub fn check_soft_compatible(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            let s = layer.cfg.surrogate;
            if s.shape != Shape::DSigmoid || s.gamma != 1.0 || s.sharpness != 1.0 {
                return Err(Error::Usage(format!(
                    "soft mode needs the unit dsigmoid surrogate; layer {l} has {} (γ={}, s={})",
                    s.shape, s.gamma, s.sharpness
                )));
            }
        }
        Ok(())
    }

    pub fn mask_recurrent_diagonals(&mut self) {
        for layer in &mut self.layers {
            let n = layer.cfg.n_rec;
            layer.w.mask_recurrent_diagonal(n);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.w.w_in.is_finite() && l.w.w_rec.is_finite() && l.w.bias.iter().all(|b| b.is_finite())
        }) && self.readout.w.is_finite()
            && self.readout.bias.iter().all(|b| b.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{Dist, Rng};

    fn unit_exp() -> SurrogateSpec {
        SurrogateSpec::unit(Shape::Exponential)
    }

    fn single_neuron(reset: Reset) -> (CellConfig, WeightSet) {
        let mut cfg = CellConfig::lif(1, 1, 0.5, 1.0, unit_exp());
        cfg.reset = reset;
        let mut w = WeightSet::zeros(&cfg);
        w.w_in.set(0, 0, 2.0);
        (cfg, w)
    }

    fn run(cfg: &CellConfig, w: &WeightSet, drive: &[f64]) -> Vec<CellState> {
        let mut state = CellState::zeros(cfg.n_rec);
        let mut out = Vec::new();
        for &d in drive {
            state = step(cfg, w, &state, &[d], Activation::Hard).unwrap().0;
            out.push(state.clone());
        }
        out
    }

    #[test]
    fn silent_network_stays_silent() {
        let cfg = CellConfig::lif(3, 4, 0.9, 1.0, unit_exp());
        let w = WeightSet::zeros(&cfg);
        let mut state = CellState::zeros(4);
        for _ in 0..10 {
            state = lif_step(&cfg, &w, &state, &[1.0, 0.0, 1.0]).unwrap();
            assert!(state.y.iter().all(|&y| y == 0.0));
            assert!(state.x.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_neuron_subtractive_trace() {
        let (cfg, w) = single_neuron(Reset::Subtractive);
        let trace = run(&cfg, &w, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!((trace[0].y[0], trace[0].x[0]), (2.0, 1.0));
        assert_eq!((trace[1].y[0], trace[1].x[0]), (0.0, 0.0));
        assert_eq!((trace[2].y[0], trace[2].x[0]), (0.0, 0.0));
        assert_eq!((trace[3].y[0], trace[3].x[0]), (0.0, 0.0));
    }

    #[test]
    fn single_neuron_multiplicative_trace() {
        let (cfg, w) = single_neuron(Reset::Multiplicative);
        let trace = run(&cfg, &w, &[1.0, 0.0, 0.0]);
        assert_eq!((trace[0].y[0], trace[0].x[0]), (1.0, 1.0));
        assert_eq!((trace[1].y[0], trace[1].x[0]), (0.0, 0.0));
        assert_eq!((trace[2].y[0], trace[2].x[0]), (0.0, 0.0));
    }

    fn random_layer(kind: CellKind, n_in: usize, n_rec: usize, scale: f64, seed: u64) -> Layer {
        let mut cfg = CellConfig::new(kind, n_in, n_rec, 0.8, 1.0, unit_exp());
        cfg.beta = 0.5;
        cfg.rho = 0.7;
        let mut rng = Rng::new(seed);
        let mut w = WeightSet::zeros(&cfg);
        let d = Dist::Normal { mean: 0.0, var: scale };
        w.w_in = Matrix::from_vec(n_in, cfg.width(), rng.sample(d, n_in * cfg.width()).unwrap()).unwrap();
        w.w_rec = Matrix::from_vec(n_rec, cfg.width(), rng.sample(d, n_rec * cfg.width()).unwrap()).unwrap();
        w.bias = rng.sample(d, cfg.width()).unwrap();
        w.mask_recurrent_diagonal(n_rec);
        Layer { cfg, w }
    }

    #[test]
    fn alif_without_adaptation_matches_lif() {
        let lif = random_layer(CellKind::Lif, 5, 6, 0.5, 3);
        let mut alif = lif.clone();
        alif.cfg.kind = CellKind::Alif;
        alif.cfg.beta = 0.0;
        let mut rng = Rng::new(4);
        let mut s1 = CellState::zeros(6);
        let mut s2 = CellState::zeros(6);
        for _ in 0..30 {
            let z = rng.sample(Dist::Uniform { lo: 0.0, hi: 1.0 }, 5).unwrap();
            s1 = lif_step(&lif.cfg, &lif.w, &s1, &z).unwrap();
            s2 = alif_step(&alif.cfg, &alif.w, &s2, &z).unwrap();
            assert_eq!(s1.y, s2.y);
            assert_eq!(s1.x, s2.x);
        }
    }

    #[test]
    fn alif_threshold_jumps_after_spike() {
        let mut cfg = CellConfig::new(CellKind::Alif, 1, 1, 0.5, 1.0, unit_exp());
        cfg.rho = 0.0;
        cfg.beta = 1.0;
        let mut w = WeightSet::zeros(&cfg);
        w.w_in.set(0, 0, 2.0);
        let s1 = step(&cfg, &w, &CellState::zeros(1), &[1.0], Activation::Hard).unwrap();
        assert_eq!(s1.0.x[0], 1.0);
        let s2 = step(&cfg, &w, &s1.0, &[0.0], Activation::Hard).unwrap();
        assert_eq!(s2.1.thr_eff[0], 2.0);
        let s3 = step(&cfg, &w, &s2.0, &[0.0], Activation::Hard).unwrap();
        // no spike at t=2, so the increment is gone with ρ = 0
        assert_eq!(s3.1.thr_eff[0], 1.0);
    }

    #[test]
    fn alif_interspike_intervals_grow() {
        let mut cfg = CellConfig::new(CellKind::Alif, 1, 1, 0.9, 1.0, unit_exp());
        cfg.rho = 0.95;
        cfg.beta = 0.3;
        let mut w = WeightSet::zeros(&cfg);
        w.w_in.set(0, 0, 0.4);
        let trace = run(&cfg, &w, &vec![1.0; 400]);
        let spikes: Vec<usize> = trace
            .iter()
            .enumerate()
            .filter(|(_, s)| s.x[0] == 1.0)
            .map(|(t, _)| t)
            .collect();
        assert!(spikes.len() >= 6, "{spikes:?}");
        let isi: Vec<usize> = spikes.windows(2).map(|p| p[1] - p[0]).take(5).collect();
        assert!(isi.windows(2).all(|p| p[1] >= p[0]), "{isi:?}");
        assert!(isi.last() > isi.first());
    }

    #[test]
    fn slstm_sign_patterns() {
        let cfg = CellConfig::new(CellKind::Slstm, 2, 3, 0.9, 1.0, unit_exp());
        let mut w = WeightSet::zeros(&cfg);
        w.bias = vec![0.5; 12];
        let prev = CellState {
            c: vec![2.0; 3],
            ..CellState::zeros(3)
        };
        let (_, rec) = step(&cfg, &w, &prev, &[0.0, 0.0], Activation::Hard).unwrap();
        assert!(rec.gates[..9].iter().all(|&g| g == 1.0));
        assert!(rec.gates[9..].iter().all(|&g| g == -1.0));

        w.bias = vec![-0.5; 12];
        let (next, rec) = step(&cfg, &w, &prev, &[0.0, 0.0], Activation::Hard).unwrap();
        assert!(rec.gates[..9].iter().all(|&g| g == 0.0));
        assert!(next.c.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn slstm_hidden_is_ternary() {
        let layer = random_layer(CellKind::Slstm, 4, 5, 1.0, 8);
        let mut rng = Rng::new(5);
        let mut state = CellState::zeros(5);
        for _ in 0..20 {
            let z = rng.sample(Dist::Uniform { lo: -1.0, hi: 1.0 }, 4).unwrap();
            state = slstm_step(&layer.cfg, &layer.w, &state, &z).unwrap();
            assert!(state.x.iter().all(|h| [-1.0, 0.0, 1.0].contains(h)));
        }
    }

    #[test]
    fn wrong_step_kind_and_shapes() {
        let layer = random_layer(CellKind::Lif, 3, 4, 1.0, 1);
        let s = CellState::zeros(4);
        assert!(matches!(alif_step(&layer.cfg, &layer.w, &s, &[0.0; 3]), Err(Error::Usage(_))));
        assert!(matches!(lif_step(&layer.cfg, &layer.w, &s, &[0.0; 2]), Err(Error::Shape(_))));
        let mut bad = s.clone();
        bad.y[0] = f64::NAN;
        assert!(matches!(lif_step(&layer.cfg, &layer.w, &bad, &[0.0; 3]), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_network_outputs_readout_bias() {
        let cfg1 = CellConfig::lif(3, 4, 0.9, 1.0, unit_exp());
        let cfg2 = CellConfig::lif(4, 4, 0.9, 1.0, unit_exp());
        let net = Network {
            layers: vec![
                Layer { w: WeightSet::zeros(&cfg1), cfg: cfg1 },
                Layer { w: WeightSet::zeros(&cfg2), cfg: cfg2 },
            ],
            readout: Readout {
                w: Matrix::zeros(4, 2),
                bias: vec![0.25, -1.5],
            },
        };
        let inputs = Matrix::from_vec(5, 3, vec![1.0; 15]).unwrap();
        let (out, tape) = net.stack_forward(&inputs, false).unwrap();
        assert!(tape.is_none());
        for t in 0..5 {
            assert_eq!(out.row(t), &[0.25, -1.5]);
        }
    }

    #[test]
    fn readout_scales_single_neuron_spikes() {
        let (cfg, w) = single_neuron(Reset::Subtractive);
        let net = Network {
            layers: vec![Layer { cfg, w }],
            readout: Readout {
                w: Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
                bias: vec![0.0],
            },
        };
        let inputs = Matrix::from_vec(4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let (out, _) = net.stack_forward(&inputs, false).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_layer_sees_same_step_spikes() {
        let l1 = random_layer(CellKind::Lif, 3, 5, 2.0, 21);
        let l2 = random_layer(CellKind::Lif, 5, 4, 2.0, 22);
        let net = Network {
            layers: vec![l1, l2],
            readout: Readout::zeros(4, 2),
        };
        let mut rng = Rng::new(2);
        let data = rng.sample(Dist::Uniform { lo: 0.0, hi: 1.0 }, 30).unwrap();
        let tape = net.forward(&Matrix::from_vec(10, 3, data).unwrap(), Activation::Hard).unwrap();
        let mut any_spike = false;
        for t in 0..10 {
            assert_eq!(tape.records[1][t].z, tape.records[0][t].x);
            any_spike |= tape.records[0][t].x.iter().any(|&x| x == 1.0);
        }
        assert!(any_spike);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let l1 = random_layer(CellKind::Lif, 3, 5, 1.0, 1);
        let l2 = random_layer(CellKind::Lif, 4, 4, 1.0, 2);
        let net = Network {
            layers: vec![l1, l2],
            readout: Readout::zeros(4, 2),
        };
        let inputs = Matrix::zeros(2, 3);
        assert!(matches!(net.forward(&inputs, Activation::Hard), Err(Error::Shape(_))));
    }

    #[test]
    fn outputs_are_binary_and_bernoulli_capped() {
        for (seed, kind) in [(1, CellKind::Lif), (2, CellKind::Alif), (3, CellKind::Slstm)] {
            for trial in 0..20u64 {
                let mut l1 = random_layer(kind, 6, 7, 1.0, seed * 100 + trial);
                if trial % 2 == 1 {
                    l1.cfg.reset = Reset::Multiplicative;
                }
                let net = Network {
                    readout: Readout::zeros(7, 2),
                    layers: vec![l1],
                };
                let mut rng = Rng::new(trial);
                let data = rng.sample(Dist::Uniform { lo: 0.0, hi: 1.0 }, 60 * 6).unwrap();
                let tape = net.forward(&Matrix::from_vec(60, 6, data).unwrap(), Activation::Hard).unwrap();
                let recs = &tape.records[0];
                let binary: Vec<Vec<f64>> = if kind == CellKind::Slstm {
                    recs.iter().map(|r| r.gates[..21].to_vec()).collect()
                } else {
                    recs.iter().map(|r| r.x.clone()).collect()
                };
                for unit in 0..binary[0].len() {
                    let series: Vec<f64> = binary.iter().map(|r| r[unit]).collect();
                    assert!(series.iter().all(|&x| x == 0.0 || x == 1.0));
                    assert!(crate::numkit::variance(&series) <= 0.25 + 1e-12);
                }
            }
        }
    }
}
