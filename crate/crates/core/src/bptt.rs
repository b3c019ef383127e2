//! Reverse-mode backpropagation through time over a recorded [`Tape`].
//!
//! Every Heaviside derivative is replaced by the layer's pseudo-derivative
//! `γ·f(s·v)`; for `1 − 2H(·)` the factor becomes `−2γ·f(s·v)`. Gradients flow
//! through the reset term and into lower layers; they stop at the data.

use crate::cells::{block_diagonal_is_zero, mask_block_diagonal, Activation, CellKind, Network, Reset, Tape};
use crate::error::{Error, Result};
use crate::numkit::{self, Matrix};

/// Gradients for one layer's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w_in: Matrix,
    pub w_rec: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients for a whole [`Network`], shaped like its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub layers: Vec<LayerGrad>,
    pub readout_w: Matrix,
    pub readout_bias: Vec<f64>,
}

impl GradSet {
    pub fn zeros_like(net: &Network) -> Self {
        GradSet {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    w_in: Matrix::zeros(l.w.w_in.rows(), l.w.w_in.cols()),
                    w_rec: Matrix::zeros(l.w.w_rec.rows(), l.w.w_rec.cols()),
                    bias: vec![0.0; l.w.bias.len()],
                })
                .collect(),
            readout_w: Matrix::zeros(net.readout.w.rows(), net.readout.w.cols()),
            readout_bias: vec![0.0; net.readout.bias.len()],
        }
    }

    /// All gradient values in a fixed order (layers bottom-up, then readout).
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend_from_slice(l.w_in.as_slice());
            v.extend_from_slice(l.w_rec.as_slice());
            v.extend_from_slice(&l.bias);
        }
        v.extend_from_slice(self.readout_w.as_slice());
        v.extend_from_slice(&self.readout_bias);
        v
    }

    pub fn add_assign(&mut self, other: &GradSet) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w_in.add_assign(&b.w_in)?;
            a.w_rec.add_assign(&b.w_rec)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        self.readout_w.add_assign(&other.readout_w)?;
        for (x, y) in self.readout_bias.iter_mut().zip(&other.readout_bias) {
            *x += y;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.w_in.scale(k);
            l.w_rec.scale(k);
            l.bias.iter_mut().for_each(|b| *b *= k);
        }
        self.readout_w.scale(k);
        self.readout_bias.iter_mut().for_each(|b| *b *= k);
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|g| g.is_finite())
    }

    pub fn recurrent_diagonals_are_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| block_diagonal_is_zero(&l.w_rec, l.w_rec.rows()))
    }
}

/// Voltage-gradient statistics at one `(t, layer)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePoint {
    pub t: usize,
    pub layer: usize,
    pub var: f64,
    pub max: f64,
}

fn check_inputs(tape: &Tape, loss_grad: &Matrix, net: &Network) -> Result<()> {
    tape.check_complete()?;
    if tape.n_layers() != net.layers.len() {
        return Err(Error::State(format!(
            "tape has {} layers, network has {}",
            tape.n_layers(),
            net.layers.len()
        )));
    }
    if loss_grad.shape() != (tape.steps, net.n_out()) {
        return Err(Error::Shape(format!(
            "loss gradient is {:?}, expected {:?}",
            loss_grad.shape(),
            (tape.steps, net.n_out())
        )));
    }
    if tape.activation == Activation::Soft {
        net.check_soft_compatible()?;
    }
    Ok(())
}

/// Gradients of the loss whose derivative w.r.t. the logits is `loss_grad`
/// (`T × n_out`).
pub fn backward(tape: &Tape, loss_grad: &Matrix, net: &Network) -> Result<GradSet> {
    sweep(tape, loss_grad, net, None)
}

/// Like [`backward`], additionally recording `Var` and `Max` over neurons of
/// `∂L/∂y_{t,l}` (sLSTM: `∂L/∂c_{t,l}`) at every step and layer.
pub fn grad_probe(tape: &Tape, loss_grad: &Matrix, net: &Network) -> Result<(GradSet, Vec<ProbePoint>)> {
    let mut probe = Vec::with_capacity(tape.steps * tape.n_layers());
    let grads = sweep(tape, loss_grad, net, Some(&mut probe))?;
    probe.sort_by_key(|p| (p.t, p.layer));
    Ok((grads, probe))
}

struct Carry {
    /// ∂L/∂y_t (sLSTM: ∂L/∂c_t) arriving from step t+1.
    gy: Vec<f64>,
    /// ∂L/∂x_t from step t+1.
    gx: Vec<f64>,
    /// ∂L/∂a_t from step t+1 (ALIF).
    ga: Vec<f64>,
}

fn sweep(
    tape: &Tape,
    loss_grad: &Matrix,
    net: &Network,
    mut probe: Option<&mut Vec<ProbePoint>>,
) -> Result<GradSet> {
    check_inputs(tape, loss_grad, net)?;
    let mut grads = GradSet::zeros_like(net);
    let n_layers = net.layers.len();
    let mut carries: Vec<Carry> = net
        .layers
        .iter()
        .map(|l| Carry {
            gy: vec![0.0; l.cfg.n_rec],
            gx: vec![0.0; l.cfg.n_rec],
            ga: vec![0.0; l.cfg.n_rec],
        })
        .collect();

    for t in (0..tape.steps).rev() {
        // readout
        let top = &tape.records[n_layers - 1][t];
        let dlogit = loss_grad.row(t);
        grads.readout_w.acc_outer(&top.x, dlogit);
        for (b, d) in grads.readout_bias.iter_mut().zip(dlogit) {
            *b += d;
        }
        let mut ext = vec![0.0; net.layers[n_layers - 1].cfg.n_rec];
        net.readout.w.acc_mul_vec(dlogit, &mut ext);

        for l in (0..n_layers).rev() {
            let layer = &net.layers[l];
            let gz = match layer.cfg.kind {
                CellKind::Lif | CellKind::Alif => {
                    spiking_layer_step(tape, net, l, t, &ext, &mut carries[l], &mut grads, &mut probe)
                }
                CellKind::Slstm => {
                    slstm_layer_step(tape, net, l, t, &ext, &mut carries[l], &mut grads, &mut probe)
                }
            };
            if let Some(bad) = gz.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at step {t}, layer {l}, input {bad}"
                )));
            }
            ext = gz;
        }
    }
    for (l, layer) in net.layers.iter().enumerate() {
        mask_block_diagonal(&mut grads.layers[l].w_rec, layer.cfg.n_rec);
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient after sweep".into()));
    }
    Ok(grads)
}

fn record_probe(probe: &mut Option<&mut Vec<ProbePoint>>, t: usize, layer: usize, g: &[f64]) {
    if let Some(p) = probe.as_deref_mut() {
        p.push(ProbePoint {
            t,
            layer,
            var: numkit::variance(g),
            max: g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
}

/// Reverse one LIF/ALIF step. Returns ∂L/∂z_t for the layer below.
#[allow(clippy::too_many_arguments)]
fn spiking_layer_step(
    tape: &Tape,
    net: &Network,
    l: usize,
    t: usize,
    ext: &[f64],
    carry: &mut Carry,
    grads: &mut GradSet,
    probe: &mut Option<&mut Vec<ProbePoint>>,
) -> Vec<f64> {
    let layer = &net.layers[l];
    let cfg = &layer.cfg;
    let n = cfg.n_rec;
    let rec = &tape.records[l][t];
    let prev = (t > 0).then(|| &tape.records[l][t - 1]);
    let zeros = vec![0.0; n];
    let x_prev = prev.map_or(&zeros, |p| &p.x);
    let y_prev = prev.map_or(&zeros, |p| &p.y);
    let adaptive = cfg.kind == CellKind::Alif;
    let sg = cfg.surrogate;

    let mut gy = vec![0.0; n];
    let mut gi = vec![0.0; n];
    let mut next_gx = vec![0.0; n];
    let mut next_gy = vec![0.0; n];
    let mut next_ga = vec![0.0; n];
    for i in 0..n {
        let gx = carry.gx[i] + ext[i];
        let gv = gx * sg.pseudo_derivative(rec.v[i]);
        gy[i] = carry.gy[i] + gv;
        let threshold = if adaptive { rec.thr_eff[i] } else { cfg.thr[i] };
        match cfg.reset {
            Reset::Subtractive => {
                gi[i] = gy[i];
                next_gy[i] = cfg.alpha[i] * gy[i];
                next_gx[i] = -threshold * gy[i];
            }
            Reset::Multiplicative => {
                let current = layer.w.bias[i] + rec.input_current[i] + rec.recurrent_current[i];
                let gu = cfg.alpha[i] * gy[i] * (1.0 - x_prev[i]);
                gi[i] = gu;
                next_gy[i] = gu;
                next_gx[i] = -cfg.alpha[i] * gy[i] * (y_prev[i] + current);
            }
        }
        if adaptive {
            // v = y − A and (subtractive) y ∋ −A·x_{t−1}
            let mut g_thr = -gv;
            if cfg.reset == Reset::Subtractive {
                g_thr -= gy[i] * x_prev[i];
            }
            let ga = carry.ga[i] + cfg.beta * g_thr;
            next_ga[i] = cfg.rho * ga;
            next_gx[i] += ga;
        }
    }
    record_probe(probe, t, l, &gy);

    layer.w.w_rec.acc_mul_vec(&gi, &mut next_gx);
    let g = &mut grads.layers[l];
    g.w_in.acc_outer(&rec.z, &gi);
    g.w_rec.acc_outer(x_prev, &gi);
    for (b, d) in g.bias.iter_mut().zip(&gi) {
        *b += d;
    }
    carry.gx = next_gx;
    carry.gy = next_gy;
    carry.ga = next_ga;

    let mut gz = vec![0.0; cfg.n_in];
    if l > 0 {
        layer.w.w_in.acc_mul_vec(&gi, &mut gz);
    }
    gz
}

/// Reverse one sLSTM step. Returns ∂L/∂z_t for the layer below.
#[allow(clippy::too_many_arguments)]
fn slstm_layer_step(
    tape: &Tape,
    net: &Network,
    l: usize,
    t: usize,
    ext: &[f64],
    carry: &mut Carry,
    grads: &mut GradSet,
    probe: &mut Option<&mut Vec<ProbePoint>>,
) -> Vec<f64> {
    let layer = &net.layers[l];
    let cfg = &layer.cfg;
    let n = cfg.n_rec;
    let rec = &tape.records[l][t];
    let prev = (t > 0).then(|| &tape.records[l][t - 1]);
    let zeros = vec![0.0; n];
    let h_prev = prev.map_or(&zeros, |p| &p.x);
    let c_prev = prev.map_or(&zeros, |p| &p.y);
    let sg = cfg.surrogate;
    let gates = &rec.gates;

    let mut gc = vec![0.0; n];
    let mut gp = vec![0.0; 4 * n];
    let mut next_gc = vec![0.0; n];
    for i in 0..n {
        let gh = carry.gx[i] + ext[i];
        let (ig, fg, og, cand) = (gates[i], gates[n + i], gates[2 * n + i], gates[3 * n + i]);
        let g_out_gate = gh * rec.cell_out[i];
        let g_cell_out = gh * og;
        gc[i] = carry.gy[i] + g_cell_out * (-2.0 * sg.pseudo_derivative(rec.v[i]));
        let g_forget = gc[i] * c_prev[i];
        let g_input = gc[i] * cand;
        let g_cand = gc[i] * ig;
        next_gc[i] = gc[i] * fg;
        gp[i] = g_input * sg.pseudo_derivative(rec.pre[i]);
        gp[n + i] = g_forget * sg.pseudo_derivative(rec.pre[n + i]);
        gp[2 * n + i] = g_out_gate * sg.pseudo_derivative(rec.pre[2 * n + i]);
        gp[3 * n + i] = g_cand * (-2.0 * sg.pseudo_derivative(rec.pre[3 * n + i]));
    }
    record_probe(probe, t, l, &gc);

    let mut next_gh = vec![0.0; n];
    layer.w.w_rec.acc_mul_vec(&gp, &mut next_gh);
    let g = &mut grads.layers[l];
    g.w_in.acc_outer(&rec.z, &gp);
    g.w_rec.acc_outer(h_prev, &gp);
    for (b, d) in g.bias.iter_mut().zip(&gp) {
        *b += d;
    }
    carry.gx = next_gh;
    carry.gy = next_gc;

    let mut gz = vec![0.0; cfg.n_in];
    if l > 0 {
        layer.w.w_in.acc_mul_vec(&gp, &mut gz);
    }
    gz
}

/// Smooth forward and exact backward for a network whose every layer uses the
/// unit ∂sigmoid surrogate. `loss` maps the logits to a loss value and its
/// gradient w.r.t. the logits.
pub fn soft_forward_backward<F>(net: &Network, inputs: &Matrix, loss: F) -> Result<(f64, GradSet)>
where
    F: Fn(&Matrix) -> Result<(f64, Matrix)>,
{
    net.check_soft_compatible()?;
    let tape = net.forward(inputs, Activation::Soft)?;
    let (value, dlogits) = loss(&tape.logits)?;
    let grads = backward(&tape, &dlogits, net)?;
    Ok((value, grads))
}

/// Flat view of every trainable parameter of a network, in the same order as
/// [`GradSet::flatten`].
pub fn flatten_params(net: &Network) -> Vec<f64> {
    let mut v = Vec::new();
    for l in &net.layers {
        v.extend_from_slice(l.w.w_in.as_slice());
        v.extend_from_slice(l.w.w_rec.as_slice());
        v.extend_from_slice(&l.w.bias);
    }
    v.extend_from_slice(net.readout.w.as_slice());
    v.extend_from_slice(&net.readout.bias);
    v
}

/// Mutable access to parameter `index` in [`flatten_params`] order.
pub fn param_mut(net: &mut Network, mut index: usize) -> Option<&mut f64> {
    for l in &mut net.layers {
        for part in [l.w.w_in.as_mut_slice(), l.w.w_rec.as_mut_slice(), l.w.bias.as_mut_slice()] {
            if index < part.len() {
                return Some(&mut part[index]);
            }
            index -= part.len();
        }
    }
    for part in [net.readout.w.as_mut_slice(), net.readout.bias.as_mut_slice()] {
        if index < part.len() {
            return Some(&mut part[index]);
        }
        index -= part.len();
    }
    None
}
