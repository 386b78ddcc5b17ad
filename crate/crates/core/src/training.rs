//! Backpropagation through time for both cells, MSE loss, Adam, and the
//! mini-batch training loop.

use crate::cells::{
    forward_window, CellKind, CellParams, ForwardTrace, GruParams, LstmConfig, LstmParams,
    Network, OutputPeephole,
};
use crate::dataprep::WindowedDataset;
use crate::error::{Error, Result, ResultExt};
use crate::numerics::{add_slices, Matrix, Rng};
use crate::par::Execution;

/// Windows per sequential accumulation chunk inside a batch. Chunk partial
/// sums are combined in chunk order, so the batch gradient is the same for
/// every execution strategy and thread count.
const GRAD_CHUNK: usize = 4;

/// Mean of squared differences over every element.
pub fn mse(actual: &Matrix, predicted: &Matrix) -> Result<f64> {
    if actual.shape() != predicted.shape() {
        return Err(Error::shape("mse", actual.shape(), predicted.shape()));
    }
    if actual.is_empty() {
        return Err(Error::Precondition("mse of an empty matrix".into()));
    }
    let sse: f64 = actual
        .as_slice()
        .iter()
        .zip(predicted.as_slice())
        .map(|(a, p)| (a - p) * (a - p))
        .sum();
    Ok(sse / actual.len() as f64)
}

/// Adds the gradient of `Σ_s (pred_s - y_s)² · scale` for one window into
/// `grads`. Returns that window's unscaled squared error.
fn accumulate_window(
    net: &Network,
    window: &[f64],
    target: &[f64],
    scale: f64,
    grads: &mut Network,
) -> Result<f64> {
    let (pred, trace) = forward_window(net, window, true)?;
    let trace = trace.expect("trace requested");
    let mut sse = 0.0;
    let dpred: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(p, y)| {
            sse += (p - y) * (p - y);
            2.0 * (p - y) * scale
        })
        .collect();

    let h_last: &[f64] = match &trace {
        ForwardTrace::Lstm(steps) => &steps.last().expect("non-empty window").h,
        ForwardTrace::Gru(steps) => &steps.last().expect("non-empty window").h,
    };
    grads.dense.w_d.add_outer(&dpred, h_last);
    add_slices(grads.dense.b_d.as_mut_slice(), &dpred);
    let mut dh = vec![0.0; net.units()];
    net.dense.w_d.matvec_t_acc(&dpred, &mut dh);

    match (&net.cell, &mut grads.cell, &trace) {
        (CellParams::Lstm(p), CellParams::Lstm(g), ForwardTrace::Lstm(steps)) => {
            lstm_backward(p, g, steps, dh)
        }
        (CellParams::Gru(p), CellParams::Gru(g), ForwardTrace::Gru(steps)) => {
            gru_backward(p, g, steps, dh)
        }
        _ => unreachable!("gradient buffer mirrors the network"),
    }
    Ok(sse)
}

fn lstm_backward(
    p: &LstmParams,
    g: &mut LstmParams,
    steps: &[crate::cells::LstmStep],
    mut dh: Vec<f64>,
) {
    let units = p.units();
    let peep = p.config.peepholes;
    let (v_i, v_f, v_o) = (p.v_i.as_slice(), p.v_f.as_slice(), p.v_o.as_slice());
    let mut dc_next = vec![0.0; units];
    let mut da_i = vec![0.0; units];
    let mut da_f = vec![0.0; units];
    let mut da_o = vec![0.0; units];
    let mut da_c = vec![0.0; units];

    for s in steps.iter().rev() {
        for j in 0..units {
            da_o[j] = dh[j] * s.tanh_c[j] * s.o[j] * (1.0 - s.o[j]);
            let mut dc = dh[j] * s.o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]) + dc_next[j];
            if peep && p.config.output_peephole == OutputPeephole::Current {
                dc += da_o[j] * v_o[j];
            }
            da_c[j] = dc * s.i[j] * (1.0 - s.c_tilde[j] * s.c_tilde[j]);
            da_i[j] = dc * s.c_tilde[j] * s.i[j] * (1.0 - s.i[j]);
            da_f[j] = dc * s.c_prev[j] * s.f[j] * (1.0 - s.f[j]);
            dc_next[j] = dc * s.f[j];
            if peep {
                dc_next[j] += da_f[j] * v_f[j] + da_i[j] * v_i[j];
                let g_vi = g.v_i.as_mut_slice();
                g_vi[j] += da_i[j] * s.c_prev[j];
                let g_vf = g.v_f.as_mut_slice();
                g_vf[j] += da_f[j] * s.c_prev[j];
                let g_vo = g.v_o.as_mut_slice();
                match p.config.output_peephole {
                    OutputPeephole::Current => g_vo[j] += da_o[j] * s.c[j],
                    OutputPeephole::Previous => {
                        g_vo[j] += da_o[j] * s.c_prev[j];
                        dc_next[j] += da_o[j] * v_o[j];
                    }
                }
            }
        }
        g.w_i.add_outer(&da_i, &s.x);
        g.w_f.add_outer(&da_f, &s.x);
        g.w_o.add_outer(&da_o, &s.x);
        g.w_c.add_outer(&da_c, &s.x);
        g.u_i.add_outer(&da_i, &s.h_prev);
        g.u_f.add_outer(&da_f, &s.h_prev);
        g.u_o.add_outer(&da_o, &s.h_prev);
        g.u_c.add_outer(&da_c, &s.h_prev);

        dh.fill(0.0);
        p.u_i.matvec_t_acc(&da_i, &mut dh);
        p.u_f.matvec_t_acc(&da_f, &mut dh);
        p.u_o.matvec_t_acc(&da_o, &mut dh);
        p.u_c.matvec_t_acc(&da_c, &mut dh);
    }
}

fn gru_backward(p: &GruParams, g: &mut GruParams, steps: &[crate::cells::GruStep], mut dh: Vec<f64>) {
    let units = p.units();
    let mut da_z = vec![0.0; units];
    let mut da_r = vec![0.0; units];
    let mut da_h = vec![0.0; units];
    let mut du = vec![0.0; units];
    let mut dh_prev = vec![0.0; units];

    for s in steps.iter().rev() {
        for j in 0..units {
            da_z[j] = dh[j] * (s.h_tilde[j] - s.h_prev[j]) * s.z[j] * (1.0 - s.z[j]);
            da_h[j] = dh[j] * s.z[j] * (1.0 - s.h_tilde[j] * s.h_tilde[j]);
            da_r[j] = da_h[j] * s.uh[j] * s.r[j] * (1.0 - s.r[j]);
            du[j] = da_h[j] * s.r[j];
            dh_prev[j] = dh[j] * (1.0 - s.z[j]);
        }
        g.w_z.add_outer(&da_z, &s.x);
        g.w_r.add_outer(&da_r, &s.x);
        g.w_h.add_outer(&da_h, &s.x);
        g.u_z.add_outer(&da_z, &s.h_prev);
        g.u_r.add_outer(&da_r, &s.h_prev);
        g.u_h.add_outer(&du, &s.h_prev);

        p.u_z.matvec_t_acc(&da_z, &mut dh_prev);
        p.u_r.matvec_t_acc(&da_r, &mut dh_prev);
        p.u_h.matvec_t_acc(&du, &mut dh_prev);
        std::mem::swap(&mut dh, &mut dh_prev);
    }
}

fn add_networks(acc: &mut Network, other: &Network) {
    for ((_, a), (_, b)) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        add_slices(a.as_mut_slice(), b.as_slice());
    }
}

/// Batch-MSE gradient over row slices. Returns the gradient and the batch MSE.
pub(crate) fn batch_gradients(
    exec: Execution,
    net: &Network,
    windows: &[&[f64]],
    targets: &[&[f64]],
) -> Result<(Network, f64)> {
    if windows.len() != targets.len() {
        return Err(Error::shape("bptt batch", (windows.len(), 0), (targets.len(), 0)));
    }
    if windows.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let steps = net.steps();
    if let Some(bad) = targets.iter().find(|t| t.len() != steps) {
        return Err(Error::shape("bptt targets", (1, bad.len()), (1, steps)));
    }
    let scale = 1.0 / (windows.len() * steps) as f64;
    let n_chunks = windows.len().div_ceil(GRAD_CHUNK);
    let partials = exec.map_range(n_chunks, |c| -> Result<(Network, f64)> {
        let mut grads = net.zeros_like();
        let mut sse = 0.0;
        let lo = c * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(windows.len());
        for k in lo..hi {
            sse += accumulate_window(net, windows[k], targets[k], scale, &mut grads)?;
        }
        Ok((grads, sse))
    });
    let mut total = net.zeros_like();
    let mut sse = 0.0;
    for part in partials {
        let (g, s) = part?;
        add_networks(&mut total, &g);
        sse += s;
    }
    Ok((total, sse * scale))
}

/// Exact gradient of the batch MSE with respect to every parameter, using
/// the default execution strategy. Returns `(gradients, batch_mse)`.
pub fn bptt_gradients(net: &Network, windows: &Matrix, targets: &Matrix) -> Result<(Network, f64)> {
    bptt_gradients_with(Execution::default(), net, windows, targets)
}

pub fn bptt_gradients_with(
    exec: Execution,
    net: &Network,
    windows: &Matrix,
    targets: &Matrix,
) -> Result<(Network, f64)> {
    if windows.rows() != targets.rows() {
        return Err(Error::shape("bptt_gradients", windows.shape(), targets.shape()));
    }
    let xs: Vec<&[f64]> = windows.row_iter().collect();
    let ys: Vec<&[f64]> = targets.row_iter().collect();
    let (grads, loss) = batch_gradients(exec, net, &xs, &ys)?;
    if grads.tensors().iter().any(|(_, m)| !m.is_finite()) || !loss.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((grads, loss))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(net: &Network, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = net
            .tensors()
            .iter()
            .map(|(_, m)| vec![0.0; m.len()])
            .collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam step, in place.
pub fn adam_update(params: &mut Network, grads: &Network, state: &mut AdamState) -> Result<()> {
    let shapes_match = params.tensors().len() == state.m.len()
        && params
            .tensors()
            .iter()
            .zip(grads.tensors())
            .zip(&state.m)
            .all(|(((_, p), (_, g)), m)| p.shape() == g.shape() && p.len() == m.len());
    if !shapes_match {
        return Err(Error::Precondition(
            "parameters, gradients and Adam moments disagree in shape".into(),
        ));
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for (k, ((_, p), (_, g))) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for ((w, &gr), (mi, vi)) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gr;
            *vi = beta2 * *vi + (1.0 - beta2) * gr * gr;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Scales the gradient so its global L2 norm is at most `max_norm`.
fn clip_global_norm(grads: &mut Network, max_norm: f64) {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|(_, m)| m.as_slice())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, m) in grads.tensors_mut() {
            m.as_mut_slice().iter_mut().for_each(|g| *g *= s);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub units: usize,
    pub gradient_clip: Option<f64>,
    pub lstm: LstmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            units: 128,
            gradient_clip: None,
            lstm: LstmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.units == 0 {
            return Err(Error::Config("units must be at least 1".into()));
        }
        if let Some(c) = self.gradient_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("gradient clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    pub config: TrainConfig,
    /// Input window length the model was trained on.
    pub window: usize,
    pub final_loss: f64,
}

impl TrainedModel {
    pub fn kind(&self) -> CellKind {
        self.network.kind()
    }

    pub fn steps(&self) -> usize {
        self.network.steps()
    }

    pub fn predict(&self, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != self.window {
            return Err(Error::Config(format!(
                "model expects windows of {} values, got {}",
                self.window,
                window.len()
            )));
        }
        Ok(forward_window(&self.network, window, false)?.0)
    }
}

/// Trains a fresh network on the first `n_train` rows of `dataset`.
/// Returns the model and the mean training MSE of every epoch.
pub fn train(kind: CellKind, dataset: &WindowedDataset, config: &TrainConfig) -> Result<(TrainedModel, Vec<f64>)> {
    train_with(Execution::default(), kind, dataset, config)
}

pub fn train_with(
    exec: Execution,
    kind: CellKind,
    dataset: &WindowedDataset,
    config: &TrainConfig,
) -> Result<(TrainedModel, Vec<f64>)> {
    config.validate()?;
    let n = dataset.n_train;
    if n == 0 {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let mut init_rng = Rng::derived(config.seed, 1);
    let mut shuffle_rng = Rng::derived(config.seed, 2);
    let mut net = Network::init(kind, config.units, dataset.steps, config.lstm, &mut init_rng)?;
    let mut adam = AdamState::new(
        &net,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );

    let xs: Vec<&[f64]> = (0..n).map(|k| dataset.x.row(k)).collect();
    let ys: Vec<&[f64]> = (0..n).map(|k| dataset.y.row(k)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_sse = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let bx: Vec<&[f64]> = batch.iter().map(|&k| xs[k]).collect();
            let by: Vec<&[f64]> = batch.iter().map(|&k| ys[k]).collect();
            let (mut grads, loss) = batch_gradients(exec, &net, &bx, &by)
                .context_with(|| format!("{kind} epoch {epoch} batch {b}"))?;
            if !loss.is_finite() || grads.tensors().iter().any(|(_, m)| !m.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient in {kind} epoch {epoch} batch {b}"
                )));
            }
            if let Some(max) = config.gradient_clip {
                clip_global_norm(&mut grads, max);
            }
            adam_update(&mut net, &grads, &mut adam)?;
            epoch_sse += loss * batch.len() as f64;
        }
        let epoch_loss = epoch_sse / n as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss in {kind} epoch {epoch}")));
        }
        history.push(epoch_loss);
    }

    let final_loss = *history.last().expect("epochs >= 1");
    Ok((
        TrainedModel {
            network: net,
            config: config.clone(),
            window: dataset.window,
            final_loss,
        },
        history,
    ))
}
