//! Backpropagation through time for the dense LIF stack.
//!
//! The backward pass walks layers top-down and, inside each layer, steps
//! backwards in time. With `pre = v_rest + beta (u_prev - v_rest) + W s_in + b`
//! the adjoint of the pre-reset potential is
//!
//! ```text
//! g_pre = g_u * du/dpre + (g_spike + g_u * du/dspike) * dspike/dpre
//! ```
//!
//! where `dspike/dpre` is the fast-sigmoid surrogate in spiking mode and the
//! exact sigmoid slope in soft mode. When the reset is detached,
//! `du/dspike` is taken as zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lif::{soft_spike_grad, surrogate_grad, ResetMode, SpikeTensor};
use crate::network::{simulate_sample, ForwardMode, NetworkArch, SampleTrace};
use crate::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BpttOptions {
    pub mode: ForwardMode,
    /// Treat the reset term as a constant in the backward pass.
    pub detach_reset: bool,
}

impl Default for BpttOptions {
    fn default() -> Self {
        Self {
            mode: ForwardMode::Spiking,
            detach_reset: true,
        }
    }
}

impl BpttOptions {
    /// Exact gradients of the soft forward pass, for finite-difference checks.
    pub fn soft_exact() -> Self {
        Self {
            mode: ForwardMode::Soft,
            detach_reset: false,
        }
    }
}

/// One flat gradient per sample, in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGrads {
    pub grads: Vec<Vec<f64>>,
}

impl PerSampleGrads {
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.grads.first().map_or(0, Vec::len)
    }

    /// Coordinatewise mean, summed in sample order.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for g in &self.grads {
            for (o, v) in out.iter_mut().zip(g) {
                *o += v;
            }
        }
        let inv = 1.0 / self.grads.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

/// Which firing-rate functional to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateTarget {
    /// Neuron-weighted rate over all LIF layers.
    Network,
    /// Rate of one LIF layer (0-based; the input is not a LIF layer).
    Layer(usize),
}

/// Cross-entropy of softmaxed logits; returns the loss and `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn check_labels(arch: &NetworkArch, labels: &[usize], batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Config(format!(
            "{} labels for {batch} samples",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= arch.n_classes()) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {} classes",
            arch.n_classes()
        )));
    }
    Ok(())
}

/// Adjoint sweep over a recorded sample. `seeds[l]` holds the direct
/// derivative of the objective with respect to every spike of LIF layer `l`
/// (`steps x n_l`). Contributions are added into `grad`.
pub(crate) fn backprop_trace(
    params: &ModelParams,
    arch: &NetworkArch,
    input: &[u8],
    trace: &SampleTrace,
    mut seeds: Vec<Vec<f64>>,
    opts: BpttOptions,
    grad: &mut [f64],
) -> Result<()> {
    let steps = trace.steps;
    let layout = params.layout().clone();
    let mut carried: Option<Vec<f64>> = None;
    for l in (0..arch.n_lif_layers()).rev() {
        let tr = &trace.layers[l];
        let cfg = &arch.lif[l];
        let slots = layout.layers[l];
        let (n, n_prev) = (slots.n_out, slots.n_in);
        let mut g_spike = std::mem::take(&mut seeds[l]);
        if let Some(from_above) = carried.take() {
            for (g, a) in g_spike.iter_mut().zip(from_above) {
                *g += a;
            }
        }
        let mut g_prev = if l > 0 {
            vec![0.0; steps * n_prev]
        } else {
            Vec::new()
        };
        let beta = params.beta(l);
        let w = params.weights(l);
        let mut g_u = vec![0.0; n];
        let mut g_pre = vec![0.0; n];
        let mut g_beta = 0.0;
        let mut active: Vec<(usize, f64)> = Vec::with_capacity(n_prev);
        for t in (0..steps).rev() {
            for j in 0..n {
                let k = t * n + j;
                if !tr.held.is_empty() && tr.held[k] {
                    g_pre[j] = 0.0;
                    g_u[j] = 0.0;
                    continue;
                }
                let x = tr.pre[k] - cfg.v_th;
                let ds = match opts.mode {
                    ForwardMode::Spiking => surrogate_grad(x, cfg.surrogate_slope),
                    ForwardMode::Soft => soft_spike_grad(x),
                };
                let s = tr.spikes[k];
                let (du_dpre, mut du_ds) = match cfg.reset {
                    ResetMode::Subtractive => (1.0, -cfg.v_th),
                    ResetMode::Hard => (1.0 - s, cfg.v_reset - tr.pre[k]),
                };
                if opts.detach_reset {
                    du_ds = 0.0;
                }
                let gp = g_u[j] * du_dpre + (g_spike[k] + g_u[j] * du_ds) * ds;
                if !gp.is_finite() {
                    return Err(Error::NonFinite {
                        layer: l + 1,
                        step: t,
                        what: format!("membrane adjoint at neuron {j}"),
                    });
                }
                let u_prev = if t == 0 { cfg.v_rest } else { tr.post[k - n] };
                g_beta += gp * (u_prev - cfg.v_rest);
                g_pre[j] = gp;
                g_u[j] = beta * gp;
            }

            active.clear();
            if l == 0 {
                let row = &input[t * n_prev..(t + 1) * n_prev];
                active.extend(
                    row.iter()
                        .enumerate()
                        .filter(|(_, &v)| v != 0)
                        .map(|(j, &v)| (j, v as f64)),
                );
            } else {
                let prev = &trace.layers[l - 1].spikes[t * n_prev..(t + 1) * n_prev];
                active.extend(
                    prev.iter()
                        .enumerate()
                        .filter(|(_, &v)| v != 0.0)
                        .map(|(j, &v)| (j, v)),
                );
            }
            for (i, &gp) in g_pre.iter().enumerate() {
                if gp == 0.0 {
                    continue;
                }
                grad[slots.bias + i] += gp;
                let base = slots.weights + i * n_prev;
                for &(j, v) in &active {
                    grad[base + j] += gp * v;
                }
                if l > 0 {
                    let row = &w[i * n_prev..(i + 1) * n_prev];
                    let gslot = &mut g_prev[t * n_prev..(t + 1) * n_prev];
                    for (g, &wij) in gslot.iter_mut().zip(row) {
                        *g += gp * wij;
                    }
                }
            }
        }
        if cfg.beta_learnable {
            grad[slots.beta] += g_beta * beta * (1.0 - beta);
        }
        if l > 0 {
            carried = Some(g_prev);
        }
    }
    Ok(())
}

fn loss_seeds(arch: &NetworkArch, steps: usize, dlogits: &[f64], scale: f64) -> Vec<Vec<f64>> {
    let sizes = arch.lif_sizes();
    let last = sizes.len() - 1;
    sizes
        .iter()
        .enumerate()
        .map(|(l, &n)| {
            if l == last {
                (0..steps * n).map(|k| dlogits[k % n] * scale).collect()
            } else {
                vec![0.0; steps * n]
            }
        })
        .collect()
}

fn rate_seeds(
    arch: &NetworkArch,
    steps: usize,
    target: RateTarget,
    scale: f64,
) -> Result<Vec<Vec<f64>>> {
    let sizes = arch.lif_sizes();
    let total: usize = sizes.iter().sum();
    if let RateTarget::Layer(l) = target {
        if l >= sizes.len() {
            return Err(Error::Config(format!(
                "rate target layer {l} out of range for {} LIF layers",
                sizes.len()
            )));
        }
    }
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(l, &n)| {
            let v = match target {
                RateTarget::Network => scale / (steps * total) as f64,
                RateTarget::Layer(sel) if sel == l => scale / (steps * n) as f64,
                RateTarget::Layer(_) => 0.0,
            };
            vec![v; steps * n]
        })
        .collect())
}

/// Loss and gradient of a single labelled sample.
pub fn sample_loss_grad(
    params: &ModelParams,
    arch: &NetworkArch,
    input: &[u8],
    steps: usize,
    label: usize,
    opts: BpttOptions,
) -> Result<(f64, Vec<f64>)> {
    let trace = simulate_sample(params, arch, input, steps, opts.mode)?;
    let (loss, dlogits) = cross_entropy(&trace.logits(), label);
    let mut grad = vec![0.0; params.len()];
    let seeds = loss_seeds(arch, steps, &dlogits, 1.0);
    backprop_trace(params, arch, input, &trace, seeds, opts, &mut grad)?;
    Ok((loss, grad))
}

/// Per-sample gradients of the cross-entropy loss. Samples are processed in
/// parallel; results are returned in batch order.
pub fn backward_loss(
    params: &ModelParams,
    arch: &NetworkArch,
    inputs: &SpikeTensor,
    labels: &[usize],
    opts: BpttOptions,
) -> Result<PerSampleGrads> {
    check_labels(arch, labels, inputs.batch())?;
    let steps = inputs.steps();
    let grads = (0..inputs.batch())
        .into_par_iter()
        .map(|b| {
            sample_loss_grad(params, arch, inputs.sample(b), steps, labels[b], opts).map(|(_, g)| g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerSampleGrads { grads })
}

/// Gradient of the batch-mean loss accumulated in a single buffer.
pub fn backward_mean_loss(
    params: &ModelParams,
    arch: &NetworkArch,
    inputs: &SpikeTensor,
    labels: &[usize],
    opts: BpttOptions,
) -> Result<Vec<f64>> {
    check_labels(arch, labels, inputs.batch())?;
    let steps = inputs.steps();
    let scale = 1.0 / inputs.batch() as f64;
    let mut grad = vec![0.0; params.len()];
    for b in 0..inputs.batch() {
        let input = inputs.sample(b);
        let trace = simulate_sample(params, arch, input, steps, opts.mode)?;
        let (_, dlogits) = cross_entropy(&trace.logits(), labels[b]);
        backprop_trace(
            params,
            arch,
            input,
            &trace,
            loss_seeds(arch, steps, &dlogits, scale),
            opts,
            &mut grad,
        )?;
    }
    Ok(grad)
}

/// Mean cross-entropy of a batch under the given forward mode.
pub fn batch_loss(
    params: &ModelParams,
    arch: &NetworkArch,
    inputs: &SpikeTensor,
    labels: &[usize],
    mode: ForwardMode,
) -> Result<f64> {
    check_labels(arch, labels, inputs.batch())?;
    let mut total = 0.0;
    for b in 0..inputs.batch() {
        let trace = simulate_sample(params, arch, inputs.sample(b), inputs.steps(), mode)?;
        total += cross_entropy(&trace.logits(), labels[b]).0;
    }
    Ok(total / inputs.batch() as f64)
}

/// Firing-rate functional over a batch. In soft mode spikes are the relaxed
/// values, so the result is the quantity [`grad_rate`] differentiates.
pub fn rate_value(
    params: &ModelParams,
    arch: &NetworkArch,
    inputs: &SpikeTensor,
    target: RateTarget,
    mode: ForwardMode,
) -> Result<f64> {
    let steps = inputs.steps();
    let mut acc = 0.0;
    for b in 0..inputs.batch() {
        let trace = simulate_sample(params, arch, inputs.sample(b), steps, mode)?;
        let seeds = rate_seeds(arch, steps, target, 1.0)?;
        for (lt, seed) in trace.layers.iter().zip(&seeds) {
            acc += lt.spikes.iter().zip(seed).map(|(s, w)| s * w).sum::<f64>();
        }
    }
    Ok(acc / inputs.batch() as f64)
}

/// Gradient of the batch-mean firing rate with respect to all parameters.
pub fn grad_rate(
    params: &ModelParams,
    arch: &NetworkArch,
    inputs: &SpikeTensor,
    target: RateTarget,
    opts: BpttOptions,
) -> Result<Vec<f64>> {
    let steps = inputs.steps();
    let scale = 1.0 / inputs.batch() as f64;
    rate_seeds(arch, steps, target, scale)?;
    let parts = (0..inputs.batch())
        .into_par_iter()
        .map(|b| {
            let input = inputs.sample(b);
            let trace = simulate_sample(params, arch, input, steps, opts.mode)?;
            let mut g = vec![0.0; params.len()];
            backprop_trace(
                params,
                arch,
                input,
                &trace,
                rate_seeds(arch, steps, target, scale)?,
                opts,
                &mut g,
            )?;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; params.len()];
    for g in parts {
        for (o, v) in grad.iter_mut().zip(g) {
            *o += v;
        }
    }
    Ok(grad)
}
