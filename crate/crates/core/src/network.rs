//! Dense feed-forward stack of LIF layers and its forward simulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lif::{soft_spike, step_neuron, LifConfig, LifState, ResetMode, SpikeTensor};
use crate::params::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkArch {
    /// Neuron counts, input width first and class count last.
    pub layer_sizes: Vec<usize>,
    /// One config per LIF layer (every layer except the input).
    pub lif: Vec<LifConfig>,
}

impl NetworkArch {
    pub fn new(layer_sizes: Vec<usize>, cfg: LifConfig) -> Result<Self> {
        let n = layer_sizes.len().saturating_sub(1);
        let arch = Self {
            layer_sizes,
            lif: vec![cfg; n],
        };
        arch.validate()?;
        Ok(arch)
    }

    /// `n_in -> 64 -> 64 -> n_classes`.
    pub fn default_for(n_in: usize, n_classes: usize) -> Self {
        Self {
            layer_sizes: vec![n_in, 64, 64, n_classes],
            lif: vec![LifConfig::default(); 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "network needs at least 2 layers, got {}",
                self.layer_sizes.len()
            )));
        }
        if let Some(i) = self.layer_sizes.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("layer {i} has zero neurons")));
        }
        if self.lif.len() != self.layer_sizes.len() - 1 {
            return Err(Error::Config(format!(
                "{} LIF configs for {} LIF layers",
                self.lif.len(),
                self.layer_sizes.len() - 1
            )));
        }
        self.lif.iter().try_for_each(LifConfig::validate)
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of LIF layers (hidden plus output).
    pub fn n_lif_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Sizes of the LIF layers only.
    pub fn lif_sizes(&self) -> &[usize] {
        &self.layer_sizes[1..]
    }
}

/// How the forward pass turns membrane offsets into spikes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// Heaviside spikes; training uses the surrogate derivative.
    Spiking,
    /// Spikes replaced by `sigmoid(4(u - v_th))`; exactly differentiable.
    Soft,
}

/// Full per-step record of one LIF layer for one sample, `(steps, n)` row-major.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub n: usize,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    pub spikes: Vec<f64>,
    /// Empty unless the layer has a refractory period.
    pub held: Vec<bool>,
}

#[derive(Debug, Clone)]
pub(crate) struct SampleTrace {
    pub steps: usize,
    pub layers: Vec<LayerTrace>,
}

impl SampleTrace {
    /// Output spike counts over the window.
    pub fn logits(&self) -> Vec<f64> {
        let out = self.layers.last().unwrap();
        let mut logits = vec![0.0; out.n];
        for t in 0..self.steps {
            for (l, s) in logits
                .iter_mut()
                .zip(&out.spikes[t * out.n..(t + 1) * out.n])
            {
                *l += s;
            }
        }
        logits
    }
}

fn check_input(arch: &NetworkArch, params: &ModelParams, input: &[u8], steps: usize) -> Result<()> {
    if params.n_layers() != arch.n_lif_layers() {
        return Err(Error::Config(format!(
            "parameters have {} layers, architecture {}",
            params.n_layers(),
            arch.n_lif_layers()
        )));
    }
    if steps == 0 || input.len() != steps * arch.input_size() {
        return Err(Error::Config(format!(
            "input has {} entries, expected {} steps x {} channels",
            input.len(),
            steps,
            arch.input_size()
        )));
    }
    Ok(())
}

/// `out = b + W x` over the nonzero entries of `x`.
#[inline]
fn drive(w: &[f64], b: &[f64], n_in: usize, active: &[(usize, f64)], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n_in..(i + 1) * n_in];
        let mut acc = b[i];
        for &(j, v) in active {
            acc += row[j] * v;
        }
        *o = acc;
    }
}

/// Simulates one sample and keeps every intermediate needed by BPTT.
pub(crate) fn simulate_sample(
    params: &ModelParams,
    arch: &NetworkArch,
    input: &[u8],
    steps: usize,
    mode: ForwardMode,
) -> Result<SampleTrace> {
    check_input(arch, params, input, steps)?;
    let n_in = arch.input_size();
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(arch.n_lif_layers());
    for (l, cfg) in arch.lif.iter().enumerate() {
        let n = arch.layer_sizes[l + 1];
        let n_prev = arch.layer_sizes[l];
        if mode == ForwardMode::Soft && cfg.tau_ref_steps > 0 {
            return Err(Error::Config(
                "soft forward mode does not model refractory periods".into(),
            ));
        }
        let beta = params.beta(l);
        let (w, b) = (params.weights(l), params.bias(l));
        let mut tr = LayerTrace {
            n,
            pre: vec![0.0; steps * n],
            post: vec![0.0; steps * n],
            spikes: vec![0.0; steps * n],
            held: if cfg.tau_ref_steps > 0 {
                vec![false; steps * n]
            } else {
                Vec::new()
            },
        };
        let mut u = vec![cfg.v_rest; n];
        let mut refractory = vec![0u32; n];
        let mut current = vec![0.0; n];
        let mut active: Vec<(usize, f64)> = Vec::with_capacity(n_prev);
        for t in 0..steps {
            active.clear();
            if l == 0 {
                let row = &input[t * n_in..(t + 1) * n_in];
                active.extend(
                    row.iter()
                        .enumerate()
                        .filter(|(_, &v)| v != 0)
                        .map(|(j, &v)| (j, v as f64)),
                );
            } else {
                let prev = &layers[l - 1].spikes[t * n_prev..(t + 1) * n_prev];
                active.extend(
                    prev.iter()
                        .enumerate()
                        .filter(|(_, &v)| v != 0.0)
                        .map(|(j, &v)| (j, v)),
                );
            }
            drive(w, b, n_prev, &active, &mut current);
            for j in 0..n {
                let k = t * n + j;
                if !current[j].is_finite() {
                    return Err(Error::NonFinite {
                        layer: l + 1,
                        step: t,
                        what: format!("input current at neuron {j}"),
                    });
                }
                if refractory[j] > 0 {
                    refractory[j] -= 1;
                    u[j] = cfg.v_reset;
                    tr.held[k] = true;
                    tr.pre[k] = cfg.v_reset;
                    tr.post[k] = cfg.v_reset;
                    continue;
                }
                match mode {
                    ForwardMode::Spiking => {
                        let st = step_neuron(u[j], current[j], beta, cfg);
                        tr.pre[k] = st.pre_reset;
                        tr.post[k] = st.post_reset;
                        if st.spike {
                            tr.spikes[k] = 1.0;
                            refractory[j] = cfg.tau_ref_steps;
                        }
                        u[j] = st.post_reset;
                    }
                    ForwardMode::Soft => {
                        let pre = cfg.v_rest + beta * (u[j] - cfg.v_rest) + current[j];
                        let s = soft_spike(pre - cfg.v_th);
                        let post = match cfg.reset {
                            ResetMode::Subtractive => pre - s * cfg.v_th,
                            ResetMode::Hard => s * cfg.v_reset + (1.0 - s) * pre,
                        };
                        tr.pre[k] = pre;
                        tr.post[k] = post;
                        tr.spikes[k] = s;
                        u[j] = post;
                    }
                }
            }
        }
        layers.push(tr);
    }
    Ok(SampleTrace { steps, layers })
}

/// Spike counts of one sample, without keeping potentials.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleActivity {
    /// Per LIF layer, per neuron spike count over the window.
    pub counts: Vec<Vec<u32>>,
    pub steps: usize,
}

impl SampleActivity {
    pub fn logits(&self) -> Vec<f64> {
        self.counts
            .last()
            .unwrap()
            .iter()
            .map(|&c| c as f64)
            .collect()
    }

    pub fn predicted_class(&self) -> usize {
        argmax_first(self.counts.last().unwrap())
    }

    pub fn layer_total(&self, l: usize) -> u64 {
        self.counts[l].iter().map(|&c| c as u64).sum()
    }
}

/// Index of the largest count; ties go to the lowest index.
pub fn argmax_first(v: &[u32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Heaviside-mode simulation keeping only spike counts.
pub fn sample_activity(
    params: &ModelParams,
    arch: &NetworkArch,
    input: &[u8],
    steps: usize,
) -> Result<SampleActivity> {
    check_input(arch, params, input, steps)?;
    let n_in = arch.input_size();
    let mut states: Vec<LifState> = arch
        .lif
        .iter()
        .zip(arch.lif_sizes())
        .map(|(cfg, &n)| LifState::at_rest(n, cfg))
        .collect();
    let mut counts: Vec<Vec<u32>> = arch.lif_sizes().iter().map(|&n| vec![0; n]).collect();
    let betas: Vec<f64> = (0..arch.n_lif_layers()).map(|l| params.beta(l)).collect();
    let mut active: Vec<(usize, f64)> = Vec::new();
    let mut current: Vec<f64> = Vec::new();
    for t in 0..steps {
        active.clear();
        let row = &input[t * n_in..(t + 1) * n_in];
        active.extend(
            row.iter()
                .enumerate()
                .filter(|(_, &v)| v != 0)
                .map(|(j, _)| (j, 1.0)),
        );
        for (l, state) in states.iter_mut().enumerate() {
            let n = arch.layer_sizes[l + 1];
            current.resize(n, 0.0);
            drive(
                params.weights(l),
                params.bias(l),
                arch.layer_sizes[l],
                &active,
                &mut current,
            );
            let spikes = state.step(&current, betas[l], &arch.lif[l], l + 1, t)?;
            active.clear();
            for (j, &s) in spikes.iter().enumerate() {
                if s != 0 {
                    counts[l][j] += 1;
                    active.push((j, 1.0));
                }
            }
        }
    }
    Ok(SampleActivity { counts, steps })
}

/// Per-layer record of a batched forward pass, indexed `(sample, step, neuron)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MembraneTrace {
    /// Potentials before reset; a spike was emitted where this reached `v_th`.
    pub pre_reset: Vec<f64>,
    /// Potentials carried to the next step.
    pub potentials: Vec<f64>,
    pub spikes: SpikeTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub traces: Vec<MembraneTrace>,
    /// Per sample, per class output spike counts.
    pub logits: Vec<Vec<f64>>,
}

/// Heaviside forward pass over a batch, recording every layer at every step.
pub fn forward(
    params: &ModelParams,
    input: &SpikeTensor,
    arch: &NetworkArch,
) -> Result<ForwardOutput> {
    arch.validate()?;
    let (batch, steps, n_in) = input.dims();
    if n_in != arch.input_size() {
        return Err(Error::Config(format!(
            "input has {n_in} channels, architecture expects {}",
            arch.input_size()
        )));
    }
    let mut pre: Vec<Vec<f64>> = arch
        .lif_sizes()
        .iter()
        .map(|&n| Vec::with_capacity(batch * steps * n))
        .collect();
    let mut post = pre.clone();
    let mut spikes: Vec<Vec<u8>> = arch
        .lif_sizes()
        .iter()
        .map(|&n| Vec::with_capacity(batch * steps * n))
        .collect();
    let mut logits = Vec::with_capacity(batch);
    for b in 0..batch {
        let tr = simulate_sample(params, arch, input.sample(b), steps, ForwardMode::Spiking)?;
        logits.push(tr.logits());
        for (l, lt) in tr.layers.into_iter().enumerate() {
            pre[l].extend_from_slice(&lt.pre);
            post[l].extend_from_slice(&lt.post);
            spikes[l].extend(lt.spikes.iter().map(|&s| s as u8));
        }
    }
    let traces = pre
        .into_iter()
        .zip(post)
        .zip(spikes)
        .zip(arch.lif_sizes())
        .map(|(((pre_reset, potentials), s), &n)| {
            Ok(MembraneTrace {
                pre_reset,
                potentials,
                spikes: SpikeTensor::from_vec(batch, steps, n, s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardOutput { traces, logits })
}
