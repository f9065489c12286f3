//! Leaky integrate-and-fire neurons in discrete time.
//!
//! One simulation step for a neuron with decay `beta` is
//!
//! ```text
//! u_decayed = v_rest + beta * (u_prev - v_rest) + current
//! spike     = H(u_decayed - v_th)
//! u_next    = u_decayed - spike * v_th                      (subtractive)
//!           = spike * v_reset + (1 - spike) * u_decayed     (hard)
//! ```
//!
//! `H` is the Heaviside step. Training replaces `H'` by the fast-sigmoid
//! derivative [`surrogate_grad`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    Subtractive,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifConfig {
    pub v_th: f64,
    pub v_rest: f64,
    /// Potential a hard reset jumps to; also the value held while refractory.
    pub v_reset: f64,
    pub reset: ResetMode,
    pub beta_init: f64,
    pub beta_learnable: bool,
    /// Fast-sigmoid slope `k`.
    pub surrogate_slope: f64,
    pub tau_ref_steps: u32,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            v_th: 1.0,
            v_rest: 0.0,
            v_reset: 0.0,
            reset: ResetMode::Subtractive,
            beta_init: 0.9,
            beta_learnable: true,
            surrogate_slope: 25.0,
            tau_ref_steps: 0,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.beta_init > 0.0 && self.beta_init < 1.0) {
            bad.push(format!(
                "beta_init must lie in (0, 1), got {}",
                self.beta_init
            ));
        }
        if !(self.v_th > self.v_rest) {
            bad.push(format!(
                "v_th ({}) must exceed v_rest ({})",
                self.v_th, self.v_rest
            ));
        }
        if !(self.surrogate_slope > 0.0) {
            bad.push(format!(
                "surrogate_slope must be positive, got {}",
                self.surrogate_slope
            ));
        }
        if ![self.v_th, self.v_rest, self.v_reset]
            .iter()
            .all(|v| v.is_finite())
        {
            bad.push("potentials must be finite".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Fast-sigmoid surrogate derivative `1 / (1 + k|x|)^2`.
#[inline]
pub fn surrogate_grad(x: f64, slope: f64) -> f64 {
    let d = 1.0 + slope * x.abs();
    1.0 / (d * d)
}

/// Smooth spike used by the soft-forward verification mode: `sigmoid(4x)`.
/// Its slope at the threshold is 1, the peak of the fast-sigmoid surrogate,
/// whatever the surrogate slope `k`.
#[inline]
pub fn soft_spike(x: f64) -> f64 {
    1.0 / (1.0 + (-4.0 * x).exp())
}

#[inline]
pub fn soft_spike_grad(x: f64) -> f64 {
    let s = soft_spike(x);
    4.0 * s * (1.0 - s)
}

/// Binary spike record indexed `(sample, step, neuron)`, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeTensor {
    batch: usize,
    steps: usize,
    neurons: usize,
    data: Vec<u8>,
}

impl SpikeTensor {
    pub fn zeros(batch: usize, steps: usize, neurons: usize) -> Result<Self> {
        Self::check_dims(batch, steps, neurons)?;
        Ok(Self {
            batch,
            steps,
            neurons,
            data: vec![0; batch * steps * neurons],
        })
    }

    pub fn from_vec(batch: usize, steps: usize, neurons: usize, data: Vec<u8>) -> Result<Self> {
        Self::check_dims(batch, steps, neurons)?;
        if data.len() != batch * steps * neurons {
            return Err(Error::Config(format!(
                "spike buffer has {} entries, expected {}x{}x{}",
                data.len(),
                batch,
                steps,
                neurons
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::Config(format!(
                "spike entry {pos} has value {}, expected 0 or 1",
                data[pos]
            )));
        }
        Ok(Self {
            batch,
            steps,
            neurons,
            data,
        })
    }

    fn check_dims(batch: usize, steps: usize, neurons: usize) -> Result<()> {
        if batch == 0 || steps == 0 || neurons == 0 {
            return Err(Error::Empty(format!(
                "spike tensor dims must be positive, got ({batch}, {steps}, {neurons})"
            )));
        }
        Ok(())
    }

    /// Stacks per-sample `(steps, neurons)` records into one tensor.
    pub fn stack<'a>(
        samples: impl IntoIterator<Item = &'a [u8]>,
        steps: usize,
        neurons: usize,
    ) -> Result<Self> {
        let mut data = Vec::new();
        let mut batch = 0;
        for s in samples {
            if s.len() != steps * neurons {
                return Err(Error::Config(format!(
                    "sample {batch} has {} entries, expected {}",
                    s.len(),
                    steps * neurons
                )));
            }
            data.extend_from_slice(s);
            batch += 1;
        }
        Self::from_vec(batch, steps, neurons, data)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.steps, self.neurons)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    #[inline]
    pub fn get(&self, b: usize, t: usize, j: usize) -> u8 {
        self.data[(b * self.steps + t) * self.neurons + j]
    }

    #[inline]
    pub fn set(&mut self, b: usize, t: usize, j: usize, spike: bool) {
        self.data[(b * self.steps + t) * self.neurons + j] = spike as u8;
    }

    /// The `(steps, neurons)` slab of one sample.
    pub fn sample(&self, b: usize) -> &[u8] {
        let len = self.steps * self.neurons;
        &self.data[b * len..(b + 1) * len]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn total_spikes(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }
}

/// Result of advancing one neuron by one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronStep {
    pub pre_reset: f64,
    pub spike: bool,
    pub post_reset: f64,
}

#[inline]
pub fn step_neuron(u_prev: f64, current: f64, beta: f64, cfg: &LifConfig) -> NeuronStep {
    let pre_reset = cfg.v_rest + beta * (u_prev - cfg.v_rest) + current;
    let spike = pre_reset >= cfg.v_th;
    let post_reset = match (cfg.reset, spike) {
        (_, false) => pre_reset,
        (ResetMode::Subtractive, true) => pre_reset - cfg.v_th,
        (ResetMode::Hard, true) => cfg.v_reset,
    };
    NeuronStep {
        pre_reset,
        spike,
        post_reset,
    }
}

/// One Euler step for a vector of neurons sharing `beta`.
pub fn lif_step(
    u_prev: &[f64],
    current: &[f64],
    beta: f64,
    cfg: &LifConfig,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut state = LifState {
        potential: u_prev.to_vec(),
        refractory: vec![0; u_prev.len()],
    };
    let spikes = state.step(current, beta, cfg, 0, 0)?;
    Ok((state.potential, spikes))
}

/// Membrane state of a layer, including refractory countdowns.
#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub potential: Vec<f64>,
    pub refractory: Vec<u32>,
}

impl LifState {
    pub fn at_rest(n: usize, cfg: &LifConfig) -> Self {
        Self {
            potential: vec![cfg.v_rest; n],
            refractory: vec![0; n],
        }
    }

    /// Advances the layer by one step. `layer` and `step` only label errors.
    pub fn step(
        &mut self,
        current: &[f64],
        beta: f64,
        cfg: &LifConfig,
        layer: usize,
        step: usize,
    ) -> Result<Vec<u8>> {
        if current.len() != self.potential.len() {
            return Err(Error::Config(format!(
                "layer {layer}: {} currents for {} neurons",
                current.len(),
                self.potential.len()
            )));
        }
        let mut spikes = vec![0u8; current.len()];
        for (j, (&c, u)) in current.iter().zip(self.potential.iter_mut()).enumerate() {
            if !c.is_finite() || !u.is_finite() {
                return Err(Error::NonFinite {
                    layer,
                    step,
                    what: format!("input current {c} / potential {u} at neuron {j}"),
                });
            }
            if self.refractory[j] > 0 {
                self.refractory[j] -= 1;
                *u = cfg.v_reset;
                continue;
            }
            let out = step_neuron(*u, c, beta, cfg);
            *u = out.post_reset;
            if out.spike {
                spikes[j] = 1;
                self.refractory[j] = cfg.tau_ref_steps;
            }
        }
        Ok(spikes)
    }
}
