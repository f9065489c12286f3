//! Example-level DP-SGD: per-sample clipping and calibrated Gaussian noise.
//!
//! ```text
//! g~ = (1/B) * sum_i clip_C(g_i) + (sigma C / B) * xi,   xi ~ N(0, I)
//! ```
//!
//! `B` is the realised batch size of the step. Noise for each step comes
//! from its own seeded stream so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accountant;
use crate::bptt::PerSampleGrads;
use crate::error::{Error, Result};
use crate::params::{l2_norm, ParamLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// One bound over the whole flattened gradient.
    #[default]
    Global,
    /// Each LIF layer clipped to `C / sqrt(L)`, so the total stays within `C`.
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Every sample joins each step independently with probability `q`.
    #[default]
    Poisson,
    /// Shuffled fixed-size batches; the accountant's guarantee does not apply.
    Fixed,
}

/// Fully resolved privacy settings of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub clip_c: f64,
    pub sigma: f64,
    pub sample_rate: f64,
    pub total_steps: u64,
    pub clip_mode: ClipMode,
    pub batching: Batching,
}

impl DpConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            epsilon: 0.0,
            delta: 0.0,
            clip_c: 0.0,
            sigma: 0.0,
            sample_rate: 1.0,
            total_steps: 0,
            clip_mode: ClipMode::Global,
            batching: Batching::Fixed,
        }
    }

    /// Calibrates `sigma` for a target `epsilon` unless `sigma_override` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn calibrated(
        epsilon: f64,
        delta: f64,
        clip_c: f64,
        sample_rate: f64,
        total_steps: u64,
        clip_mode: ClipMode,
        batching: Batching,
        sigma_override: Option<f64>,
    ) -> Result<Self> {
        let sigma = match sigma_override {
            Some(s) => s,
            None => accountant::calibrate_sigma(epsilon, delta, sample_rate, total_steps)?,
        };
        let cfg = Self {
            enabled: true,
            epsilon,
            delta,
            clip_c,
            sigma,
            sample_rate,
            total_steps,
            clip_mode,
            batching,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        let mut bad = Vec::new();
        if !(self.epsilon > 0.0) {
            bad.push(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            bad.push(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.clip_c > 0.0 && self.clip_c.is_finite()) {
            bad.push(format!(
                "clip bound C must be positive, got {}",
                self.clip_c
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            bad.push(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            bad.push(format!(
                "sample rate must lie in (0, 1], got {}",
                self.sample_rate
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Epsilon actually spent by the configured steps.
    pub fn realized_epsilon(&self) -> Result<f64> {
        if !self.enabled {
            return Ok(f64::INFINITY);
        }
        accountant::account_epsilon(
            self.sigma,
            self.sample_rate,
            self.total_steps.max(1),
            self.delta,
        )
    }
}

/// Diagnostics of one noisy step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisySummary {
    pub pre_clip_norms: Vec<f64>,
    pub clipped_fraction: f64,
    pub noise_seed: u64,
}

/// `g * min(1, c / ||g||)`.
pub fn clip(g: &[f64], c: f64) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, c);
    out
}

/// Clips in place and returns the pre-clip norm.
pub fn clip_in_place(g: &mut [f64], c: f64) -> f64 {
    let norm = l2_norm(g);
    if norm > c {
        let s = c / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

/// Clips according to `mode`; returns the pre-clip global norm and whether
/// any scaling happened.
pub fn clip_with_mode(g: &mut [f64], c: f64, mode: ClipMode, layout: &ParamLayout) -> (f64, bool) {
    let norm = l2_norm(g);
    match mode {
        ClipMode::Global => {
            clip_in_place(g, c);
            (norm, norm > c)
        }
        ClipMode::PerLayer => {
            let share = c / (layout.layers.len() as f64).sqrt();
            let mut clipped = false;
            for l in 0..layout.layers.len() {
                let seg = &mut g[layout.layer_range(l)];
                clipped |= clip_in_place(seg, share) > share;
            }
            (norm, clipped)
        }
    }
}

/// Clipped mean plus Gaussian noise of standard deviation `sigma C / B`.
pub fn dp_sgd_step(
    per_sample: &PerSampleGrads,
    cfg: &DpConfig,
    layout: &ParamLayout,
    noise_seed: u64,
) -> Result<(Vec<f64>, NoisySummary)> {
    if per_sample.is_empty() {
        return Err(Error::Empty("DP-SGD step over an empty batch".into()));
    }
    cfg.validate()?;
    let b = per_sample.len() as f64;
    let d = per_sample.dim();
    let mut sum = vec![0.0; d];
    let mut norms = Vec::with_capacity(per_sample.len());
    let mut clipped = 0usize;
    let mut buf = vec![0.0; d];
    for g in &per_sample.grads {
        buf.copy_from_slice(g);
        let (norm, was_clipped) = clip_with_mode(&mut buf, cfg.clip_c, cfg.clip_mode, layout);
        norms.push(norm);
        clipped += was_clipped as usize;
        sum.iter_mut().zip(&buf).for_each(|(s, v)| *s += v);
    }
    let std = cfg.sigma * cfg.clip_c / b;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    for s in sum.iter_mut() {
        *s /= b;
        if std > 0.0 {
            let xi: f64 = StandardNormal.sample(&mut rng);
            *s += std * xi;
        }
    }
    Ok((
        sum,
        NoisySummary {
            clipped_fraction: clipped as f64 / b,
            pre_clip_norms: norms,
            noise_seed,
        },
    ))
}
