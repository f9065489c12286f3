//! First-order predictions of how DP-SGD moves firing rates, and their
//! Monte-Carlo and single-neuron checks.
//!
//! Around a reference `theta*`, `T` noisy SGD steps with learning rates
//! `eta_t` perturb the rate to first order by
//!
//! ```text
//! mean shift  = -(sum eta_t) * grad_r^T (g_clip - g)
//! variance    = ||grad_r||^2 * (sum eta_t^2) * sigma^2 C^2 / B^2
//! ```
//!
//! The clipping gap `g_clip - g` is measured once at `theta*` and reused for
//! every step (frozen-point approximation, consistent with the expansion
//! itself being taken at `theta*`). With per-layer clipping the variance is
//! summed block by block over the per-layer noise scales.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bptt::{backward_loss, grad_rate, rate_value, BpttOptions, PerSampleGrads, RateTarget};
use crate::data::Dataset;
use crate::dp::{clip_with_mode, dp_sgd_step, DpConfig};
use crate::error::{Error, Result};
use crate::lif::{step_neuron, LifConfig};
use crate::network::NetworkArch;
use crate::params::{dot, ModelParams, ParamLayout};
use crate::rng;

/// How rates are measured and differentiated. The Heaviside rate is
/// piecewise constant in the parameters; the soft rate is the smooth
/// quantity a first-order expansion describes exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateProbe {
    pub target: RateTarget,
    pub opts: BpttOptions,
}

impl RateProbe {
    pub fn soft() -> Self {
        Self {
            target: RateTarget::Network,
            opts: BpttOptions::soft_exact(),
        }
    }

    pub fn spiking() -> Self {
        Self {
            target: RateTarget::Network,
            opts: BpttOptions::default(),
        }
    }

    pub fn value(&self, params: &ModelParams, arch: &NetworkArch, data: &Dataset) -> Result<f64> {
        rate_value(params, arch, &data.spikes, self.target, self.opts.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePerturbationForecast {
    pub predicted_mean_shift: f64,
    pub predicted_variance: f64,
    pub lr_sum: f64,
    pub lr_sq_sum: f64,
    /// `grad_r^T (g_clip - g)` at `theta*`.
    pub clip_gap_projection: f64,
}

/// Per-coordinate noise standard deviation of a step over `batch` samples.
/// Per-layer clipping keeps the total sensitivity at `C`, so every block
/// carries the same scale.
pub fn noise_std_per_layer(dp: &DpConfig, layout: &ParamLayout, batch: usize) -> Vec<f64> {
    vec![dp.sigma * dp.clip_c / batch as f64; layout.layers.len()]
}

/// Clipped and plain mean of per-sample gradients.
fn clipped_and_plain_mean(
    per: &PerSampleGrads,
    dp: &DpConfig,
    layout: &ParamLayout,
) -> (Vec<f64>, Vec<f64>) {
    let d = per.dim();
    let b = per.len() as f64;
    let (mut clipped, mut plain) = (vec![0.0; d], vec![0.0; d]);
    let mut buf = vec![0.0; d];
    for g in &per.grads {
        buf.copy_from_slice(g);
        clip_with_mode(&mut buf, dp.clip_c, dp.clip_mode, layout);
        for i in 0..d {
            clipped[i] += buf[i] / b;
            plain[i] += g[i] / b;
        }
    }
    (clipped, plain)
}

/// First-order mean shift and variance of the rate after the steps in `lrs`,
/// each taken on the full `batch`.
pub fn forecast_rate_perturbation(
    theta_star: &ModelParams,
    arch: &NetworkArch,
    batch: &Dataset,
    probe_data: &Dataset,
    dp: &DpConfig,
    lrs: &[f64],
    probe: RateProbe,
) -> Result<RatePerturbationForecast> {
    if batch.is_empty() || probe_data.is_empty() {
        return Err(Error::Empty(
            "forecast needs nonempty batch and probe data".into(),
        ));
    }
    let grad_r = grad_rate(
        theta_star,
        arch,
        &probe_data.spikes,
        probe.target,
        probe.opts,
    )?;
    let per = backward_loss(theta_star, arch, &batch.spikes, &batch.labels, probe.opts)?;
    let layout = theta_star.layout();
    let (clipped, plain) = clipped_and_plain_mean(&per, dp, layout);
    let gap: Vec<f64> = clipped.iter().zip(&plain).map(|(c, p)| c - p).collect();
    let clip_gap_projection = dot(&grad_r, &gap);
    let lr_sum: f64 = lrs.iter().sum();
    let lr_sq_sum: f64 = lrs.iter().map(|e| e * e).sum();
    let stds = noise_std_per_layer(dp, layout, batch.len());
    let predicted_variance = (0..layout.layers.len())
        .map(|l| {
            let g = &grad_r[layout.layer_range(l)];
            dot(g, g) * stds[l] * stds[l]
        })
        .sum::<f64>()
        * lr_sq_sum;
    Ok(RatePerturbationForecast {
        predicted_mean_shift: -lr_sum * clip_gap_projection,
        predicted_variance,
        lr_sum,
        lr_sq_sum,
        clip_gap_projection,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloRate {
    /// Rate at `theta*` before any step.
    pub base: f64,
    /// Rate after the same steps with unclipped, noiseless gradients: the
    /// non-private reference the mean shift is measured against.
    pub reference: f64,
    pub mean: f64,
    pub variance: f64,
    /// Normal-approximation 95% half-width of the mean.
    pub mean_ci95: f64,
    /// Chi-square-free approximation `var * sqrt(2 / (n - 1)) * 1.96`.
    pub variance_ci95: f64,
    pub draws_used: usize,
    pub draws_diverged: usize,
}

/// Runs `draws` independent noisy trajectories from `theta*` and measures
/// the rate of the final parameters on `probe_data`. Draw `i` uses noise
/// streams keyed by `(seed, i, step)`; results do not depend on threading.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_rate(
    theta_star: &ModelParams,
    arch: &NetworkArch,
    batch: &Dataset,
    probe_data: &Dataset,
    dp: &DpConfig,
    lrs: &[f64],
    draws: usize,
    seed: u64,
    probe: RateProbe,
) -> Result<MonteCarloRate> {
    if draws < 2 {
        return Err(Error::Config(format!(
            "monte_carlo_rate needs >= 2 draws, got {draws}"
        )));
    }
    let base = probe.value(theta_star, arch, probe_data)?;
    // The first step starts from theta* in every draw; its per-sample
    // gradients are shared.
    let first = backward_loss(theta_star, arch, &batch.spikes, &batch.labels, probe.opts)?;
    let layout = theta_star.layout().clone();
    let mut plain = theta_star.clone();
    for (t, &eta) in lrs.iter().enumerate() {
        let g = if t == 0 {
            first.mean()
        } else {
            backward_loss(&plain, arch, &batch.spikes, &batch.labels, probe.opts)?.mean()
        };
        crate::params::add_scaled(plain.as_mut_slice(), -eta, &g);
    }
    let reference = probe.value(&plain, arch, probe_data)?;
    let outcomes: Vec<Option<f64>> = (0..draws)
        .into_par_iter()
        .map(|i| -> Result<Option<f64>> {
            let mut theta = theta_star.clone();
            for (t, &eta) in lrs.iter().enumerate() {
                let noise_seed =
                    rng::derive_seed(seed, &[rng::purpose::MONTE_CARLO, i as u64, t as u64]);
                let per = if t == 0 {
                    first.clone()
                } else {
                    match backward_loss(&theta, arch, &batch.spikes, &batch.labels, probe.opts) {
                        Ok(p) => p,
                        Err(Error::NonFinite { .. }) => return Ok(None),
                        Err(e) => return Err(e),
                    }
                };
                let (g, _) = dp_sgd_step(&per, dp, &layout, noise_seed)?;
                crate::params::add_scaled(theta.as_mut_slice(), -eta, &g);
                if !theta.is_finite() {
                    return Ok(None);
                }
            }
            match probe.value(&theta, arch, probe_data) {
                Ok(r) if r.is_finite() => Ok(Some(r)),
                Ok(_) | Err(Error::NonFinite { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let n = values.len();
    if n < 2 {
        return Err(Error::Diverged {
            client: 0,
            round: 0,
            msg: format!("only {n} of {draws} Monte-Carlo draws stayed finite"),
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(MonteCarloRate {
        base,
        reference,
        mean,
        variance,
        mean_ci95: 1.96 * (variance / n as f64).sqrt(),
        variance_ci95: 1.96 * variance * (2.0 / (n - 1) as f64).sqrt(),
        draws_used: n,
        draws_diverged: draws - n,
    })
}

/// One forecast-versus-simulation comparison, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub sigma: f64,
    pub clip_c: f64,
    pub batch: usize,
    pub lr_sum: f64,
    pub forecast_mean_shift: f64,
    pub mc_mean_shift: f64,
    pub mc_mean_ci95: f64,
    pub forecast_variance: f64,
    pub mc_variance: f64,
    pub mc_variance_ci95: f64,
    pub variance_rel_err: f64,
    /// `eta * sigma C / B <= 1e-3 * ||theta||` for every step.
    pub small_perturbation: bool,
}

impl ComparisonRow {
    pub fn new(
        label: &str,
        theta_star: &ModelParams,
        dp: &DpConfig,
        batch: usize,
        lrs: &[f64],
        f: &RatePerturbationForecast,
        mc: &MonteCarloRate,
    ) -> Self {
        let scale = dp.sigma * dp.clip_c / batch as f64;
        let norm = theta_star.l2_norm();
        let rel = if mc.variance > 0.0 {
            (f.predicted_variance - mc.variance).abs() / mc.variance
        } else if f.predicted_variance == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Self {
            label: label.to_string(),
            sigma: dp.sigma,
            clip_c: dp.clip_c,
            batch,
            lr_sum: f.lr_sum,
            forecast_mean_shift: f.predicted_mean_shift,
            mc_mean_shift: mc.mean - mc.reference,
            mc_mean_ci95: mc.mean_ci95,
            forecast_variance: f.predicted_variance,
            mc_variance: mc.variance,
            mc_variance_ci95: mc.variance_ci95,
            variance_rel_err: rel,
            small_perturbation: lrs.iter().all(|eta| eta * scale <= 1e-3 * norm),
        }
    }
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

/// Central-difference steps of the single-neuron probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSteps {
    pub d_mu: f64,
    pub d_var: f64,
    pub d_vth: f64,
}

impl ProbeSteps {
    /// `d_mu = 0.01 v_th`, `d_var = 0.1 var + 1e-4`, `d_vth = 0.01 v_th`.
    pub fn default_for(lif: &LifConfig, var: f64) -> Self {
        Self {
            d_mu: 0.01 * lif.v_th,
            d_var: 0.1 * var + 1e-4,
            d_vth: 0.01 * lif.v_th,
        }
    }
}

/// Estimate with its Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl Estimate {
    fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            value: mean,
            std_err: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPointSensitivity {
    pub rate: Estimate,
    pub d_r_d_mu: Estimate,
    pub d_r_d_var: Estimate,
    pub d_r_d_vth: Estimate,
    pub probe: ProbeSteps,
    pub trials: usize,
    pub horizon: usize,
    /// The variance partial fell back to a forward difference because
    /// `var - d_var` would be negative.
    pub one_sided_var: bool,
}

/// Firing rate of one neuron driven by `mu + sqrt(var) z_t`.
fn neuron_rate(lif: &LifConfig, beta: f64, mu: f64, var: f64, z: &[f64]) -> f64 {
    let sd = var.sqrt();
    let mut u = lif.v_rest;
    let mut spikes = 0usize;
    let mut hold = 0u32;
    for &zt in z {
        if hold > 0 {
            hold -= 1;
            u = lif.v_reset;
            continue;
        }
        let st = step_neuron(u, mu + sd * zt, beta, lif);
        if st.spike {
            spikes += 1;
            hold = lif.tau_ref_steps;
        }
        u = st.post_reset;
    }
    spikes as f64 / z.len() as f64
}

/// Rate of a single LIF neuron (decay `lif.beta_init`) under i.i.d.
/// Gaussian input current `N(mu, var)`, and its central-difference partials
/// in `mu`, `var` and `v_th`. Every trial evaluates all probes on the same
/// noise sequence (common random numbers).
pub fn operating_point_sensitivity(
    lif: &LifConfig,
    mu: f64,
    var: f64,
    horizon: usize,
    trials: usize,
    steps: Option<ProbeSteps>,
    seed: u64,
) -> Result<OperatingPointSensitivity> {
    if !(var >= 0.0) {
        return Err(Error::Config(format!(
            "drive variance must be >= 0, got {var}"
        )));
    }
    if horizon == 0 || trials == 0 {
        return Err(Error::Config("horizon and trials must be positive".into()));
    }
    lif.validate()?;
    let probe = steps.unwrap_or_else(|| ProbeSteps::default_for(lif, var));
    let beta = lif.beta_init;
    let one_sided_var = var - probe.d_var < 0.0;
    let per_trial: Vec<[f64; 4]> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut r =
                ChaCha8Rng::seed_from_u64(rng::derive_seed(seed, &[rng::purpose::PROBE, k as u64]));
            let z: Vec<f64> = (0..horizon)
                .map(|_| StandardNormal.sample(&mut r))
                .collect();
            let r0 = neuron_rate(lif, beta, mu, var, &z);
            let dmu = (neuron_rate(lif, beta, mu + probe.d_mu, var, &z)
                - neuron_rate(lif, beta, mu - probe.d_mu, var, &z))
                / (2.0 * probe.d_mu);
            let dvar = if one_sided_var {
                (neuron_rate(lif, beta, mu, var + probe.d_var, &z) - r0) / probe.d_var
            } else {
                (neuron_rate(lif, beta, mu, var + probe.d_var, &z)
                    - neuron_rate(lif, beta, mu, var - probe.d_var, &z))
                    / (2.0 * probe.d_var)
            };
            let shifted = |dv: f64| LifConfig {
                v_th: lif.v_th + dv,
                ..lif.clone()
            };
            let dvth = (neuron_rate(&shifted(probe.d_vth), beta, mu, var, &z)
                - neuron_rate(&shifted(-probe.d_vth), beta, mu, var, &z))
                / (2.0 * probe.d_vth);
            [r0, dmu, dvar, dvth]
        })
        .collect();
    let column =
        |i: usize| Estimate::from_samples(&per_trial.iter().map(|t| t[i]).collect::<Vec<_>>());
    Ok(OperatingPointSensitivity {
        rate: column(0),
        d_r_d_mu: column(1),
        d_r_d_var: column(2),
        d_r_d_vth: column(3),
        probe,
        trials,
        horizon,
        one_sided_var,
    })
}
