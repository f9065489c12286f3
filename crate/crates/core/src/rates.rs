//! Firing rates and inference-time indicators.
//!
//! The rate of neuron `j` is its spike count divided by the window length;
//! the layer rate averages that over neurons and samples, and the network
//! rate weights layer rates by neuron count. Only LIF layers count: input
//! spikes are data, not activity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lif::SpikeTensor;
use crate::network::{sample_activity, NetworkArch, SampleActivity};
use crate::params::ModelParams;

/// Storage bytes per retained parameter (f32).
pub const BYTES_PER_PARAM: u64 = 4;
/// Fixed per-layer header of the sparse storage format.
pub const LAYER_HEADER_BYTES: u64 = 16;
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    /// Per LIF layer, per neuron.
    pub per_neuron: Vec<Vec<f64>>,
    pub per_layer: Vec<f64>,
    pub network: f64,
    /// Network rate over the samples of each class; `None` when the class
    /// has no samples.
    pub per_class: Vec<Option<f64>>,
    pub activation_sparsity: f64,
    pub footprint_bytes: u64,
}

/// `(1 / (B n T)) * total spikes`.
pub fn layer_rate(spikes: &SpikeTensor) -> Result<f64> {
    let (b, t, n) = spikes.dims();
    let cells = b * t * n;
    if cells == 0 {
        return Err(Error::Empty("layer_rate of an empty tensor".into()));
    }
    Ok(spikes.total_spikes() as f64 / cells as f64)
}

/// Neuron-weighted mean of layer rates.
pub fn network_rate(layer_rates: &[f64], layer_sizes: &[usize]) -> Result<f64> {
    if layer_rates.len() != layer_sizes.len() {
        return Err(Error::Config(format!(
            "{} layer rates for {} layer sizes",
            layer_rates.len(),
            layer_sizes.len()
        )));
    }
    let total: usize = layer_sizes.iter().sum();
    if total == 0 {
        return Err(Error::Empty("network_rate over zero neurons".into()));
    }
    let weighted: f64 = layer_rates
        .iter()
        .zip(layer_sizes)
        .map(|(r, &n)| r * n as f64)
        .sum();
    Ok(weighted / total as f64)
}

/// Sparse-storage size: 4 bytes per parameter with `|w| > theta` plus a
/// fixed header per layer.
pub fn footprint(params: &ModelParams, theta: f64) -> u64 {
    let kept = params.as_slice().iter().filter(|w| w.abs() > theta).count() as u64;
    BYTES_PER_PARAM * kept + LAYER_HEADER_BYTES * params.n_layers() as u64
}

/// Spike counts of every sample, in dataset order.
pub fn activities(
    params: &ModelParams,
    arch: &NetworkArch,
    data: &Dataset,
) -> Result<Vec<SampleActivity>> {
    if data.is_empty() {
        return Err(Error::Empty("no samples to simulate".into()));
    }
    let steps = data.steps();
    (0..data.len())
        .into_par_iter()
        .map(|i| sample_activity(params, arch, data.spikes.sample(i), steps))
        .collect()
}

fn network_rate_of<'a>(
    arch: &NetworkArch,
    acts: impl Iterator<Item = &'a SampleActivity>,
) -> Option<f64> {
    let mut spikes = 0u64;
    let mut cells = 0u64;
    let neurons: usize = arch.lif_sizes().iter().sum();
    for a in acts {
        spikes += (0..a.counts.len()).map(|l| a.layer_total(l)).sum::<u64>();
        cells += (neurons * a.steps) as u64;
    }
    (cells > 0).then(|| spikes as f64 / cells as f64)
}

/// Per-class network rate from precomputed activities.
pub fn class_rates_from(
    arch: &NetworkArch,
    acts: &[SampleActivity],
    labels: &[usize],
    n_classes: usize,
) -> Vec<Option<f64>> {
    (0..n_classes)
        .map(|c| {
            network_rate_of(
                arch,
                acts.iter()
                    .zip(labels)
                    .filter(|(_, &y)| y == c)
                    .map(|(a, _)| a),
            )
        })
        .collect()
}

/// Network rate conditioned on each class of `data`.
pub fn class_rates(
    params: &ModelParams,
    arch: &NetworkArch,
    data: &Dataset,
) -> Result<Vec<Option<f64>>> {
    let acts = activities(params, arch, data)?;
    Ok(class_rates_from(arch, &acts, &data.labels, data.n_classes))
}

/// Rate report and accuracy from precomputed activities.
pub fn report_from(
    params: &ModelParams,
    arch: &NetworkArch,
    acts: &[SampleActivity],
    labels: &[usize],
    n_classes: usize,
    theta: f64,
) -> Result<(RateReport, f64)> {
    if acts.is_empty() {
        return Err(Error::Empty("rate report over zero samples".into()));
    }
    let sizes = arch.lif_sizes();
    let mut counts: Vec<Vec<u64>> = sizes.iter().map(|&n| vec![0; n]).collect();
    let mut window = 0u64;
    let mut correct = 0usize;
    for (a, &y) in acts.iter().zip(labels) {
        window += a.steps as u64;
        for (acc, c) in counts.iter_mut().zip(&a.counts) {
            for (x, &v) in acc.iter_mut().zip(c) {
                *x += v as u64;
            }
        }
        correct += (a.predicted_class() == y) as usize;
    }
    let per_neuron: Vec<Vec<f64>> = counts
        .iter()
        .map(|c| c.iter().map(|&v| v as f64 / window as f64).collect())
        .collect();
    let per_layer: Vec<f64> = counts
        .iter()
        .zip(sizes)
        .map(|(c, &n)| c.iter().sum::<u64>() as f64 / (window * n as u64) as f64)
        .collect();
    let network = network_rate(&per_layer, sizes)?;
    let total_spikes: u64 = counts.iter().flatten().sum();
    let cells = window * sizes.iter().sum::<usize>() as u64;
    let report = RateReport {
        per_neuron,
        per_layer,
        network,
        per_class: class_rates_from(arch, acts, labels, n_classes),
        activation_sparsity: 1.0 - total_spikes as f64 / cells as f64,
        footprint_bytes: footprint(params, theta),
    };
    Ok((report, correct as f64 / acts.len() as f64))
}

/// Full rate report of `params` on `data`, plus classification accuracy.
pub fn evaluate(
    params: &ModelParams,
    arch: &NetworkArch,
    data: &Dataset,
    theta: f64,
) -> Result<(RateReport, f64)> {
    let acts = activities(params, arch, data)?;
    report_from(params, arch, &acts, &data.labels, data.n_classes, theta)
}
