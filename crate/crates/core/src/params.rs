//! Flat parameter store for the dense LIF stack.
//!
//! Layer `l` (1-based over the LIF layers) owns three contiguous segments:
//! the weight matrix `n_l x n_{l-1}` (row-major, one row per post-synaptic
//! neuron), the bias vector `n_l` and a single pre-squash decay scalar. The
//! layer decay is `sigmoid(beta_raw)`, which keeps it inside `(0, 1)` while
//! it is learned.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkArch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlots {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: usize,
    pub bias: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub layers: Vec<LayerSlots>,
    pub len: usize,
}

impl ParamLayout {
    pub fn for_arch(arch: &NetworkArch) -> Self {
        let mut offset = 0;
        let layers = arch
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let slots = LayerSlots {
                    n_in,
                    n_out,
                    weights: offset,
                    bias: offset + n_in * n_out,
                    beta: offset + n_in * n_out + n_out,
                };
                offset = slots.beta + 1;
                slots
            })
            .collect();
        Self {
            layers,
            len: offset,
        }
    }

    /// Number of named segments (weights, bias, decay per layer).
    pub fn segment_count(&self) -> usize {
        3 * self.layers.len()
    }

    /// Ranges of every named segment, in storage order.
    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        self.layers
            .iter()
            .flat_map(|s| [s.weights..s.bias, s.bias..s.beta, s.beta..s.beta + 1])
            .collect()
    }

    /// Flat range covering all parameters of LIF layer `l` (0-based).
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        let s = &self.layers[l];
        s.weights..s.beta + 1
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layout: ParamLayout,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: &NetworkArch) -> Self {
        let layout = ParamLayout::for_arch(arch);
        let mut values = vec![0.0; layout.len];
        for (s, cfg) in layout.layers.iter().zip(&arch.lif) {
            values[s.beta] = logit(cfg.beta_init);
        }
        Self { layout, values }
    }

    /// Uniform `[-gain/sqrt(n_in), gain/sqrt(n_in)]` weights, zero biases,
    /// decays at their configured initial values.
    pub fn init<R: Rng + ?Sized>(arch: &NetworkArch, gain: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for l in 0..p.layout.layers.len() {
            let s = p.layout.layers[l];
            let bound = gain / (s.n_in as f64).sqrt();
            for w in &mut p.values[s.weights..s.bias] {
                *w = rng.random_range(-bound..=bound);
            }
        }
        p
    }

    pub fn from_values(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, layout needs {}",
                values.len(),
                layout.len
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.layout.layers.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        let s = &self.layout.layers[l];
        &self.values[s.weights..s.bias]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let s = self.layout.layers[l];
        &mut self.values[s.weights..s.bias]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let s = &self.layout.layers[l];
        &self.values[s.bias..s.beta]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let s = self.layout.layers[l];
        &mut self.values[s.bias..s.beta]
    }

    pub fn beta_raw(&self, l: usize) -> f64 {
        self.values[self.layout.layers[l].beta]
    }

    pub fn set_beta_raw(&mut self, l: usize, v: f64) {
        let i = self.layout.layers[l].beta;
        self.values[i] = v;
    }

    /// Effective decay of layer `l`.
    pub fn beta(&self, l: usize) -> f64 {
        sigmoid(self.beta_raw(l))
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same(other)?;
        add_scaled(&mut self.values, alpha, &other.values);
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let mut out = self.clone();
        add_scaled(&mut out.values, -1.0, &other.values);
        Ok(out)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same(other)?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn add_scaled(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lif::LifConfig;

    #[test]
    fn layout_offsets_are_contiguous() {
        let arch = NetworkArch::new(vec![4, 3, 2], LifConfig::default()).unwrap();
        let l = ParamLayout::for_arch(&arch);
        assert_eq!(l.len, 4 * 3 + 3 + 1 + 3 * 2 + 2 + 1);
        assert_eq!(l.layers[1].weights, 16);
        let covered: usize = l.segments().iter().map(|r| r.len()).sum();
        assert_eq!(covered, l.len);
        assert_eq!(l.segment_count(), 6);
    }

    #[test]
    fn decay_starts_at_configured_value() {
        let arch = NetworkArch::new(vec![2, 2], LifConfig::default()).unwrap();
        let p = ModelParams::zeros(&arch);
        assert!((p.beta(0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn vector_ops() {
        let arch = NetworkArch::new(vec![1, 1], LifConfig::default()).unwrap();
        let a =
            ModelParams::from_values(ParamLayout::for_arch(&arch), vec![3.0, 4.0, 0.0]).unwrap();
        assert_eq!(a.l2_norm(), 5.0);
        let mut b = a.clone();
        b.add_scaled(-1.0, &a).unwrap();
        assert_eq!(b.l2_norm(), 0.0);
        assert_eq!(a.dot(&a).unwrap(), 25.0);
    }
}
