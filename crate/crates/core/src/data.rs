//! Synthetic event-driven classification data and the on-disk spike format.
//!
//! Every class owns a template of `ceil(n_channels / n_classes) + 2` input
//! channels. Templates are laid out along a seeded channel permutation with
//! a stride of `ceil(n_channels / n_classes)`, wrapping at the end, so
//! neighbouring classes share two channels. A sample fires each template
//! channel at `signal_rate` and every other channel at `base_rate`, both
//! perturbed per sample and channel by Gaussian jitter.
//!
//! # File format
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//!      0     4  magic  b"SPKD"
//!      4     2  version (1)
//!      6     2  reserved, zero
//!      8     4  samples  B
//!     12     4  steps    T
//!     16     4  channels n
//!     20     4  classes
//!     24     *  payload: ceil(B*T*n / 8) bytes, spikes in (sample, step,
//!               channel) order, 8 per byte, least significant bit first;
//!               unused trailing bits are zero
//!      *  4*B  labels, u32 each
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lif::SpikeTensor;
use crate::rng;

pub const MAGIC: [u8; 4] = *b"SPKD";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

/// Labelled spike trains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub spikes: SpikeTensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(spikes: SpikeTensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.len() != spikes.batch() {
            return Err(Error::Config(format!(
                "{} labels for {} samples",
                labels.len(),
                spikes.batch()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            spikes,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.spikes.steps()
    }

    pub fn channels(&self) -> usize {
        self.spikes.neurons()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("subset of zero samples".into()));
        }
        let spikes = SpikeTensor::stack(
            indices.iter().map(|&i| self.spikes.sample(i)),
            self.steps(),
            self.channels(),
        )?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(spikes, labels, self.n_classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Spike count per (sample, channel) over the window.
    pub fn channel_counts(&self, i: usize) -> Vec<u32> {
        let n = self.channels();
        let mut counts = vec![0; n];
        for row in self.spikes.sample(i).chunks(n) {
            for (c, &s) in counts.iter_mut().zip(row) {
                *c += s as u32;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub n_channels: usize,
    pub t_steps: usize,
    pub samples_per_class: usize,
    pub base_rate: f64,
    pub signal_rate: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_channels: 20,
            t_steps: 200,
            samples_per_class: 100,
            base_rate: 0.02,
            signal_rate: 0.35,
            jitter: 0.05,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Every violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.n_classes < 1 {
            bad.push("task.n_classes must be >= 1".into());
        }
        if self.n_channels < 1 {
            bad.push("task.n_channels must be >= 1".into());
        }
        if self.t_steps < 1 {
            bad.push("task.t_steps must be >= 1".into());
        }
        if self.samples_per_class < 1 {
            bad.push("task.samples_per_class must be >= 1".into());
        }
        for (name, p) in [
            ("base_rate", self.base_rate),
            ("signal_rate", self.signal_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bad.push(format!("task.{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            bad.push(format!(
                "task.jitter must be a finite value >= 0, got {}",
                self.jitter
            ));
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.violations();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    pub fn template_width(&self) -> usize {
        self.n_channels.div_ceil(self.n_classes) + 2
    }

    /// Active channels of every class, sorted.
    pub fn templates(&self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n_channels).collect();
        order.shuffle(&mut rng::stream(self.seed, &[rng::purpose::DATA, 0]));
        let stride = self.n_channels.div_ceil(self.n_classes);
        let width = self.template_width().min(self.n_channels);
        (0..self.n_classes)
            .map(|c| {
                let mut t: Vec<usize> = (0..width)
                    .map(|i| order[(c * stride + i) % self.n_channels])
                    .collect();
                t.sort_unstable();
                t
            })
            .collect()
    }
}

/// Training pool of the task (split 0).
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    generate_split(spec, 0)
}

/// Draws `samples_per_class` samples per class, classes interleaved
/// (`0, 1, .., C-1, 0, 1, ..`). Splits share templates but not spike trains.
pub fn generate_split(spec: &TaskSpec, split: u64) -> Result<Dataset> {
    spec.validate()?;
    let templates = spec.templates();
    let (steps, n) = (spec.t_steps, spec.n_channels);
    let total = spec.samples_per_class * spec.n_classes;
    let jitter = Normal::new(0.0, spec.jitter).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = vec![0u8; total * steps * n];
    let mut labels = Vec::with_capacity(total);
    let mut active = vec![false; n];
    let mut rates = vec![0.0; n];
    for i in 0..total {
        let c = i % spec.n_classes;
        labels.push(c);
        active.iter_mut().for_each(|a| *a = false);
        for &ch in &templates[c] {
            active[ch] = true;
        }
        let mut r = rng::stream(spec.seed, &[rng::purpose::DATA, 1, split, i as u64]);
        for (rate, &on) in rates.iter_mut().zip(&active) {
            let base = if on { spec.signal_rate } else { spec.base_rate };
            let dev = if spec.jitter > 0.0 {
                jitter.sample(&mut r)
            } else {
                0.0
            };
            *rate = (base + dev).clamp(0.0, 1.0);
        }
        let slab = &mut data[i * steps * n..(i + 1) * steps * n];
        for row in slab.chunks_mut(n) {
            for (s, &p) in row.iter_mut().zip(&rates) {
                *s = r.random_bool(p) as u8;
            }
        }
    }
    Dataset::new(
        SpikeTensor::from_vec(total, steps, n, data)?,
        labels,
        spec.n_classes,
    )
}

pub fn encode(ds: &Dataset) -> Vec<u8> {
    let (b, t, n) = ds.spikes.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + (b * t * n).div_ceil(8) + 4 * b);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in [b, t, n, ds.n_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for chunk in ds.spikes.as_slice().chunks(8) {
        let byte = chunk
            .iter()
            .enumerate()
            .fold(0u8, |acc, (k, &s)| acc | (s << k));
        out.push(byte);
    }
    for &y in &ds.labels {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    out
}

fn header_u32(bytes: &[u8], offset: usize) -> Result<usize> {
    let raw = bytes.get(offset..offset + 4).ok_or_else(|| Error::Header {
        offset: bytes.len(),
        msg: format!("header truncated, expected {HEADER_LEN} bytes"),
    })?;
    Ok(u32::from_le_bytes(raw.try_into().unwrap()) as usize)
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Header {
            offset: bytes.len(),
            msg: format!("header truncated, expected {HEADER_LEN} bytes"),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Header {
            offset: 0,
            msg: format!("bad magic {:02x?}", &bytes[..4]),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Header {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let (b, t, n, classes) = (
        header_u32(bytes, 8)?,
        header_u32(bytes, 12)?,
        header_u32(bytes, 16)?,
        header_u32(bytes, 20)?,
    );
    for (off, name, v) in [
        (8, "samples", b),
        (12, "steps", t),
        (16, "channels", n),
        (20, "classes", classes),
    ] {
        if v == 0 {
            return Err(Error::Header {
                offset: off,
                msg: format!("{name} must be positive"),
            });
        }
    }
    let bits = b
        .checked_mul(t)
        .and_then(|v| v.checked_mul(n))
        .ok_or_else(|| Error::Header {
            offset: 8,
            msg: "declared shape overflows".into(),
        })?;
    let payload_len = bits.div_ceil(8);
    let labels_at = HEADER_LEN + payload_len;
    let expected = labels_at + 4 * b;
    if bytes.len() < labels_at {
        return Err(Error::Payload {
            offset: bytes.len(),
            msg: format!(
                "spike payload truncated, expected {payload_len} bytes from offset {HEADER_LEN}"
            ),
        });
    }
    if bytes.len() < expected {
        return Err(Error::Payload {
            offset: bytes.len(),
            msg: format!(
                "label block truncated, expected {} bytes from offset {labels_at}",
                4 * b
            ),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Payload {
            offset: expected,
            msg: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let payload = &bytes[HEADER_LEN..labels_at];
    if bits % 8 != 0 {
        let last = payload[payload_len - 1];
        if last >> (bits % 8) != 0 {
            return Err(Error::Payload {
                offset: labels_at - 1,
                msg: "nonzero padding bits after the last spike".into(),
            });
        }
    }
    let data: Vec<u8> = (0..bits).map(|k| (payload[k / 8] >> (k % 8)) & 1).collect();
    let mut labels = Vec::with_capacity(b);
    for i in 0..b {
        let off = labels_at + 4 * i;
        let y = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if y >= classes {
            return Err(Error::Payload {
                offset: off,
                msg: format!("label {y} out of range for {classes} classes"),
            });
        }
        labels.push(y);
    }
    Dataset::new(SpikeTensor::from_vec(b, t, n, data)?, labels, classes)
}

pub fn save_spike_file(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_spike_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
