//! Round logs, their persistence, and the paired DP-versus-reference metrics.
//!
//! Logs are newline-delimited JSON, one record per round, written into a
//! run directory keyed by the hash of the experiment configuration next to
//! a `manifest.json`. Every metric below is a pure function of the logs, so
//! values recomputed from disk equal the in-memory ones bit for bit.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rates::RateReport;

pub const SCHEMA_VERSION: u32 = 1;
pub const LOG_FILE: &str = "rounds.ndjson";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub n_samples: usize,
    pub selected: bool,
    /// Validation-shard report of the client's local model.
    pub rates: RateReport,
    pub delta_r: f64,
    pub zeta: Option<f64>,
    pub lambda: Option<f64>,
    pub lambda_raw: Option<f64>,
    pub lambda_clamped: Option<bool>,
    pub staleness_factor: Option<f64>,
    pub sigma: Option<f64>,
    pub delta: Option<f64>,
    pub realized_epsilon: Option<f64>,
    pub clipped_fraction: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub local_steps: u64,
    pub empty_batches: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub schema_version: u32,
    pub experiment_id: String,
    pub round: usize,
    pub protocol: String,
    pub master_seed: u64,
    pub partition_seed: u64,
    pub global_test_accuracy: f64,
    /// Test-set report of the aggregated model.
    pub global_rates: RateReport,
    pub mu_r: Option<f64>,
    pub sigma_r: Option<f64>,
    pub tie_excluded: Vec<usize>,
    /// One record per client that trained this round, ascending id.
    pub clients: Vec<ClientRecord>,
}

/// A DP run and its non-private reference.
#[derive(Debug, Clone, Copy)]
pub struct PairedRuns<'a> {
    pub reference: &'a [RoundLog],
    pub treatment: &'a [RoundLog],
}

impl<'a> PairedRuns<'a> {
    /// Aligned `(round, reference record, treatment record)` triples.
    pub fn aligned(&self) -> Vec<(usize, &'a ClientRecord, &'a ClientRecord)> {
        let mut out = Vec::new();
        for t in self.treatment {
            let Some(r) = self.reference.iter().find(|r| r.round == t.round) else {
                continue;
            };
            for tc in &t.clients {
                if let Some(rc) = r.clients.iter().find(|c| c.client == tc.client) {
                    out.push((t.round, rc, tc));
                }
            }
        }
        out
    }

    pub fn rounds(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.aligned().iter().map(|a| a.0).collect();
        r.dedup();
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSelector {
    /// Client network rate.
    NetworkRate,
    /// Per-layer rates; RMSE per layer, then the unweighted mean.
    LayerRate,
    ActivationSparsity,
    Footprint,
}

/// Value with a normal-approximation 95% half-width over rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCi {
    pub value: f64,
    pub ci95: f64,
    pub n: usize,
}

/// Mean and `1.96 * sd / sqrt(n)` of per-round values.
pub fn mean_ci95(values: &[f64]) -> MetricCi {
    let n = values.len();
    if n == 0 {
        return MetricCi {
            value: f64::NAN,
            ci95: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ci95 = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    MetricCi {
        value: mean,
        ci95,
        n,
    }
}

fn scalar(sel: MetricSelector, r: &RateReport) -> f64 {
    match sel {
        MetricSelector::NetworkRate => r.network,
        MetricSelector::ActivationSparsity => r.activation_sparsity,
        MetricSelector::Footprint => r.footprint_bytes as f64,
        MetricSelector::LayerRate => unreachable!(),
    }
}

fn rmse_of(pairs: &[(&ClientRecord, &ClientRecord)], sel: MetricSelector) -> f64 {
    let n = pairs.len() as f64;
    match sel {
        MetricSelector::LayerRate => {
            let layers = pairs[0].0.rates.per_layer.len();
            (0..layers)
                .map(|l| {
                    let se: f64 = pairs
                        .iter()
                        .map(|(a, b)| (b.rates.per_layer[l] - a.rates.per_layer[l]).powi(2))
                        .sum();
                    (se / n).sqrt()
                })
                .sum::<f64>()
                / layers as f64
        }
        _ => {
            let se: f64 = pairs
                .iter()
                .map(|(a, b)| (scalar(sel, &b.rates) - scalar(sel, &a.rates)).powi(2))
                .sum();
            (se / n).sqrt()
        }
    }
}

/// RMSE of a client metric over all aligned `(round, client)` pairs, with a
/// 95% interval from the spread of the per-round RMSEs.
pub fn rmse_metric(paired: PairedRuns, sel: MetricSelector) -> Result<MetricCi> {
    let aligned = paired.aligned();
    if aligned.is_empty() {
        return Err(Error::Metric("no aligned (round, client) pairs".into()));
    }
    let all: Vec<_> = aligned.iter().map(|(_, a, b)| (*a, *b)).collect();
    let per_round: Vec<f64> = paired
        .rounds()
        .iter()
        .map(|&r| {
            let pairs: Vec<_> = aligned
                .iter()
                .filter(|a| a.0 == r)
                .map(|(_, a, b)| (*a, *b))
                .collect();
            rmse_of(&pairs, sel)
        })
        .collect();
    let ci = mean_ci95(&per_round);
    Ok(MetricCi {
        value: rmse_of(&all, sel),
        ci95: ci.ci95,
        n: all.len(),
    })
}

/// |Delta lambda| under three conventions; `mean` is the primary one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaDeviation {
    pub mean: f64,
    pub sum: f64,
    /// `100 * mean`.
    pub percent: f64,
    pub events: usize,
}

/// Mean absolute difference of mixing weights over aggregation events
/// present in both runs.
pub fn lambda_deviation(paired: PairedRuns) -> Result<LambdaDeviation> {
    let rate_weighted = |logs: &[RoundLog]| logs.iter().all(|l| l.protocol.starts_with("RateW"));
    if !rate_weighted(paired.reference) || !rate_weighted(paired.treatment) {
        return Err(Error::Metric(
            "lambda deviation needs rate-weighted aggregation in both runs".into(),
        ));
    }
    let diffs: Vec<f64> = paired
        .aligned()
        .iter()
        .filter_map(|(_, a, b)| Some((b.lambda? - a.lambda?).abs()))
        .collect();
    if diffs.is_empty() {
        return Err(Error::Metric(
            "no aggregation event appears in both runs".into(),
        ));
    }
    let sum: f64 = diffs.iter().sum();
    let mean = sum / diffs.len() as f64;
    Ok(LambdaDeviation {
        mean,
        sum,
        percent: 100.0 * mean,
        events: diffs.len(),
    })
}

/// Tie-aware Kendall tau-b of two paired score vectors. `None` when either
/// vector is constant (the coefficient is undefined).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::Metric(format!(
            "score vectors differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = (x[i] - x[j])
                .partial_cmp(&0.0)
                .unwrap_or(std::cmp::Ordering::Equal);
            let dy = (y[i] - y[j])
                .partial_cmp(&0.0)
                .unwrap_or(std::cmp::Ordering::Equal);
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {}
                (Equal, _) => tie_x += 1,
                (_, Equal) => tie_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n1 = (concordant + discordant + tie_x) as f64;
    let n2 = (concordant + discordant + tie_y) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return Ok(None);
    }
    Ok(Some((concordant - discordant) as f64 / (n1 * n2).sqrt()))
}

/// Kendall tau between two orderings of the same ids (best first).
pub fn kendall_tau(ranking_a: &[usize], ranking_b: &[usize]) -> Result<f64> {
    let mut sa = ranking_a.to_vec();
    let mut sb = ranking_b.to_vec();
    sa.sort_unstable();
    sb.sort_unstable();
    if sa != sb || sa.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Metric(
            "rankings must be permutations of the same ids".into(),
        ));
    }
    let pos = |r: &[usize], id: usize| r.iter().position(|&x| x == id).unwrap() as f64;
    let x: Vec<f64> = sa.iter().map(|&id| pos(ranking_a, id)).collect();
    let y: Vec<f64> = sa.iter().map(|&id| pos(ranking_b, id)).collect();
    Ok(kendall_tau_b(&x, &y)?.unwrap_or(1.0))
}

/// Per-round tau-b of the dR scores of aligned clients, averaged over the
/// rounds where it is defined.
pub fn ranking_stability(paired: PairedRuns) -> Result<MetricCi> {
    let aligned = paired.aligned();
    let mut taus = Vec::new();
    for r in paired.rounds() {
        let (x, y): (Vec<f64>, Vec<f64>) = aligned
            .iter()
            .filter(|a| a.0 == r)
            .map(|(_, a, b)| (a.delta_r, b.delta_r))
            .unzip();
        if let Some(t) = kendall_tau_b(&x, &y)? {
            taus.push(t);
        }
    }
    if taus.is_empty() {
        return Err(Error::Metric("Kendall tau undefined in every round".into()));
    }
    Ok(mean_ci95(&taus))
}

/// Identity of a persisted run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment_id: String,
    pub config_hash: String,
    pub code_version: String,
    pub master_seed: u64,
    pub partition_seed: u64,
    /// Canonical JSON of the resolved configuration.
    pub config: serde_json::Value,
}

/// SHA-256 of the canonical JSON encoding of a config.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    let bytes = serde_json::to_vec(&value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Run directory of an experiment inside `sink`.
pub fn run_dir(sink: &Path, experiment_id: &str, hash: &str) -> PathBuf {
    let safe: String = experiment_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    sink.join(format!("{safe}-{}", &hash[..16]))
}

/// Creates the run directory and its manifest. Refuses an existing run
/// unless `force`, in which case the old directory is removed first.
pub fn create_run(sink: &Path, manifest: &Manifest, force: bool) -> Result<PathBuf> {
    let dir = run_dir(sink, &manifest.experiment_id, &manifest.config_hash);
    if dir.join(MANIFEST_FILE).exists() {
        if !force {
            return Err(Error::Collision(dir));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

/// Appends one round record.
pub fn append_round(dir: &Path, log: &RoundLog) -> Result<()> {
    let path = dir.join(LOG_FILE);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(log)?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

/// Writes a whole run: manifest plus every round.
pub fn persist(
    sink: &Path,
    manifest: &Manifest,
    logs: &[RoundLog],
    force: bool,
) -> Result<PathBuf> {
    let dir = create_run(sink, manifest, force)?;
    for l in logs {
        append_round(&dir, l)?;
    }
    Ok(dir)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_logs(dir: &Path) -> Result<Vec<RoundLog>> {
    let path = dir.join(LOG_FILE);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let log: RoundLog = serde_json::from_str(&line)
            .map_err(|e| Error::Serde(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if log.schema_version != SCHEMA_VERSION {
            return Err(Error::Serde(format!(
                "{}:{}: schema version {} (expected {SCHEMA_VERSION})",
                path.display(),
                i + 1,
                log.schema_version
            )));
        }
        out.push(log);
    }
    Ok(out)
}
