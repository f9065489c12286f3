//! Declarative experiments: TOML specs, grids of cells, the end-to-end
//! runner, and the summary and plot tables derived from persisted logs.
//!
//! A spec file holds one [`ExperimentSpec`]. A grid file holds a `[base]`
//! spec and a list of `[[cell]]` tables; each cell is deep-merged over the
//! base, so a cell only states what differs (`id`, `dp`, `fed.protocol`, ..).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bptt::BpttOptions;
use crate::data::{generate, generate_split, load_spike_file, Dataset, TaskSpec};
use crate::dp::{Batching, ClipMode, DpConfig};
use crate::error::{Error, Result};
use crate::eval::{
    self, config_hash, lambda_deviation, ranking_stability, rmse_metric, Manifest, MetricCi,
    MetricSelector, PairedRuns, RoundLog,
};
use crate::fed::{
    dirichlet_partition, run_round, steps_per_round, Aggregation, AsyncParams, ClientState,
    Federation, Protocol, Selection, TrainConfig,
};
use crate::lif::LifConfig;
use crate::network::NetworkArch;
use crate::params::ModelParams;
use crate::rates::DEFAULT_PRUNE_THRESHOLD;
use crate::rng;
use crate::sensitivity::{
    forecast_rate_perturbation, monte_carlo_rate, operating_point_sensitivity, ComparisonRow,
    RateProbe,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    /// Hidden LIF layer widths; input and output widths follow the task.
    pub hidden: Vec<usize>,
    pub lif: LifConfig,
    /// Uniform init bound is `init_gain / sqrt(fan_in)`.
    pub init_gain: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lif: LifConfig::default(),
            init_gain: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedSpec {
    pub k_clients: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Dirichlet concentration of the non-IID split.
    pub alpha: f64,
    pub partition_seed: u64,
    /// Share of each client's shard kept for on-client validation.
    pub val_fraction: f64,
    pub protocol: Protocol,
    pub kappa: f64,
    pub staleness_exponent: f64,
    pub sigma_min: f64,
    pub train_all_candidates: bool,
    pub prune_threshold: f64,
}

impl Default for FedSpec {
    fn default() -> Self {
        Self {
            k_clients: 10,
            rounds: 10,
            epochs: 1,
            batch_size: 64,
            lr: 1e-2,
            alpha: 1.0,
            partition_seed: 0,
            val_fraction: 0.2,
            protocol: Protocol {
                agg: Aggregation::FedAvg,
                sel: Selection::All,
                n_candidates: 10,
                p_select: 10,
            },
            kappa: 1.0,
            staleness_exponent: 0.5,
            sigma_min: 1e-4,
            train_all_candidates: true,
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSpec {
    pub enabled: bool,
    pub epsilon: f64,
    pub clip_c: f64,
    /// Defaults to `1 / N_k` per client.
    pub delta: Option<f64>,
    /// Skips calibration when set.
    pub sigma: Option<f64>,
    pub clip_mode: ClipMode,
    pub batching: Batching,
}

impl Default for DpSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: 8.0,
            clip_c: 1.0,
            delta: None,
            sigma: None,
            clip_mode: ClipMode::Global,
            batching: Batching::Poisson,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub id: String,
    /// Id of the DP-free run the paired metrics compare against.
    pub reference: Option<String>,
    /// Whether paired metrics are requested.
    pub metrics: bool,
    pub note: String,
    pub seed: u64,
    pub task: TaskSpec,
    /// Use a spike file instead of the synthetic task.
    pub spike_file: Option<PathBuf>,
    /// Synthetic test split size per class.
    pub test_samples_per_class: usize,
    /// Held-out share when reading a spike file.
    pub test_fraction: f64,
    pub arch: ArchSpec,
    pub fed: FedSpec,
    pub dp: DpSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            id: "run".into(),
            reference: None,
            metrics: false,
            note: String::new(),
            seed: 0,
            task: TaskSpec::default(),
            spike_file: None,
            test_samples_per_class: 20,
            test_fraction: 0.2,
            arch: ArchSpec::default(),
            fed: FedSpec::default(),
            dp: DpSpec::default(),
        }
    }
}

impl ExperimentSpec {
    /// Every semantic violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let f = &self.fed;
        if self.id.trim().is_empty() {
            bad.push("id must be nonempty".into());
        }
        if f.k_clients < 1 {
            bad.push("K must be ≥ 1 (fed.k_clients)".into());
        }
        if f.rounds < 1 {
            bad.push("R must be ≥ 1 (fed.rounds)".into());
        }
        if f.batch_size < 1 {
            bad.push("B must be ≥ 1 (fed.batch_size)".into());
        }
        if !(f.lr > 0.0 && f.lr.is_finite()) {
            bad.push(format!("learning rate must be positive, got {}", f.lr));
        }
        if !(f.alpha > 0.0 && f.alpha.is_finite()) {
            bad.push(format!("partition alpha must be positive, got {}", f.alpha));
        }
        if !(f.val_fraction > 0.0 && f.val_fraction < 1.0) {
            bad.push(format!(
                "fed.val_fraction must lie in (0, 1), got {}",
                f.val_fraction
            ));
        }
        if !(f.kappa > 0.0) {
            bad.push(format!("kappa must be positive, got {}", f.kappa));
        }
        if !(f.staleness_exponent >= 0.0) {
            bad.push(format!(
                "staleness exponent must be >= 0, got {}",
                f.staleness_exponent
            ));
        }
        if !(f.sigma_min > 0.0) {
            bad.push(format!("sigma_min must be positive, got {}", f.sigma_min));
        }
        if !(f.prune_threshold >= 0.0) {
            bad.push(format!(
                "prune threshold must be >= 0, got {}",
                f.prune_threshold
            ));
        }
        let p = &f.protocol;
        if p.n_candidates < 1 || p.n_candidates > f.k_clients {
            bad.push(format!(
                "candidate pool N must lie in [1, K={}], got {}",
                f.k_clients, p.n_candidates
            ));
        }
        if p.sel == Selection::DeltaR && (p.p_select < 1 || p.p_select > p.n_candidates) {
            bad.push(format!(
                "selected clients P must lie in [1, N={}], got {}",
                p.n_candidates, p.p_select
            ));
        }
        if self.arch.hidden.contains(&0) {
            bad.push("hidden layer widths must be positive".into());
        }
        if !(self.arch.init_gain > 0.0) {
            bad.push(format!(
                "init gain must be positive, got {}",
                self.arch.init_gain
            ));
        }
        if let Err(Error::Config(m)) = self.arch.lif.validate() {
            bad.push(format!("arch.lif: {m}"));
        }
        if self.spike_file.is_none() {
            bad.extend(self.task.violations());
            if self.test_samples_per_class < 1 {
                bad.push("test_samples_per_class must be >= 1".into());
            }
        } else if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bad.push(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            ));
        }
        let d = &self.dp;
        if d.enabled {
            if !(d.clip_c > 0.0 && d.clip_c.is_finite()) {
                bad.push(format!(
                    "clip bound C must be positive when DP is enabled, got {}",
                    d.clip_c
                ));
            }
            if !(d.epsilon > 0.0 && d.epsilon.is_finite()) {
                bad.push(format!(
                    "epsilon must be positive when DP is enabled, got {}",
                    d.epsilon
                ));
            }
            if let Some(delta) = d.delta {
                if !(delta > 0.0 && delta < 1.0) {
                    bad.push(format!("delta must lie in (0, 1), got {delta}"));
                }
            }
            if let Some(s) = d.sigma {
                if !(s > 0.0 && s.is_finite()) {
                    bad.push(format!("sigma override must be positive, got {s}"));
                }
            }
        }
        if self.metrics && self.reference.is_none() {
            bad.push("paired metrics requested without a reference id".into());
        }
        if self.reference.as_deref() == Some(self.id.as_str()) {
            bad.push("an experiment cannot be its own reference".into());
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

    pub fn build_arch(&self, n_in: usize, n_classes: usize) -> Result<NetworkArch> {
        let mut sizes = vec![n_in];
        sizes.extend(&self.arch.hidden);
        sizes.push(n_classes);
        NetworkArch::new(sizes, self.arch.lif.clone())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

fn toml_messages(e: toml::de::Error) -> Vec<String> {
    vec![e.to_string().trim().replace('\n', " ")]
}

/// Parses and fully validates one spec; on failure returns every violation.
pub fn validate_spec(text: &str) -> std::result::Result<ExperimentSpec, Vec<String>> {
    let spec: ExperimentSpec = toml::from_str(text).map_err(toml_messages)?;
    let bad = spec.violations();
    if bad.is_empty() {
        Ok(spec)
    } else {
        Err(bad)
    }
}

fn merge(base: &mut toml::Value, over: &toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Expands a grid file into its cells, in file order. Every cell is
/// validated, ids must be unique, and references must name a DP-free cell.
pub fn expand_grid(text: &str) -> std::result::Result<Vec<ExperimentSpec>, Vec<String>> {
    let root: toml::Value = toml::from_str(text).map_err(toml_messages)?;
    let table = root
        .as_table()
        .ok_or_else(|| vec!["grid must be a table".to_string()])?;
    let mut bad = Vec::new();
    for k in table.keys() {
        if k != "base" && k != "cell" {
            bad.push(format!(
                "unknown top-level key `{k}` (expected `base` and `cell`)"
            ));
        }
    }
    let base = table
        .get("base")
        .cloned()
        .unwrap_or(toml::Value::Table(Default::default()));
    let cells = match table.get("cell") {
        Some(toml::Value::Array(a)) if !a.is_empty() => a.clone(),
        _ => {
            bad.push("grid needs at least one [[cell]]".into());
            Vec::new()
        }
    };
    let mut specs = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let mut v = base.clone();
        merge(&mut v, cell);
        let label = cell
            .get("id")
            .and_then(|x| x.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| format!("#{i}"));
        match v.try_into::<ExperimentSpec>() {
            Ok(s) => {
                bad.extend(
                    s.violations()
                        .into_iter()
                        .map(|m| format!("cell {label}: {m}")),
                );
                specs.push(s);
            }
            Err(e) => bad.push(format!(
                "cell {label}: {}",
                e.to_string().trim().replace('\n', " ")
            )),
        }
    }
    let mut seen = BTreeMap::new();
    for s in &specs {
        if seen.insert(s.id.clone(), s.dp.enabled).is_some() {
            bad.push(format!("duplicate cell id {}", s.id));
        }
    }
    for s in &specs {
        if let Some(r) = &s.reference {
            match seen.get(r) {
                None => bad.push(format!(
                    "cell {}: reference {r} is not a cell of this grid",
                    s.id
                )),
                Some(true) => bad.push(format!(
                    "cell {}: reference {r} must have DP disabled",
                    s.id
                )),
                Some(false) => {}
            }
        }
    }
    if bad.is_empty() {
        Ok(specs)
    } else {
        Err(bad)
    }
}

/// Training pool and held-out test set of a spec.
pub fn load_data(spec: &ExperimentSpec) -> Result<(Dataset, Dataset)> {
    match &spec.spike_file {
        None => {
            let train = generate(&spec.task)?;
            let test_spec = TaskSpec {
                samples_per_class: spec.test_samples_per_class,
                ..spec.task.clone()
            };
            Ok((train, generate_split(&test_spec, 1)?))
        }
        Some(path) => {
            let all = load_spike_file(path)?;
            let mut idx: Vec<usize> = (0..all.len()).collect();
            idx.shuffle(&mut rng::stream(spec.seed, &[rng::purpose::DATA, 2]));
            let n_test =
                ((all.len() as f64 * spec.test_fraction).round() as usize).clamp(1, all.len() - 1);
            let (test, train) = idx.split_at(n_test);
            let (mut test, mut train) = (test.to_vec(), train.to_vec());
            test.sort_unstable();
            train.sort_unstable();
            Ok((all.subset(&train)?, all.subset(&test)?))
        }
    }
}

/// Partitioned clients (DP resolved per client) plus the test set.
pub fn build_federation(spec: &ExperimentSpec) -> Result<Federation> {
    spec.validate()?;
    let (pool, test) = load_data(spec)?;
    let arch = spec.build_arch(pool.channels(), pool.n_classes)?;
    let f = &spec.fed;
    let shards = dirichlet_partition(
        &pool.labels,
        pool.n_classes,
        f.k_clients,
        f.alpha,
        &mut rng::stream(f.partition_seed, &[rng::purpose::PARTITION]),
    )?;
    let global = ModelParams::init(
        &arch,
        spec.arch.init_gain,
        &mut rng::stream(spec.seed, &[rng::purpose::INIT]),
    );
    let mut clients = Vec::with_capacity(shards.len());
    for (k, shard) in shards.into_iter().enumerate() {
        let mut idx = shard;
        idx.shuffle(&mut rng::stream(
            f.partition_seed,
            &[rng::purpose::PARTITION, 2, k as u64],
        ));
        let (train_idx, val_idx) = if idx.len() == 1 {
            (idx.clone(), idx.clone())
        } else {
            let n_val =
                ((idx.len() as f64 * f.val_fraction).round() as usize).clamp(1, idx.len() - 1);
            let (v, t) = idx.split_at(n_val);
            (t.to_vec(), v.to_vec())
        };
        let train = pool.subset(&train_idx)?;
        let val = pool.subset(&val_idx)?;
        let n_k = train.len();
        let dp = if spec.dp.enabled {
            let d = &spec.dp;
            let total = steps_per_round(f.epochs, n_k, f.batch_size) * f.rounds as u64;
            DpConfig::calibrated(
                d.epsilon,
                d.delta.unwrap_or(1.0 / n_k as f64),
                d.clip_c,
                (f.batch_size as f64 / n_k as f64).min(1.0),
                total.max(1),
                d.clip_mode,
                d.batching,
                d.sigma,
            )
            .map_err(|e| Error::Accounting(format!("client {k} (N_k = {n_k}): {e}")))?
        } else {
            DpConfig::disabled()
        };
        clients.push(ClientState {
            id: k,
            train,
            val,
            params: global.clone(),
            dp,
            staleness: 0,
        });
    }
    Ok(Federation {
        experiment_id: spec.id.clone(),
        arch,
        clients,
        global,
        test,
        protocol: f.protocol,
        train: TrainConfig {
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            prune_threshold: f.prune_threshold,
            bptt: BpttOptions::default(),
        },
        async_params: AsyncParams {
            kappa: f.kappa,
            staleness_exponent: f.staleness_exponent,
        },
        sigma_min: f.sigma_min,
        train_all_candidates: f.train_all_candidates,
        seed: spec.seed,
        partition_seed: f.partition_seed,
    })
}

pub fn manifest_for(spec: &ExperimentSpec, fed: &Federation) -> Result<Manifest> {
    let mut config = serde_json::to_value(spec)?;
    let counts: Vec<Vec<usize>> = fed.clients.iter().map(|c| c.train.class_counts()).collect();
    let sigmas: Vec<f64> = fed.clients.iter().map(|c| c.dp.sigma).collect();
    let deltas: Vec<f64> = fed.clients.iter().map(|c| c.dp.delta).collect();
    let obj = config.as_object_mut().unwrap();
    obj.insert("client_class_counts".into(), serde_json::to_value(counts)?);
    obj.insert("client_sigma".into(), serde_json::to_value(sigmas)?);
    obj.insert("client_delta".into(), serde_json::to_value(deltas)?);
    Ok(Manifest {
        schema_version: eval::SCHEMA_VERSION,
        experiment_id: spec.id.clone(),
        config_hash: spec.hash()?,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: spec.seed,
        partition_seed: spec.fed.partition_seed,
        config,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: Option<PathBuf>,
    pub logs: Vec<RoundLog>,
}

/// Runs every round. With a `sink` the manifest and each round record are
/// written as they complete.
pub fn run_experiment(
    spec: &ExperimentSpec,
    sink: Option<&Path>,
    force: bool,
) -> Result<RunOutcome> {
    let mut fed = build_federation(spec)?;
    let dir = match sink {
        Some(s) => Some(eval::create_run(s, &manifest_for(spec, &fed)?, force)?),
        None => None,
    };
    let mut logs = Vec::with_capacity(spec.fed.rounds);
    for r in 0..spec.fed.rounds {
        let log = run_round(&mut fed, r)?;
        if let Some(d) = &dir {
            eval::append_round(d, &log)?;
        }
        logs.push(log);
    }
    Ok(RunOutcome { dir, logs })
}

/// Mean over rounds and clients of the hidden-layer (all but the last
/// LIF layer) rates, and mean over rounds of the across-client standard
/// deviation of the network rate.
pub fn rate_profile(logs: &[RoundLog]) -> (f64, f64) {
    let mut hidden = Vec::new();
    let mut spread = Vec::new();
    for l in logs {
        let rates: Vec<f64> = l.clients.iter().map(|c| c.rates.network).collect();
        if rates.is_empty() {
            continue;
        }
        let m = rates.iter().sum::<f64>() / rates.len() as f64;
        spread
            .push((rates.iter().map(|r| (r - m).powi(2)).sum::<f64>() / rates.len() as f64).sqrt());
        for c in &l.clients {
            let h = &c.rates.per_layer[..c.rates.per_layer.len() - 1];
            if !h.is_empty() {
                hidden.push(h.iter().sum::<f64>() / h.len() as f64);
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    (mean(&hidden), mean(&spread))
}

/// One row of the summary table; empty cells where a metric does not apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub id: String,
    pub epsilon: Option<f64>,
    pub clip_c: Option<f64>,
    pub agg: String,
    pub sel: String,
    pub n_p: String,
    pub rmse_rk: Option<f64>,
    pub rmse_rk_ci: Option<f64>,
    pub rmse_rl: Option<f64>,
    pub rmse_rl_ci: Option<f64>,
    pub rmse_as: Option<f64>,
    pub rmse_as_ci: Option<f64>,
    pub rmse_fp: Option<f64>,
    pub rmse_fp_ci: Option<f64>,
    pub dlambda_mean: Option<f64>,
    pub dlambda_sum: Option<f64>,
    pub dlambda_pct: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub kendall_tau_ci: Option<f64>,
    pub final_test_accuracy: f64,
    pub hidden_rate: f64,
    pub rate_dispersion: f64,
    pub mean_sigma: Option<f64>,
    pub max_realized_epsilon: Option<f64>,
    pub note: String,
}

/// Summary row of a run, with paired metrics when `reference` is given.
pub fn summarize(
    spec: &ExperimentSpec,
    logs: &[RoundLog],
    reference: Option<&[RoundLog]>,
) -> Result<SummaryRow> {
    let p = &spec.fed.protocol;
    let dp = spec.dp.enabled;
    let (hidden_rate, rate_dispersion) = rate_profile(logs);
    let client_vals = |f: &dyn Fn(&eval::ClientRecord) -> Option<f64>| -> Vec<f64> {
        logs.iter()
            .flat_map(|l| l.clients.iter().filter_map(f))
            .collect()
    };
    let sigmas = client_vals(&|c| c.sigma);
    let eps = client_vals(&|c| c.realized_epsilon);
    let mut row = SummaryRow {
        id: spec.id.clone(),
        epsilon: dp.then_some(spec.dp.epsilon),
        clip_c: dp.then_some(spec.dp.clip_c),
        agg: format!("{:?}", p.agg),
        sel: match p.sel {
            Selection::All => "All".into(),
            Selection::DeltaR => "DeltaR".into(),
        },
        n_p: match p.sel {
            Selection::All => format!("{}/{}", p.n_candidates, p.n_candidates),
            Selection::DeltaR => format!("{}/{}", p.n_candidates, p.p_select),
        },
        rmse_rk: None,
        rmse_rk_ci: None,
        rmse_rl: None,
        rmse_rl_ci: None,
        rmse_as: None,
        rmse_as_ci: None,
        rmse_fp: None,
        rmse_fp_ci: None,
        dlambda_mean: None,
        dlambda_sum: None,
        dlambda_pct: None,
        kendall_tau: None,
        kendall_tau_ci: None,
        final_test_accuracy: logs
            .last()
            .map(|l| l.global_test_accuracy)
            .unwrap_or(f64::NAN),
        hidden_rate,
        rate_dispersion,
        mean_sigma: (!sigmas.is_empty()).then(|| sigmas.iter().sum::<f64>() / sigmas.len() as f64),
        max_realized_epsilon: eps.iter().cloned().reduce(f64::max),
        note: spec.note.clone(),
    };
    if let Some(reference) = reference {
        let paired = PairedRuns {
            reference,
            treatment: logs,
        };
        let set = |m: MetricCi| (Some(m.value), Some(m.ci95));
        (row.rmse_rk, row.rmse_rk_ci) = set(rmse_metric(paired, MetricSelector::NetworkRate)?);
        (row.rmse_rl, row.rmse_rl_ci) = set(rmse_metric(paired, MetricSelector::LayerRate)?);
        (row.rmse_as, row.rmse_as_ci) =
            set(rmse_metric(paired, MetricSelector::ActivationSparsity)?);
        (row.rmse_fp, row.rmse_fp_ci) = set(rmse_metric(paired, MetricSelector::Footprint)?);
        if let Ok(d) = lambda_deviation(paired) {
            row.dlambda_mean = Some(d.mean);
            row.dlambda_sum = Some(d.sum);
            row.dlambda_pct = Some(d.percent);
        }
        if let Ok(t) = ranking_stability(paired) {
            row.kendall_tau = Some(t.value);
            row.kendall_tau_ci = Some(t.ci95);
        }
    }
    Ok(row)
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub rows: Vec<SummaryRow>,
    pub runs: BTreeMap<String, RunOutcome>,
    pub summary_csv: String,
}

/// Runs the cells (references before the cells that use them) and writes
/// `summary.csv` into `sink` when given. Rows keep the grid's order.
pub fn run_grid(specs: &[ExperimentSpec], sink: Option<&Path>, force: bool) -> Result<GridOutcome> {
    let mut order: Vec<usize> = (0..specs.len())
        .filter(|&i| specs[i].reference.is_none())
        .collect();
    order.extend((0..specs.len()).filter(|&i| specs[i].reference.is_some()));
    let mut runs: BTreeMap<String, RunOutcome> = BTreeMap::new();
    for i in order {
        let s = &specs[i];
        runs.insert(s.id.clone(), run_experiment(s, sink, force)?);
    }
    let mut rows = Vec::with_capacity(specs.len());
    for s in specs {
        let reference = match &s.reference {
            Some(r) => Some(
                runs.get(r)
                    .ok_or_else(|| {
                        Error::Config(format!("missing reference run {r} for {}", s.id))
                    })?
                    .logs
                    .as_slice(),
            ),
            None => None,
        };
        rows.push(summarize(s, &runs[&s.id].logs, reference)?);
    }
    let summary_csv = to_csv(&rows)?;
    if let Some(sink) = sink {
        let path = sink.join(SUMMARY_FILE);
        fs::write(&path, &summary_csv).map_err(|e| Error::io(&path, e))?;
    }
    Ok(GridOutcome {
        rows,
        runs,
        summary_csv,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    LayerRatesByEps,
    ClientHistograms,
}

#[derive(Debug, Serialize)]
struct LayerRateRow {
    experiment_id: String,
    /// Empty for DP-free runs.
    epsilon: Option<f64>,
    client: usize,
    layer: usize,
    mean_rate: f64,
    rounds: usize,
}

#[derive(Debug, Serialize)]
struct HistogramRow {
    experiment_id: String,
    client: usize,
    class: usize,
    count: usize,
}

/// Plot-ready CSV from persisted runs.
///
/// * `layer_rates_by_eps`: `experiment_id, epsilon, client, layer,
///   mean_rate, rounds`, the per-layer validation rate of each client
///   averaged over the rounds it trained in (layers are 1-based LIF layers).
/// * `client_histograms`: `experiment_id, client, class, count`, training
///   samples per client and class.
pub fn emit_plot_data(run_dirs: &[PathBuf], kind: PlotKind) -> Result<String> {
    if run_dirs.is_empty() {
        return Err(Error::Empty("no run directories given".into()));
    }
    match kind {
        PlotKind::LayerRatesByEps => {
            let mut rows = Vec::new();
            for dir in run_dirs {
                let m = eval::read_manifest(dir)?;
                let spec: ExperimentSpec = serde_json::from_value(strip_extras(m.config.clone()))?;
                let logs = eval::read_logs(dir)?;
                let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
                for l in &logs {
                    for c in &l.clients {
                        for (layer, r) in c.rates.per_layer.iter().enumerate() {
                            let e = acc.entry((c.client, layer + 1)).or_insert((0.0, 0));
                            e.0 += r;
                            e.1 += 1;
                        }
                    }
                }
                for ((client, layer), (sum, n)) in acc {
                    rows.push(LayerRateRow {
                        experiment_id: m.experiment_id.clone(),
                        epsilon: spec.dp.enabled.then_some(spec.dp.epsilon),
                        client,
                        layer,
                        mean_rate: sum / n as f64,
                        rounds: n,
                    });
                }
            }
            to_csv(&rows)
        }
        PlotKind::ClientHistograms => {
            let mut rows = Vec::new();
            for dir in run_dirs {
                let m = eval::read_manifest(dir)?;
                let counts: Vec<Vec<usize>> = serde_json::from_value(
                    m.config
                        .get("client_class_counts")
                        .cloned()
                        .ok_or_else(|| {
                            Error::Serde(format!(
                                "{}: manifest lacks client_class_counts",
                                dir.display()
                            ))
                        })?,
                )?;
                for (client, cs) in counts.iter().enumerate() {
                    for (class, &count) in cs.iter().enumerate() {
                        rows.push(HistogramRow {
                            experiment_id: m.experiment_id.clone(),
                            client,
                            class,
                            count,
                        });
                    }
                }
            }
            to_csv(&rows)
        }
    }
}

/// Drops the derived entries the manifest adds to the spec.
fn strip_extras(mut v: serde_json::Value) -> serde_json::Value {
    if let Some(o) = v.as_object_mut() {
        o.remove("client_class_counts");
        o.remove("client_sigma");
        o.remove("client_delta");
    }
    v
}

/// The spec stored in a run's manifest.
pub fn spec_from_run(dir: &Path) -> Result<ExperimentSpec> {
    let m = eval::read_manifest(dir)?;
    Ok(serde_json::from_value(strip_extras(m.config))?)
}

/// Forecast-versus-simulation table on a toy network: one noisy step of
/// `lr` per `(sigma, C)` pair, with both the soft and the spiking probe.
pub fn forecast_study(
    pairs: &[(f64, f64)],
    lr: f64,
    draws: usize,
    seed: u64,
) -> Result<Vec<ComparisonRow>> {
    let task = TaskSpec {
        n_classes: 4,
        n_channels: 10,
        t_steps: 50,
        samples_per_class: 8,
        seed,
        ..TaskSpec::default()
    };
    let batch = generate(&task)?;
    let probe_data = generate_split(&task, 1)?;
    let arch = NetworkArch::new(vec![10, 12, 4], LifConfig::default())?;
    let theta = ModelParams::init(&arch, 3.0, &mut rng::stream(seed, &[rng::purpose::INIT]));
    let lrs = [lr];
    let mut rows = Vec::new();
    for &(sigma, c) in pairs {
        let dp = DpConfig {
            enabled: true,
            // Nominal: sigma is given directly.
            epsilon: 1.0,
            delta: 1e-5,
            clip_c: c,
            sigma,
            sample_rate: 1.0,
            total_steps: 1,
            clip_mode: ClipMode::Global,
            batching: Batching::Poisson,
        };
        for (name, probe) in [
            ("soft", RateProbe::soft()),
            ("spiking", RateProbe::spiking()),
        ] {
            let f =
                forecast_rate_perturbation(&theta, &arch, &batch, &probe_data, &dp, &lrs, probe)?;
            let mc = monte_carlo_rate(
                &theta,
                &arch,
                &batch,
                &probe_data,
                &dp,
                &lrs,
                draws,
                seed,
                probe,
            )?;
            rows.push(ComparisonRow::new(
                name,
                &theta,
                &dp,
                batch.len(),
                &lrs,
                &f,
                &mc,
            ));
        }
    }
    Ok(rows)
}

/// One cell of the single-neuron operating-point grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPointRow {
    pub mu: f64,
    pub var: f64,
    pub rate: f64,
    pub rate_se: f64,
    pub d_r_d_mu: f64,
    pub d_r_d_mu_se: f64,
    pub d_r_d_var: f64,
    pub d_r_d_var_se: f64,
    pub d_r_d_vth: f64,
    pub d_r_d_vth_se: f64,
}

/// Rate and partials of one LIF neuron over a `(mu, var)` grid.
pub fn operating_point_study(
    lif: &LifConfig,
    mus: &[f64],
    vars: &[f64],
    horizon: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<OperatingPointRow>> {
    let mut rows = Vec::with_capacity(mus.len() * vars.len());
    for (i, &mu) in mus.iter().enumerate() {
        for (j, &var) in vars.iter().enumerate() {
            let s = operating_point_sensitivity(
                lif,
                mu,
                var,
                horizon,
                trials,
                None,
                rng::derive_seed(seed, &[i as u64, j as u64]),
            )?;
            rows.push(OperatingPointRow {
                mu,
                var,
                rate: s.rate.value,
                rate_se: s.rate.std_err,
                d_r_d_mu: s.d_r_d_mu.value,
                d_r_d_mu_se: s.d_r_d_mu.std_err,
                d_r_d_var: s.d_r_d_var.value,
                d_r_d_var_se: s.d_r_d_var.std_err,
                d_r_d_vth: s.d_r_d_vth.value,
                d_r_d_vth_se: s.d_r_d_vth.std_err,
            });
        }
    }
    Ok(rows)
}
