//! Federated training: client shards, local (DP-)training and the three
//! coordination rules.
//!
//! * FedAvg: sample-weighted mean of the selected clients' models.
//! * Rate-weighted asynchronous mixing: each reporting client gets a
//!   Gaussian-kernel weight `zeta_k` of its network rate around the round
//!   mean, and updates are applied one at a time,
//!   `theta <- (1 - lambda) theta + lambda theta_k` with
//!   `lambda = clamp(kappa * beta_k * psi_k * zeta_k, 0, 1)`, staleness
//!   discount `beta_k = (s + 1)^-a` and size share `psi_k = N_k / sum N`.
//! * Rate-change selection: the top-P candidates by
//!   `dR_k = sum_c (R_kc(local) - R_kc(global))^2`, ties to the lower id.
//!
//! Rounds are simulated synchronously; every random draw is keyed by
//! `(seed, round, client, step)` so results do not depend on threading.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bptt::{backward_loss, backward_mean_loss, BpttOptions};
use crate::data::Dataset;
use crate::dp::{dp_sgd_step, Batching, DpConfig};
use crate::error::{Error, Result};
use crate::eval::{ClientRecord, RoundLog, SCHEMA_VERSION};
use crate::network::NetworkArch;
use crate::params::ModelParams;
use crate::rates::{activities, class_rates_from, report_from, RateReport};
use crate::rng;

const PARTITION_RETRIES: usize = 100;

/// Splits sample indices across `k` clients: for every class, client shares
/// are drawn from `Dir(alpha 1_k)` and turned into counts by largest
/// remainder (ties to the lower client id). Partitions leaving a client
/// empty are redrawn.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    labels: &[usize],
    n_classes: usize,
    k: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Partition(format!(
            "concentration must be positive, got {alpha}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::Partition(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        by_class[y].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Partition(format!("class {c} has no samples")));
    }
    if labels.len() < k {
        return Err(Error::Partition(format!(
            "{} samples cannot fill {k} clients",
            labels.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Partition(e.to_string()))?;
    for _ in 0..PARTITION_RETRIES {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
        for members in &by_class {
            let mut idx = members.clone();
            idx.shuffle(rng);
            let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
            let total: f64 = p.iter().sum();
            if total > 0.0 && total.is_finite() {
                p.iter_mut().for_each(|v| *v /= total);
            } else {
                // Every draw underflowed: the mass sits on one client.
                let j = rng.random_range(0..k);
                p = (0..k).map(|i| (i == j) as u8 as f64).collect();
            }
            let counts = largest_remainder(idx.len(), &p);
            let mut start = 0;
            for (shard, &n) in shards.iter_mut().zip(&counts) {
                shard.extend_from_slice(&idx[start..start + n]);
                start += n;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for s in &mut shards {
                s.sort_unstable();
            }
            return Ok(shards);
        }
    }
    Err(Error::Partition(format!(
        "no partition with every client nonempty after {PARTITION_RETRIES} draws; \
         use a larger concentration or fewer clients"
    )))
}

/// Integer counts summing to `n`, proportional to `p`.
pub fn largest_remainder(n: usize, p: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = p.iter().map(|&v| v * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub train: Dataset,
    pub val: Dataset,
    /// Model after the client's latest local training.
    pub params: ModelParams,
    pub dp: DpConfig,
    /// Rounds since the client's update was last absorbed by the server.
    pub staleness: u32,
}

impl ClientState {
    pub fn n_samples(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Magnitude below which parameters count as pruned in the footprint.
    pub prune_threshold: f64,
    pub bptt: BpttOptions,
}

/// Optimisation steps of one local round: `E * ceil(N_k / B)`.
pub fn steps_per_round(epochs: usize, n: usize, batch: usize) -> u64 {
    (epochs * n.div_ceil(batch)) as u64
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ModelParams,
    pub report: RateReport,
    pub val_accuracy: f64,
    pub train_accuracy: f64,
    pub steps: u64,
    /// Mean share of clipped samples over DP steps (0 without DP).
    pub clipped_fraction: f64,
    pub empty_batches: u64,
}

/// `E` epochs of minibatch training from `global`, then a validation report.
/// Without DP batches are shuffled fixed-size slices and the mean gradient
/// feeds Adam. With DP each step clips per-sample gradients and adds noise
/// before the Adam update; Poisson batching includes every sample with
/// probability `q`, and an empty draw skips the step.
pub fn local_train(
    client: &ClientState,
    global: &ModelParams,
    arch: &NetworkArch,
    cfg: &TrainConfig,
    seed: u64,
    round: usize,
) -> Result<LocalOutcome> {
    let n = client.n_samples();
    if n == 0 {
        return Err(Error::Empty(format!(
            "client {} has no training data",
            client.id
        )));
    }
    let mut params = global.clone();
    let mut adam = Adam::new(params.len(), cfg.lr);
    let (r, k) = (round as u64, client.id as u64);
    let dp = &client.dp;
    let mut steps = 0u64;
    let mut clipped = 0.0;
    let mut dp_steps = 0u64;
    let mut empty = 0u64;
    let diverged = |msg: String| Error::Diverged {
        client: client.id,
        round,
        msg,
    };
    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let batches: Vec<Vec<usize>> = if dp.enabled && dp.batching == Batching::Poisson {
            let mut sampler = rng::stream(seed, &[rng::purpose::POISSON, r, k, e]);
            (0..n.div_ceil(cfg.batch_size))
                .map(|_| {
                    (0..n)
                        .filter(|_| sampler.random_bool(dp.sample_rate))
                        .collect()
                })
                .collect()
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(seed, &[rng::purpose::SHUFFLE, r, k, e]));
            order
                .chunks(cfg.batch_size)
                .map(<[usize]>::to_vec)
                .collect()
        };
        for idx in batches {
            let step_id = steps;
            steps += 1;
            if idx.is_empty() {
                empty += 1;
                continue;
            }
            let batch = client.train.subset(&idx)?;
            let grad = if dp.enabled {
                let per = backward_loss(&params, arch, &batch.spikes, &batch.labels, cfg.bptt)
                    .map_err(|e| diverged(e.to_string()))?;
                let noise = rng::derive_seed(seed, &[rng::purpose::NOISE, r, k, step_id]);
                let (g, summary) = dp_sgd_step(&per, dp, params.layout(), noise)?;
                clipped += summary.clipped_fraction;
                dp_steps += 1;
                g
            } else {
                backward_mean_loss(&params, arch, &batch.spikes, &batch.labels, cfg.bptt)
                    .map_err(|e| diverged(e.to_string()))?
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(format!(
                    "non-finite gradient at local step {step_id}"
                )));
            }
            adam.step(params.as_mut_slice(), &grad);
            if !params.is_finite() {
                return Err(diverged(format!(
                    "non-finite parameters after local step {step_id}"
                )));
            }
        }
    }
    let val_acts = activities(&params, arch, &client.val)?;
    let (report, val_accuracy) = report_from(
        &params,
        arch,
        &val_acts,
        &client.val.labels,
        client.val.n_classes,
        cfg.prune_threshold,
    )?;
    let train_acts = activities(&params, arch, &client.train)?;
    let train_accuracy = train_acts
        .iter()
        .zip(&client.train.labels)
        .filter(|(a, &y)| a.predicted_class() == y)
        .count() as f64
        / n as f64;
    Ok(LocalOutcome {
        params,
        report,
        val_accuracy,
        train_accuracy,
        steps,
        clipped_fraction: if dp_steps > 0 {
            clipped / dp_steps as f64
        } else {
            0.0
        },
        empty_batches: empty,
    })
}

/// Sample-weighted mean `sum (N_k / sum N) theta_k`, accumulated as
/// `theta_0 + sum w_k (theta_k - theta_0)` so identical inputs come back
/// bit-exact.
pub fn fedavg(updates: &[(&ModelParams, usize)]) -> Result<ModelParams> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::Empty("fedavg over zero updates".into()))?;
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Empty("fedavg over zero samples".into()));
    }
    let anchor = first.as_slice();
    let mut out = anchor.to_vec();
    for (p, n) in updates {
        if p.layout() != first.layout() {
            return Err(Error::Config(
                "fedavg over mismatched parameter layouts".into(),
            ));
        }
        let w = *n as f64 / total as f64;
        for ((o, v), a) in out.iter_mut().zip(p.as_slice()).zip(anchor) {
            *o += w * (v - a);
        }
    }
    ModelParams::from_values(first.layout().clone(), out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateWeights {
    pub zeta: Vec<f64>,
    pub mu: f64,
    /// Population standard deviation after the floor.
    pub sigma: f64,
}

/// Gaussian-kernel weight of each rate around the mean,
/// `zeta_k = exp(-(r_k - mu)^2 / (2 s^2)) / (sqrt(2 pi) s)`, with
/// `s = max(std(r), sigma_min)`.
pub fn rate_weight(rates: &[f64], sigma_min: f64) -> Result<RateWeights> {
    if rates.is_empty() {
        return Err(Error::Empty("rate_weight over zero clients".into()));
    }
    let n = rates.len() as f64;
    let mu = rates.iter().sum::<f64>() / n;
    let var = rates.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt().max(sigma_min);
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    let zeta = rates
        .iter()
        .map(|r| norm * (-(r - mu).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    Ok(RateWeights { zeta, mu, sigma })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsyncParams {
    pub kappa: f64,
    /// Exponent `a` of the staleness discount `(s + 1)^-a`.
    pub staleness_exponent: f64,
}

impl Default for AsyncParams {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            staleness_exponent: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationDecision {
    pub client: usize,
    pub zeta: f64,
    pub staleness_factor: f64,
    pub size_factor: f64,
    /// Mixing weight before clamping.
    pub lambda_raw: f64,
    pub lambda: f64,
    pub clamped: bool,
}

/// Convex mix of the global model towards one client update.
#[allow(clippy::too_many_arguments)]
pub fn async_aggregate(
    global: &ModelParams,
    update: &ModelParams,
    client: usize,
    zeta: f64,
    staleness: u32,
    n_k: usize,
    total_n: usize,
    p: AsyncParams,
) -> Result<(ModelParams, AggregationDecision)> {
    if !(p.kappa > 0.0) {
        return Err(Error::Config(format!(
            "kappa must be positive, got {}",
            p.kappa
        )));
    }
    if total_n == 0 {
        return Err(Error::Empty(
            "async aggregation with zero total samples".into(),
        ));
    }
    let staleness_factor = (staleness as f64 + 1.0).powf(-p.staleness_exponent);
    let size_factor = n_k as f64 / total_n as f64;
    let lambda_raw = p.kappa * staleness_factor * size_factor * zeta;
    let lambda = lambda_raw.clamp(0.0, 1.0);
    let mut out = global.clone();
    for (o, u) in out.as_mut_slice().iter_mut().zip(update.as_slice()) {
        *o = (1.0 - lambda) * *o + lambda * u;
    }
    Ok((
        out,
        AggregationDecision {
            client,
            zeta,
            staleness_factor,
            size_factor,
            lambda_raw,
            lambda,
            clamped: lambda != lambda_raw,
        },
    ))
}

/// Squared class-rate change over the classes present in both vectors.
pub fn delta_r(local: &[Option<f64>], global: &[Option<f64>]) -> f64 {
    local
        .iter()
        .zip(global)
        .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).powi(2)))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    /// `(client, dR)` for every candidate, in the order given.
    pub candidates: Vec<(usize, f64)>,
    pub selected: Vec<usize>,
    /// Clients whose dR equals that of the last selected one but were left out.
    pub tie_excluded: Vec<usize>,
}

/// The `p` candidates with largest dR; equal values go to the lower id.
/// Returned ids are in ascending order.
pub fn delta_r_select(candidates: &[(usize, f64)], p: usize) -> SelectionDecision {
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let take = p.min(ranked.len());
    let mut selected: Vec<usize> = ranked[..take].iter().map(|c| c.0).collect();
    let tie_excluded = match take.checked_sub(1).map(|i| ranked[i].1) {
        Some(cut) => ranked[take..]
            .iter()
            .filter(|c| c.1 == cut)
            .map(|c| c.0)
            .collect(),
        None => Vec::new(),
    };
    selected.sort_unstable();
    SelectionDecision {
        candidates: candidates.to_vec(),
        selected,
        tie_excluded,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    FedAvg,
    RateW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    All,
    #[serde(rename = "DeltaR")]
    DeltaR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub agg: Aggregation,
    pub sel: Selection,
    /// Candidate pool size `N`.
    pub n_candidates: usize,
    /// Clients selected per round `P` (ignored for `All`).
    pub p_select: usize,
}

impl Protocol {
    pub fn tag(&self) -> String {
        let sel = match self.sel {
            Selection::All => "All",
            Selection::DeltaR => "DeltaR",
        };
        format!(
            "{:?}/{sel}/{}/{}",
            self.agg, self.n_candidates, self.p_select
        )
    }
}

/// Server-side state of a federated run.
#[derive(Debug, Clone)]
pub struct Federation {
    pub experiment_id: String,
    pub arch: NetworkArch,
    pub clients: Vec<ClientState>,
    pub global: ModelParams,
    pub test: Dataset,
    pub protocol: Protocol,
    pub train: TrainConfig,
    pub async_params: AsyncParams,
    pub sigma_min: f64,
    /// Train every candidate (needed for fresh dR) rather than only the
    /// selected ones.
    pub train_all_candidates: bool,
    pub seed: u64,
    pub partition_seed: u64,
}

impl Federation {
    pub fn total_samples(&self) -> usize {
        self.clients.iter().map(ClientState::n_samples).sum()
    }

    fn candidates(&self, round: usize) -> Vec<usize> {
        let k = self.clients.len();
        let mut ids: Vec<usize> = (0..k).collect();
        if self.protocol.n_candidates < k {
            ids.shuffle(&mut rng::stream(
                self.seed,
                &[rng::purpose::PARTITION, 1, round as u64],
            ));
            ids.truncate(self.protocol.n_candidates);
            ids.sort_unstable();
        }
        ids
    }
}

/// One round: candidates train locally from the global model, dR is
/// measured on every candidate, the protocol selects and aggregates, and
/// the new global model is scored on the test set.
pub fn run_round(fed: &mut Federation, round: usize) -> Result<RoundLog> {
    let candidates = fed.candidates(round);
    let arch = fed.arch.clone();
    let global = fed.global.clone();
    let cfg = fed.train;
    let seed = fed.seed;
    let must_train: Vec<bool> = candidates
        .iter()
        .map(|_| fed.train_all_candidates || fed.protocol.sel == Selection::All)
        .collect();

    // Local training (or reuse of the last local model) per candidate.
    let outcomes: Vec<Option<LocalOutcome>> = candidates
        .par_iter()
        .zip(&must_train)
        .map(|(&k, &train)| -> Result<Option<LocalOutcome>> {
            if train {
                local_train(&fed.clients[k], &global, &arch, &cfg, seed, round).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    // dR on each candidate's validation shard.
    let measured: Vec<(Vec<Option<f64>>, Vec<Option<f64>>)> = candidates
        .par_iter()
        .zip(&outcomes)
        .map(|(&k, out)| -> Result<_> {
            let c = &fed.clients[k];
            let local = out.as_ref().map(|o| &o.params).unwrap_or(&c.params);
            let la = activities(local, &arch, &c.val)?;
            let ga = activities(&global, &arch, &c.val)?;
            Ok((
                class_rates_from(&arch, &la, &c.val.labels, c.val.n_classes),
                class_rates_from(&arch, &ga, &c.val.labels, c.val.n_classes),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<(usize, f64)> = candidates
        .iter()
        .zip(&measured)
        .map(|(&k, (l, g))| (k, delta_r(l, g)))
        .collect();

    let selection = match fed.protocol.sel {
        Selection::All => SelectionDecision {
            candidates: scored.clone(),
            selected: candidates.clone(),
            tie_excluded: Vec::new(),
        },
        Selection::DeltaR => delta_r_select(&scored, fed.protocol.p_select),
    };
    // Selected clients without a fresh local model train now.
    let mut outcomes = outcomes;
    for (i, &k) in candidates.iter().enumerate() {
        if outcomes[i].is_none() && selection.selected.contains(&k) {
            outcomes[i] = Some(local_train(
                &fed.clients[k],
                &global,
                &arch,
                &cfg,
                seed,
                round,
            )?);
        }
    }
    for (i, &k) in candidates.iter().enumerate() {
        if let Some(o) = &outcomes[i] {
            fed.clients[k].params = o.params.clone();
        }
    }

    let slot = |k: usize| candidates.iter().position(|&c| c == k).unwrap();
    let mut decisions: Vec<Option<AggregationDecision>> = vec![None; candidates.len()];
    let (mut mu_r, mut sigma_r) = (None, None);
    match fed.protocol.agg {
        Aggregation::FedAvg => {
            let updates: Vec<(&ModelParams, usize)> = selection
                .selected
                .iter()
                .map(|&k| {
                    (
                        &outcomes[slot(k)].as_ref().unwrap().params,
                        fed.clients[k].n_samples(),
                    )
                })
                .collect();
            fed.global = fedavg(&updates)?;
        }
        Aggregation::RateW => {
            let rates: Vec<f64> = selection
                .selected
                .iter()
                .map(|&k| outcomes[slot(k)].as_ref().unwrap().report.network)
                .collect();
            let w = rate_weight(&rates, fed.sigma_min)?;
            mu_r = Some(w.mu);
            sigma_r = Some(w.sigma);
            let total_n = fed.total_samples();
            let mut g = fed.global.clone();
            for (j, &k) in selection.selected.iter().enumerate() {
                let c = &fed.clients[k];
                let (next, d) = async_aggregate(
                    &g,
                    &outcomes[slot(k)].as_ref().unwrap().params,
                    k,
                    w.zeta[j],
                    c.staleness,
                    c.n_samples(),
                    total_n,
                    fed.async_params,
                )?;
                g = next;
                decisions[slot(k)] = Some(d);
            }
            fed.global = g;
        }
    }
    for c in fed.clients.iter_mut() {
        if selection.selected.contains(&c.id) {
            c.staleness = 0;
        } else {
            c.staleness += 1;
        }
    }
    if !fed.global.is_finite() {
        return Err(Error::Diverged {
            client: usize::MAX,
            round,
            msg: "aggregated global model is non-finite".into(),
        });
    }

    let test_acts = activities(&fed.global, &arch, &fed.test)?;
    let (global_report, global_accuracy) = report_from(
        &fed.global,
        &arch,
        &test_acts,
        &fed.test.labels,
        fed.test.n_classes,
        cfg.prune_threshold,
    )?;

    let mut clients = Vec::with_capacity(candidates.len());
    for (i, &k) in candidates.iter().enumerate() {
        let c = &fed.clients[k];
        let Some(o) = &outcomes[i] else {
            continue;
        };
        let d = decisions[i].as_ref();
        clients.push(ClientRecord {
            client: k,
            n_samples: c.n_samples(),
            selected: selection.selected.contains(&k),
            rates: o.report.clone(),
            delta_r: scored[i].1,
            zeta: d.map(|d| d.zeta),
            lambda: d.map(|d| d.lambda),
            lambda_raw: d.map(|d| d.lambda_raw),
            lambda_clamped: d.map(|d| d.clamped),
            staleness_factor: d.map(|d| d.staleness_factor),
            sigma: c.dp.enabled.then_some(c.dp.sigma),
            delta: c.dp.enabled.then_some(c.dp.delta),
            realized_epsilon: if c.dp.enabled {
                Some(c.dp.realized_epsilon()?)
            } else {
                None
            },
            clipped_fraction: o.clipped_fraction,
            train_accuracy: o.train_accuracy,
            val_accuracy: o.val_accuracy,
            local_steps: o.steps,
            empty_batches: o.empty_batches,
        });
    }
    Ok(RoundLog {
        schema_version: SCHEMA_VERSION,
        experiment_id: fed.experiment_id.clone(),
        round,
        protocol: fed.protocol.tag(),
        master_seed: fed.seed,
        partition_seed: fed.partition_seed,
        global_test_accuracy: global_accuracy,
        global_rates: global_report,
        mu_r,
        sigma_r,
        tie_excluded: selection.tie_excluded,
        clients,
    })
}
