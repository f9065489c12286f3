//! Partitioning, local training, aggregation and round-level behaviour.

use std::path::Path;

use rand::Rng;
use ratedp::bptt::BpttOptions;
use ratedp::data::{generate, TaskSpec};
use ratedp::dp::DpConfig;
use ratedp::eval::RoundLog;
use ratedp::experiment::{build_federation, run_experiment, ExperimentSpec};
use ratedp::fed::{
    dirichlet_partition, fedavg, local_train, rate_weight, run_round, Aggregation, ClientState,
    Protocol, Selection, TrainConfig,
};
use ratedp::lif::LifConfig;
use ratedp::network::NetworkArch;
use ratedp::params::ModelParams;
use ratedp::rates::{evaluate, DEFAULT_PRUNE_THRESHOLD};
use ratedp::rng;

fn labels(n_classes: usize, per_class: usize) -> Vec<usize> {
    (0..n_classes * per_class).map(|i| i % n_classes).collect()
}

fn shares(shard: &[usize], y: &[usize], n_classes: usize) -> Vec<f64> {
    let mut c = vec![0.0; n_classes];
    for &i in shard {
        c[y[i]] += 1.0;
    }
    c.iter().map(|v| v / shard.len() as f64).collect()
}

#[test]
fn huge_alpha_is_nearly_uniform() {
    let y = labels(10, 1000);
    let shards = dirichlet_partition(&y, 10, 10, 1e6, &mut rng::stream(1, &[])).unwrap();
    for s in &shards {
        for share in shares(s, &y, 10) {
            assert!((share - 0.1).abs() <= 0.005, "share {share}");
        }
    }
}

#[test]
fn small_alpha_skews_clients() {
    let y = labels(10, 100);
    let shards = dirichlet_partition(&y, 10, 10, 0.1, &mut rng::stream(2, &[])).unwrap();
    let max_share = shards
        .iter()
        .map(|s| shares(s, &y, 10).into_iter().fold(0.0, f64::max))
        .fold(0.0, f64::max);
    assert!(max_share > 0.5, "max class share {max_share}");
}

#[test]
fn partition_is_an_exact_cover() {
    let y = labels(7, 31);
    for (k, alpha) in [(1, 1.0), (5, 0.3), (12, 5.0)] {
        let shards =
            dirichlet_partition(&y, 7, k, alpha, &mut rng::stream(3, &[k as u64])).unwrap();
        assert_eq!(shards.len(), k);
        assert!(shards.iter().all(|s| !s.is_empty()));
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        assert_eq!(all, (0..y.len()).collect::<Vec<_>>());
        if k == 1 {
            assert_eq!(shards[0].len(), y.len());
        }
    }
}

fn two_class_client(epochs: usize) -> (ClientState, NetworkArch, TrainConfig, ModelParams) {
    let task = TaskSpec {
        n_classes: 2,
        t_steps: 60,
        samples_per_class: 20,
        seed: 8,
        ..TaskSpec::default()
    };
    let data = generate(&task).unwrap();
    let arch = NetworkArch::new(vec![20, 16, 2], LifConfig::default()).unwrap();
    let global = ModelParams::init(&arch, 3.0, &mut rng::stream(4, &[rng::purpose::INIT]));
    let client = ClientState {
        id: 0,
        val: data.subset(&(0..10).collect::<Vec<_>>()).unwrap(),
        train: data,
        params: global.clone(),
        dp: DpConfig::disabled(),
        staleness: 0,
    };
    let cfg = TrainConfig {
        epochs,
        batch_size: 8,
        lr: 1e-2,
        prune_threshold: DEFAULT_PRUNE_THRESHOLD,
        bptt: BpttOptions::default(),
    };
    (client, arch, cfg, global)
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let (client, arch, cfg, global) = two_class_client(0);
    let out = local_train(&client, &global, &arch, &cfg, 1, 0).unwrap();
    assert_eq!(out.params, global);
    assert_eq!(out.steps, 0);
    let (direct, _) = evaluate(&global, &arch, &client.val, DEFAULT_PRUNE_THRESHOLD).unwrap();
    assert_eq!(out.report, direct);
}

#[test]
fn separable_shard_is_learned() {
    let (client, arch, cfg, global) = two_class_client(5);
    let out = local_train(&client, &global, &arch, &cfg, 1, 0).unwrap();
    assert!(
        out.train_accuracy > 0.9,
        "train accuracy {}",
        out.train_accuracy
    );
    let again = local_train(&client, &global, &arch, &cfg, 1, 0).unwrap();
    assert_eq!(out.params, again.params);
}

#[test]
fn fedavg_is_idempotent_and_symmetric() {
    let arch = NetworkArch::new(vec![3, 4, 2], LifConfig::default()).unwrap();
    let mut r = rng::stream(5, &[]);
    let p = ModelParams::init(&arch, 2.0, &mut r);
    assert_eq!(fedavg(&[(&p, 3), (&p, 9), (&p, 1)]).unwrap(), p);
    let neg = ModelParams::from_values(
        p.layout().clone(),
        p.as_slice().iter().map(|v| -v).collect(),
    )
    .unwrap();
    assert!(fedavg(&[(&p, 4), (&neg, 4)])
        .unwrap()
        .as_slice()
        .iter()
        .all(|v| *v == 0.0));
}

#[test]
fn wider_spread_lowers_and_flattens_the_kernel() {
    let mut r = rng::stream(6, &[]);
    for _ in 0..200 {
        let base: Vec<f64> = (0..6).map(|_| r.random_range(0.05..0.15)).collect();
        let mu = base.iter().sum::<f64>() / 6.0;
        let scale = r.random_range(1.1..3.0);
        let wide: Vec<f64> = base.iter().map(|b| mu + scale * (b - mu)).collect();
        let (a, b) = (
            rate_weight(&base, 1e-9).unwrap(),
            rate_weight(&wide, 1e-9).unwrap(),
        );
        assert!((b.sigma / a.sigma - scale).abs() < 1e-9);
        // Standardised deviations are unchanged, so every weight scales by 1/scale.
        for (za, zb) in a.zeta.iter().zip(&b.zeta) {
            assert!((zb * scale / za - 1.0).abs() < 1e-9);
        }
        let max = |z: &[f64]| z.iter().cloned().fold(0.0, f64::max);
        let min = |z: &[f64]| z.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max(&b.zeta) < max(&a.zeta));
        // Peak-to-trough ratio depends only on the standardised spread.
        assert!(
            (max(&b.zeta) / min(&b.zeta) - max(&a.zeta) / min(&a.zeta)).abs()
                < 1e-6 * max(&a.zeta) / min(&a.zeta)
        );
        // Holding deviations fixed and raising sigma flattens the ratio.
        let floored = rate_weight(&base, 2.0 * a.sigma).unwrap();
        assert!(max(&floored.zeta) / min(&floored.zeta) < max(&a.zeta) / min(&a.zeta));
    }
}

fn small_spec(k: usize, rounds: usize) -> ExperimentSpec {
    let mut s = ExperimentSpec::default();
    s.id = "fed".into();
    s.task.samples_per_class = 12;
    s.task.t_steps = 40;
    s.test_samples_per_class = 4;
    s.arch.hidden = vec![12];
    s.fed.k_clients = k;
    s.fed.rounds = rounds;
    s.fed.batch_size = 8;
    s.fed.protocol.n_candidates = k;
    s.fed.protocol.p_select = k;
    s
}

#[test]
fn identical_clients_give_identical_updates() {
    let mut fed = build_federation(&small_spec(2, 1)).unwrap();
    fed.clients[1].train = fed.clients[0].train.clone();
    fed.clients[1].val = fed.clients[0].val.clone();
    // Same shard, same per-client streams: pin both to id 0's randomness.
    let arch = fed.arch.clone();
    let a = local_train(&fed.clients[0], &fed.global, &arch, &fed.train, fed.seed, 0).unwrap();
    let mut twin = fed.clients[1].clone();
    twin.id = 0;
    let b = local_train(&twin, &fed.global, &arch, &fed.train, fed.seed, 0).unwrap();
    assert_eq!(a.params, b.params);
    let g = fedavg(&[(&a.params, 1), (&b.params, 1)]).unwrap();
    assert_eq!(g, a.params);
}

#[test]
fn full_selection_under_delta_r_takes_everyone() {
    let mut spec = small_spec(4, 2);
    spec.fed.protocol = Protocol {
        agg: Aggregation::RateW,
        sel: Selection::DeltaR,
        n_candidates: 4,
        p_select: 4,
    };
    let logs = run_experiment(&spec, None, false).unwrap().logs;
    for l in &logs {
        assert!(l.clients.iter().all(|c| c.selected));
        for c in &l.clients {
            let lambda = c.lambda.unwrap();
            assert!((0.0..=1.0).contains(&lambda));
        }
    }
}

#[test]
fn staleness_resets_on_selection() {
    let mut spec = small_spec(6, 3);
    spec.fed.protocol = Protocol {
        agg: Aggregation::RateW,
        sel: Selection::DeltaR,
        n_candidates: 6,
        p_select: 2,
    };
    let mut fed = build_federation(&spec).unwrap();
    let mut expected = [0u32; 6];
    for r in 0..3 {
        let log = run_round(&mut fed, r).unwrap();
        let selected: Vec<usize> = log
            .clients
            .iter()
            .filter(|c| c.selected)
            .map(|c| c.client)
            .collect();
        assert_eq!(selected.len(), 2);
        for c in &log.clients {
            if c.selected {
                // The discount used this round reflects staleness before the reset.
                let d = c.staleness_factor.unwrap();
                assert!((d - (expected[c.client] as f64 + 1.0).powf(-0.5)).abs() < 1e-15);
            }
        }
        for (k, e) in expected.iter_mut().enumerate() {
            *e = if selected.contains(&k) { 0 } else { *e + 1 };
            assert_eq!(fed.clients[k].staleness, *e);
        }
    }
}

#[test]
fn dp_clients_stay_within_budget() {
    let mut spec = small_spec(3, 2);
    spec.dp.enabled = true;
    spec.dp.epsilon = 2.0;
    spec.dp.clip_c = 1.0;
    let fed = build_federation(&spec).unwrap();
    for c in &fed.clients {
        assert!((c.dp.delta - 1.0 / c.n_samples() as f64).abs() < 1e-15);
        assert!(c.dp.realized_epsilon().unwrap() <= 2.0);
        assert_eq!(c.dp.total_steps, 2 * (c.n_samples().div_ceil(8)) as u64);
    }
    let logs = run_experiment(&spec, None, false).unwrap().logs;
    assert!(logs
        .iter()
        .flat_map(|l| &l.clients)
        .all(|c| c.realized_epsilon.unwrap() <= 2.0));
}

const GOLDEN: &str = "tests/fixtures/round_logs_k4_r2.ndjson";

/// Frozen RoundLogs of a pinned K=4, R=2 run. Regenerate with
/// `UPDATE_GOLDEN=1 cargo test -p ratedp --test federation golden`.
#[test]
fn golden_round_logs() {
    let mut spec = small_spec(4, 2);
    spec.seed = 42;
    spec.fed.partition_seed = 7;
    spec.fed.protocol = Protocol {
        agg: Aggregation::RateW,
        sel: Selection::DeltaR,
        n_candidates: 4,
        p_select: 2,
    };
    spec.dp.enabled = true;
    spec.dp.epsilon = 4.0;
    let logs = run_experiment(&spec, None, false).unwrap().logs;
    let text: String = logs
        .iter()
        .map(|l| serde_json::to_string(l).unwrap() + "\n")
        .collect();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &text).unwrap();
    }
    let frozen = std::fs::read_to_string(&path).expect("golden fixture present");
    assert_eq!(text, frozen);
    let parsed: Vec<RoundLog> = frozen
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(parsed, logs);
}
