//! Paired metrics and run persistence.

use proptest::prelude::*;
use ratedp::error::Error;
use ratedp::eval::{
    config_hash, kendall_tau, kendall_tau_b, lambda_deviation, persist, ranking_stability,
    read_logs, read_manifest, rmse_metric, ClientRecord, Manifest, MetricSelector, PairedRuns,
    RoundLog, SCHEMA_VERSION,
};
use ratedp::rates::RateReport;

fn report(rate: f64) -> RateReport {
    RateReport {
        per_neuron: vec![vec![rate; 2], vec![rate; 3]],
        per_layer: vec![rate, rate],
        network: rate,
        per_class: vec![Some(rate), None],
        activation_sparsity: 1.0 - rate,
        footprint_bytes: 400,
    }
}

fn record(client: usize, rate: f64, lambda: Option<f64>, delta_r: f64) -> ClientRecord {
    ClientRecord {
        client,
        n_samples: 50,
        selected: true,
        rates: report(rate),
        delta_r,
        zeta: lambda.map(|_| 1.0),
        lambda,
        lambda_raw: lambda,
        lambda_clamped: lambda.map(|_| false),
        staleness_factor: lambda.map(|_| 1.0),
        sigma: None,
        delta: None,
        realized_epsilon: None,
        clipped_fraction: 0.0,
        train_accuracy: 0.5,
        val_accuracy: 0.5,
        local_steps: 3,
        empty_batches: 0,
    }
}

fn log(id: &str, round: usize, protocol: &str, clients: Vec<ClientRecord>) -> RoundLog {
    RoundLog {
        schema_version: SCHEMA_VERSION,
        experiment_id: id.into(),
        round,
        protocol: protocol.into(),
        master_seed: 0,
        partition_seed: 0,
        global_test_accuracy: 0.5,
        global_rates: report(0.1),
        mu_r: None,
        sigma_r: None,
        tie_excluded: vec![],
        clients,
    }
}

/// Three rounds of four clients with rates `base + 0.01 k + 0.003 r`.
fn run(id: &str, offset: f64) -> Vec<RoundLog> {
    (0..3)
        .map(|r| {
            let clients = (0..4)
                .map(|k| {
                    record(
                        k,
                        0.1 + 0.01 * k as f64 + 0.003 * r as f64 + offset,
                        None,
                        0.0,
                    )
                })
                .collect();
            log(id, r, "FedAvg/All", clients)
        })
        .collect()
}

#[test]
fn constant_offset_gives_that_rmse() {
    let reference = run("ref", 0.0);
    let treatment = run("dp", 0.01);
    let paired = PairedRuns {
        reference: &reference,
        treatment: &treatment,
    };
    let m = rmse_metric(paired, MetricSelector::NetworkRate).unwrap();
    assert!((m.value - 0.01).abs() < 1e-12, "{}", m.value);
    assert!(m.ci95 < 1e-12);
    assert_eq!(m.n, 12);
    let layers = rmse_metric(paired, MetricSelector::LayerRate).unwrap();
    assert!((layers.value - 0.01).abs() < 1e-12);
    let sparsity = rmse_metric(paired, MetricSelector::ActivationSparsity).unwrap();
    assert!((sparsity.value - 0.01).abs() < 1e-12);
    let same = rmse_metric(
        PairedRuns {
            reference: &reference,
            treatment: &reference,
        },
        MetricSelector::NetworkRate,
    )
    .unwrap();
    assert_eq!(same.value, 0.0);
}

#[test]
fn rmse_matches_a_direct_computation_on_unaligned_runs() {
    // Treatment drops client 2 in round 1 and adds a round the reference lacks.
    let reference = run("ref", 0.0);
    let mut treatment = run("dp", 0.0);
    let devs = [0.02, -0.01, 0.005, 0.0];
    for l in treatment.iter_mut() {
        for c in l.clients.iter_mut() {
            let d = devs[c.client] * (1.0 + l.round as f64);
            c.rates.network += d;
        }
    }
    treatment[1].clients.retain(|c| c.client != 2);
    treatment.push(log("dp", 9, "FedAvg/All", vec![record(0, 0.9, None, 0.0)]));
    let mut se = Vec::new();
    for r in 0..3usize {
        for k in 0..4usize {
            if r == 1 && k == 2 {
                continue;
            }
            se.push((devs[k] * (1.0 + r as f64)).powi(2));
        }
    }
    let oracle = (se.iter().sum::<f64>() / se.len() as f64).sqrt();
    let m = rmse_metric(
        PairedRuns {
            reference: &reference,
            treatment: &treatment,
        },
        MetricSelector::NetworkRate,
    )
    .unwrap();
    assert_eq!(m.n, se.len());
    assert!((m.value - oracle).abs() < 1e-12, "{} vs {oracle}", m.value);
}

#[test]
fn lambda_deviation_examples() {
    let a = vec![log(
        "a",
        0,
        "RateW/DeltaR",
        vec![record(0, 0.1, Some(0.2), 0.0)],
    )];
    let b = vec![log(
        "b",
        0,
        "RateW/DeltaR",
        vec![record(0, 0.1, Some(0.7), 0.0)],
    )];
    let d = lambda_deviation(PairedRuns {
        reference: &a,
        treatment: &b,
    })
    .unwrap();
    assert!((d.mean - 0.5).abs() < 1e-15);
    assert!((d.sum - 0.5).abs() < 1e-15);
    assert!((d.percent - 50.0).abs() < 1e-12);
    assert_eq!(d.events, 1);
    let same = lambda_deviation(PairedRuns {
        reference: &a,
        treatment: &a,
    })
    .unwrap();
    assert_eq!(same.mean, 0.0);
    // Undefined without rate-weighted aggregation.
    let fedavg = run("f", 0.0);
    assert!(matches!(
        lambda_deviation(PairedRuns {
            reference: &fedavg,
            treatment: &fedavg,
        }),
        Err(Error::Metric(_))
    ));
}

#[test]
fn lambda_deviation_averages_shared_events_only() {
    let a = vec![log(
        "a",
        0,
        "RateW/DeltaR",
        vec![
            record(0, 0.1, Some(1.0), 0.0),
            record(1, 0.1, Some(0.5), 0.0),
            record(2, 0.1, None, 0.0),
        ],
    )];
    let b = vec![log(
        "b",
        0,
        "RateW/DeltaR",
        vec![
            record(0, 0.1, Some(0.8), 0.0),
            record(1, 0.1, Some(0.9), 0.0),
            record(2, 0.1, Some(0.3), 0.0),
        ],
    )];
    let d = lambda_deviation(PairedRuns {
        reference: &a,
        treatment: &b,
    })
    .unwrap();
    assert_eq!(d.events, 2);
    assert!((d.mean - 0.3).abs() < 1e-12);
}

#[test]
fn ranking_stability_over_rounds() {
    let scores = |ds: [f64; 4]| {
        ds.iter()
            .enumerate()
            .map(|(k, &d)| record(k, 0.1, None, d))
            .collect::<Vec<_>>()
    };
    let a = vec![
        log("a", 0, "FedAvg/DeltaR", scores([0.1, 0.2, 0.3, 0.4])),
        log("a", 1, "FedAvg/DeltaR", scores([0.4, 0.3, 0.2, 0.1])),
    ];
    let b = vec![
        log("b", 0, "FedAvg/DeltaR", scores([1.0, 2.0, 3.0, 4.0])),
        log("b", 1, "FedAvg/DeltaR", scores([1.0, 2.0, 3.0, 4.0])),
    ];
    let m = ranking_stability(PairedRuns {
        reference: &a,
        treatment: &b,
    })
    .unwrap();
    assert_eq!(m.n, 2);
    assert!(m.value.abs() < 1e-15);
    let flat = vec![log("c", 0, "FedAvg/DeltaR", scores([0.5; 4]))];
    assert!(ranking_stability(PairedRuns {
        reference: &flat,
        treatment: &flat,
    })
    .is_err());
}

#[test]
fn kendall_reference_cases() {
    assert_eq!(kendall_tau(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 1.0);
    assert_eq!(kendall_tau(&[0, 1, 2, 3], &[3, 2, 1, 0]).unwrap(), -1.0);
    // One swapped adjacent pair out of six: (5 - 1) / 6.
    assert!((kendall_tau(&[0, 1, 2, 3], &[1, 0, 2, 3]).unwrap() - 4.0 / 6.0).abs() < 1e-15);
    assert!(kendall_tau(&[0, 1], &[0, 2]).is_err());
    // Ties in x: C=2, D=0, tx=1, ty=0 -> 2 / sqrt(3 * 2).
    let t = kendall_tau_b(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0])
        .unwrap()
        .unwrap();
    assert!((t - 2.0 / 6f64.sqrt()).abs() < 1e-15);
    assert_eq!(kendall_tau_b(&[1.0, 1.0], &[0.0, 3.0]).unwrap(), None);
}

/// Quadratic-time tau-b straight from the definition.
fn tau_b_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let sgn = |v: f64| (v > 0.0) as i32 - (v < 0.0) as i32;
    let (mut s, mut n1, mut n2) = (0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in 0..i {
            let (a, b) = (sgn(x[i] - x[j]), sgn(y[i] - y[j]));
            s += (a * b) as i64;
            n1 += (a != 0) as i64;
            n2 += (b != 0) as i64;
        }
    }
    (n1 > 0 && n2 > 0).then(|| s as f64 / ((n1 * n2) as f64).sqrt())
}

proptest! {
    #[test]
    fn tau_b_matches_oracle_and_symmetries(
        pairs in proptest::collection::vec((0u8..5, 0u8..5), 2..12),
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let t = kendall_tau_b(&x, &y).unwrap();
        let o = tau_b_oracle(&x, &y);
        prop_assert_eq!(t.is_some(), o.is_some());
        if let (Some(t), Some(o)) = (t, o) {
            prop_assert!((t - o).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&t));
            let swapped = kendall_tau_b(&y, &x).unwrap().unwrap();
            prop_assert!((swapped - t).abs() < 1e-12);
            let neg: Vec<f64> = y.iter().map(|v| -v).collect();
            prop_assert!((kendall_tau_b(&x, &neg).unwrap().unwrap() + t).abs() < 1e-12);
        }
    }
}

fn manifest(id: &str, config: serde_json::Value) -> Manifest {
    Manifest {
        schema_version: SCHEMA_VERSION,
        experiment_id: id.into(),
        config_hash: config_hash(&config).unwrap(),
        code_version: "test".into(),
        master_seed: 0,
        partition_seed: 0,
        config,
    }
}

#[test]
fn persisted_runs_read_back_and_refuse_collisions() {
    let sink = tempfile::tempdir().unwrap();
    let logs = run("ref", 0.0);
    let m = manifest("ref", serde_json::json!({"eps": null, "k": 4}));
    let dir = persist(sink.path(), &m, &logs, false).unwrap();
    assert_eq!(read_logs(&dir).unwrap(), logs);
    assert_eq!(read_manifest(&dir).unwrap(), m);
    assert!(matches!(
        persist(sink.path(), &m, &logs, false),
        Err(Error::Collision(_))
    ));
    let shorter = &logs[..1];
    let again = persist(sink.path(), &m, shorter, true).unwrap();
    assert_eq!(again, dir);
    assert_eq!(read_logs(&dir).unwrap(), shorter);

    let other = manifest("dp", serde_json::json!({"eps": 1.0, "k": 4}));
    let dp_dir = persist(sink.path(), &other, &run("dp", 0.01), false).unwrap();
    assert_ne!(dp_dir, dir);
    assert_eq!(read_logs(&dp_dir).unwrap()[0].experiment_id, "dp");
    assert_eq!(read_logs(&dir).unwrap()[0].experiment_id, "ref");
}

#[test]
fn config_hash_is_order_independent_and_sensitive() {
    let a: serde_json::Value = serde_json::from_str(r#"{"a": 1, "b": [1, 2]}"#).unwrap();
    let b: serde_json::Value = serde_json::from_str(r#"{"b": [1, 2], "a": 1}"#).unwrap();
    let c: serde_json::Value = serde_json::from_str(r#"{"b": [2, 1], "a": 1}"#).unwrap();
    assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    assert_ne!(config_hash(&a).unwrap(), config_hash(&c).unwrap());
}
