//! Synthetic spike data, the on-disk format and the rate indicators.

use proptest::prelude::*;
use ratedp::data::{
    decode, encode, generate, generate_split, load_spike_file, save_spike_file, TaskSpec,
};
use ratedp::error::Error;
use ratedp::lif::{LifConfig, SpikeTensor};
use ratedp::network::NetworkArch;
use ratedp::params::ModelParams;
use ratedp::rates::{
    class_rates, evaluate, footprint, layer_rate, network_rate, LAYER_HEADER_BYTES,
};
use ratedp::rng;

fn small() -> TaskSpec {
    TaskSpec {
        n_classes: 4,
        n_channels: 12,
        t_steps: 30,
        samples_per_class: 6,
        seed: 11,
        ..TaskSpec::default()
    }
}

#[test]
fn same_seed_is_bit_identical_and_splits_differ() {
    let a = generate(&small()).unwrap();
    let b = generate(&small()).unwrap();
    assert_eq!(encode(&a), encode(&b));
    let test = generate_split(&small(), 1).unwrap();
    assert_eq!(test.labels, a.labels);
    assert_ne!(test.spikes, a.spikes);
}

#[test]
fn empirical_channel_rates_match_the_template() {
    // No jitter: every channel fires at either the base or the signal rate.
    let spec = TaskSpec {
        n_classes: 2,
        n_channels: 10,
        t_steps: 400,
        samples_per_class: 50,
        jitter: 0.0,
        seed: 3,
        ..TaskSpec::default()
    };
    let ds = generate(&spec).unwrap();
    let templates = spec.templates();
    let window = (spec.samples_per_class * spec.t_steps) as f64;
    for c in 0..spec.n_classes {
        let mut counts = vec![0u64; spec.n_channels];
        for i in (0..ds.len()).filter(|&i| ds.labels[i] == c) {
            for (acc, v) in counts.iter_mut().zip(ds.channel_counts(i)) {
                *acc += v as u64;
            }
        }
        for (j, &n) in counts.iter().enumerate() {
            let p = if templates[c].contains(&j) {
                spec.signal_rate
            } else {
                spec.base_rate
            };
            let sd = (p * (1.0 - p) / window).sqrt();
            let rate = n as f64 / window;
            assert!(
                (rate - p).abs() <= 4.0 * sd,
                "class {c} channel {j}: {rate} vs {p}"
            );
        }
    }
}

#[test]
fn file_round_trip_through_disk() {
    let ds = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.spk");
    save_spike_file(&ds, &path).unwrap();
    assert_eq!(load_spike_file(&path).unwrap(), ds);
}

#[test]
fn corruption_is_reported_with_offsets() {
    let bytes = encode(&generate(&small()).unwrap());
    let mut bad = bytes.clone();
    bad[1] ^= 0xff;
    assert!(matches!(decode(&bad), Err(Error::Header { offset: 0, .. })));
    let cut = bytes.len() - 37;
    match decode(&bytes[..cut]) {
        Err(Error::Payload { offset, .. }) => assert_eq!(offset, cut),
        other => panic!("expected payload error, got {other:?}"),
    }
    assert!(matches!(decode(&bytes[..10]), Err(Error::Header { .. })));
}

#[test]
fn count_classifier_separates_classes() {
    let spec = small();
    let ds = generate(&spec).unwrap();
    let templates = spec.templates();
    let correct = (0..ds.len())
        .filter(|&i| {
            let counts = ds.channel_counts(i);
            let score = |c: usize| templates[c].iter().map(|&j| counts[j] as u64).sum::<u64>();
            (0..spec.n_classes).max_by_key(|&c| score(c)).unwrap() == ds.labels[i]
        })
        .count();
    assert!(
        correct as f64 / ds.len() as f64 >= 0.9,
        "{correct}/{}",
        ds.len()
    );
}

#[test]
fn class_exclusive_channels_give_distinct_class_rates() {
    // Hidden units listen only to channels that class 0 drives and class 1
    // does not (templates share a two-channel overlap).
    let spec = TaskSpec {
        n_classes: 2,
        n_channels: 8,
        t_steps: 50,
        samples_per_class: 10,
        base_rate: 0.0,
        signal_rate: 0.6,
        jitter: 0.0,
        seed: 5,
    };
    let ds = generate(&spec).unwrap();
    let t = spec.templates();
    let exclusive: Vec<usize> = t[0].iter().copied().filter(|j| !t[1].contains(j)).collect();
    assert!(!exclusive.is_empty());
    let arch = NetworkArch::new(vec![8, 6, 2], LifConfig::default()).unwrap();
    let mut p = ModelParams::zeros(&arch);
    for (k, w) in p.weights_mut(0).iter_mut().enumerate() {
        // Row-major [out][in].
        if exclusive.contains(&(k % 8)) {
            *w = 2.0;
        }
    }
    let rates = class_rates(&p, &arch, &ds).unwrap();
    let (r0, r1) = (rates[0].unwrap(), rates[1].unwrap());
    assert!(r0 > r1 + 0.05, "class rates {r0} vs {r1}");
}

#[test]
fn half_pruned_weights_halve_the_payload() {
    let arch = NetworkArch::new(vec![5, 4, 3], LifConfig::default()).unwrap();
    let mut p = ModelParams::zeros(&arch);
    let n = p.len();
    for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
        *v = if i % 2 == 0 { 1.0 } else { 1e-9 };
    }
    let overhead = LAYER_HEADER_BYTES * p.n_layers() as u64;
    assert_eq!(footprint(&p, 1e-6) - overhead, 4 * n.div_ceil(2) as u64);
    assert_eq!(footprint(&p, 0.0) - overhead, 4 * n as u64);
}

#[test]
fn report_sparsity_complements_the_rate() {
    let ds = generate(&small()).unwrap();
    let arch = NetworkArch::new(vec![12, 10, 8, 4], LifConfig::default()).unwrap();
    let p = ModelParams::init(&arch, 3.0, &mut rng::stream(9, &[]));
    let (report, acc) = evaluate(&p, &arch, &ds, 1e-6).unwrap();
    assert!((report.activation_sparsity + report.network - 1.0).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&acc));
    let direct = network_rate(&report.per_layer, arch.lif_sizes()).unwrap();
    assert!((direct - report.network).abs() < 1e-15);
    for (layer, &r) in report.per_neuron.iter().zip(&report.per_layer) {
        let mean = layer.iter().sum::<f64>() / layer.len() as f64;
        assert!((mean - r).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn layer_rate_is_a_fraction_and_order_free(
        (b, t, n, bits) in (1usize..4, 1usize..6, 1usize..5)
            .prop_flat_map(|(b, t, n)| (Just(b), Just(t), Just(n), proptest::collection::vec(0u8..2, b * t * n)))
    ) {
        let s = SpikeTensor::from_vec(b, t, n, bits.clone()).unwrap();
        let r = layer_rate(&s).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        let mut rev = bits.clone();
        rev.reverse();
        prop_assert_eq!(layer_rate(&SpikeTensor::from_vec(b, t, n, rev).unwrap()).unwrap(), r);
        let ones = bits.iter().map(|&v| v as f64).sum::<f64>();
        prop_assert_eq!(r, ones / bits.len() as f64);
    }

    #[test]
    fn network_rate_is_permutation_invariant(
        layers in proptest::collection::vec((0.0f64..1.0, 1usize..100), 1..6),
        shift in 0usize..6,
    ) {
        let (rates, sizes): (Vec<f64>, Vec<usize>) = layers.iter().cloned().unzip();
        let a = network_rate(&rates, &sizes).unwrap();
        let k = shift % layers.len();
        let (r2, s2): (Vec<f64>, Vec<usize>) = layers[k..].iter().chain(&layers[..k]).cloned().unzip();
        prop_assert!((network_rate(&r2, &s2).unwrap() - a).abs() < 1e-12);
        let lo = rates.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rates.iter().cloned().fold(0.0, f64::max);
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
    }

    #[test]
    fn footprint_shrinks_as_theta_grows(seed in 0u64..1000, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let arch = NetworkArch::new(vec![6, 5, 3], LifConfig::default()).unwrap();
        let p = ModelParams::init(&arch, 1.0, &mut rng::stream(seed, &[]));
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(footprint(&p, hi) <= footprint(&p, lo));
        prop_assert!(footprint(&p, f64::INFINITY) == LAYER_HEADER_BYTES * p.n_layers() as u64);
    }
}
