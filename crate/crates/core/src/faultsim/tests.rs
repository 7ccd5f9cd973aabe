use proptest::prelude::*;

use super::*;
use crate::activations::Granularity;
use crate::network::{to_bytes, word_offset, NetworkBuilder};
use crate::numerics::Tensor;
use crate::training::{modify_architecture, train_accuracy, TrainConfig};

fn entry(layer: usize, kind: BufferKind, elements: usize) -> CensusEntry {
    CensusEntry {
        buffer_id: BufferId::new(layer, kind),
        element_count: elements,
        bits_total: 32 * elements as u64,
    }
}

fn small_net() -> Network {
    NetworkBuilder::new(&[4]).dense(6).dense(3).build(1).unwrap()
}

fn toy_data() -> Dataset {
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for i in 0..90 {
        let c = i % 3;
        let t = i as f64 * 0.37;
        let mut s = [t.sin() * 0.2, t.cos() * 0.2, 0.0, 0.0];
        s[c] += 1.0;
        s[3] = c as f64 * 0.5;
        x.extend_from_slice(&s);
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![90, 4], x).unwrap(), labels, 3).unwrap()
}

fn trained() -> (Network, Dataset) {
    let data = toy_data();
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 16,
        learning_rate: 0.02,
        seed: 0,
    };
    (train_accuracy(&small_net(), &data, &cfg).unwrap().network, data)
}

#[test]
fn zero_rate_gives_no_events() {
    let census = small_net().parameter_census();
    let t = sample_faults(&FaultModel::new(0.0, 5), &census).unwrap();
    assert!(t.is_empty());
    assert_eq!(t.stream_id, 5);
}

#[test]
fn unit_rate_flips_every_bit_once() {
    let census = small_net().parameter_census();
    let t = sample_faults(&FaultModel::new(1.0, 5), &census).unwrap();
    let total: u64 = census.iter().map(|c| c.bits_total).sum();
    assert_eq!(t.len() as u64, total);
    assert!(t.events.windows(2).all(|w| w[0] < w[1]));
    let flipped = apply_faults(&small_net(), &t).unwrap();
    for c in &census {
        let a = small_net().buffer(c.buffer_id).unwrap().to_vec();
        let b = flipped.buffer(c.buffer_id).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), !y.to_bits());
        }
    }
}

#[test]
fn invalid_rate_rejected() {
    let census = small_net().parameter_census();
    assert!(sample_faults(&FaultModel::new(1.5, 0), &census).is_err());
    assert!(sample_faults(&FaultModel::new(-0.1, 0), &census).is_err());
}

/// Flip counts are Binomial(10^7, 1e-5): mean 100, variance ≈ 100. The mean
/// of 1000 trials must sit within three standard errors.
#[test]
fn flip_count_follows_binomial_mean() {
    let census = [entry(0, BufferKind::Weight, 312_500)];
    assert_eq!(census[0].bits_total, 10_000_000);
    let n = 1000;
    let total: usize = (0..n)
        .map(|s| sample_faults(&FaultModel::new(1e-5, s), &census).unwrap().len())
        .sum();
    let mean = total as f64 / n as f64;
    let se = (1e7 * 1e-5 * (1.0 - 1e-5) / n as f64).sqrt();
    assert!((mean - 100.0).abs() < 3.0 * se, "mean {mean}");
}

/// 10^4 trials at p = 1e-3 over 10^5 bits. The flip frequency overall, per
/// buffer and per bit position must each be within 5% of p.
#[test]
fn per_bit_frequency_matches_rate() {
    let census = [
        entry(0, BufferKind::Weight, 2500),
        entry(0, BufferKind::Bias, 625),
    ];
    let bits: u64 = census.iter().map(|c| c.bits_total).sum();
    assert_eq!(bits, 100_000);
    let trials = 10_000u64;
    let p = 1e-3;
    let mut by_position = [0u64; 32];
    let mut by_buffer = [0u64; 2];
    for s in 0..trials {
        for ev in sample_faults(&FaultModel::new(p, s), &census).unwrap().events {
            by_position[ev.bit_position as usize] += 1;
            by_buffer[usize::from(ev.target_id.kind == BufferKind::Bias)] += 1;
        }
    }
    let total: u64 = by_position.iter().sum();
    let freq = total as f64 / (trials * bits) as f64;
    assert!((freq - p).abs() / p < 0.05, "overall {freq}");
    for (i, &c) in by_position.iter().enumerate() {
        let f = c as f64 / (trials * bits / 32) as f64;
        assert!((f - p).abs() / p < 0.05, "bit {i}: {f}");
    }
    for (c, e) in by_buffer.iter().zip(&census) {
        let f = *c as f64 / (trials * e.bits_total) as f64;
        assert!((f - p).abs() / p < 0.05, "{}: {f}", e.buffer_id);
    }
}

#[test]
fn same_seed_same_trial() {
    let census = small_net().parameter_census();
    let a = sample_faults(&FaultModel::new(0.01, 42), &census).unwrap();
    let b = sample_faults(&FaultModel::new(0.01, 42), &census).unwrap();
    let c = sample_faults(&FaultModel::new(0.01, 43), &census).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.events, c.events);
}

/// Buffers shared by two networks receive identical faults, whatever else
/// either network contains.
#[test]
fn shared_buffers_see_identical_faults() {
    let plain = [entry(0, BufferKind::Weight, 500), entry(1, BufferKind::Weight, 80)];
    let extended = [
        entry(0, BufferKind::Weight, 500),
        entry(0, BufferKind::Bound, 40),
        entry(1, BufferKind::Weight, 80),
    ];
    for seed in 0..20 {
        let a = sample_faults(&FaultModel::new(0.002, seed), &plain).unwrap();
        let b = sample_faults(&FaultModel::new(0.002, seed), &extended).unwrap();
        let b: Vec<_> = b
            .events
            .into_iter()
            .filter(|e| e.target_id.kind != BufferKind::Bound)
            .collect();
        assert_eq!(a.events, b);
    }
}

#[test]
fn scope_limits_touched_buffers() {
    let (net, data) = trained();
    let fit = modify_architecture(&net, &data, 10.0, Granularity::Element).unwrap();
    let census = fit.parameter_census();
    let bound = BufferId::new(0, BufferKind::Bound);
    let w1 = BufferId::new(1, BufferKind::Weight);

    let t = sample_faults(&FaultModel::new(0.05, 1).with_scope(FaultScope::ExcludeBounds), &census)
        .unwrap();
    assert!(!t.is_empty());
    let faulted = apply_faults(&fit, &t).unwrap();
    assert_eq!(faulted.buffer_digest(bound), fit.buffer_digest(bound));

    let t = sample_faults(
        &FaultModel::new(0.05, 1).with_scope(FaultScope::Buffers(vec![w1])),
        &census,
    )
    .unwrap();
    assert!(t.events.iter().all(|e| e.target_id == w1));
    let faulted = apply_faults(&fit, &t).unwrap();
    for c in &census {
        if c.buffer_id != w1 {
            assert_eq!(faulted.buffer_digest(c.buffer_id), fit.buffer_digest(c.buffer_id));
        }
    }

    let t = sample_faults(&FaultModel::new(0.05, 1).with_scope(FaultScope::Layers(vec![1])), &census)
        .unwrap();
    assert!(t.events.iter().all(|e| e.target_id.layer == 1));

    let missing = FaultScope::Buffers(vec![BufferId::new(1, BufferKind::Bound)]);
    assert!(sample_faults(&FaultModel::new(0.05, 1).with_scope(missing), &census).is_err());
}

#[test]
fn empty_trial_and_double_application_are_identity() {
    let net = small_net();
    assert_eq!(apply_faults(&net, &FaultTrial::empty()).unwrap(), net);
    let t = sample_faults(&FaultModel::new(0.05, 9), &net.parameter_census()).unwrap();
    let once = apply_faults(&net, &t).unwrap();
    assert_ne!(once, net);
    assert_eq!(apply_faults(&once, &t).unwrap(), net);
}

/// Serialized before and after a single flip, the two model files differ in
/// exactly one bit, located at the event's word offset.
#[test]
fn single_event_changes_one_bit_at_logged_offset() {
    let net = small_net();
    for (id, element, bit) in [
        (BufferId::new(0, BufferKind::Weight), 13, 30),
        (BufferId::new(0, BufferKind::Bias), 2, 0),
        (BufferId::new(1, BufferKind::Weight), 17, 31),
    ] {
        let ev = BitFlipEvent {
            target_id: id,
            element_index: element,
            bit_position: bit,
        };
        let trial = FaultTrial {
            stream_id: 0,
            events: vec![ev],
        };
        let a = to_bytes(&net);
        let b = to_bytes(&apply_faults(&net, &trial).unwrap());
        let diffs: Vec<(usize, u8)> = a
            .iter()
            .zip(&b)
            .enumerate()
            .filter(|(_, (x, y))| x != y)
            .map(|(i, (x, y))| (i, x ^ y))
            .collect();
        let off = word_offset(&net, id, element).unwrap();
        // Words are little-endian.
        assert_eq!(diffs, vec![(off + bit as usize / 8, 1u8 << (bit % 8))]);
    }
}

#[test]
fn out_of_range_event_is_named() {
    let net = small_net();
    for ev in [
        BitFlipEvent {
            target_id: BufferId::new(0, BufferKind::Weight),
            element_index: 24,
            bit_position: 0,
        },
        BitFlipEvent {
            target_id: BufferId::new(0, BufferKind::Bound),
            element_index: 0,
            bit_position: 0,
        },
        BitFlipEvent {
            target_id: BufferId::new(7, BufferKind::Weight),
            element_index: 0,
            bit_position: 0,
        },
        BitFlipEvent {
            target_id: BufferId::new(0, BufferKind::Bias),
            element_index: 0,
            bit_position: 32,
        },
    ] {
        let trial = FaultTrial {
            stream_id: 0,
            events: vec![ev],
        };
        match apply_faults(&net, &trial) {
            Err(Error::EventOutOfRange { event, .. }) => assert_eq!(event, ev.to_string()),
            other => panic!("expected out-of-range error, got {other:?}"),
        }
    }
}

#[test]
fn trial_accuracy_and_isolation() {
    let (net, data) = trained();
    let clean = evaluate_accuracy(&net, &data).unwrap();
    assert_eq!(run_trial(&net, &FaultTrial::empty(), &data).unwrap(), clean);

    let digest = net.digest(&[BufferKind::Weight, BufferKind::Bias, BufferKind::Bound]);
    let census = net.parameter_census();
    let mut first = None;
    for seed in 0..30 {
        let t = sample_faults(&FaultModel::new(1e-3, seed), &census).unwrap();
        let acc = run_trial(&net, &t, &data).unwrap();
        first.get_or_insert(acc);
    }
    let t0 = sample_faults(&FaultModel::new(1e-3, 0), &census).unwrap();
    assert_eq!(run_trial(&net, &t0, &data).unwrap(), first.unwrap());
    assert_eq!(net.digest(&[BufferKind::Weight, BufferKind::Bias, BufferKind::Bound]), digest);
}

#[test]
fn sign_flips_on_first_layer_do_not_help() {
    let (net, data) = trained();
    let clean = evaluate_accuracy(&net, &data).unwrap();
    let id = BufferId::new(0, BufferKind::Weight);
    let trial = FaultTrial {
        stream_id: 0,
        events: (0..net.buffer(id).unwrap().len())
            .map(|e| BitFlipEvent {
                target_id: id,
                element_index: e,
                bit_position: 31,
            })
            .collect(),
    };
    assert!(run_trial(&net, &trial, &data).unwrap() <= clean);
}

#[test]
fn fault_log_round_trip() {
    let census = small_net().parameter_census();
    let t = sample_faults(&FaultModel::new(0.02, 77), &census).unwrap();
    let text = write_fault_log(&t);
    assert!(text.lines().nth(2).unwrap().starts_with("layer"));
    assert_eq!(parse_fault_log(&text).unwrap(), t);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("faults.log");
    save_fault_log(&path, &t).unwrap();
    assert_eq!(read_fault_log(&path).unwrap(), t);
}

#[test]
fn malformed_fault_logs() {
    for (text, line) in [
        ("layer0.weight,1\n", 1),
        ("\n# c\nlayer0.weight,x,3\n", 3),
        ("layer0.weight,1,32\n", 1),
        ("layer0.gamma,1,2\n", 1),
        ("# stream abc\n", 1),
    ] {
        match parse_fault_log(text) {
            Err(Error::FaultLog { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
    assert!(parse_fault_log("layer0.weight,1,2\nlayer0.weight,1,2\n").is_err());
}

proptest! {
    #[test]
    fn sampled_events_are_sorted_distinct_and_in_range(
        seed in any::<u64>(),
        rate in 0.0f64..0.2,
    ) {
        let census = small_net().parameter_census();
        let t = sample_faults(&FaultModel::new(rate, seed), &census).unwrap();
        prop_assert!(t.events.windows(2).all(|w| w[0] < w[1]));
        for ev in &t.events {
            let c = census.iter().find(|c| c.buffer_id == ev.target_id).unwrap();
            prop_assert!(ev.element_index < c.element_count);
            prop_assert!(ev.bit_position < 32);
        }
        prop_assert_eq!(parse_fault_log(&write_fault_log(&t)).unwrap(), t);
    }
}
