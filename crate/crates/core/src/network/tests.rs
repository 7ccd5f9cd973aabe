use super::*;
use crate::activations::{Activation, GbMode, Granularity};
use crate::numerics::{FixedPoint32, FixedTensor, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixed(shape: Vec<usize>, v: &[f64]) -> FixedTensor {
    FixedTensor::encode(&Tensor::new(shape, v.to_vec()).unwrap()).unwrap()
}

fn dense(inputs: usize, outputs: usize, w: &[f64], b: &[f64], activation: Activation) -> Layer {
    Layer {
        kind: LayerKind::Dense { inputs, outputs },
        weights: fixed(vec![outputs, inputs], w),
        bias: fixed(vec![outputs], b),
        activation,
    }
}

fn small_cnn(seed: u64) -> Network {
    NetworkBuilder::new(&[1, 8, 8])
        .conv2d(3, 3, 1, 1)
        .maxpool2d(2, 2)
        .conv2d(4, 3, 1, 0)
        .flatten()
        .dense(5)
        .build(seed)
        .unwrap()
}

fn random_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn identity_dense_relu() {
    let relu_layer = dense(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], Activation::Relu);
    let out_layer = dense(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], Activation::Identity);
    let net = Network::new(vec![2], vec![relu_layer, out_layer]).unwrap();
    let y = net.forward(&Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
    assert_eq!(y.data(), &[1.0, 0.0]);
}

#[test]
fn two_layer_composition() {
    let net = Network::new(
        vec![1],
        vec![
            dense(1, 1, &[2.0], &[0.0], Activation::Relu),
            dense(1, 1, &[3.0], &[1.0], Activation::Identity),
        ],
    )
    .unwrap();
    let y = net.forward(&Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    // 3 * max(0, 2 * 1) + 1
    assert_eq!(y.data(), &[7.0]);
}

#[test]
fn zero_input_zero_bias_gives_zero_logits() {
    let mut net = NetworkBuilder::new(&[4]).dense(6).dense(5).dense(3).build(1).unwrap();
    let acts = [
        Activation::Relu,
        Activation::gbrelu(2.0, GbMode::SquashToZero).unwrap(),
        Activation::FitRelu {
            slope: 10.0,
            granularity: Granularity::Element,
            bounds: FixedTensor::new(vec![5], vec![FixedPoint32::ONE; 5]).unwrap(),
        },
    ];
    for act in acts {
        net.set_activation(1, act).unwrap();
        let y = net.forward(&Tensor::zeros(&[4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn output_layer_must_be_identity() {
    let err = Network::new(
        vec![1],
        vec![dense(1, 1, &[1.0], &[0.0], Activation::Relu)],
    );
    assert!(matches!(err, Err(Error::InvalidLayer { .. })));
}

#[test]
fn shape_mismatch_is_reported() {
    let net = small_cnn(0);
    assert!(matches!(
        net.forward(&Tensor::zeros(&[1, 7, 8])),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(Network::new(
        vec![3],
        vec![dense(2, 1, &[1.0, 1.0], &[0.0], Activation::Identity)]
    )
    .is_err());
}

#[test]
fn argmax_ties_break_low() {
    assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
    assert_eq!(argmax(&[0.5, 0.5]), 0);
}

#[test]
fn predict_is_argmax_of_forward() {
    let net = small_cnn(3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let x = random_input(&[1, 8, 8], &mut rng);
        let logits = net.forward(&x).unwrap();
        assert_eq!(net.predict(&x).unwrap(), argmax(logits.data()));
    }
}

#[test]
fn batched_forward_matches_per_sample() {
    let net = small_cnn(4);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let batch = random_input(&[70, 1, 8, 8], &mut rng);
    let out = net.forward(&batch).unwrap();
    assert_eq!(out.shape(), &[70, 5]);
    for s in 0..70 {
        let one = net.forward(&batch.slice_outer(s, 1).unwrap()).unwrap();
        assert_eq!(&out.data()[s * 5..(s + 1) * 5], one.data());
    }
}

#[test]
fn forward_is_deterministic_across_threads() {
    let net = small_cnn(5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_input(&[16, 1, 8, 8], &mut rng);
    let reference = net.forward(&x).unwrap();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(|| net.forward(&x).unwrap())).collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), reference);
        }
    });
}

/// Layer-by-layer oracle built from the tensor kernels.
#[test]
fn forward_equals_layer_fold() {
    use crate::numerics::{conv2d, maxpool2d};
    let net = small_cnn(6);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_input(&[2, 1, 8, 8], &mut rng);
    let mut cur = x.clone();
    for layer in net.layers() {
        let n = cur.shape()[0];
        cur = match layer.kind {
            LayerKind::Conv2d { stride, padding, .. } => {
                let mut y = conv2d(&cur, &layer.weights.decode(), stride, padding).unwrap();
                let (c, plane) = (y.shape()[1], y.shape()[2] * y.shape()[3]);
                let b = layer.bias.decode();
                for (i, v) in y.data_mut().iter_mut().enumerate() {
                    *v += b.data()[(i / plane) % c];
                }
                y
            }
            LayerKind::MaxPool2d { window, stride } => maxpool2d(&cur, window, stride).unwrap(),
            LayerKind::Flatten => {
                let len = cur.len() / n;
                cur.reshape(vec![n, len]).unwrap()
            }
            LayerKind::Dense { .. } => {
                let w = layer.weights.decode();
                let (o, i) = (w.shape()[0], w.shape()[1]);
                let mut wt = vec![0.0; o * i];
                for r in 0..o {
                    for c in 0..i {
                        wt[c * o + r] = w.data()[r * i + c];
                    }
                }
                let wt = Tensor::new(vec![i, o], wt).unwrap();
                let mut y = crate::numerics::matmul(&cur, &wt).unwrap();
                let b = layer.bias.decode();
                for (k, v) in y.data_mut().iter_mut().enumerate() {
                    *v += b.data()[k % o];
                }
                y
            }
        };
        if layer.kind.has_parameters() {
            let eval = layer.activation.decode();
            let per = cur.len() / n;
            let spatial = spatial_extent(&cur.shape()[1..]);
            let src = cur.data().to_vec();
            for s in 0..n {
                eval.forward(&src[s * per..(s + 1) * per], &mut cur.data_mut()[s * per..(s + 1) * per], spatial);
            }
        }
    }
    let got = net.forward(&x).unwrap();
    for (a, b) in got.data().iter().zip(cur.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn census_of_dense_fitrelu_layer() {
    let hidden = Layer {
        activation: Activation::FitRelu {
            slope: 10.0,
            granularity: Granularity::Element,
            bounds: fixed(vec![3], &[1.0, 2.0, 3.0]),
        },
        ..dense(2, 3, &[0.0; 6], &[0.0; 3], Activation::Relu)
    };
    let out = dense(3, 1, &[0.0; 3], &[0.0], Activation::Identity);
    let net = Network::new(vec![2], vec![hidden, out]).unwrap();
    let census = net.parameter_census();
    let first: Vec<_> = census.iter().take(3).map(|e| (e.buffer_id.to_string(), e.element_count)).collect();
    assert_eq!(
        first,
        [
            ("layer0.weight".to_string(), 6),
            ("layer0.bias".to_string(), 3),
            ("layer0.bound".to_string(), 3)
        ]
    );
    assert_eq!(census.iter().take(3).map(|e| e.bits_total).sum::<u64>(), 12 * 32);
    let total: u64 = census.iter().map(|e| e.bits_total).sum();
    assert_eq!(total, 32 * net.parameter_count() as u64);
}

#[test]
fn census_is_empty_without_parameters() {
    // A pooling-only stack has nothing to fault, and cannot even be a
    // network on its own; its layers report no buffers.
    let pool = Layer::structural(LayerKind::MaxPool2d { window: 2, stride: 2 });
    for kind in [BufferKind::Weight, BufferKind::Bias, BufferKind::Bound] {
        assert!(pool.buffer(kind).is_empty());
    }
    assert!(Network::new(vec![1, 4, 4], vec![pool]).is_err());
}

#[test]
fn neuron_count_sums_hidden_outputs() {
    let net = small_cnn(0);
    // conv1: 3x8x8, conv2: 4x2x2; output dense excluded.
    assert_eq!(net.neuron_count(), 3 * 64 + 4 * 4);
    assert_eq!(net.hidden_layers(), vec![0, 2]);
    assert_eq!(net.output_layer(), 4);
}

/// Mutating any census word changes the output for some input; mutating
/// outside the census is impossible by construction.
#[test]
fn census_buffers_all_influence_output() {
    let mut net = NetworkBuilder::new(&[3]).dense(4).dense(2).build(2).unwrap();
    let bounds = fixed(vec![4], &[5.0; 4]);
    net.set_activation(
        0,
        Activation::FitRelu {
            slope: 10.0,
            granularity: Granularity::Element,
            bounds,
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs: Vec<Tensor> = (0..32).map(|_| random_input(&[3], &mut rng)).collect();
    let base: Vec<Tensor> = inputs.iter().map(|x| net.forward(x).unwrap()).collect();
    for entry in net.parameter_census() {
        for e in 0..entry.element_count {
            let mut m = net.clone();
            let w = &mut m.buffer_mut(entry.buffer_id).unwrap()[e];
            // Large negative bound kills the neuron; large weights dominate.
            *w = FixedPoint32::encode(if entry.buffer_id.kind == BufferKind::Bound { -3.0 } else { 50.0 }).unwrap();
            let changed = inputs
                .iter()
                .zip(&base)
                .any(|(x, b)| m.forward(x).unwrap() != *b);
            assert!(changed, "{} element {e} had no effect", entry.buffer_id);
        }
    }
}

#[test]
fn model_file_round_trip_is_bit_exact() {
    let mut net = small_cnn(7);
    let bounds = fixed(vec![3, 8, 8], &vec![1.5; 192]);
    net.set_activation(
        0,
        Activation::FitRelu {
            slope: 12.5,
            granularity: Granularity::Element,
            bounds,
        },
    )
    .unwrap();
    net.set_activation(2, Activation::gbrelu(4.0, GbMode::ClampToBound).unwrap())
        .unwrap();
    let bytes = to_bytes(&net);
    let back = from_bytes(&bytes).unwrap();
    assert_eq!(back, net);
    assert_eq!(to_bytes(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save(&net, &path).unwrap();
    assert_eq!(load(&path).unwrap(), net);
}

#[test]
fn per_channel_bounds_round_trip() {
    let mut net = small_cnn(8);
    net.set_activation(
        0,
        Activation::FitReluNaive {
            granularity: Granularity::Channel,
            bounds: fixed(vec![3], &[1.0, 2.0, 3.0]),
        },
    )
    .unwrap();
    assert_eq!(from_bytes(&to_bytes(&net)).unwrap(), net);
}

#[test]
fn model_file_errors_are_distinct() {
    let net = small_cnn(9);
    let bytes = to_bytes(&net);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(from_bytes(&bad), Err(Error::BadMagic { .. })));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(from_bytes(&bad), Err(Error::VersionMismatch { found: 9, .. })));

    // Cut inside the last layer's weight block.
    let cut = bytes.len() - 4 * 5 - 8;
    match from_bytes(&bytes[..cut]) {
        Err(Error::TruncatedBlock { layer, block, .. }) => {
            assert_eq!(layer, 4);
            assert_eq!(block, "weight");
        }
        other => panic!("unexpected {other:?}"),
    }
    let err = from_bytes(&bytes[..cut]).unwrap_err().to_string();
    assert!(err.contains("truncated block") && err.contains("layer 4"), "{err}");

    assert!(matches!(from_bytes(&bytes[..10]), Err(Error::TruncatedHeader(_))));

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(from_bytes(&long), Err(Error::MalformedModel(_))));

    let missing = std::path::Path::new("/nonexistent/model.bin");
    assert!(matches!(load(missing), Err(Error::Io { .. })));
}

#[test]
fn word_offsets_point_at_the_stored_word() {
    let mut net = small_cnn(10);
    net.set_activation(2, Activation::gbrelu(3.0, GbMode::SquashToZero).unwrap())
        .unwrap();
    let bytes = to_bytes(&net);
    for entry in net.parameter_census() {
        for e in [0, entry.element_count - 1] {
            let off = word_offset(&net, entry.buffer_id, e).unwrap();
            let word = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            assert_eq!(word, net.buffer(entry.buffer_id).unwrap()[e].to_bits());
        }
    }
    assert!(word_offset(&net, BufferId::new(0, BufferKind::Bias), 99).is_none());
}

#[test]
fn digest_tracks_weights_only() {
    let net = small_cnn(11);
    let d = net.weights_digest();
    let mut m = net.clone();
    m.set_activation(0, Activation::gbrelu(1.0, GbMode::SquashToZero).unwrap())
        .unwrap();
    assert_eq!(m.weights_digest(), d);
    m.buffer_mut(BufferId::new(0, BufferKind::Weight)).unwrap()[0] = FixedPoint32::MAX;
    assert_ne!(m.weights_digest(), d);
}
