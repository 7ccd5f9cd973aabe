//! Two-stage training: conventional ADAM training of weights and biases,
//! then post-training of the per-neuron activation bounds alone.
//!
//! Stage 2 never touches a weight or bias word. Bounds are optimized in `f64`
//! and re-quantized after every step, and the returned network is the
//! checkpoint with the smallest `Σλ²` whose validation accuracy stays within
//! the configured budget of the original model.

mod adam;
mod loss;

pub use adam::{AdamConfig, AdamState};
pub use loss::{cross_entropy, LossSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{calibrate_bounds, ActivationKind, BoundStore, Granularity};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{argmax, DecodedNetwork, Gradients, Network};
use crate::numerics::{BufferId, BufferKind, FixedPoint32};

/// Samples per parallel work item when accumulating gradients. Partial sums
/// are combined in chunk order, so results do not depend on thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostTrainConfig {
    /// Weight ζ of the bound penalty.
    pub zeta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Largest tolerated drop in validation accuracy, as a fraction.
    pub accuracy_budget: f64,
    /// Share of the dataset held out for the accuracy budget when
    /// [`post_train_bounds`] splits it itself.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for PostTrainConfig {
    fn default() -> Self {
        PostTrainConfig {
            zeta: 1e-3,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            accuracy_budget: 0.01,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl PostTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.accuracy_budget > 0.0 && self.accuracy_budget <= 1.0) {
            return bad(format!("accuracy_budget {} not in (0, 1]", self.accuracy_budget));
        }
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return bad(format!("zeta {} must be finite and non-negative", self.zeta));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction {} not in (0, 1)", self.validation_fraction));
        }
        Ok(())
    }
}

/// One line of the per-epoch metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub min_lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_lambda: Option<f64>,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    /// Final training-set accuracy.
    pub accuracy: f64,
    pub history: Vec<EpochMetrics>,
}

#[derive(Debug, Clone)]
pub struct PostTrainOutcome {
    pub network: Network,
    /// Validation accuracy of the network with plain ReLU.
    pub baseline_accuracy: f64,
    /// Validation accuracy of the returned checkpoint.
    pub accuracy: f64,
    /// Epoch of the returned checkpoint; 0 is the unmodified input.
    pub selected_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

/// Fraction of samples whose predicted class matches the label.
pub fn evaluate_accuracy(net: &Network, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let predicted = net.predict_batch(dataset.inputs())?;
    let correct = predicted
        .iter()
        .zip(dataset.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

fn check_dataset(net: &Network, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.sample_shape() != net.input_shape() {
        return Err(Error::shape("dataset", dataset.sample_shape(), net.input_shape()));
    }
    let outputs: usize = net.output_shape().iter().product();
    if dataset.classes() > outputs {
        return Err(Error::Data(format!(
            "{} classes but the network has {outputs} outputs",
            dataset.classes()
        )));
    }
    Ok(())
}

/// Summed cross-entropy, correct count and summed gradients over `indices`.
fn accumulate(
    net: &Network,
    decoded: &DecodedNetwork,
    dataset: &Dataset,
    indices: &[usize],
    params: bool,
    bounds: bool,
) -> (f64, usize, Gradients) {
    let partials: Vec<(f64, usize, Gradients)> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = Gradients::zeros(net);
            let mut loss = 0.0;
            let mut correct = 0;
            let mut g = vec![0.0; decoded.output_len()];
            for &i in chunk {
                let trace = decoded.forward_traced(dataset.sample(i));
                let label = dataset.labels()[i];
                loss += cross_entropy(trace.logits(), label, &mut g);
                correct += usize::from(argmax(trace.logits()) == label);
                decoded.backward(&trace, &g, &mut grads, params, bounds);
            }
            (loss, correct, grads)
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut loss, mut correct, mut grads) = iter.next().expect("non-empty batch");
    for (l, c, g) in iter {
        loss += l;
        correct += c;
        grads.add_assign(&g);
    }
    (loss, correct, grads)
}

/// Mean loss and its gradient over `indices`. The loss is the mean
/// cross-entropy plus the bound penalty of `spec`; bound gradients include the
/// penalty term. `params` and `bounds` select which gradients are computed.
pub fn loss_and_gradients(
    net: &Network,
    dataset: &Dataset,
    indices: &[usize],
    spec: &LossSpec,
    params: bool,
    bounds: bool,
) -> Result<(f64, Gradients)> {
    check_dataset(net, dataset)?;
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let decoded = net.decoded();
    let (ce, _, mut grads) = accumulate(net, &decoded, dataset, indices, params, bounds);
    grads.scale(1.0 / indices.len() as f64);
    let lambdas = bound_values(net);
    if bounds {
        for (layer, values) in &lambdas {
            for (g, &l) in grads.bounds[*layer].iter_mut().zip(values) {
                *g += spec.penalty_grad(l);
            }
        }
    }
    let loss = spec.total(
        ce / indices.len() as f64,
        lambdas.iter().flat_map(|(_, v)| v.iter().copied()),
    );
    Ok((loss, grads))
}

/// Decoded FitReLU bounds by layer.
fn bound_values(net: &Network) -> Vec<(usize, Vec<f64>)> {
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.activation.kind() == ActivationKind::Fitrelu)
        .map(|(i, l)| (i, l.activation.bound_words().iter().map(|w| w.decode()).collect()))
        .collect()
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn write_back(net: &mut Network, ids: &[BufferId], master: &[Vec<f64>], step: usize) -> Result<()> {
    for (id, values) in ids.iter().zip(master) {
        let words = net.buffer_mut(*id).expect("buffer exists");
        for (w, &v) in words.iter_mut().zip(values) {
            *w = if id.kind == BufferKind::Bound {
                FixedPoint32::encode_positive(v)
            } else {
                FixedPoint32::encode(v)
            }
            .map_err(|_| Error::Divergence { step, loss: v })?;
        }
    }
    Ok(())
}

fn decode_buffers(net: &Network, ids: &[BufferId]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&id| net.buffer(id).expect("buffer exists").iter().map(|w| w.decode()).collect())
        .collect()
}

/// Stage 1: mini-batch ADAM on weights and biases against cross-entropy.
/// Parameters are kept as `f64` masters and re-quantized after every step.
/// Activation bounds, if any, are left alone.
pub fn train_accuracy(net: &Network, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(net, dataset)?;
    let mut net = net.clone();
    let ids: Vec<BufferId> = net
        .parameter_census()
        .into_iter()
        .map(|c| c.buffer_id)
        .filter(|id| id.kind != BufferKind::Bound)
        .collect();
    let mut master = decode_buffers(&net, &ids);
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate), &master);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order = shuffled(dataset.len(), &mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let decoded = net.decoded();
            let (loss, _, mut grads) = accumulate(&net, &decoded, dataset, batch, true, false);
            let step = adam.step_count() as usize + 1;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            loss_sum += loss;
            grads.scale(1.0 / batch.len() as f64);
            let g: Vec<Vec<f64>> = ids
                .iter()
                .map(|id| match id.kind {
                    BufferKind::Weight => std::mem::take(&mut grads.weights[id.layer]),
                    _ => std::mem::take(&mut grads.bias[id.layer]),
                })
                .collect();
            adam.step(&mut master, &g);
            write_back(&mut net, &ids, &master, step)?;
        }
        history.push(EpochMetrics {
            stage: "train".into(),
            epoch,
            loss: loss_sum / dataset.len() as f64,
            accuracy: evaluate_accuracy(&net, dataset)?,
            mean_lambda: None,
            min_lambda: None,
            max_lambda: None,
        });
    }
    let accuracy = match history.last() {
        Some(m) => m.accuracy,
        None => evaluate_accuracy(&net, dataset)?,
    };
    Ok(TrainOutcome {
        network: net,
        accuracy,
        history,
    })
}

/// Replaces every hidden activation with FitReLU of slope `slope`, each
/// bound set to the neuron's maximum ReLU output over `dataset`.
pub fn modify_architecture(
    net: &Network,
    dataset: &Dataset,
    slope: f64,
    granularity: Granularity,
) -> Result<Network> {
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(Error::Config(format!("slope {slope} must be positive")));
    }
    calibrate_bounds(net, dataset, granularity)?.install(net, slope)
}

/// Stage 2 with the validation split taken from `dataset` according to
/// `cfg.validation_fraction`.
pub fn post_train_bounds(net: &Network, dataset: &Dataset, cfg: &PostTrainConfig) -> Result<PostTrainOutcome> {
    cfg.validate()?;
    let (train, val) = dataset.split(cfg.validation_fraction, cfg.seed)?;
    post_train_bounds_with(net, &train, &val, cfg)
}

/// Stage 2: ADAM on the FitReLU bounds only, gradients from `train`, the
/// accuracy budget checked on `val` after every epoch.
pub fn post_train_bounds_with(
    net: &Network,
    train: &Dataset,
    val: &Dataset,
    cfg: &PostTrainConfig,
) -> Result<PostTrainOutcome> {
    cfg.validate()?;
    check_dataset(net, train)?;
    check_dataset(net, val)?;
    for i in net.hidden_layers() {
        if net.layers()[i].activation.kind() != ActivationKind::Fitrelu {
            return Err(Error::Stage(format!(
                "layer {i} is not FitReLU; run modify/calibrate first"
            )));
        }
    }
    let baseline = evaluate_accuracy(&net.with_relu_activations(), val)?;
    let feasible = |acc: f64| baseline - acc < cfg.accuracy_budget;
    let spec = LossSpec {
        bound_penalty_weight: cfg.zeta,
        neuron_count: net.bound_count(),
    };
    let floor = FixedPoint32::EPSILON.decode();

    let mut net = net.clone();
    let ids: Vec<BufferId> = net
        .hidden_layers()
        .into_iter()
        .map(|l| BufferId::new(l, BufferKind::Bound))
        .collect();
    let mut master = decode_buffers(&net, &ids);
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate), &master);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let metrics = |net: &Network, epoch: usize, loss: f64, accuracy: f64| -> Result<EpochMetrics> {
        let store = BoundStore::from_network(net)?;
        Ok(EpochMetrics {
            stage: "post_train".into(),
            epoch,
            loss,
            accuracy,
            mean_lambda: Some(store.mean()),
            min_lambda: Some(store.min()),
            max_lambda: Some(store.max()),
        })
    };
    let sum_sq = |net: &Network| -> Result<f64> { Ok(BoundStore::from_network(net)?.sum_squares()) };

    let acc0 = evaluate_accuracy(&net, val)?;
    let mut history = vec![metrics(&net, 0, f64::NAN, acc0)?];
    // (Σλ², epoch, accuracy, network)
    let mut best: Option<(f64, usize, f64, Network)> =
        feasible(acc0).then(|| Ok::<_, Error>((sum_sq(&net)?, 0, acc0, net.clone()))).transpose()?;
    let mut best_seen = acc0;

    for epoch in 1..=cfg.epochs {
        let order = shuffled(train.len(), &mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let decoded = net.decoded();
            let (ce, _, mut grads) = accumulate(&net, &decoded, train, batch, false, true);
            let step = adam.step_count() as usize + 1;
            let loss = spec.total(ce / batch.len() as f64, master.iter().flatten().copied());
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            loss_sum += loss * batch.len() as f64;
            grads.scale(1.0 / batch.len() as f64);
            let g: Vec<Vec<f64>> = ids
                .iter()
                .zip(&master)
                .map(|(id, lambdas)| {
                    let mut g = std::mem::take(&mut grads.bounds[id.layer]);
                    for (g, &l) in g.iter_mut().zip(lambdas) {
                        *g += spec.penalty_grad(l);
                    }
                    g
                })
                .collect();
            adam.step(&mut master, &g);
            for l in master.iter_mut().flatten() {
                *l = l.max(floor);
            }
            write_back(&mut net, &ids, &master, step)?;
        }
        let acc = evaluate_accuracy(&net, val)?;
        best_seen = best_seen.max(acc);
        history.push(metrics(&net, epoch, loss_sum / train.len() as f64, acc)?);
        if feasible(acc) {
            let s = sum_sq(&net)?;
            if best.as_ref().is_none_or(|b| s < b.0) {
                best = Some((s, epoch, acc, net.clone()));
            }
        } else if best.is_some() {
            // Further bound updates would only trade more accuracy away.
            break;
        }
    }

    match best {
        Some((_, selected_epoch, accuracy, network)) => Ok(PostTrainOutcome {
            network,
            baseline_accuracy: baseline,
            accuracy,
            selected_epoch,
            history,
        }),
        None => Err(Error::NoFeasibleCheckpoint {
            delta: cfg.accuracy_budget,
            baseline,
            best: best_seen,
        }),
    }
}
