//! Bound sweeps, activation-maximum histograms and overhead measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::campaign::{trial_seeds, Scheme};
use super::stats::{median, Summary};
use crate::activations::{neuron_maxima, Activation, GbMode, CALIBRATION_FLOOR};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::faultsim::{run_trial, sample_faults, FaultModel, FaultScope};
use crate::network::{to_bytes, Network};
use crate::numerics::Tensor;
use crate::training::evaluate_accuracy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bound: f64,
    pub clean_accuracy: f64,
    pub mean_faulted_accuracy: f64,
    pub std_faulted_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub layer: usize,
    pub bounds: Vec<f64>,
    #[serde(default = "default_mode")]
    pub mode: GbMode,
    pub fault_rate: f64,
    #[serde(default = "default_sweep_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the swept layer's own buffers.
    #[serde(default)]
    pub scope: Option<FaultScope>,
}

fn default_mode() -> GbMode {
    GbMode::SquashToZero
}

fn default_sweep_trials() -> usize {
    50
}

/// For each candidate bound, puts a GBReLU with that bound on `layer` and
/// reports clean accuracy and mean accuracy over seeded fault trials. Trial
/// seeds are shared across bounds.
pub fn sweep_global_bound(net: &Network, cfg: &SweepConfig, eval: &Dataset) -> Result<Vec<SweepRow>> {
    net.check_hidden(cfg.layer)?;
    if cfg.trials == 0 || cfg.bounds.is_empty() {
        return Err(Error::Config("sweep needs at least one bound and one trial".into()));
    }
    let scope = cfg
        .scope
        .clone()
        .unwrap_or_else(|| FaultScope::Layers(vec![cfg.layer]));
    let seeds = trial_seeds(cfg.seed, 0, cfg.trials);
    cfg.bounds
        .iter()
        .map(|&bound| {
            let mut swept = net.clone();
            swept.set_activation(cfg.layer, Activation::gbrelu(bound, cfg.mode)?)?;
            let census = swept.parameter_census();
            let acc = seeds
                .iter()
                .map(|&seed| {
                    let model = FaultModel {
                        fault_rate: cfg.fault_rate,
                        scope: scope.clone(),
                        seed,
                    };
                    run_trial(&swept, &sample_faults(&model, &census)?, eval)
                })
                .collect::<Result<Vec<_>>>()?;
            let s = Summary::from_samples(&acc);
            Ok(SweepRow {
                bound,
                clean_accuracy: evaluate_accuracy(&swept, eval)?,
                mean_faulted_accuracy: s.mean,
                std_faulted_accuracy: s.std,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("bound,clean_accuracy,mean_faulted_accuracy,std_faulted_accuracy\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.bound, r.clean_accuracy, r.mean_faulted_accuracy, r.std_faulted_accuracy
        ));
    }
    s
}

/// Distribution of per-neuron activation maxima of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub layer: usize,
    /// Per-neuron maxima, floored like calibrated bounds.
    pub maxima: Vec<f64>,
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn max(&self) -> f64 {
        self.maxima.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.maxima.iter().sum::<f64>() / self.maxima.len() as f64
    }

    /// Population standard deviation over mean.
    pub fn coefficient_of_variation(&self) -> f64 {
        let m = self.mean();
        let var = self.maxima.iter().map(|x| (x - m).powi(2)).sum::<f64>() / self.maxima.len() as f64;
        var.sqrt() / m
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s
    }
}

/// Per-neuron maxima of `layer` over `dataset`, binned into `bins` equal
/// intervals. When every maximum is equal there is a single bin.
pub fn neuron_max_histogram(net: &Network, layer: usize, dataset: &Dataset, bins: usize) -> Result<Histogram> {
    net.check_hidden(layer)?;
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let maxima: Vec<f64> = neuron_maxima(net, dataset)?
        .into_iter()
        .find(|(l, _)| *l == layer)
        .expect("hidden layer has maxima")
        .1
        .into_iter()
        .map(|m| m.max(CALIBRATION_FLOOR))
        .collect();
    let lo = maxima.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = maxima.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(Histogram {
            layer,
            edges: vec![lo, hi],
            counts: vec![maxima.len()],
            maxima,
        });
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for &m in &maxima {
        let b = (((m - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram {
        layer,
        maxima,
        edges,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverheadConfig {
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default = "default_warmups")]
    pub warmups: usize,
    /// Samples per timed forward pass.
    #[serde(default = "default_timed")]
    pub samples: usize,
}

fn default_reps() -> usize {
    30
}

fn default_warmups() -> usize {
    5
}

fn default_timed() -> usize {
    256
}

impl Default for OverheadConfig {
    fn default() -> Self {
        OverheadConfig {
            repetitions: default_reps(),
            warmups: default_warmups(),
            samples: default_timed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub scheme: Scheme,
    /// Median wall time of one forward pass over the timed batch.
    pub runtime_seconds: f64,
    pub model_bytes: usize,
    /// Stored activation parameters (λ words or global bounds).
    pub bound_words: usize,
    /// `(scheme - baseline) / baseline`.
    pub runtime_overhead: f64,
    pub memory_overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub repetitions: usize,
    pub warmups: usize,
    pub samples: usize,
    pub baseline: Scheme,
    pub rows: Vec<OverheadRow>,
}

impl OverheadReport {
    pub fn row(&self, scheme: Scheme) -> Option<&OverheadRow> {
        self.rows.iter().find(|r| r.scheme == scheme)
    }
}

/// Times batched inference and compares model-file sizes. The first model
/// is the baseline.
pub fn measure_overhead(models: &[(Scheme, Network)], inputs: &Tensor, cfg: &OverheadConfig) -> Result<OverheadReport> {
    if models.is_empty() || cfg.repetitions == 0 {
        return Err(Error::Config("overhead needs models and at least one repetition".into()));
    }
    let n = inputs.shape()[0].min(cfg.samples);
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let batch = inputs.slice_outer(0, n)?;
    let mut decoded = Vec::with_capacity(models.len());
    for (_, net) in models {
        if &inputs.shape()[1..] != net.input_shape() {
            return Err(Error::shape("overhead inputs", &inputs.shape()[1..], net.input_shape()));
        }
        decoded.push(net.decoded());
    }
    // Repetitions are interleaved across models so drift affects all alike.
    let mut times = vec![Vec::with_capacity(cfg.repetitions); models.len()];
    for i in 0..cfg.warmups + cfg.repetitions {
        for (d, t_model) in decoded.iter().zip(&mut times) {
            let t = Instant::now();
            std::hint::black_box(d.forward_batch(std::hint::black_box(batch.data()), n));
            if i >= cfg.warmups {
                t_model.push(t.elapsed().as_secs_f64());
            }
        }
    }
    let measured: Vec<_> = models
        .iter()
        .zip(&times)
        .map(|((scheme, net), t)| {
            let bound_words = net.layers().iter().map(|l| l.activation.bound_words().len()).sum();
            (*scheme, median(t), to_bytes(net).len(), bound_words)
        })
        .collect();
    let (_, base_t, base_b, _) = measured[0];
    Ok(OverheadReport {
        repetitions: cfg.repetitions,
        warmups: cfg.warmups,
        samples: n,
        baseline: models[0].0,
        rows: measured
            .into_iter()
            .map(|(scheme, t, b, w)| OverheadRow {
                scheme,
                runtime_seconds: t,
                model_bytes: b,
                bound_words: w,
                runtime_overhead: (t - base_t) / base_t,
                memory_overhead: (b as f64 - base_b as f64) / base_b as f64,
            })
            .collect(),
    })
}
