//! Monte-Carlo bit-flip injection into stored parameter words.
//!
//! A trial flips each bit in scope independently with probability `p`. The
//! flip count of every buffer is drawn from a Binomial and the positions are
//! then picked uniformly without replacement. Each buffer draws from its own
//! ChaCha stream keyed by the buffer id, so two networks that share a buffer
//! see the same faults in it under the same seed and rate.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{CensusEntry, Network};
use crate::numerics::{BitFlipEvent, BufferId, BufferKind};
use crate::training::evaluate_accuracy;

/// Which buffers a fault model may touch.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultScope {
    /// Every buffer in the census.
    #[default]
    All,
    /// Weights and biases only.
    ExcludeBounds,
    /// Every buffer of the listed layers.
    Layers(Vec<usize>),
    /// Exactly these buffers.
    Buffers(Vec<BufferId>),
}

impl FaultScope {
    /// The census entries in scope, in census order.
    pub fn resolve(&self, census: &[CensusEntry]) -> Result<Vec<CensusEntry>> {
        let known = |id: &BufferId| census.iter().any(|c| c.buffer_id == *id);
        match self {
            FaultScope::All => Ok(census.to_vec()),
            FaultScope::ExcludeBounds => Ok(census
                .iter()
                .filter(|c| c.buffer_id.kind != BufferKind::Bound)
                .cloned()
                .collect()),
            FaultScope::Layers(layers) => {
                for &l in layers {
                    if !census.iter().any(|c| c.buffer_id.layer == l) {
                        return Err(Error::Config(format!("fault scope layer {l} has no buffers")));
                    }
                }
                Ok(census
                    .iter()
                    .filter(|c| layers.contains(&c.buffer_id.layer))
                    .cloned()
                    .collect())
            }
            FaultScope::Buffers(ids) => {
                if let Some(bad) = ids.iter().find(|id| !known(id)) {
                    return Err(Error::Config(format!("fault scope buffer {bad} is not in the census")));
                }
                Ok(census
                    .iter()
                    .filter(|c| ids.contains(&c.buffer_id))
                    .cloned()
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultModel {
    /// Per-bit flip probability.
    pub fault_rate: f64,
    #[serde(default)]
    pub scope: FaultScope,
    pub seed: u64,
}

impl FaultModel {
    pub fn new(fault_rate: f64, seed: u64) -> Self {
        FaultModel {
            fault_rate,
            scope: FaultScope::All,
            seed,
        }
    }

    pub fn with_scope(mut self, scope: FaultScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fault_rate) {
            return Err(Error::Config(format!("fault rate {} not in [0, 1]", self.fault_rate)));
        }
        Ok(())
    }
}

/// The flips of one trial, sorted and free of duplicates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultTrial {
    pub stream_id: u64,
    pub events: Vec<BitFlipEvent>,
}

impl FaultTrial {
    pub fn empty() -> Self {
        FaultTrial {
            stream_id: 0,
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// ChaCha stream number of a buffer.
fn stream_of(id: BufferId) -> u64 {
    let kind = match id.kind {
        BufferKind::Weight => 0,
        BufferKind::Bias => 1,
        BufferKind::Bound => 2,
    };
    ((id.layer as u64) << 2) | kind
}

/// Draws one trial over the buffers of `census` that fall in the model's
/// scope. Deterministic in `(model, census)`.
pub fn sample_faults(model: &FaultModel, census: &[CensusEntry]) -> Result<FaultTrial> {
    model.validate()?;
    let mut events = Vec::new();
    for entry in model.scope.resolve(census)? {
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
        rng.set_stream(stream_of(entry.buffer_id));
        let bits = entry.bits_total;
        let count = Binomial::new(bits, model.fault_rate)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(&mut rng);
        if count == 0 {
            continue;
        }
        let mut picked: Vec<usize> =
            rand::seq::index::sample(&mut rng, bits as usize, count as usize).into_vec();
        picked.sort_unstable();
        events.extend(picked.into_iter().map(|b| BitFlipEvent {
            target_id: entry.buffer_id,
            element_index: b / 32,
            bit_position: (b % 32) as u32,
        }));
    }
    Ok(FaultTrial {
        stream_id: model.seed,
        events,
    })
}

/// Deep copy of `net` with every event's bit flipped. Fails on the first
/// event that does not address a word of `net`.
pub fn apply_faults(net: &Network, trial: &FaultTrial) -> Result<Network> {
    let mut out = net.clone();
    for ev in &trial.events {
        let out_of_range = |reason: String| Error::EventOutOfRange {
            event: ev.to_string(),
            reason,
        };
        let words = out
            .buffer_mut(ev.target_id)
            .filter(|w| !w.is_empty())
            .ok_or_else(|| out_of_range(format!("network has no buffer {}", ev.target_id)))?;
        let len = words.len();
        let word = words
            .get_mut(ev.element_index)
            .ok_or_else(|| out_of_range(format!("buffer has {len} elements")))?;
        *word = word
            .flip_bit(ev.bit_position)
            .map_err(|e| out_of_range(e.to_string()))?;
    }
    Ok(out)
}

/// Accuracy of the faulted copy of `net` on `eval_set`.
pub fn run_trial(net: &Network, trial: &FaultTrial, eval_set: &Dataset) -> Result<f64> {
    evaluate_accuracy(&apply_faults(net, trial)?, eval_set)
}

/// Text form of a trial: a comment header, then one `buffer,element,bit` line
/// per event.
pub fn write_fault_log(trial: &FaultTrial) -> String {
    let mut s = format!("# stream {}\n# buffer,element,bit\n", trial.stream_id);
    for ev in &trial.events {
        writeln!(s, "{ev}").expect("write to string");
    }
    s
}

/// Parses a fault log. Blank lines and `#` comments are skipped; a
/// `# stream N` header sets the stream id. Events are sorted and must be
/// distinct.
pub fn parse_fault_log(text: &str) -> Result<FaultTrial> {
    let mut stream_id = 0;
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let bad = |reason: String| Error::FaultLog { line: i + 1, reason };
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(n) = comment.trim().strip_prefix("stream ") {
                stream_id = n.trim().parse().map_err(|_| bad(format!("bad stream id {n:?}")))?;
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, element, bit] = fields[..] else {
            return Err(bad(format!("expected 3 fields, found {}", fields.len())));
        };
        let target_id: BufferId = id.parse().map_err(bad)?;
        let element_index = element
            .parse()
            .map_err(|_| bad(format!("bad element index {element:?}")))?;
        let bit_position: u32 = bit
            .parse()
            .map_err(|_| bad(format!("bad bit position {bit:?}")))?;
        if bit_position >= 32 {
            return Err(bad(format!("bit position {bit_position} out of range")));
        }
        events.push(BitFlipEvent {
            target_id,
            element_index,
            bit_position,
        });
    }
    events.sort_unstable();
    if let Some(w) = events.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::FaultLog {
            line: 0,
            reason: format!("duplicate event {}", w[0]),
        });
    }
    Ok(FaultTrial { stream_id, events })
}

pub fn read_fault_log(path: &Path) -> Result<FaultTrial> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fault_log(&text)
}

pub fn save_fault_log(path: &Path, trial: &FaultTrial) -> Result<()> {
    std::fs::write(path, write_fault_log(trial)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
