//! Fault campaigns: many seeded trials per (scheme, fault rate) cell.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::Summary;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::faultsim::{run_trial, sample_faults, FaultModel, FaultScope, FaultTrial};
use crate::network::Network;
use crate::training::evaluate_accuracy;

/// How a trained network is protected before fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Unprotected,
    GbreluSquash,
    GbreluClamp,
    Fitact,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::Unprotected,
        Scheme::GbreluSquash,
        Scheme::GbreluClamp,
        Scheme::Fitact,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Unprotected => "unprotected",
            Scheme::GbreluSquash => "gbrelu_squash",
            Scheme::GbreluClamp => "gbrelu_clamp",
            Scheme::Fitact => "fitact",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}")))
    }
}

/// What to run in a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schemes: Vec<Scheme>,
    /// Per-bit flip probabilities.
    #[serde(default)]
    pub fault_rates: Vec<f64>,
    /// Alternative to `fault_rates`: expected flips per trial over the
    /// reference model's bits (the unprotected model when present).
    #[serde(default)]
    pub expected_flips: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials_per_rate: usize,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub scope: FaultScope,
    /// Model file per scheme, used by the command-line tool.
    #[serde(default)]
    pub models: BTreeMap<Scheme, PathBuf>,
}

fn default_trials() -> usize {
    100
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            schemes: Scheme::ALL.to_vec(),
            fault_rates: Vec::new(),
            expected_flips: vec![1.0, 10.0, 100.0],
            trials_per_rate: default_trials(),
            seed: 0,
            workers: 0,
            scope: FaultScope::All,
            models: BTreeMap::new(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schemes.is_empty() {
            return bad("campaign needs at least one scheme".into());
        }
        match (self.fault_rates.is_empty(), self.expected_flips.is_empty()) {
            (true, true) => return bad("campaign needs fault_rates or expected_flips".into()),
            (false, false) => return bad("give either fault_rates or expected_flips, not both".into()),
            _ => {}
        }
        if let Some(r) = self.fault_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return bad(format!("fault rate {r} not in [0, 1]"));
        }
        if let Some(e) = self.expected_flips.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
            return bad(format!("expected flip count {e} must be finite and non-negative"));
        }
        if self.trials_per_rate == 0 {
            return bad("trials_per_rate must be at least 1".into());
        }
        Ok(())
    }

    /// Fault rates, converting expected flip counts over `reference_bits`.
    pub fn resolve_rates(&self, reference_bits: u64) -> Result<Vec<f64>> {
        if !self.fault_rates.is_empty() {
            return Ok(self.fault_rates.clone());
        }
        self.expected_flips
            .iter()
            .map(|&e| {
                let p = e / reference_bits as f64;
                if p <= 1.0 {
                    Ok(p)
                } else {
                    Err(Error::Config(format!(
                        "{e} expected flips exceeds the {reference_bits} bits in scope"
                    )))
                }
            })
            .collect()
    }
}

/// Trial seeds for one fault rate. The same list is used for every scheme,
/// so schemes are compared on paired faults.
pub fn trial_seeds(campaign_seed: u64, rate_index: usize, trials: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(campaign_seed);
    rng.set_stream(rate_index as u64);
    (0..trials).map(|_| rng.next_u64()).collect()
}

/// Bits of `net` inside `scope`.
pub fn bits_in_scope(net: &Network, scope: &FaultScope) -> Result<u64> {
    Ok(scope
        .resolve(&net.parameter_census())?
        .iter()
        .map(|c| c.bits_total)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub scheme: Scheme,
    pub fault_rate: f64,
    pub trial: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub scheme: Scheme,
    pub fault_rate: f64,
    /// Mean flips per trial for this scheme's model.
    pub expected_flips: f64,
    pub stats: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeInfo {
    pub scheme: Scheme,
    pub clean_accuracy: f64,
    pub bits_in_scope: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub trials_per_rate: usize,
    pub scope: FaultScope,
    pub eval_samples: usize,
    /// Free-form numeric settings such as slope, zeta and accuracy budget.
    pub settings: BTreeMap<String, f64>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub version: u32,
    pub metadata: ReportMetadata,
    pub schemes: Vec<SchemeInfo>,
    pub cells: Vec<Cell>,
    #[serde(skip)]
    pub samples: Vec<Sample>,
}

pub const REPORT_VERSION: u32 = 1;
pub const SAMPLES_HEADER: [&str; 5] = ["scheme", "fault_rate", "trial", "seed", "accuracy"];

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Runs every (scheme, rate, trial) and aggregates per cell. `models` must
/// hold one network per scheme named in `spec`; extra entries are ignored.
pub fn run_campaign(
    spec: &ExperimentSpec,
    models: &[(Scheme, Network)],
    eval: &Dataset,
    settings: BTreeMap<String, f64>,
) -> Result<CampaignReport> {
    spec.validate()?;
    if eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let nets: Vec<(Scheme, &Network)> = spec
        .schemes
        .iter()
        .map(|&s| {
            models
                .iter()
                .find(|(k, _)| *k == s)
                .map(|(_, n)| (s, n))
                .ok_or_else(|| Error::Config(format!("no model for scheme {s}")))
        })
        .collect::<Result<_>>()?;
    for (_, net) in &nets {
        if eval.sample_shape() != net.input_shape() {
            return Err(Error::shape("campaign data", eval.sample_shape(), net.input_shape()));
        }
    }
    let reference = nets
        .iter()
        .find(|(s, _)| *s == Scheme::Unprotected)
        .unwrap_or(&nets[0])
        .1;
    let rates = spec.resolve_rates(bits_in_scope(reference, &spec.scope)?)?;
    let started = unix_now();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let mut schemes = Vec::new();
    let mut censuses = Vec::new();
    for (s, net) in &nets {
        schemes.push(SchemeInfo {
            scheme: *s,
            clean_accuracy: evaluate_accuracy(net, eval)?,
            bits_in_scope: bits_in_scope(net, &spec.scope)?,
        });
        censuses.push(net.parameter_census());
    }

    let seeds: Vec<Vec<u64>> = (0..rates.len())
        .map(|r| trial_seeds(spec.seed, r, spec.trials_per_rate))
        .collect();
    let jobs: Vec<(usize, usize, usize)> = (0..nets.len())
        .flat_map(|m| {
            (0..rates.len()).flat_map(move |r| (0..spec.trials_per_rate).map(move |t| (m, r, t)))
        })
        .collect();
    let samples: Vec<Sample> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, r, t)| {
                let (scheme, net) = nets[m];
                let seed = seeds[r][t];
                let model = FaultModel {
                    fault_rate: rates[r],
                    scope: spec.scope.clone(),
                    seed,
                };
                let trial = if rates[r] == 0.0 {
                    FaultTrial::empty()
                } else {
                    sample_faults(&model, &censuses[m])?
                };
                Ok(Sample {
                    scheme,
                    fault_rate: rates[r],
                    trial: t,
                    seed,
                    accuracy: run_trial(net, &trial, eval)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let cells = samples
        .chunks(spec.trials_per_rate)
        .map(|chunk| {
            let s = &chunk[0];
            let info = schemes.iter().find(|i| i.scheme == s.scheme).expect("scheme info");
            let acc: Vec<f64> = chunk.iter().map(|x| x.accuracy).collect();
            Cell {
                scheme: s.scheme,
                fault_rate: s.fault_rate,
                expected_flips: s.fault_rate * info.bits_in_scope as f64,
                stats: Summary::from_samples(&acc),
            }
        })
        .collect();

    Ok(CampaignReport {
        version: REPORT_VERSION,
        metadata: ReportMetadata {
            seed: spec.seed,
            trials_per_rate: spec.trials_per_rate,
            scope: spec.scope.clone(),
            eval_samples: eval.len(),
            settings,
            started_unix: started,
            finished_unix: unix_now(),
        },
        schemes,
        cells,
        samples,
    })
}

impl CampaignReport {
    pub fn cell(&self, scheme: Scheme, rate_index: usize) -> Option<&Cell> {
        self.cells.iter().filter(|c| c.scheme == scheme).nth(rate_index)
    }

    pub fn clean_accuracy(&self, scheme: Scheme) -> Option<f64> {
        self.schemes
            .iter()
            .find(|s| s.scheme == scheme)
            .map(|s| s.clean_accuracy)
    }

    /// The JSON report with timestamps zeroed, for comparing runs.
    pub fn body_json(&self) -> String {
        let mut r = self.clone();
        r.metadata.started_unix = 0;
        r.metadata.finished_unix = 0;
        serde_json::to_string_pretty(&r).expect("report serializes")
    }

    pub fn samples_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SAMPLES_HEADER).map_err(csv_err)?;
        for s in &self.samples {
            w.write_record([
                s.scheme.as_str().to_string(),
                s.fault_rate.to_string(),
                s.trial.to_string(),
                s.seed.to_string(),
                s.accuracy.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("ascii csv"))
    }

    /// Writes `report.json` and `samples.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        let report = dir.join("report.json");
        std::fs::write(&report, json).map_err(|e| Error::io(&report, e))?;
        let samples = dir.join("samples.csv");
        std::fs::write(&samples, self.samples_csv()?).map_err(|e| Error::io(&samples, e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

/// Parses a `samples.csv` body back into samples.
pub fn parse_samples_csv(text: &str) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != SAMPLES_HEADER {
        return Err(Error::Data(format!("unexpected samples header {header:?}")));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(csv_err)?;
            let field = |j: usize| rec.get(j).unwrap_or("");
            let bad = |what: &str| Error::Data(format!("samples row {}: bad {what}", i + 1));
            Ok(Sample {
                scheme: field(0).parse()?,
                fault_rate: field(1).parse().map_err(|_| bad("fault_rate"))?,
                trial: field(2).parse().map_err(|_| bad("trial"))?,
                seed: field(3).parse().map_err(|_| bad("seed"))?,
                accuracy: field(4).parse().map_err(|_| bad("accuracy"))?,
            })
        })
        .collect()
}
