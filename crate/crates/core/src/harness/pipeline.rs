//! Versioned experiment configuration and the end-to-end preparation of every
//! protection scheme from one trained network.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::analysis::{OverheadConfig, SweepConfig};
use super::campaign::{ExperimentSpec, Scheme};
use super::datasets::DataConfig;
use crate::activations::{calibrate_global_bounds, Activation, GbMode, Granularity, DEFAULT_SLOPE};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{ModelSpec, Network};
use crate::training::{
    modify_architecture, post_train_bounds, train_accuracy, PostTrainConfig, PostTrainOutcome, TrainConfig,
    TrainOutcome,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModifyConfig {
    pub slope: f64,
    pub granularity: Granularity,
}

impl Default for ModifyConfig {
    fn default() -> Self {
        ModifyConfig {
            slope: DEFAULT_SLOPE,
            granularity: Granularity::Element,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramConfig {
    /// Defaults to the second hidden layer, or the first if there is one.
    pub layer: Option<usize>,
    pub bins: usize,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        HistogramConfig { layer: None, bins: 20 }
    }
}

/// Everything one experiment needs, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub data: DataConfig,
    pub model: ModelSpec,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub modify: ModifyConfig,
    #[serde(default)]
    pub post_train: PostTrainConfig,
    #[serde(default)]
    pub campaign: ExperimentSpec,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub histogram: HistogramConfig,
    #[serde(default)]
    pub overhead: OverheadConfig,
}

/// Sets `path` (dot separated) in a TOML table. The value is parsed as TOML
/// and falls back to a plain string.
fn set_path(root: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut keys = path.split('.').peekable();
    let mut table = root;
    while let Some(key) = keys.next() {
        if key.is_empty() {
            return Err(Error::Config(format!("bad override key {path:?}")));
        }
        if keys.peek().is_none() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        table = match table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override {path:?}: {key} is not a table"))),
        };
    }
    unreachable!("split yields at least one key")
}

impl PipelineConfig {
    /// Parses TOML text, applying `key.path=value` overrides first.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, k.trim(), v.trim())?;
        }
        match table.get("version").and_then(toml::Value::as_integer) {
            Some(v) if v == CONFIG_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "config version {v} is not supported (expected {CONFIG_VERSION})"
                )))
            }
            None => return Err(Error::Config("config has no integer `version`".into())),
        }
        let cfg: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.post_train.validate()?;
        if !(self.modify.slope > 0.0 && self.modify.slope.is_finite()) {
            return Err(Error::Config(format!("slope {} must be positive", self.modify.slope)));
        }
        self.campaign.validate()
    }

    pub fn build_network(&self) -> Result<Network> {
        self.model.build(self.init_seed)
    }

    /// Numeric settings recorded in campaign reports.
    pub fn settings(&self) -> std::collections::BTreeMap<String, f64> {
        [
            ("slope", self.modify.slope),
            ("zeta", self.post_train.zeta),
            ("accuracy_budget", self.post_train.accuracy_budget),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Layer-wise global bounds (each layer's maximum activation over `train`)
/// installed as GBReLU.
pub fn protect_gbrelu(net: &Network, train: &Dataset, mode: GbMode) -> Result<Network> {
    let mut out = net.clone();
    for (layer, bound) in calibrate_global_bounds(net, train)? {
        out.set_activation(layer, Activation::gbrelu(bound, mode)?)?;
    }
    Ok(out)
}

/// Derives `scheme` from a stage-1 network. For FitAct this runs
/// modification and post-training and also returns the post-training record.
pub fn protect(
    cfg: &PipelineConfig,
    net: &Network,
    train: &Dataset,
    scheme: Scheme,
) -> Result<(Network, Option<PostTrainOutcome>)> {
    match scheme {
        Scheme::Unprotected => Ok((net.clone(), None)),
        Scheme::GbreluSquash => Ok((protect_gbrelu(net, train, GbMode::SquashToZero)?, None)),
        Scheme::GbreluClamp => Ok((protect_gbrelu(net, train, GbMode::ClampToBound)?, None)),
        Scheme::Fitact => {
            let modified = modify_architecture(net, train, cfg.modify.slope, cfg.modify.granularity)?;
            let post = post_train_bounds(&modified, train, &cfg.post_train)?;
            Ok((post.network.clone(), Some(post)))
        }
    }
}

/// Every artifact of one pipeline run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub trained: TrainOutcome,
    pub post: Option<PostTrainOutcome>,
    pub models: Vec<(Scheme, Network)>,
}

impl Prepared {
    pub fn model(&self, scheme: Scheme) -> Option<&Network> {
        self.models.iter().find(|(s, _)| *s == scheme).map(|(_, n)| n)
    }
}

/// Loads data, trains, and derives every requested scheme.
pub fn prepare(cfg: &PipelineConfig, schemes: &[Scheme]) -> Result<Prepared> {
    let (train, test) = cfg.data.load_split()?;
    let trained = train_accuracy(&cfg.build_network()?, &train, &cfg.train)?;
    let mut post = None;
    let mut models = Vec::new();
    for &s in schemes {
        let (net, p) = protect(cfg, &trained.network, &train, s)?;
        post = post.or(p);
        models.push((s, net));
    }
    Ok(Prepared {
        train,
        test,
        trained,
        post,
        models,
    })
}

/// The two shipped reference workloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    /// Two hidden dense layers on the 4-class Gaussian blobs.
    Mlp,
    /// Two conv layers and one dense layer on the synthetic digits.
    Cnn,
}

impl Workload {
    pub fn name(self) -> &'static str {
        match self {
            Workload::Mlp => "mlp",
            Workload::Cnn => "cnn",
        }
    }

    pub fn config_text(self) -> &'static str {
        match self {
            Workload::Mlp => include_str!("../../configs/mlp.toml"),
            Workload::Cnn => include_str!("../../configs/cnn.toml"),
        }
    }

    pub fn config(self) -> PipelineConfig {
        PipelineConfig::parse(self.config_text(), &[]).expect("shipped config is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::datasets::DatasetSource;

    #[test]
    fn shipped_configs_parse() {
        for w in [Workload::Mlp, Workload::Cnn] {
            let cfg = w.config();
            assert_eq!(cfg.version, CONFIG_VERSION);
            assert!(cfg.build_network().is_ok(), "{}", w.name());
            let back = PipelineConfig::parse(&cfg.to_toml(), &[]).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn overrides_apply_before_validation() {
        let text = Workload::Mlp.config_text();
        let cfg = PipelineConfig::parse(
            text,
            &[
                "train.epochs=3".into(),
                "post_train.zeta = 0.5".into(),
                "campaign.schemes=[\"fitact\"]".into(),
                "data.source.seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.post_train.zeta, 0.5);
        assert_eq!(cfg.campaign.schemes, vec![Scheme::Fitact]);
        assert!(matches!(cfg.data.source, DatasetSource::Blobs { seed: 9, .. }));
        assert!(PipelineConfig::parse(text, &["post_train.accuracy_budget=0".into()]).is_err());
        assert!(PipelineConfig::parse(text, &["nonsense".into()]).is_err());
        assert!(PipelineConfig::parse(text, &["train.bogus=1".into()]).is_err());
    }

    #[test]
    fn version_is_checked() {
        let text = Workload::Mlp.config_text().replace("version = 1", "version = 2");
        let err = PipelineConfig::parse(&text, &[]).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn gbrelu_protection_uses_layer_maxima() {
        let cfg = PipelineConfig::parse(
            Workload::Mlp.config_text(),
            &["train.epochs=2".into(), "data.source.samples_per_class=50".into()],
        )
        .unwrap();
        let (train, _) = cfg.data.load_split().unwrap();
        let net = train_accuracy(&cfg.build_network().unwrap(), &train, &cfg.train)
            .unwrap()
            .network;
        let g = protect_gbrelu(&net, &train, GbMode::ClampToBound).unwrap();
        assert_eq!(g.weights_digest(), net.weights_digest());
        for (layer, bound) in calibrate_global_bounds(&net, &train).unwrap() {
            let words = g.layers()[layer].activation.bound_words();
            assert_eq!(words.len(), 1);
            assert!((words[0].decode() - bound).abs() <= 1.0 / 65536.0);
        }
    }
}
