//! Declarative run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! out = "runs/demo"
//!
//! [data]
//! source = "site1"
//!
//! [data.sites.phantom]
//! height = 64
//! width = 64
//!
//! [flow.train]
//! epochs = 120
//!
//! [adaptation.criterion]
//! kind = "entropy_plateau"
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::error::{Error, Result};
use crate::experiment::Method;
use crate::flow::FlowConfig;
use crate::flow_train::FlowTrainConfig;
use crate::harmonizer::{HarmonizerConfig, HarmonizerTrainConfig};
use crate::seg::{SegmenterConfig, SegmenterTrainConfig};
use crate::synth::SiteConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: String,
    /// Target site ids; empty means every site except the source.
    pub targets: Vec<String>,
    pub sites: SiteConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { source: "site1".into(), targets: Vec::new(), sites: SiteConfig::default() }
    }
}

/// Coupling layers per stage and subnet depth/width of the flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowArch {
    pub layers: usize,
    pub levels: usize,
    pub base_width: usize,
}

/// Four layers per stage with 4-level subnets of widths 32..128.
impl Default for FlowArch {
    fn default() -> Self {
        FlowArch { layers: 4, levels: 4, base_width: 32 }
    }
}

impl FlowArch {

    pub fn build(&self, height: usize, width: usize) -> FlowConfig {
        FlowConfig::compact(height, width, self.layers, self.levels, self.base_width)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub arch: FlowArch,
    pub train: FlowTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarmonizerSection {
    pub arch: HarmonizerConfig,
    pub train: HarmonizerTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterSection {
    pub arch: SegmenterConfig,
    pub train: SegmenterTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub methods: Vec<Method>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection { methods: Method::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// When false, the seed is mixed with a clock-derived nonce.
    pub deterministic: bool,
    pub data: DataSection,
    pub flow: FlowSection,
    pub harmonizer: HarmonizerSection,
    pub segmenter: SegmenterSection,
    pub adaptation: AdaptConfig,
    pub evaluation: EvaluationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            deterministic: true,
            data: DataSection::default(),
            flow: FlowSection::default(),
            harmonizer: HarmonizerSection::default(),
            segmenter: SegmenterSection::default(),
            adaptation: AdaptConfig::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(describe(text, &e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(format!("config file {}", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// Checks every section before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        self.data.sites.phantom.validate().map_err(cfg_err)?;
        self.flow.train.validate().map_err(cfg_err)?;
        self.harmonizer.train.validate().map_err(cfg_err)?;
        self.segmenter.train.validate().map_err(cfg_err)?;
        self.adaptation.validate().map_err(cfg_err)?;
        let n_sites = 1 + self.data.sites.targets.len();
        let known = |id: &str| id.strip_prefix("site").and_then(|k| k.parse::<usize>().ok()).is_some_and(|k| k >= 1 && k <= n_sites);
        for id in std::iter::once(&self.data.source).chain(&self.data.targets) {
            if !known(id) {
                return Err(Error::Config(format!("unknown site `{id}`; sites are site1..site{n_sites}")));
            }
        }
        if self.segmenter.arch.classes != self.data.sites.phantom.classes {
            return Err(Error::Config(format!(
                "segmenter.arch.classes = {} but data.sites.phantom.classes = {}",
                self.segmenter.arch.classes, self.data.sites.phantom.classes
            )));
        }
        if self.data.sites.images_per_site < 4 {
            return Err(Error::Config("data.sites.images_per_site must be at least 4".into()));
        }
        Ok(())
    }

    /// Target ids in evaluation order.
    pub fn target_ids(&self) -> Vec<String> {
        if !self.data.targets.is_empty() {
            return self.data.targets.clone();
        }
        (1..=1 + self.data.sites.targets.len()).map(|k| format!("site{k}")).filter(|id| *id != self.data.source).collect()
    }
}

/// Parser message plus the offending line, so type errors name their key.
fn describe(text: &str, e: &toml::de::Error) -> String {
    let Some(span) = e.span() else {
        return e.message().to_string();
    };
    let line_no = text[..span.start.min(text.len())].matches('\n').count();
    let line = text.lines().nth(line_no).unwrap_or("").trim();
    format!("line {}: `{line}`: {}", line_no + 1, e.message())
}
