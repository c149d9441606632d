use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curation::CurationConfig;
use crate::error::{Error, Result};
use crate::segmodel::SegTrainConfig;
use crate::synthgen::{DomainStyle, LayoutSpec, Protocol};
use crate::translate::{Backend, TranslationConfig};

/// Pipeline compositions, declared in report row order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    SourceOnly,
    HistMatch,
    Fda,
    Cyclegan,
    Hgit,
    Supervised,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::SourceOnly,
        Scenario::HistMatch,
        Scenario::Fda,
        Scenario::Cyclegan,
        Scenario::Hgit,
        Scenario::Supervised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::SourceOnly => "source-only",
            Scenario::HistMatch => "hist-match",
            Scenario::Fda => "fda",
            Scenario::Cyclegan => "cyclegan",
            Scenario::Hgit => "hgit",
            Scenario::Supervised => "supervised",
        }
    }

    /// Translation backend feeding the segmenter, if any.
    pub fn backend(self) -> Option<Backend> {
        match self {
            Scenario::HistMatch => Some(Backend::HistMatch),
            Scenario::Fda => Some(Backend::Fda),
            Scenario::Cyclegan | Scenario::Hgit => Some(Backend::Cyclegan),
            Scenario::SourceOnly | Scenario::Supervised => None,
        }
    }

    pub fn is_gan(self) -> bool {
        self.backend() == Some(Backend::Cyclegan)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

/// A style given by preset name or spelled out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StyleSpec {
    Preset(String),
    Custom(DomainStyle),
}

impl StyleSpec {
    pub fn resolve(&self) -> Result<DomainStyle> {
        match self {
            StyleSpec::Preset(name) => DomainStyle::preset(name),
            StyleSpec::Custom(style) => {
                style.validate()?;
                Ok(style.clone())
            }
        }
    }
}

fn default_source() -> StyleSpec {
    StyleSpec::Preset("source".into())
}

/// One synthetic source/target pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(default = "default_source")]
    pub source_style: StyleSpec,
    pub target_style: StyleSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    /// Seed of the layouts and rendering noise; fixed across run seeds so
    /// every seed of a cell sees the same data.
    #[serde(default)]
    pub data_seed: u64,
}

impl DatasetSpec {
    pub fn preset(target: &str, protocol: Protocol) -> Self {
        Self {
            name: target.to_string(),
            source_style: default_source(),
            target_style: StyleSpec::Preset(target.to_string()),
            n_train: protocol.n_train,
            n_test: protocol.n_test,
            image_size: protocol.image_size,
            data_seed: 0,
        }
    }

    pub fn layout(&self) -> LayoutSpec {
        LayoutSpec::for_size(self.image_size, self.data_seed)
    }

    fn validate(&self) -> Result<()> {
        let ok_char = |c: char| c.is_ascii_alphanumeric() || c == '-' || c == '_';
        if self.name.is_empty() || !self.name.chars().all(ok_char) {
            return Err(Error::Config(format!(
                "dataset name {:?} must be non-empty and use only [A-Za-z0-9_-]",
                self.name
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config(format!(
                "dataset {}: n_train and n_test must be positive",
                self.name
            )));
        }
        self.source_style.resolve()?;
        self.target_style.resolve()?;
        self.layout().validate()
    }
}

/// Degenerate images appended to the translator output before gating.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoisonConfig {
    pub constant: usize,
    pub brightened: usize,
    /// Added to foreground pixels of the brightened copies, then clipped.
    pub brighten_by: f32,
    pub seed: u64,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        Self {
            constant: 3,
            brightened: 3,
            brighten_by: 0.6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "all_scenarios")]
    pub scenarios: Vec<Scenario>,
    pub datasets: Vec<DatasetSpec>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub translation: TranslationConfig,
    #[serde(default)]
    pub curation: CurationConfig,
    #[serde(default)]
    pub segmentation: SegTrainConfig,
    #[serde(default)]
    pub poison: Option<PoisonConfig>,
    pub out_dir: PathBuf,
}

fn all_scenarios() -> Vec<Scenario> {
    Scenario::ALL.to_vec()
}

const TARGETS: [&str; 3] = ["shifted-bright", "shifted-dark-lowcontrast", "textured"];

impl ExperimentConfig {
    /// 64x64 tiles, 200/50 images per domain, three seeds.
    pub fn desk(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            scenarios: all_scenarios(),
            datasets: TARGETS
                .iter()
                .map(|t| DatasetSpec::preset(t, Protocol::DESK))
                .collect(),
            seeds: vec![0, 1, 2],
            translation: TranslationConfig::default(),
            curation: CurationConfig::default(),
            segmentation: SegTrainConfig::default(),
            poison: None,
            out_dir: out_dir.into(),
        }
    }

    /// 128x128 tiles, 1200/300 images per domain, five seeds.
    pub fn full(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            datasets: TARGETS
                .iter()
                .map(|t| DatasetSpec::preset(t, Protocol::FULL))
                .collect(),
            seeds: vec![0, 1, 2, 3, 4],
            ..Self::desk(out_dir)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::Config("no scenarios".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.scenarios.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::Config(format!("scenario {dup} listed twice")));
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets".into()));
        }
        let mut names = HashSet::new();
        for d in &self.datasets {
            d.validate()?;
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("dataset {} listed twice", d.name)));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        let mut seeds = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seeds.insert(**s)) {
            return Err(Error::Config(format!("seed {dup} listed twice")));
        }
        for backend in self.scenarios.iter().filter_map(|s| s.backend()) {
            TranslationConfig {
                backend,
                ..self.translation.clone()
            }
            .validate()?;
        }
        if self.scenarios.contains(&Scenario::Hgit) {
            self.curation.validate()?;
        }
        self.segmentation.validate()
    }
}
