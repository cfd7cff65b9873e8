//! Run configuration: a preset, an optional TOML file merged over it, then
//! command-line overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use selfcal_core::backbone::BackboneKind;
use selfcal_core::calibration::{LambdaPolicy, TrainConfig};
use selfcal_core::classifier::ClassifierConfig;
use selfcal_core::datasets::BackgroundMode;
use selfcal_core::metrics::FProtocol;
use selfcal_core::refinement::LabelConfig;

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Tiny,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Tiny => "tiny",
        })
    }
}

impl FromStr for Preset {
    type Err = UsageError;
    fn from_str(s: &str) -> Result<Self, UsageError> {
        match s {
            "paper" => Ok(Preset::Paper),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(UsageError(format!("unknown preset {s:?} (expected paper or tiny)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub classifier_dir: PathBuf,
    pub store_dir: PathBuf,
    pub saliency_dir: PathBuf,
    pub predictions_dir: PathBuf,
    pub export_dir: PathBuf,
    pub report_dir: PathBuf,
    /// A second stage-2 run directory to compare against in `report`.
    #[serde(default)]
    pub baseline_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train_manifest: "data/train.csv".into(),
            test_manifest: "data/test.csv".into(),
            classifier_dir: "runs/classifier".into(),
            store_dir: "runs/store".into(),
            saliency_dir: "runs/saliency".into(),
            predictions_dir: "runs/predictions".into(),
            export_dir: "runs/export".into(),
            report_dir: "runs/report".into(),
            baseline_dir: None,
        }
    }
}

/// Settings for `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSettings {
    pub train_images: usize,
    pub test_images: usize,
    pub image_size: usize,
    pub num_categories: usize,
    pub background: BackgroundMode,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            train_images: 200,
            test_images: 50,
            image_size: 64,
            num_categories: 4,
            background: BackgroundMode::Textured,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub paths: Paths,
    pub classifier: ClassifierConfig,
    pub labels: LabelConfig,
    /// Apply the CRF plugin during label generation and export.
    pub crf: bool,
    pub saliency: TrainConfig,
    pub protocol: FProtocol,
    pub synth: SynthSettings,
    /// Seeds used by `ablation`.
    pub ablation_seeds: Vec<u64>,
}

/// Command-line overrides applied after the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub lambda: Option<LambdaPolicy>,
    pub no_crf: bool,
    pub size: Option<usize>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self {
                preset,
                seed: 0,
                paths: Paths::default(),
                classifier: ClassifierConfig::paper(),
                labels: LabelConfig::default(),
                crf: true,
                saliency: TrainConfig::paper(),
                protocol: FProtocol::MaxOverThresholds,
                synth: SynthSettings::default(),
                ablation_seeds: vec![0, 1, 2],
            },
            Preset::Tiny => Self {
                preset,
                seed: 0,
                paths: Paths::default(),
                classifier: ClassifierConfig::tiny(),
                labels: LabelConfig {
                    input_size: 64,
                    ..LabelConfig::default()
                },
                crf: true,
                saliency: TrainConfig::tiny(),
                protocol: FProtocol::MaxOverThresholds,
                synth: SynthSettings::default(),
                ablation_seeds: vec![0, 1, 2],
            },
        }
    }

    /// Resolves preset → file → overrides, then validates.
    pub fn resolve(file: Option<&Path>, ov: &Overrides) -> anyhow::Result<Self> {
        let table = match file {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                let v: toml::Table =
                    toml::from_str(&text).map_err(|e| UsageError(format!("bad config {}: {e}", p.display())))?;
                Some(v)
            }
            None => None,
        };
        let file_preset = match table.as_ref().and_then(|t| t.get("preset")) {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| UsageError("preset must be a string".into()))?
                    .parse::<Preset>()?,
            ),
            None => None,
        };
        let preset = ov.preset.or(file_preset).unwrap_or(Preset::Tiny);
        let mut cfg = Self::preset(preset);
        if let Some(mut t) = table {
            t.remove("preset");
            let mut base = toml::Table::try_from(&cfg).context("serializing preset")?;
            merge(&mut base, t);
            cfg = base
                .try_into()
                .map_err(|e: toml::de::Error| UsageError(format!("bad config: {e}")))?;
            cfg.preset = preset;
        }
        if let Some(seed) = ov.seed {
            cfg.seed = seed;
        }
        cfg.classifier.seed = cfg.seed;
        cfg.saliency.seed = cfg.seed;
        if let Some(l) = ov.lambda {
            cfg.saliency.lambda = l;
        }
        if ov.no_crf {
            cfg.crf = false;
        }
        if let Some(size) = ov.size {
            cfg.classifier.input_size = size;
            cfg.labels.input_size = size;
            cfg.saliency.input_size = size;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.classifier.validate().map_err(usage)?;
        self.saliency.validate().map_err(usage)?;
        self.labels.affinity.validate().map_err(usage)?;
        self.saliency.lambda.validate().map_err(usage)?;
        if self.labels.input_size != self.saliency.input_size {
            bail!(UsageError(format!(
                "labels.input_size ({}) must equal saliency.input_size ({})",
                self.labels.input_size, self.saliency.input_size
            )));
        }
        if self.preset == Preset::Paper {
            let (c, s) = (ClassifierConfig::paper(), TrainConfig::paper());
            let locked = self.classifier.backbone == BackboneKind::Densenet169
                && self.classifier.lr == c.lr
                && self.classifier.max_epochs == c.max_epochs
                && self.classifier.batch_size == c.batch_size
                && self.classifier.input_size == c.input_size
                && self.saliency.lr == s.lr
                && self.saliency.max_epochs == s.max_epochs
                && self.saliency.batch_size == s.batch_size
                && self.saliency.input_size == s.input_size
                && self.saliency.decoder == s.decoder
                && self.labels.input_size == s.input_size;
            if !locked {
                bail!(UsageError(
                    "the paper preset fixes backbone, learning rates, epochs, batch size and input size; use --preset tiny to change them".into()
                ));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Writes the resolved config as `config.toml` into `dir`.
    pub fn write_to(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let p = dir.join("config.toml");
        fs::write(&p, self.to_toml()).with_context(|| format!("writing {}", p.display()))
    }
}

fn usage(e: selfcal_core::Error) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

/// Recursively overlays `over` onto `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
