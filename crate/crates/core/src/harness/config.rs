//! Experiment configuration: hierarchical JSON with presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::curation::{generate_synthetic, SyntheticStyleSpec};
use crate::dataset_io::{read_manifest, read_split};
use crate::error::{Error, Result};
use crate::model::{ModelKind, TrainableModel};
use crate::prob_unet::{ProbUNet, ProbUNetConfig};
use crate::ssn::{Ssn, SsnConfig};
use crate::types::{split_dataset, DatasetSplit, DEFAULT_SPLIT_RATIOS};

/// Environment variable naming the default data root.
pub const DATA_ENV: &str = "STYLECOND_DATA";

/// Train/val/test fractions of the synthetic preset: 300/50/50 of 400 images.
pub const DESK_SPLIT_RATIOS: [f64; 3] = [0.75, 0.125, 0.125];

/// Which annotations a model sees during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TrainingMode {
    /// Every pair, with its style fed to the model.
    Conditioned,
    /// Every pair, style ignored.
    All,
    /// Only pairs of one style, style ignored.
    Subset { style: usize },
}

impl TrainingMode {
    pub fn is_conditioned(self) -> bool {
        matches!(self, Self::Conditioned)
    }

    pub fn admits(self, style: usize) -> bool {
        match self {
            Self::Subset { style: s } => s == style,
            _ => true,
        }
    }

    pub fn label(self) -> String {
        match self {
            Self::Conditioned => "conditioned".into(),
            Self::All => "all".into(),
            Self::Subset { style } => format!("subset{style}"),
        }
    }
}

/// Replaces coarse annotations by dilated and smoothed fine ones, redrawn every epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub fine_style: usize,
    pub radius_min: usize,
    pub radius_max: usize,
    pub sigma: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            fine_style: 0,
            radius_min: crate::curation::DEFAULT_DILATION_RADIUS,
            radius_max: crate::curation::DEFAULT_DILATION_RADIUS,
            sigma: crate::curation::DEFAULT_SMOOTHING_SIGMA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub base_channels: usize,
    pub depth: usize,
    pub convs_per_block: usize,
    pub bottleneck_dropout: f64,
    pub latent_dim: usize,
    pub beta: f64,
    pub rank: usize,
    pub mc_samples: usize,
    /// c-SSN style encoder width; `None` appends the raw one-hot planes.
    pub style_embedding: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::CprobUnet,
            base_channels: 8,
            depth: 4,
            convs_per_block: 3,
            bottleneck_dropout: 0.5,
            latent_dim: 6,
            beta: 1.0,
            rank: 10,
            mc_samples: 20,
            style_embedding: Some(16),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub mode: TrainingMode,
    pub augmentation: Option<AugmentationSpec>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Conditioned,
            augmentation: None,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum DataSource {
    /// A dataset directory with a manifest; relative paths resolve against `STYLECOND_DATA`.
    Directory { path: PathBuf },
    Synthetic {
        n: usize,
        size: usize,
        styles: Vec<SyntheticStyleSpec>,
        annotators_per_style: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub source: DataSource,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                n: 400,
                size: 64,
                styles: vec![
                    SyntheticStyleSpec::ground_truth(),
                    SyntheticStyleSpec {
                        style_id: 1,
                        boundary_offset_mean: 6.0,
                        boundary_offset_std: 1.0,
                        smoothing_sigma: 1.0,
                    },
                ],
                annotators_per_style: 1,
                seed: 0,
            },
            split_ratios: DESK_SPLIT_RATIOS,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSection {
    pub samples_per_image: usize,
    /// Style probabilities for the full annotator distribution; uniform when absent.
    pub style_probs: Option<Vec<f64>>,
    pub seed: u64,
    /// Style whose annotations define the area-bias reference.
    pub reference_style: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            samples_per_image: 100,
            style_probs: None,
            seed: 0,
            reference_style: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub data: DataSection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::synthetic_desk()
    }
}

impl ExperimentConfig {
    /// 64×64 synthetic two-style data (300/50/50 images), small backbone, 30 epochs.
    pub fn synthetic_desk() -> Self {
        Self {
            run_id: "synthetic".into(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            data: DataSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }

    /// Three-style RGB lesion data at 256×256: 600 epochs, batch 16.
    pub fn isic_like(path: impl Into<PathBuf>) -> Self {
        Self {
            run_id: "isic".into(),
            model: ModelSection {
                base_channels: 32,
                ..ModelSection::default()
            },
            training: TrainingSection {
                learning_rate: 1e-4,
                epochs: 600,
                batch_size: 16,
                ..TrainingSection::default()
            },
            data: DataSection {
                source: DataSource::Directory { path: path.into() },
                split_ratios: DEFAULT_SPLIT_RATIOS,
                ..DataSection::default()
            },
            evaluation: EvaluationSection::default(),
        }
    }

    /// Two-style single-cell crops at 128×128: 200 epochs, batch 32.
    pub fn phc_like(path: impl Into<PathBuf>) -> Self {
        Self {
            run_id: "phc".into(),
            training: TrainingSection {
                epochs: 200,
                batch_size: 32,
                ..Self::isic_like("").training
            },
            ..Self::isic_like(path)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "synthetic" | "desk" => Ok(Self::synthetic_desk()),
            "isic" => Ok(Self::isic_like("isic")),
            "phc" => Ok(Self::phc_like("phc")),
            other => Err(Error::InvalidArgument(format!("unknown preset {other}"))),
        }
    }

    /// Reads a JSON file; missing fields take their desk-preset values.
    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if t.batch_size == 0 || !(t.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
        }
        if self.evaluation.samples_per_image == 0 {
            return Err(Error::InvalidArgument("need at least one evaluation sample".into()));
        }
        if let Some(aug) = &t.augmentation {
            if aug.radius_min > aug.radius_max || !(aug.sigma >= 0.0) {
                return Err(Error::InvalidArgument(format!("invalid augmentation {aug:?}")));
            }
        }
        Ok(())
    }

    /// Builds the configured model for data with `image_channels` and `num_styles`.
    pub fn build_model(&self, image_channels: usize, num_styles: usize) -> Result<Box<dyn TrainableModel>> {
        let m = &self.model;
        let backbone = BackboneConfig {
            in_channels: image_channels,
            base_channels: m.base_channels,
            depth: m.depth,
            convs_per_block: m.convs_per_block,
            kernel_size: 3,
            bottleneck_dropout: m.bottleneck_dropout,
        };
        let conditioned = self.training.mode.is_conditioned();
        let seed = self.training.seed;
        Ok(match m.kind {
            ModelKind::CprobUnet => {
                let cfg = ProbUNetConfig {
                    backbone,
                    num_styles,
                    conditioned,
                    latent_dim: m.latent_dim,
                    beta: m.beta,
                };
                Box::new(ProbUNet::new(cfg, seed)?)
            }
            ModelKind::Cssn => {
                let cfg = SsnConfig {
                    backbone,
                    num_styles,
                    conditioned,
                    rank: m.rank,
                    mc_samples: m.mc_samples,
                    style_embedding: m.style_embedding,
                    diag_floor: 1e-5,
                };
                Box::new(Ssn::new(cfg, seed)?)
            }
        })
    }

    /// Loads or generates the dataset and splits it.
    pub fn load_split(&self) -> Result<DatasetSplit> {
        match &self.data.source {
            DataSource::Synthetic {
                n,
                size,
                styles,
                annotators_per_style,
                seed,
            } => {
                let ds = generate_synthetic(*n, *size, styles, *annotators_per_style, *seed)?;
                split_dataset(ds.samples, self.data.split_ratios, self.data.split_seed)
            }
            DataSource::Directory { path } => {
                let root = resolve_data_path(path);
                let manifest = read_manifest(&root)?;
                if manifest.samples.iter().all(|s| s.split.is_some()) {
                    read_split(&root)
                } else {
                    let (_, samples) = crate::dataset_io::read_dataset(&root)?;
                    split_dataset(samples, self.data.split_ratios, self.data.split_seed)
                }
            }
        }
    }
}

/// Resolves relative dataset paths against `STYLECOND_DATA` when it is set.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_published_schedules() {
        let isic = ExperimentConfig::isic_like("x");
        assert_eq!((isic.training.epochs, isic.training.batch_size), (600, 16));
        assert_eq!(isic.training.learning_rate, 1e-4);
        let phc = ExperimentConfig::phc_like("x");
        assert_eq!((phc.training.epochs, phc.training.batch_size), (200, 32));
        let desk = ExperimentConfig::synthetic_desk();
        assert!(desk.training.epochs <= 30);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"training": {"epochs": 3, "mode": {"mode": "subset", "style": 1}}}"#).unwrap();
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.training.mode, TrainingMode::Subset { style: 1 });
        assert_eq!(cfg.model, ModelSection::default());
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
