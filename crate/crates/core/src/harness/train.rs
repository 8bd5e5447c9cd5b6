//! Training loop with best-validation checkpointing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stylecond_autograd::{Adam, Tape};

use super::config::{AugmentationSpec, ExperimentConfig, TrainingMode};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::curation::dilate_blur_augment;
use crate::error::{Error, Result};
use crate::model::{Batch, TrainableModel};
use crate::types::{AnnotatedSample, DatasetSplit, LabelStyle, SegmentationMask};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Everything needed to trace a trained model back to its inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub num_styles: usize,
    pub image_channels: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Zero-based epoch of the selected checkpoint; `None` for an untrained model.
    pub best_epoch: Option<usize>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    /// Annotation pairs fed to the model, counted per style over all epochs.
    pub style_audit: Vec<usize>,
    pub train_pairs_per_epoch: usize,
    pub test_ids: Vec<String>,
    pub training_seed: u64,
    pub split_seed: u64,
    pub elapsed_seconds: f64,
    /// The CPU backend is single-threaded and seeded, so reruns are bit-identical.
    pub deterministic: bool,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub struct TrainedRun {
    pub record: RunRecord,
    /// The model with the best-validation weights loaded.
    pub model: Box<dyn TrainableModel>,
}

/// `(sample, annotation)` indices admitted by `mode`.
pub fn training_pairs(samples: &[AnnotatedSample], mode: TrainingMode) -> Vec<(usize, usize)> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.annotations()
                .iter()
                .enumerate()
                .filter(move |(_, a)| mode.admits(a.style.id()))
                .map(move |(k, _)| (i, k))
        })
        .collect()
}

/// One epoch's annotation list with coarse annotations replaced by augmented
/// fine ones. Pairs on images without a fine annotation are dropped.
fn augmented_pairs(
    samples: &[AnnotatedSample],
    pairs: &[(usize, usize)],
    aug: &AugmentationSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, SegmentationMask, LabelStyle)> {
    let mut out = Vec::with_capacity(pairs.len());
    for &(i, k) in pairs {
        let ann = &samples[i].annotations()[k];
        if ann.style.id() == aug.fine_style {
            out.push((i, ann.mask.clone(), ann.style));
            continue;
        }
        let fine: Vec<&SegmentationMask> = samples[i].masks_of_style(aug.fine_style).collect();
        if let Some(src) = fine.choose(rng) {
            let radius = rng.gen_range(aug.radius_min..=aug.radius_max);
            out.push((i, dilate_blur_augment(src, radius, aug.sigma), ann.style));
        }
    }
    out
}

fn make_batch(samples: &[AnnotatedSample], items: &[(usize, SegmentationMask, LabelStyle)]) -> Result<Batch> {
    let triples: Vec<_> = items.iter().map(|(i, m, s)| (samples[*i].image(), m, *s)).collect();
    Batch::new(&triples)
}

fn materialise(samples: &[AnnotatedSample], pairs: &[(usize, usize)]) -> Vec<(usize, SegmentationMask, LabelStyle)> {
    pairs
        .iter()
        .map(|&(i, k)| {
            let a = &samples[i].annotations()[k];
            (i, a.mask.clone(), a.style)
        })
        .collect()
}

/// Mean loss over `pairs` in evaluation mode with fixed noise.
pub fn evaluation_loss(
    model: &dyn TrainableModel,
    samples: &[AnnotatedSample],
    pairs: &[(usize, usize)],
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = materialise(samples, pairs);
    let mut total = 0.0;
    for chunk in items.chunks(batch_size) {
        let batch = make_batch(samples, chunk)?;
        let mut tape = Tape::new();
        let p = model.params().bind_frozen(&mut tape);
        let out = model.loss(&mut tape, &p, &batch, &mut rng, false)?;
        total += tape.value(out.total).item() * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

fn style_count(split: &DatasetSplit) -> Result<(usize, usize)> {
    let first = split
        .train
        .first()
        .ok_or_else(|| Error::EmptySet("training split is empty".into()))?;
    Ok((first.num_styles(), first.image().channels()))
}

/// Trains the configured model on `split.train`, selecting the epoch with the
/// lowest validation loss. Writes `config.json`, `run_record.json` and
/// `checkpoints/` under `run_dir`.
pub fn train(config: &ExperimentConfig, split: &DatasetSplit, run_dir: &Path) -> Result<TrainedRun> {
    config.validate()?;
    let started = Instant::now();
    let (num_styles, channels) = style_count(split)?;
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(run_dir.join("config.json"), config.to_json())?;

    let mode = config.training.mode;
    let pairs = training_pairs(&split.train, mode);
    if let TrainingMode::Subset { style } = mode {
        if pairs.is_empty() {
            return Err(Error::MissingStyle(style));
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptySet("no training pairs".into()));
    }
    let val_pairs = training_pairs(&split.val, mode);

    let mut model = config.build_model(channels, num_styles)?;
    let mut opt = Adam::new(config.training.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
    let val_seed = config.training.seed ^ 0x5eed_0f_5a1;
    let best_path = ckpt_dir.join(BEST_CHECKPOINT);
    let last_path = ckpt_dir.join(LAST_CHECKPOINT);
    let mut audit = vec![0usize; num_styles];
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut pairs_per_epoch = pairs.len();

    save_checkpoint(&best_path, model.as_ref())?;
    for epoch in 0..config.training.epochs {
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        let items = match &config.training.augmentation {
            Some(aug) => augmented_pairs(&split.train, &order, aug, &mut rng),
            None => materialise(&split.train, &order),
        };
        pairs_per_epoch = items.len();
        let mut epoch_loss = 0.0;
        let mut parts: Vec<(&'static str, f64)> = Vec::new();
        for (step, chunk) in items.chunks(config.training.batch_size).enumerate() {
            for (_, _, s) in chunk {
                audit[s.id()] += 1;
            }
            let batch = make_batch(&split.train, chunk)?;
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape);
            let out = model.loss(&mut tape, &p, &batch, &mut rng, true)?;
            let value = tape.value(out.total).item();
            if !value.is_finite() {
                let snapshot = ckpt_dir.join(format!("nonfinite_e{epoch}_s{step}.ckpt"));
                let saved = save_checkpoint(&snapshot, model.as_ref()).ok().map(|_| snapshot);
                log::error!("non-finite loss at epoch {epoch} step {step}: {:?}", out.components);
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    snapshot: saved,
                });
            }
            epoch_loss += value * chunk.len() as f64;
            for &(name, v) in &out.components {
                match parts.iter_mut().find(|(n, _)| *n == name) {
                    Some(slot) => slot.1 += v * chunk.len() as f64,
                    None => parts.push((name, v * chunk.len() as f64)),
                }
            }
            let mut grads = tape.backward(out.total);
            let grads = p.gradients(&mut grads);
            drop(tape);
            opt.step(model.params_mut(), &grads);
        }
        let train_loss = epoch_loss / items.len().max(1) as f64;
        let val_loss = if val_pairs.is_empty() {
            train_loss
        } else {
            evaluation_loss(model.as_ref(), &split.val, &val_pairs, config.training.batch_size, val_seed)?
        };
        let parts: Vec<String> = parts
            .iter()
            .map(|(n, v)| format!("{n} {:.3}", v / items.len().max(1) as f64))
            .collect();
        log::info!(
            "{} epoch {epoch}: train {train_loss:.3} [{}], val {val_loss:.3} ({:.0}s)",
            config.run_id,
            parts.join(", "),
            started.elapsed().as_secs_f64()
        );
        train_curve.push(train_loss);
        val_curve.push(val_loss);
        if best.map_or(true, |(_, b)| val_loss < b) {
            best = Some((epoch, val_loss));
            save_checkpoint(&best_path, model.as_ref())?;
        }
    }
    save_checkpoint(&last_path, model.as_ref())?;
    if let TrainingMode::Subset { style } = mode {
        let foreign: usize = audit.iter().enumerate().filter(|(s, _)| *s != style).map(|(_, c)| c).sum();
        if foreign > 0 {
            return Err(Error::InvalidArgument(format!("subset run saw {foreign} foreign-style pairs")));
        }
    }
    load_checkpoint(&best_path, model.as_mut())?;
    let record = RunRecord {
        config: config.clone(),
        num_styles,
        image_channels: channels,
        train_loss: train_curve,
        val_loss: val_curve,
        best_epoch: best.map(|b| b.0),
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        style_audit: audit,
        train_pairs_per_epoch: pairs_per_epoch,
        test_ids: split.test_ids(),
        training_seed: config.training.seed,
        split_seed: split.seed,
        elapsed_seconds: started.elapsed().as_secs_f64(),
        deterministic: true,
    };
    record.save(&run_dir.join("run_record.json"))?;
    Ok(TrainedRun { record, model })
}

/// Rebuilds a run's model and loads its best checkpoint.
pub fn load_trained(record: &RunRecord) -> Result<Box<dyn TrainableModel>> {
    let mut model = record.config.build_model(record.image_channels, record.num_styles)?;
    load_checkpoint(&record.best_checkpoint, model.as_mut())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::{generate_synthetic, SyntheticStyleSpec};
    use crate::types::split_dataset;

    fn tiny_split() -> DatasetSplit {
        let specs = [
            SyntheticStyleSpec::ground_truth(),
            SyntheticStyleSpec {
                style_id: 1,
                boundary_offset_mean: 3.0,
                boundary_offset_std: 0.5,
                smoothing_sigma: 0.0,
            },
        ];
        let ds = generate_synthetic(10, 48, &specs, 1, 0).unwrap();
        split_dataset(ds.samples, [0.6, 0.2, 0.2], 0).unwrap()
    }

    fn tiny_config(mode: TrainingMode, epochs: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::synthetic_desk();
        cfg.model.base_channels = 2;
        cfg.model.depth = 2;
        cfg.model.rank = 2;
        cfg.model.mc_samples = 2;
        cfg.training.mode = mode;
        cfg.training.epochs = epochs;
        cfg.training.batch_size = 4;
        cfg
    }

    #[test]
    fn zero_epochs_leaves_untrained_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let run = train(&tiny_config(TrainingMode::Conditioned, 0), &tiny_split(), dir.path()).unwrap();
        assert!(run.record.train_loss.is_empty());
        assert_eq!(run.record.best_epoch, None);
        assert!(run.record.best_checkpoint.exists());
        assert!(dir.path().join("config.json").exists());
    }

    #[test]
    fn subset_mode_only_sees_its_style() {
        let dir = tempfile::tempdir().unwrap();
        let split = tiny_split();
        let run = train(&tiny_config(TrainingMode::Subset { style: 1 }, 1), &split, dir.path()).unwrap();
        assert_eq!(run.record.style_audit[0], 0);
        assert_eq!(run.record.style_audit[1], split.train.len());
        assert_eq!(run.record.train_pairs_per_epoch, split.train.len());
    }

    #[test]
    fn identical_configs_give_identical_weights() {
        let split = tiny_split();
        let cfg = tiny_config(TrainingMode::All, 1);
        let a = train(&cfg, &split, tempfile::tempdir().unwrap().path()).unwrap();
        let b = train(&cfg, &split, tempfile::tempdir().unwrap().path()).unwrap();
        assert_eq!(a.record.train_loss, b.record.train_loss);
        for ((_, x), (_, y)) in a.model.params().iter().zip(b.model.params().iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn augmentation_replaces_coarse_masks() {
        let split = tiny_split();
        let pairs = training_pairs(&split.train, TrainingMode::Conditioned);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let aug = AugmentationSpec {
            fine_style: 0,
            radius_min: 2,
            radius_max: 2,
            sigma: 0.0,
        };
        let items = augmented_pairs(&split.train, &pairs, &aug, &mut rng);
        assert_eq!(items.len(), pairs.len());
        for (i, mask, style) in &items {
            if style.id() == 1 {
                let fine = split.train[*i].masks_of_style(0).next().unwrap();
                assert_eq!(mask, &dilate_blur_augment(fine, 2, 0.0));
            }
        }
    }
}
