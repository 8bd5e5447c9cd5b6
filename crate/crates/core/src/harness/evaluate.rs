//! Test-set evaluation producing per-style metric tables.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stylecond_autograd::sigmoid;

use super::config::EvaluationSection;
use super::train::{load_trained, RunRecord};
use crate::error::{Error, Result};
use crate::metrics::{
    area_bias, auroc_pixelwise, error_entropy_strata, ged, iou, mean_std, sample_full_distribution,
    uniform_style_probabilities, AreaBias, ErrorStrata, PixelOutcome,
};
use crate::model::SegmentationModel;
use crate::types::{AnnotatedSample, LabelStyle, SegmentationMask};

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const STRATA_JSON: &str = "strata.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

/// Entropy medians per outcome; `None` marks an empty stratum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrataSummary {
    pub counts: [usize; 4],
    pub medians: [Option<f64>; 4],
    pub error_median: Option<f64>,
    pub correct_median: Option<f64>,
}

impl StrataSummary {
    pub fn of(strata: &ErrorStrata) -> Self {
        Self {
            counts: PixelOutcome::ALL.map(|o| strata.stratum(o).len()),
            medians: PixelOutcome::ALL.map(|o| strata.median(o)),
            error_median: strata.error_median(),
            correct_median: strata.correct_median(),
        }
    }
}

/// One style's column: every cell uses predictions conditioned on that style
/// and annotations of that style only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleMetrics {
    pub style: usize,
    pub images: usize,
    pub pairs: usize,
    /// IoU of the mean prediction, over image-annotation pairs.
    pub iou: MeanStd,
    pub auroc: f64,
    /// GED per image between samples and that image's annotations of this style.
    pub ged: MeanStd,
    pub strata: StrataSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTables {
    pub run_id: String,
    pub model: String,
    pub samples_per_image: usize,
    pub per_style: Vec<StyleMetrics>,
    /// GED against all annotations, predictions drawn from the style mixture.
    pub ged_pooled: MeanStd,
    pub style_probs: Vec<f64>,
    pub reference_style: usize,
    /// Sample area minus reference annotation area, in pixels.
    pub area_bias: AreaBias,
    pub strata_pooled: StrataSummary,
    pub test_ids: Vec<String>,
}

impl MetricTables {
    pub fn style(&self, style: usize) -> Option<&StyleMetrics> {
        self.per_style.iter().find(|m| m.style == style)
    }

    /// Long-format rows `(model, style, metric, value)`; pooled rows use style `all`.
    pub fn rows(&self) -> Vec<(String, String, String, f64)> {
        let mut rows = Vec::new();
        let mut push = |style: String, metric: &str, value: f64| {
            rows.push((self.run_id.clone(), style, metric.to_string(), value));
        };
        for m in &self.per_style {
            let s = m.style.to_string();
            push(s.clone(), "iou_mean", m.iou.mean);
            push(s.clone(), "iou_std", m.iou.std);
            push(s.clone(), "auroc", m.auroc);
            push(s.clone(), "ged_mean", m.ged.mean);
            push(s.clone(), "ged_std", m.ged.std);
            if let (Some(e), Some(c)) = (m.strata.error_median, m.strata.correct_median) {
                push(s.clone(), "entropy_error_median", e);
                push(s, "entropy_correct_median", c);
            }
        }
        push("all".into(), "ged_mean", self.ged_pooled.mean);
        push("all".into(), "ged_std", self.ged_pooled.std);
        let r = self.reference_style.to_string();
        push(r.clone(), "area_bias_mean", self.area_bias.mean);
        push(r, "area_bias_std", self.area_bias.std);
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,style,metric,value\n");
        for (model, style, metric, value) in self.rows() {
            out.push_str(&format!("{model},{style},{metric},{value}\n"));
        }
        out
    }
}

/// Metric tables plus the raw entropy strata behind them.
#[derive(Clone, Debug)]
pub struct EvaluationReport {
    pub tables: MetricTables,
    /// Per-style strata, indexed by style.
    pub strata: Vec<ErrorStrata>,
}

impl EvaluationReport {
    pub fn pooled_strata(&self) -> ErrorStrata {
        let mut all = ErrorStrata::default();
        self.strata.iter().for_each(|s| all.merge(s));
        all
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        fs::create_dir_all(run_dir)?;
        fs::write(run_dir.join(METRICS_JSON), serde_json::to_string_pretty(&self.tables)?)?;
        fs::write(run_dir.join(METRICS_CSV), self.tables.to_csv())?;
        fs::write(run_dir.join(STRATA_JSON), serde_json::to_string(&self.strata)?)?;
        Ok(())
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let tables = serde_json::from_str(&fs::read_to_string(run_dir.join(METRICS_JSON))?)?;
        let strata = serde_json::from_str(&fs::read_to_string(run_dir.join(STRATA_JSON))?)?;
        Ok(Self { tables, strata })
    }
}

struct Draws {
    masks: Vec<SegmentationMask>,
    probs: Vec<f64>,
}

fn draw(model: &dyn SegmentationModel, sample: &AnnotatedSample, style: LabelStyle, n: usize, seed: u64) -> Result<Draws> {
    let (h, w) = sample.image().dims();
    let logits = model.sample_logits(sample.image(), style, n, seed)?;
    let mut probs = vec![0.0; h * w];
    for l in &logits {
        for (p, &z) in probs.iter_mut().zip(l) {
            *p += sigmoid(z);
        }
    }
    probs.iter_mut().for_each(|p| *p /= n as f64);
    let masks = logits.iter().map(|l| SegmentationMask::from_logits(h, w, l)).collect();
    Ok(Draws { masks, probs })
}

fn image_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9))
}

/// Evaluates `model` on `test`. Conditioned models are conditioned on the
/// style being scored; every style in `0..num_styles` must be annotated
/// somewhere in the test set.
pub fn evaluate(
    model: &dyn SegmentationModel,
    test: &[AnnotatedSample],
    settings: &EvaluationSection,
    run_id: &str,
) -> Result<EvaluationReport> {
    let k = model.num_styles();
    let n = settings.samples_per_image;
    if test.is_empty() {
        return Err(Error::EmptySet("test split is empty".into()));
    }
    if settings.reference_style >= k {
        return Err(Error::InvalidStyle {
            id: settings.reference_style,
            num_styles: k,
        });
    }
    let probs = settings.style_probs.clone().unwrap_or_else(|| uniform_style_probabilities(k));
    if probs.len() != k {
        return Err(Error::InvalidArgument(format!("{} style probabilities for {k} styles", probs.len())));
    }

    if let Some(s) = (0..k).find(|&s| test.iter().all(|x| x.masks_of_style(s).next().is_none())) {
        return Err(Error::MissingStyle(s));
    }

    let mut ious = vec![Vec::new(); k];
    let mut geds = vec![Vec::new(); k];
    let mut prob_fields = vec![Vec::new(); k];
    let mut truths = vec![Vec::new(); k];
    let mut images = vec![0usize; k];
    let mut strata = vec![ErrorStrata::default(); k];
    let mut pooled_geds = Vec::with_capacity(test.len());
    let mut biases = Vec::new();

    for (idx, sample) in test.iter().enumerate() {
        let seed = image_seed(settings.seed, idx);
        let mut shared: Option<Draws> = None;
        for s in 0..k {
            let anns: Vec<SegmentationMask> = sample.masks_of_style(s).cloned().collect();
            let reference = s == settings.reference_style;
            if anns.is_empty() {
                continue;
            }
            let style = LabelStyle::new(s, k)?;
            let own;
            let draws = if model.is_conditioned() {
                own = draw(model, sample, style, n, seed)?;
                &own
            } else {
                if shared.is_none() {
                    shared = Some(draw(model, sample, style, n, seed)?);
                }
                shared.as_ref().expect("just set")
            };
            let mean = model.mean_prediction(sample.image(), style)?;
            for a in &anns {
                ious[s].push(iou(&mean, a)?);
                strata[s].merge(&error_entropy_strata(&draws.probs, a)?);
                prob_fields[s].push(draws.probs.clone());
                truths[s].push(a.clone());
            }
            geds[s].push(ged(&draws.masks, &anns)?);
            images[s] += 1;
            if reference {
                biases.push(area_bias(&draws.masks, &anns)?);
            }
        }
        let all: Vec<SegmentationMask> = sample.masks().cloned().collect();
        let mixture = sample_full_distribution(model, sample.image(), n, &probs, seed)?;
        pooled_geds.push(ged(&mixture.masks, &all)?);
    }

    let mut per_style = Vec::with_capacity(k);
    for s in 0..k {
        per_style.push(StyleMetrics {
            style: s,
            images: images[s],
            pairs: ious[s].len(),
            iou: MeanStd::of(&ious[s]),
            auroc: auroc_pixelwise(&prob_fields[s], &truths[s])?,
            ged: MeanStd::of(&geds[s]),
            strata: StrataSummary::of(&strata[s]),
        });
    }
    let mut pooled = ErrorStrata::default();
    strata.iter().for_each(|s| pooled.merge(s));
    let tables = MetricTables {
        run_id: run_id.to_string(),
        model: model.name(),
        samples_per_image: n,
        per_style,
        ged_pooled: MeanStd::of(&pooled_geds),
        style_probs: probs,
        reference_style: settings.reference_style,
        area_bias: AreaBias::pooled(&biases),
        strata_pooled: StrataSummary::of(&pooled),
        test_ids: test.iter().map(|s| s.sample_id().to_string()).collect(),
    };
    Ok(EvaluationReport { tables, strata })
}

/// Loads a run's best checkpoint, evaluates it on `test` and writes the
/// metric files into `run_dir`.
pub fn evaluate_run(record: &RunRecord, test: &[AnnotatedSample], run_dir: &Path) -> Result<EvaluationReport> {
    let ids: Vec<String> = test.iter().map(|s| s.sample_id().to_string()).collect();
    if ids != record.test_ids {
        return Err(Error::MismatchedSplits(format!(
            "run {} was trained against a different test split",
            record.config.run_id
        )));
    }
    let model = load_trained(record)?;
    let report = evaluate(model.as_ref(), test, &record.config.evaluation, &record.config.run_id)?;
    report.write(run_dir)?;
    Ok(report)
}
