mod common;

use stylecond::curation::{generate_synthetic, SyntheticStyleSpec};
use stylecond::harness::config::EvaluationSection;
use stylecond::harness::plots::{area_bias_values, entropy_strata_values, write_plot};
use stylecond::harness::train::training_pairs;
use stylecond::harness::{
    compare_runs, emit_plots, evaluate, evaluate_run, replot, train, EvaluationReport, ExperimentConfig, RunRecord,
    TrainingMode,
};
use stylecond::{split_dataset, AnnotatedSample, Annotation, Error, Image, LabelStyle, SegmentationMask};

use common::OracleModel;

fn two_style_data(n: usize, seed: u64) -> Vec<AnnotatedSample> {
    let specs = [
        SyntheticStyleSpec::ground_truth(),
        SyntheticStyleSpec {
            style_id: 1,
            boundary_offset_mean: 4.0,
            boundary_offset_std: 1.0,
            smoothing_sigma: 0.0,
        },
    ];
    generate_synthetic(n, 48, &specs, 1, seed).unwrap().samples
}

fn settings(n: usize) -> EvaluationSection {
    EvaluationSection {
        samples_per_image: n,
        ..EvaluationSection::default()
    }
}

#[test]
fn oracle_model_scores_perfectly_on_every_style() {
    let test = two_style_data(6, 3);
    let oracle = OracleModel {
        samples: test.clone(),
        num_styles: 2,
    };
    let report = evaluate(&oracle, &test, &settings(5), "oracle").unwrap();
    for m in &report.tables.per_style {
        assert_eq!(m.iou.mean, 1.0);
        assert_eq!(m.auroc, 1.0);
        assert!(m.ged.mean.abs() < 1e-12);
        assert_eq!(m.strata.counts[1] + m.strata.counts[3], 0, "no FP or FN pixels");
    }
    assert_eq!(report.tables.area_bias.mean, 0.0);
    assert!(report.tables.area_bias.differences.iter().all(|&d| d == 0.0));
}

#[test]
fn evaluation_needs_every_style_in_the_test_split() {
    let test: Vec<_> = two_style_data(4, 1)
        .into_iter()
        .map(|s| {
            let anns: Vec<Annotation> = s.annotations().iter().filter(|a| a.style.id() == 0).cloned().collect();
            AnnotatedSample::new(s.sample_id(), s.image().clone(), anns).unwrap()
        })
        .collect();
    let oracle = OracleModel {
        samples: test.clone(),
        num_styles: 2,
    };
    assert!(matches!(evaluate(&oracle, &test, &settings(2), "x"), Err(Error::MissingStyle(1))));
}

#[test]
fn identical_records_have_zero_deltas_and_split_mismatch_is_rejected() {
    let test = two_style_data(6, 3);
    let oracle = OracleModel {
        samples: test.clone(),
        num_styles: 2,
    };
    let report = evaluate(&oracle, &test, &settings(3), "a").unwrap();
    let mut twin = report.tables.clone();
    twin.run_id = "b".into();
    let cmp = compare_runs(&[report.tables.clone(), twin.clone()]).unwrap();
    assert!(!cmp.rows.is_empty());
    assert!(cmp.rows.iter().all(|r| r.deltas.iter().all(|&d| d == 0.0)));
    let iou = cmp.row("0", "iou_mean").unwrap();
    assert_eq!(iou.wins, vec![true, true]);

    twin.test_ids.pop();
    assert!(matches!(compare_runs(&[report.tables, twin]), Err(Error::MismatchedSplits(_))));
}

#[test]
fn plots_record_means_and_round_trip_through_values_files() {
    let test = two_style_data(6, 3);
    let oracle = OracleModel {
        samples: test.clone(),
        num_styles: 2,
    };
    let report = evaluate(&oracle, &test, &settings(3), "oracle").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_plots(&report, dir.path()).unwrap();
    assert_eq!(files.len(), 2);
    let bias_svg = std::fs::read_to_string(&files[0]).unwrap();
    assert!(bias_svg.contains("Markers indicate the mean"));
    // A perfect oracle makes no FP or FN pixels.
    let strata_svg = std::fs::read_to_string(&files[1]).unwrap();
    assert!(strata_svg.contains("FP: no pixels, omitted"));
    assert!(strata_svg.contains("FN: no pixels, omitted"));

    let values = entropy_strata_values(&report);
    let (_, stats) = replot(&dir.path().join("plots/entropy_strata.values.json")).unwrap();
    assert_eq!(stats, values.stats());
    let bias = area_bias_values(&[&report], "t");
    write_plot(dir.path(), "b", &bias).unwrap();
    let (_, again) = replot(&dir.path().join("b.values.json")).unwrap();
    assert_eq!(again, bias.stats());
}

#[test]
fn phc_style_zero_subset_trains_on_1170_pairs() {
    // 651 cells, each with three annotations per style.
    let samples: Vec<_> = (0..651)
        .map(|i| {
            let anns = (0..6)
                .map(|k| Annotation {
                    mask: SegmentationMask::zeros(1, 1),
                    style: LabelStyle::new(k / 3, 2).unwrap(),
                })
                .collect();
            AnnotatedSample::new(format!("c{i}"), Image::new(1, 1, 1, vec![0.0]).unwrap(), anns).unwrap()
        })
        .collect();
    let split = split_dataset(samples, [0.6, 0.2, 0.2], 0).unwrap();
    assert_eq!(training_pairs(&split.train, TrainingMode::Subset { style: 0 }).len(), 1170);
    assert_eq!(training_pairs(&split.train, TrainingMode::All).len(), 2340);
}

#[test]
fn subset_mode_without_that_style_fails() {
    let split = split_dataset(two_style_data(10, 0), [0.6, 0.2, 0.2], 0).unwrap();
    let mut cfg = ExperimentConfig::synthetic_desk();
    cfg.model.base_channels = 2;
    cfg.model.depth = 2;
    cfg.training.epochs = 1;
    cfg.training.mode = TrainingMode::Subset { style: 1 };
    let without: Vec<_> = split
        .train
        .iter()
        .map(|s| {
            let anns: Vec<Annotation> = s.annotations().iter().filter(|a| a.style.id() == 0).cloned().collect();
            AnnotatedSample::new(s.sample_id(), s.image().clone(), anns).unwrap()
        })
        .collect();
    let stripped = stylecond::DatasetSplit {
        train: without,
        ..split
    };
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(train(&cfg, &stripped, dir.path()), Err(Error::MissingStyle(1))));
}

#[test]
fn run_directory_layout_and_reproducible_metrics() {
    let split = split_dataset(two_style_data(12, 5), [0.6, 0.2, 0.2], 1).unwrap();
    let mut cfg = ExperimentConfig::synthetic_desk();
    cfg.run_id = "layout".into();
    cfg.model.base_channels = 2;
    cfg.model.depth = 2;
    cfg.model.rank = 2;
    cfg.model.mc_samples = 3;
    cfg.training.epochs = 2;
    cfg.evaluation.samples_per_image = 4;
    let dir = tempfile::tempdir().unwrap();
    let run = train(&cfg, &split, dir.path()).unwrap();
    assert_eq!(run.record.train_loss.len(), 2);
    assert!(run.record.train_loss.iter().chain(&run.record.val_loss).all(|v| v.is_finite()));

    let record = RunRecord::load(&dir.path().join("run_record.json")).unwrap();
    let a = evaluate_run(&record, &split.test, dir.path()).unwrap();
    for f in ["config.json", "metrics.csv", "metrics.json", "checkpoints/best.ckpt", "checkpoints/last.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = EvaluationReport::read(dir.path()).unwrap();
    assert_eq!(back.tables, a.tables);
    let b = evaluate_run(&record, &split.test, dir.path()).unwrap();
    assert_eq!(a.tables, b.tables);

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("model,style,metric,value\n"));
    assert!(csv.contains("layout,0,iou_mean,"));

    let mut other = split.test.clone();
    other.pop();
    assert!(matches!(evaluate_run(&record, &other, dir.path()), Err(Error::MismatchedSplits(_))));
}
