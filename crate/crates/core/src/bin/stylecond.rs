use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stylecond::curation::{curate_cell_crops, generate_synthetic, SyntheticStyleSpec};
use stylecond::dataset_io::{load_image_png, load_label_map_png, write_dataset};
use stylecond::harness::config::DATA_ENV;
use stylecond::harness::{
    compare_runs, emit_plots, evaluate_run, plots, replot, train, EvaluationReport, ExperimentConfig, RunRecord,
    TrainingMode,
};
use stylecond::model::ModelKind;

#[derive(Parser)]
#[command(name = "stylecond", version, about = "Label-style conditioned segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut single-cell crops out of annotated microscopy frames.
    Curate(CurateArgs),
    /// Generate a synthetic multi-style dataset.
    Synth(SynthArgs),
    /// Train a model; writes runs/<id>/.
    Train(TrainArgs),
    /// Evaluate a trained run on its test split.
    Eval(RunArgs),
    /// Compare evaluated runs that share a test split.
    Compare(CompareArgs),
    /// Draw plots for an evaluated run, or redraw one from a values file.
    Plot(PlotArgs),
}

#[derive(Args)]
struct CurateArgs {
    /// Dataset kind; only single-cell phase-contrast frames are supported.
    #[arg(value_parser = ["phc"])]
    kind: String,
    /// Directory of grey frames, `<name>.png`.
    #[arg(long)]
    frames: PathBuf,
    /// Directory of instance label images with matching names.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = stylecond::curation::DEFAULT_MARGIN)]
    margin: usize,
    #[arg(long, default_value_t = stylecond::curation::DEFAULT_TARGET_SIZE)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    num_styles: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON list of style specs; defaults to truth plus one 6 px over-segmenting style.
    #[arg(long)]
    styles: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    annotators: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also assign train/val/test with this seed.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Conditioned,
    All,
    Subset,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset used when no config file is given: synthetic, isic, phc.
    #[arg(long, default_value = "synthetic")]
    preset: String,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Style kept by subset mode.
    #[arg(long, default_value_t = 0)]
    style: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory, relative paths resolve against the data root.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Data root for relative dataset paths.
    #[arg(long, env = DATA_ENV)]
    data_root: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Evaluate and plot right after training.
    #[arg(long)]
    eval: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    CprobUnet,
    Cssn,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory containing run_record.json.
    run: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories; the first is the reference for deltas.
    #[arg(required = true, num_args = 2..)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "runs/comparison")]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Evaluated run directory.
    run: Option<PathBuf>,
    /// Redraw from a `.values.json` file instead.
    #[arg(long, conflicts_with = "run")]
    values: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Curate(a) => curate(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(&a.run).map(|_| ()),
        Command::Compare(a) => compare_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn curate(a: CurateArgs) -> Result<()> {
    let mut names: Vec<PathBuf> = fs::read_dir(&a.frames)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    names.sort();
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for p in &names {
        frames.push(load_image_png(p, 1).with_context(|| format!("reading {}", p.display()))?);
        let lp = a.labels.join(p.file_name().expect("file"));
        labels.push(load_label_map_png(&lp).with_context(|| format!("reading {}", lp.display()))?);
    }
    let outcome = curate_cell_crops(&frames, &labels, a.margin, a.size, a.num_styles)?;
    write_dataset(&a.out, &outcome.samples, None)?;
    log::info!(
        "{} frames: {} crops kept, {} rejected at the border",
        names.len(),
        outcome.samples.len(),
        outcome.rejected.len()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let specs: Vec<SyntheticStyleSpec> = match &a.styles {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => match ExperimentConfig::synthetic_desk().data.source {
            stylecond::harness::DataSource::Synthetic { styles, .. } => styles,
            _ => unreachable!("desk preset is synthetic"),
        },
    };
    let ds = generate_synthetic(a.n, a.size, &specs, a.annotators, a.seed)?;
    write_dataset(&a.out, &ds.samples, a.split_seed)?;
    fs::write(a.out.join("records.json"), serde_json::to_string_pretty(&ds.records)?)?;
    fs::write(a.out.join("styles.json"), serde_json::to_string_pretty(&ds.specs)?)?;
    log::info!("wrote {} samples to {}", ds.samples.len(), a.out.display());
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::preset(&a.preset)?,
    };
    if let Some(m) = a.model {
        cfg.model.kind = match m {
            ModelArg::CprobUnet => ModelKind::CprobUnet,
            ModelArg::Cssn => ModelKind::Cssn,
        };
    }
    if let Some(m) = a.mode {
        cfg.training.mode = match m {
            Mode::Conditioned => TrainingMode::Conditioned,
            Mode::All => TrainingMode::All,
            Mode::Subset => TrainingMode::Subset { style: a.style },
        };
    }
    if let Some(v) = a.epochs {
        cfg.training.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.training.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.training.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.training.seed = v;
    }
    if let Some(p) = &a.data {
        cfg.data.source = stylecond::harness::DataSource::Directory { path: p.clone() };
    }
    cfg.run_id = a.run_id.clone().unwrap_or_else(|| {
        format!(
            "{}_{}_{}_s{}",
            cfg.run_id,
            cfg.model.kind.label(),
            cfg.training.mode.label(),
            cfg.training.seed
        )
    });
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    if let Some(root) = &a.data_root {
        std::env::set_var(DATA_ENV, root);
    }
    let cfg = resolve_config(&a)?;
    let split = cfg.load_split()?;
    let run_dir = a.runs_dir.join(&cfg.run_id);
    let run = train(&cfg, &split, &run_dir)?;
    log::info!(
        "best epoch {:?}, checkpoint {}",
        run.record.best_epoch,
        run.record.best_checkpoint.display()
    );
    if a.eval {
        eval_cmd(&run_dir)?;
    }
    Ok(())
}

fn eval_cmd(run_dir: &Path) -> Result<EvaluationReport> {
    let record = RunRecord::load(&run_dir.join("run_record.json"))?;
    let split = record.config.load_split()?;
    let report = evaluate_run(&record, &split.test, run_dir)?;
    emit_plots(&report, run_dir)?;
    for m in &report.tables.per_style {
        log::info!(
            "style {}: IoU {:.3}±{:.3}, AUROC {:.3}, GED {:.3}",
            m.style,
            m.iou.mean,
            m.iou.std,
            m.auroc,
            m.ged.mean
        );
    }
    log::info!(
        "pooled GED {:.3}, area bias {:.1}±{:.1} px",
        report.tables.ged_pooled.mean,
        report.tables.area_bias.mean,
        report.tables.area_bias.std
    );
    Ok(report)
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    let reports = a
        .runs
        .iter()
        .map(|r| EvaluationReport::read(r).with_context(|| format!("{} has not been evaluated", r.display())))
        .collect::<Result<Vec<_>>>()?;
    let tables: Vec<_> = reports.iter().map(|r| r.tables.clone()).collect();
    let cmp = compare_runs(&tables)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("comparison.md"), cmp.to_markdown())?;
    fs::write(a.out.join("comparison.csv"), cmp.to_csv())?;
    fs::write(a.out.join("comparison.json"), serde_json::to_string_pretty(&cmp)?)?;
    let refs: Vec<&EvaluationReport> = reports.iter().collect();
    plots::write_plot(
        &a.out.join("plots"),
        "area_bias",
        &plots::area_bias_values(&refs, "area difference to the reference style"),
    )?;
    println!("{}", cmp.to_markdown());
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    if let Some(v) = a.values {
        let (svg, stats) = replot(&v)?;
        for s in stats {
            println!("{}: n={} median={:.4} mean={:.4}", s.label, s.n, s.median, s.mean);
        }
        println!("{}", svg.display());
        return Ok(());
    }
    let Some(run) = a.run else {
        bail!("give a run directory or --values");
    };
    for p in emit_plots(&EvaluationReport::read(&run)?, &run)? {
        println!("{}", p.display());
    }
    Ok(())
}
