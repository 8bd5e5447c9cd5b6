//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. Set
//! `STYLECOND_CRITERIA=1,2,9` to run a subset.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use stylecond::curation::{curate_cell_crops, dilate_blur_augment, generate_synthetic, LabelMap, SyntheticStyleSpec};
use stylecond::harness::{evaluate, train, DataSource, EvaluationReport, ExperimentConfig, TrainingMode};
use stylecond::metrics::{auroc_pixelwise, binary_entropy, ged, pixel_entropy};
use stylecond::model::{Batch, ModelKind, SegmentationModel, TrainableModel};
use stylecond::prob_unet::{kl_diag_gaussians, DiagonalGaussian, ProbUNet, ProbUNetConfig};
use stylecond::ssn::{sample_logits, LowRankGaussianLogits, Ssn, SsnConfig};
use stylecond::{Image, LabelStyle, SegmentationMask};
use stylecond_autograd::{Adam, Tape, Tensor};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SegmentationMask {
    let p: f64 = rng.gen_range(0.1..0.9);
    SegmentationMask::from_fn(h, w, |_, _| rng.gen_bool(p))
}

// ---------------------------------------------------------------- criterion 1

fn brute_iou(a: &SegmentationMask, b: &SegmentationMask) -> f64 {
    let (mut inter, mut union) = (0, 0);
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn brute_ged(p: &[SegmentationMask], a: &[SegmentationMask]) -> f64 {
    let mean_d = |x: &[SegmentationMask], y: &[SegmentationMask]| {
        let mut t = 0.0;
        for u in x {
            for v in y {
                t += 1.0 - brute_iou(u, v);
            }
        }
        t / (x.len() * y.len()) as f64
    };
    2.0 * mean_d(p, a) - mean_d(a, a) - mean_d(p, p)
}

fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

fn mc_kl(q: &DiagonalGaussian, p: &DiagonalGaussian, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let log_pdf = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln();
    let mut total = 0.0;
    for _ in 0..n {
        for d in 0..q.mean.len() {
            let e: f64 = StandardNormal.sample(rng);
            let x = q.mean[d] + q.std[d] * e;
            total += log_pdf(x, q.mean[d], q.std[d]) - log_pdf(x, p.mean[d], p.std[d]);
        }
    }
    total / n as f64
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_ged: f64 = 0.0;
    for _ in 0..50 {
        let np = rng.gen_range(1..=4);
        let na = rng.gen_range(1..=4);
        let p: Vec<_> = (0..np).map(|_| random_mask(&mut rng, 4, 4)).collect();
        let a: Vec<_> = (0..na).map(|_| random_mask(&mut rng, 4, 4)).collect();
        worst_ged = worst_ged.max((ged(&p, &a).map_err(|e| e.to_string())? - brute_ged(&p, &a)).abs());
    }

    let mut worst_kl: f64 = 0.0;
    let mut self_kl = 0.0;
    for _ in 0..20 {
        let dim = rng.gen_range(1..=3);
        let g = |rng: &mut ChaCha8Rng| {
            DiagonalGaussian::new(
                (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                (0..dim).map(|_| rng.gen_range(0.8..1.25)).collect(),
            )
            .unwrap()
        };
        let (q, p) = (g(&mut rng), g(&mut rng));
        let closed = kl_diag_gaussians(&q, &p).unwrap();
        worst_kl = worst_kl.max((closed - mc_kl(&q, &p, 1_000_000, &mut rng)).abs());
        self_kl += kl_diag_gaussians(&q, &q).unwrap().abs();
    }

    let mut worst_auc: f64 = 0.0;
    let mut cases = 0;
    while cases < 30 {
        let fields = rng.gen_range(1..=3);
        let mut probs = Vec::new();
        let mut masks = Vec::new();
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        for _ in 0..fields {
            let (h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
            // Coarse levels so ties occur.
            let p: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
            let m = random_mask(&mut rng, h, w);
            scores.extend(&p);
            labels.extend(m.data().iter().map(|&b| b == 1));
            probs.push(p);
            masks.push(m);
        }
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        cases += 1;
        let auc = auroc_pixelwise(&probs, &masks).map_err(|e| e.to_string())?;
        worst_auc = worst_auc.max((auc - brute_auroc(&scores, &labels)).abs());
    }

    let h_half = (pixel_entropy(&[0.5])[0] - std::f64::consts::LN_2).abs();
    let sym = (0..100)
        .map(|_| rng.gen::<f64>())
        .all(|p| (binary_entropy(p) - binary_entropy(1.0 - p)).abs() < 1e-15);

    ensure(
        worst_ged <= 1e-12 && worst_kl <= 1e-2 && self_kl == 0.0 && worst_auc <= 1e-12 && h_half <= 1e-12 && sym,
        format!(
            "ged err {worst_ged:.1e}, kl err {worst_kl:.1e}, KL(q,q) {self_kl}, auroc err {worst_auc:.1e}, H(.5) err {h_half:.1e}, symmetric {sym}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn direct_ssn_loss(
    mean: &[f64],
    diag: &[f64],
    factor: &[f64],
    rank: usize,
    ann: &[u8],
    eps_d: &[Vec<f64>],
    eps_f: &[Vec<f64>],
) -> f64 {
    let m = mean.len();
    let logliks: Vec<f64> = eps_d
        .iter()
        .zip(eps_f)
        .map(|(e1, e2)| {
            -(0..m)
                .map(|j| {
                    let eta = mean[j] + diag[j].sqrt() * e1[j] + (0..rank).map(|k| factor[k * m + j] * e2[k]).sum::<f64>();
                    let y = ann[j] as f64;
                    // −[y ln σ(η) + (1 − y) ln(1 − σ(η))]
                    let sig = 1.0 / (1.0 + (-eta).exp());
                    -(y * sig.ln() + (1.0 - y) * (1.0 - sig).ln())
                })
                .sum::<f64>()
        })
        .collect();
    let top = logliks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logliks.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    -lse + (eps_d.len() as f64).ln()
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_mean: f64 = 0.0;
    let mut worst_cov: f64 = 0.0;
    for case in 0..10 {
        let (h, w) = (4, 4);
        let m = h * w;
        let rank = rng.gen_range(0..=3);
        let mean: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let diag: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..0.5)).collect();
        let factor: Vec<f64> = (0..rank * m).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let dist = LowRankGaussianLogits::new(h, w, mean.clone(), diag.clone(), factor.clone()).unwrap();
        let draws = sample_logits(&dist, 100_000, 100 + case);
        let n = draws.len() as f64;
        let emp_mean: Vec<f64> = (0..m).map(|j| draws.iter().map(|d| d[j]).sum::<f64>() / n).collect();
        for j in 0..m {
            worst_mean = worst_mean.max((emp_mean[j] - mean[j]).abs());
        }
        for i in 0..m {
            for j in 0..m {
                let emp = draws.iter().map(|d| (d[i] - emp_mean[i]) * (d[j] - emp_mean[j])).sum::<f64>() / (n - 1.0);
                let exact = (0..rank).map(|k| factor[k * m + i] * factor[k * m + j]).sum::<f64>()
                    + if i == j { diag[i] } else { 0.0 };
                worst_cov = worst_cov.max((emp - exact).abs());
            }
        }
    }

    let mut worst_loss: f64 = 0.0;
    let mut s1_gap: f64 = 0.0;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let m = h * w;
        let rank = rng.gen_range(0..=2);
        let s = rng.gen_range(1..=4);
        let mean: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let diag: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
        let factor: Vec<f64> = (0..rank * m).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let ann = random_mask(&mut rng, h, w);
        let eps_d: Vec<Vec<f64>> = (0..s).map(|_| (0..m).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let eps_f: Vec<Vec<f64>> = (0..s).map(|_| (0..rank).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let dist = LowRankGaussianLogits::new(h, w, mean.clone(), diag.clone(), factor.clone()).unwrap();
        let lib = dist.loss_with_noise(&ann, &eps_d, &eps_f).unwrap();
        worst_loss = worst_loss.max((lib - direct_ssn_loss(&mean, &diag, &factor, rank, ann.data(), &eps_d, &eps_f)).abs());

        // S = 1: the loss is the cross-entropy of the single sample.
        let one = dist.loss_with_noise(&ann, &eps_d[..1], &eps_f[..1]).unwrap();
        let sample = dist.transform(&eps_d[0], &eps_f[0]);
        let bce: f64 = sample
            .iter()
            .zip(ann.data())
            .map(|(&z, &y)| stylecond_autograd::bce_logit(z, y as f64))
            .sum();
        s1_gap = s1_gap.max((one - bce).abs());
    }

    // The model path agrees with the formula applied to its own distribution.
    let mut cfg = SsnConfig::new(1, 2, true);
    cfg.backbone = cfg.backbone.with_base_channels(2).with_depth(2);
    cfg.rank = 2;
    let mut ssn = Ssn::new(cfg, 3).unwrap();
    randomise_heads(&mut ssn, &["head.mean", "head.diag", "head.factor"], 0.3, 4);
    let image = test_image(4, 4, 5);
    let ann = random_mask(&mut rng, 4, 4);
    let style = LabelStyle::new(1, 2).unwrap();
    let dist = ssn.logit_distribution(&image, style).unwrap();
    let s = 4;
    let eps_d: Vec<f64> = (0..s * 16).map(|_| StandardNormal.sample(&mut rng)).collect();
    let eps_f: Vec<f64> = (0..s * 2).map(|_| StandardNormal.sample(&mut rng)).collect();
    let batch = Batch::new(&[(&image, &ann, style)]).unwrap();
    let mut tape = Tape::new();
    let p = ssn.params().bind_frozen(&mut tape);
    let out = ssn
        .loss_with_noise(
            &mut tape,
            &p,
            &batch,
            Tensor::new(vec![1, s, 16], eps_d.clone()),
            Tensor::new(vec![1, s, 2], eps_f.clone()),
            None,
        )
        .unwrap();
    let model_loss = tape.value(out.total).item();
    let e1: Vec<Vec<f64>> = eps_d.chunks(16).map(<[f64]>::to_vec).collect();
    let e2: Vec<Vec<f64>> = eps_f.chunks(2).map(<[f64]>::to_vec).collect();
    let model_gap =
        (model_loss - direct_ssn_loss(&dist.mean, &dist.diag, &dist.factor, 2, ann.data(), &e1, &e2)).abs();

    ensure(
        worst_mean <= 0.05 && worst_cov <= 0.05 && worst_loss <= 1e-9 && model_gap <= 1e-9 && s1_gap <= 1e-12,
        format!(
            "mean err {worst_mean:.3}, cov err {worst_cov:.3}, loss err {worst_loss:.1e}, model loss err {model_gap:.1e}, S=1 gap {s1_gap:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn test_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(1, h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn randomise_heads(model: &mut dyn TrainableModel, prefixes: &[&str], std: f64, seed: u64) {
    let normal = Normal::new(0.0, std).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = model.params_mut();
    let ids: Vec<_> = store.ids().filter(|&id| prefixes.iter().any(|p| store.name(id).starts_with(p))).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
}

/// Compares tape gradients with central differences on 20 random scalars.
fn gradient_check<M: TrainableModel>(
    model: &mut M,
    loss: impl Fn(&M) -> (f64, Vec<Option<Tensor>>),
    seed: u64,
) -> (f64, usize) {
    let (_, grads) = loss(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params().ids().collect();
    let mut worst: f64 = 0.0;
    let mut nonzero = 0;
    for _ in 0..20 {
        let k = rng.gen_range(0..ids.len());
        let id = ids[k];
        let idx = rng.gen_range(0..model.params().get(id).len());
        let analytic = grads[k].as_ref().map_or(0.0, |g| g.data()[idx]);
        let step = 1e-5;
        let orig = model.params().get(id).data()[idx];
        model.params_mut().get_mut(id).data_mut()[idx] = orig + step;
        let plus = loss(model).0;
        model.params_mut().get_mut(id).data_mut()[idx] = orig - step;
        let minus = loss(model).0;
        model.params_mut().get_mut(id).data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        // Gradients below the floor are compared in absolute terms.
        let scale = analytic.abs().max(numeric.abs()).max(1e-7);
        if scale > 1e-7 {
            nonzero += 1;
        }
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    (worst, nonzero)
}

fn grad_batch(rng: &mut ChaCha8Rng, num_styles: usize) -> (Vec<Image>, Vec<SegmentationMask>, Vec<LabelStyle>) {
    let images = (0..2).map(|i| test_image(8, 8, 40 + i)).collect();
    let masks = (0..2).map(|_| random_mask(rng, 8, 8)).collect();
    let styles = (0..2).map(|i| LabelStyle::new(i % num_styles, num_styles).unwrap()).collect();
    (images, masks, styles)
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (images, masks, styles) = grad_batch(&mut rng, 2);
    let items: Vec<_> = (0..2).map(|i| (&images[i], &masks[i], styles[i])).collect();
    let batch = Batch::new(&items).unwrap();

    let mut pcfg = ProbUNetConfig::new(1, 2, true);
    pcfg.backbone = pcfg.backbone.with_base_channels(2).with_depth(3);
    let mut pu = ProbUNet::new(pcfg, 7).unwrap();
    randomise_heads(&mut pu, &["prior.head", "posterior.head"], 0.2, 8);
    let l = pu.config().latent_dim;
    let eps = Tensor::new(vec![2, l, 1, 1], (0..2 * l).map(|_| StandardNormal.sample(&mut rng)).collect());
    let elbo = |m: &ProbUNet| {
        let mut tape = Tape::new();
        let p = m.params().bind(&mut tape);
        let out = m.elbo_with_noise(&mut tape, &p, &batch, &eps, None).unwrap();
        let mut g = tape.backward(out.total);
        (tape.value(out.total).item(), p.gradients(&mut g))
    };
    let (pu_err, pu_nz) = gradient_check(&mut pu, elbo, 9);

    let mut scfg = SsnConfig::new(1, 2, true);
    scfg.backbone = scfg.backbone.with_base_channels(2).with_depth(3);
    scfg.rank = 2;
    let mut ssn = Ssn::new(scfg, 10).unwrap();
    randomise_heads(&mut ssn, &["head."], 0.3, 11);
    let s = 5;
    let eps_d = Tensor::new(vec![2, s, 64], (0..2 * s * 64).map(|_| StandardNormal.sample(&mut rng)).collect());
    let eps_f = Tensor::new(vec![2, s, 2], (0..2 * s * 2).map(|_| StandardNormal.sample(&mut rng)).collect());
    let ssn_loss = |m: &Ssn| {
        let mut tape = Tape::new();
        let p = m.params().bind(&mut tape);
        let out = m.loss_with_noise(&mut tape, &p, &batch, eps_d.clone(), eps_f.clone(), None).unwrap();
        let mut g = tape.backward(out.total);
        (tape.value(out.total).item(), p.gradients(&mut g))
    };
    let (ssn_err, ssn_nz) = gradient_check(&mut ssn, ssn_loss, 12);

    ensure(
        pu_err <= 1e-3 && ssn_err <= 1e-3,
        format!(
            "elbo max rel err {pu_err:.1e} ({pu_nz}/20 nonzero), ssn max rel err {ssn_err:.1e} ({ssn_nz}/20 nonzero)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

/// Trains on one batch; returns the initial loss, the first step whose loss
/// fell below 10% of it, and the final loss.
fn overfit(model: &mut dyn TrainableModel, batch: &Batch, steps: usize, seed: u64) -> (f64, Option<usize>, f64) {
    let mut opt = Adam::new(1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = f64::NAN;
    let mut last = f64::NAN;
    let mut reached = None;
    for step in 0..steps {
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let out = model.loss(&mut tape, &p, batch, &mut rng, true).unwrap();
        let v = tape.value(out.total).item();
        if step == 0 {
            first = v;
        }
        if reached.is_none() && v < 0.1 * first {
            reached = Some(step);
        }
        last = v;
        let mut g = tape.backward(out.total);
        let grads = p.gradients(&mut g);
        drop(tape);
        opt.step(model.params_mut(), &grads);
    }
    (first, reached, last)
}

fn criterion_4() -> Check {
    let ds = generate_synthetic(8, 64, &desk_styles(), 1, 4).unwrap();
    let items: Vec<_> = ds
        .samples
        .iter()
        .map(|s| (s.image(), &s.annotations()[1].mask, s.annotations()[1].style))
        .collect();
    let batch = Batch::new(&items).unwrap();

    let mut pcfg = ProbUNetConfig::new(1, 2, true);
    pcfg.backbone = pcfg.backbone.with_base_channels(8);
    let mut pu = ProbUNet::new(pcfg, 1).unwrap();
    let (p0, p_at, p1) = overfit(&mut pu, &batch, 200, 1);

    let mut scfg = SsnConfig::new(1, 2, true);
    scfg.backbone = scfg.backbone.with_base_channels(8);
    let mut ssn = Ssn::new(scfg, 1).unwrap();
    let (s0, s_at, s1) = overfit(&mut ssn, &batch, 200, 1);

    ensure(
        p_at.is_some() && s_at.is_some(),
        format!(
            "c-prob-unet {p0:.1} -> {p1:.1}, below 10% at step {p_at:?}; c-ssn {s0:.1} -> {s1:.1}, below 10% at step {s_at:?}"
        ),
    )
}

// ---------------------------------------------------------------- criteria 5-8

fn desk_styles() -> Vec<SyntheticStyleSpec> {
    vec![
        SyntheticStyleSpec::ground_truth(),
        SyntheticStyleSpec {
            style_id: 1,
            boundary_offset_mean: 6.0,
            boundary_offset_std: 1.0,
            smoothing_sigma: 1.0,
        },
    ]
}

const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 30;

struct SeedRuns {
    seed: u64,
    conditioned: EvaluationReport,
    all: EvaluationReport,
    subset: EvaluationReport,
}

fn experiment_config(seed: u64, mode: TrainingMode) -> ExperimentConfig {
    // The synthetic preset: c-prob. U-net, 30 epochs, 300/50/50 images.
    let mut cfg = ExperimentConfig::synthetic_desk();
    cfg.run_id = format!("{}_s{seed}", mode.label());
    cfg.training.mode = mode;
    cfg.training.seed = seed;
    if let DataSource::Synthetic { seed: data_seed, styles, .. } = &mut cfg.data.source {
        *data_seed = 1000 + seed;
        *styles = desk_styles();
    }
    cfg.data.split_seed = seed;
    cfg.evaluation.seed = seed;
    assert_eq!(cfg.model.kind, ModelKind::CprobUnet);
    assert_eq!((cfg.training.epochs, cfg.evaluation.samples_per_image), (EPOCHS, 100));
    cfg
}

fn run_seed(seed: u64, root: &std::path::Path) -> Result<SeedRuns, String> {
    let base = experiment_config(seed, TrainingMode::Conditioned);
    let split = base.load_split().map_err(|e| e.to_string())?;
    assert_eq!(split.train.len(), 300);
    let mut reports = Vec::new();
    for mode in [TrainingMode::Conditioned, TrainingMode::All, TrainingMode::Subset { style: 0 }] {
        let cfg = experiment_config(seed, mode);
        let t = Instant::now();
        let run = train(&cfg, &split, &root.join(&cfg.run_id)).map_err(|e| e.to_string())?;
        let report = evaluate(run.model.as_ref(), &split.test, &cfg.evaluation, &cfg.run_id).map_err(|e| e.to_string())?;
        println!(
            "    {}: best epoch {:?}, bias {:+.1} px, style-0 IoU {:.3}, style-0 GED {:.3} [{:.0}s]",
            cfg.run_id,
            run.record.best_epoch,
            report.tables.area_bias.mean,
            report.tables.per_style[0].iou.mean,
            report.tables.per_style[0].ged.mean,
            t.elapsed().as_secs_f64()
        );
        reports.push(report);
    }
    let subset = reports.pop().expect("three runs");
    let all = reports.pop().expect("three runs");
    let conditioned = reports.pop().expect("three runs");
    Ok(SeedRuns {
        seed,
        conditioned,
        all,
        subset,
    })
}

fn criterion_5(runs: &[SeedRuns]) -> Check {
    let mean = |f: &dyn Fn(&SeedRuns) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let cond = mean(&|r| r.conditioned.tables.area_bias.mean);
    let all = mean(&|r| r.all.tables.area_bias.mean);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("s{}: {:+.1}/{:+.1}", r.seed, r.conditioned.tables.area_bias.mean, r.all.tables.area_bias.mean))
        .collect();
    ensure(
        all > 0.0 && cond.abs() <= 0.5 * all.abs(),
        format!("mean bias conditioned {cond:+.1} px vs all {all:+.1} px ({})", per_seed.join(", ")),
    )
}

fn criterion_6(runs: &[SeedRuns]) -> Check {
    let iou = |r: &EvaluationReport| r.tables.per_style[0].iou.mean;
    let beats_all = runs.iter().filter(|r| iou(&r.conditioned) >= iou(&r.all)).count();
    let beats_subset = runs.iter().filter(|r| iou(&r.conditioned) >= iou(&r.subset)).count();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("s{}: {:.3}/{:.3}/{:.3}", r.seed, iou(&r.conditioned), iou(&r.all), iou(&r.subset)))
        .collect();
    ensure(
        beats_all >= 2 && beats_subset >= 2,
        format!(
            "style-0 IoU cond/all/subset0 {}; cond >= all in {beats_all}/3, >= subset in {beats_subset}/3",
            detail.join(", ")
        ),
    )
}

fn criterion_7(runs: &[SeedRuns]) -> Check {
    let g = |r: &EvaluationReport| r.tables.per_style[0].ged.mean;
    let wins = runs.iter().filter(|r| g(&r.conditioned) <= g(&r.all) + 0.02).count();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("s{}: {:.3}/{:.3}", r.seed, g(&r.conditioned), g(&r.all)))
        .collect();
    ensure(
        wins >= 2,
        format!("style-0 GED cond/all {}; within +0.02 in {wins}/3", detail.join(", ")),
    )
}

fn criterion_8(runs: &[SeedRuns]) -> Check {
    let mut detail = Vec::new();
    let mut ok = true;
    for r in runs {
        for rep in [&r.conditioned, &r.all, &r.subset] {
            let s = rep.pooled_strata();
            let (e, c) = (s.error_median(), s.correct_median());
            ok &= matches!((e, c), (Some(e), Some(c)) if e > c);
            detail.push(format!(
                "{} {:.2e}>{:.2e}",
                rep.tables.run_id,
                e.unwrap_or(f64::NAN),
                c.unwrap_or(f64::NAN)
            ));
        }
    }
    ensure(ok, format!("median entropy error>correct: {}", detail.join(", ")))
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Check {
    let image = test_image(16, 16, 90);
    let ann = random_mask(&mut ChaCha8Rng::seed_from_u64(91), 16, 16);
    let style = LabelStyle::new(0, 1).unwrap();

    // Prob. U-net without any style channel.
    let mut pcfg = ProbUNetConfig::new(1, 1, false);
    pcfg.backbone = pcfg.backbone.with_base_channels(4).with_depth(2);
    let mut pu = ProbUNet::new(pcfg, 5).unwrap();
    randomise_heads(&mut pu, &["prior.head", "posterior.head"], 0.3, 6);

    let mut tape = Tape::new();
    let p = pu.params().bind_frozen(&mut tape);
    let x = tape.constant(Tensor::new(vec![1, 1, 16, 16], image.data().to_vec()));
    let features = pu.backbone().forward_features(&mut tape, &p, x, None).unwrap();
    let code = pu.prior_path().encode(&mut tape, &p, x, None).unwrap();
    let head = pu.prior_head().forward(&mut tape, &p, code);
    let l = pu.config().latent_dim;
    let prior_mean = tape.narrow_channels(head, 0, l);
    let prior_logvar = tape.narrow_channels(head, l, l);
    let tiled = tape.broadcast_spatial(prior_mean, 16, 16);
    let mut h = tape.concat_channels(&[features, tiled]);
    for layer in pu.combiner() {
        h = layer.forward(&mut tape, &p, h);
    }
    let mut post_input = image.data().to_vec();
    post_input.extend(ann.to_f64());
    let px = tape.constant(Tensor::new(vec![1, 2, 16, 16], post_input));
    let pcode = pu.posterior_path().encode(&mut tape, &p, px, None).unwrap();
    let phead = pu.posterior_head().forward(&mut tape, &p, pcode);

    let prior = pu.prior_encode(&image, style).unwrap();
    let post = pu.posterior_encode(&image, &ann, style).unwrap();
    let reference_logvar: Vec<f64> = tape.value(prior_logvar).data().to_vec();
    let pu_same = pu.mean_logits(&image, style).unwrap() == tape.value(h).data()
        && prior.mean == tape.value(prior_mean).data()
        && prior.std == reference_logvar.iter().map(|v| (0.5 * v).exp()).collect::<Vec<_>>()
        && post.mean == tape.value(phead).data()[..l];

    // SSN without any style channel.
    let mut scfg = SsnConfig::new(1, 1, false);
    scfg.backbone = scfg.backbone.with_base_channels(4).with_depth(2);
    scfg.rank = 3;
    let mut ssn = Ssn::new(scfg, 5).unwrap();
    randomise_heads(&mut ssn, &["head."], 0.3, 7);
    let mut tape = Tape::new();
    let p = ssn.params().bind_frozen(&mut tape);
    let x = tape.constant(Tensor::new(vec![1, 1, 16, 16], image.data().to_vec()));
    let feats = ssn.backbone().forward_features(&mut tape, &p, x, None).unwrap();
    let (mean_head, diag_head, factor_head) = ssn.heads();
    let mean = mean_head.forward(&mut tape, &p, feats);
    let raw = diag_head.forward(&mut tape, &p, feats);
    let sp = tape.softplus(raw);
    let diag = tape.add_scalar(sp, ssn.config().diag_floor);
    let factor = factor_head.expect("rank 3").forward(&mut tape, &p, feats);
    let dist = ssn.logit_distribution(&image, style).unwrap();
    let ssn_same = dist.mean == tape.value(mean).data()
        && dist.diag == tape.value(diag).data()
        && dist.factor == tape.value(factor).data();

    ensure(
        pu_same && ssn_same,
        format!("prob. U-net identical: {pu_same}, SSN identical: {ssn_same}"),
    )
}

// ---------------------------------------------------------------- criterion 10

fn criterion_10() -> Check {
    // Five rectangular cells (row0, row1, col0, col1) in a 256×256 frame.
    let cells = [
        (30, 60, 40, 80),    // interior
        (100, 187, 100, 187), // 88×88 box: with margin 20 the window is exactly 128×128
        (5, 30, 150, 190),   // 5 px from the top edge: rejected
        (210, 240, 20, 50),  // 15 px from the bottom edge: rejected
        (40, 70, 200, 235),  // exactly 20 px from the right edge: accepted
    ];
    let (h, w) = (256, 256);
    let mut labels = vec![0u32; h * w];
    let mut pixels = vec![0.25; h * w];
    for (k, &(r0, r1, c0, c1)) in cells.iter().enumerate() {
        for r in r0..=r1 {
            for c in c0..=c1 {
                labels[r * w + c] = k as u32 + 1;
                pixels[r * w + c] = 0.75;
            }
        }
    }
    // Expected: window [r0−20, r1+20] × [c0−20, c1+20] must lie inside the frame.
    let expected_accept: Vec<bool> = cells
        .iter()
        .map(|&(r0, r1, c0, c1)| r0 >= 20 && c0 >= 20 && r1 + 20 < h && c1 + 20 < w)
        .collect();
    assert_eq!(expected_accept, vec![true, true, false, false, true]);

    let frame = Image::new(1, h, w, pixels).unwrap();
    let gt = LabelMap::new(h, w, labels).unwrap();
    let out = curate_cell_crops(&[frame], &[gt], 20, 128, 1).map_err(|e| e.to_string())?;
    let kept = out.samples.len();
    let rejected: Vec<(usize, usize)> = out.rejected.iter().map(|(_, s)| (s.bbox.row_min, s.bbox.col_min)).collect();
    let mut want_rejected: Vec<(usize, usize)> = cells
        .iter()
        .zip(&expected_accept)
        .filter(|(_, &a)| !a)
        .map(|(&(r0, _, c0, _), _)| (r0, c0))
        .collect();
    let mut got_rejected = rejected.clone();
    want_rejected.sort();
    got_rejected.sort();
    let sizes_ok = out.samples.iter().all(|s| {
        s.image().dims() == (128, 128) && s.annotations().iter().all(|a| a.mask.dims() == (128, 128))
    });
    // The 88×88 cell needs no resampling: its crop is the box at offset 20.
    let exact_cell = SegmentationMask::from_fn(128, 128, |r, c| (20..108).contains(&r) && (20..108).contains(&c));
    let exact_found = out.samples.iter().any(|s| s.annotations()[0].mask == exact_cell);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut monotone = true;
    for _ in 0..100 {
        let m = random_blob_mask(&mut rng, 32);
        let r1 = rng.gen_range(0..4);
        let r2 = r1 + rng.gen_range(0..4);
        let sigma = rng.gen_range(0.0..2.5);
        let a = dilate_blur_augment(&m, r1, sigma);
        let b = dilate_blur_augment(&m, r2, sigma);
        monotone &= (0..m.data().len()).all(|i| m.data()[i] <= a.data()[i] && a.data()[i] <= b.data()[i]);
    }

    ensure(
        kept == 3 && got_rejected == want_rejected && sizes_ok && exact_found && monotone,
        format!(
            "{kept} kept, rejected at {got_rejected:?}, 128×128 outputs {sizes_ok}, exact crop {exact_found}, dilation monotone on 100 masks {monotone}"
        ),
    )
}

fn random_blob_mask(rng: &mut ChaCha8Rng, size: usize) -> SegmentationMask {
    let blobs: Vec<(f64, f64, f64)> = (0..rng.gen_range(0..4))
        .map(|_| {
            (
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64),
                rng.gen_range(1.0..8.0),
            )
        })
        .collect();
    let noise = rng.gen_range(0.0..0.05);
    SegmentationMask::from_fn(size, size, |r, c| {
        blobs.iter().any(|&(y, x, rad)| (r as f64 - y).hypot(c as f64 - x) <= rad) || rng.gen_bool(noise)
    })
}

// ---------------------------------------------------------------- driver

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("STYLECOND_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |c: u32| selected.as_ref().map_or(true, |s| s.contains(&c));
    let mut failures = 0;
    let mut report = |id: u32, name: &str, started: Instant, result: Check| {
        let secs = started.elapsed().as_secs_f64();
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2}: {tag}  {name}: {detail} [{secs:.0}s]");
    };

    let simple: [(u32, &str, fn() -> Check); 6] = [
        (1, "metric oracles", criterion_1),
        (2, "distribution correctness", criterion_2),
        (3, "gradient checks", criterion_3),
        (4, "single-batch overfit", criterion_4),
        (9, "ablation equivalence", criterion_9),
        (10, "curation pipeline", criterion_10),
    ];
    for (id, name, f) in simple {
        if wanted(id) {
            let t = Instant::now();
            report(id, name, t, f());
        }
    }

    if [5, 6, 7, 8].iter().any(|&c| wanted(c)) {
        let t = Instant::now();
        let root = tempfile::tempdir().expect("temp dir");
        let mut runs = Vec::new();
        let mut error = None;
        for seed in SEEDS {
            println!("  seed {seed}: training conditioned, all and subset0 models");
            match run_seed(seed, root.path()) {
                Ok(r) => runs.push(r),
                Err(e) => {
                    error = Some(e);
                    break;
                }
            }
        }
        let checks: [(u32, &str, fn(&[SeedRuns]) -> Check); 4] = [
            (5, "bias reduction", criterion_5),
            (6, "predictive performance", criterion_6),
            (7, "distribution fit", criterion_7),
            (8, "error entropy", criterion_8),
        ];
        for (id, name, f) in checks {
            if wanted(id) {
                let result = match &error {
                    Some(e) => Err(format!("experiment failed: {e}")),
                    None => f(&runs),
                };
                report(id, name, t, result);
            }
        }
    }

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
