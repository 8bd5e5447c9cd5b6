//! The logit distribution behind the stochastic segmentation network:
//! `η = μ + √D·ε₁ + P·ε₂`, with covariance `diag(D) + PPᵀ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylecond::ssn::LowRankGaussianLogits;
use stylecond::SegmentationMask;

fn main() -> stylecond::Result<()> {
    let (h, w, rank) = (2, 2, 1);
    let mean = vec![1.0, -1.0, 0.0, 2.0];
    let diag = vec![0.5, 0.5, 0.2, 0.1];
    // One shared factor couples all four pixels.
    let factor = vec![0.8, 0.8, -0.4, 0.3];
    let dist = LowRankGaussianLogits::new(h, w, mean, diag, factor)?;
    assert_eq!(dist.rank, rank);

    let cov = dist.covariance()?;
    println!("analytic covariance:");
    for row in cov.chunks(4) {
        println!("  {row:>6.2?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = dist.sample(20_000, &mut rng);
    let m = |i: usize| draws.iter().map(|d| d[i]).sum::<f64>() / draws.len() as f64;
    let c01 = draws.iter().map(|d| (d[0] - m(0)) * (d[1] - m(1))).sum::<f64>() / draws.len() as f64;
    println!("empirical cov(0,1) = {c01:.3}, analytic {:.3}", cov[1]);

    // Monte-Carlo loss against one annotation, with fixed noise.
    let ann = SegmentationMask::new(h, w, vec![1, 0, 0, 1])?;
    let eps_d: Vec<Vec<f64>> = (0..4).map(|s| vec![0.1 * s as f64; 4]).collect();
    let eps_f: Vec<Vec<f64>> = (0..4).map(|s| vec![-0.2 * s as f64]).collect();
    println!("loss with 4 samples: {:.4}", dist.loss_with_noise(&ann, &eps_d, &eps_f)?);
    Ok(())
}
