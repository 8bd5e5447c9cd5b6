//! Save a model, reload it into a fresh instance, and show that a checkpoint
//! refuses to load into a differently configured model.

use stylecond::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
use stylecond::model::SegmentationModel;
use stylecond::ssn::{Ssn, SsnConfig};
use stylecond::{Image, LabelStyle};

fn model(seed: u64, rank: usize) -> stylecond::Result<Ssn> {
    let mut cfg = SsnConfig::new(1, 2, true);
    cfg.backbone = cfg.backbone.with_base_channels(4).with_depth(3);
    cfg.rank = rank;
    Ssn::new(cfg, seed)
}

fn main() -> stylecond::Result<()> {
    let dir = std::env::temp_dir().join("stylecond_example_ckpt");
    let path = dir.join("ssn.ckpt");
    let a = model(1, 4)?;
    save_checkpoint(&path, &a)?;

    let (header, values) = read_checkpoint(&path)?;
    println!("{} tensors, {} values, kind {:?}", header.params.len(), values.len(), header.kind);

    let mut b = model(2, 4)?;
    load_checkpoint(&path, &mut b)?;
    let image = Image::new(1, 16, 16, (0..256).map(|i| (i % 16) as f64 / 16.0).collect())?;
    let style = LabelStyle::new(1, 2)?;
    assert_eq!(a.sample_logits(&image, style, 3, 9)?, b.sample_logits(&image, style, 3, 9)?);
    println!("reloaded model reproduces the samples");

    let mut other = model(1, 2)?;
    match load_checkpoint(&path, &mut other) {
        Err(e) => println!("rank-2 model rejected it: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
