//! How a label style enters the network: one-hot planes tiled over the image
//! and stacked behind its channels.

use stylecond::{concat_style, one_hot_tile, split_dataset, Image, LabelStyle, DEFAULT_SPLIT_RATIOS};

fn main() -> stylecond::Result<()> {
    let image = Image::new(3, 4, 4, vec![0.5; 48])?;
    let style = LabelStyle::new(2, 3)?;
    let block = one_hot_tile(style, 4, 4)?;
    let input = concat_style(&image, &block)?;
    println!(
        "{} image channels + {} style planes = {} channels",
        image.channels(),
        input.style_channels(),
        input.channels()
    );
    for p in 0..block.planes() {
        println!("plane {p}: {:?}", &block.data()[p * 16..p * 16 + 4]);
    }
    assert_eq!(input.image(), image);

    let ds = stylecond::curation::generate_synthetic(
        50,
        48,
        &[stylecond::curation::SyntheticStyleSpec::ground_truth()],
        1,
        0,
    )?;
    let split = split_dataset(ds.samples, DEFAULT_SPLIT_RATIOS, 3)?;
    println!(
        "split of 50 images: {} / {} / {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}
