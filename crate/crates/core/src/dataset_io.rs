//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<sample_id>/image.png
//! <root>/<sample_id>/ann_<k>_style<l>.png
//! ```
//!
//! Images are 8-bit grayscale or RGB, masks 8-bit grayscale with 0 for
//! background and 255 for foreground (any value above 127 reads as
//! foreground). The manifest lists every sample, its annotation files and
//! styles, and optionally its split membership.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::curation::LabelMap;
use crate::types::{AnnotatedSample, Annotation, DatasetSplit, Image, LabelStyle, SegmentationMask};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestAnnotation {
    pub file: String,
    pub style: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitName>,
    pub annotations: Vec<ManifestAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_styles: usize,
    pub image_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    pub samples: Vec<ManifestEntry>,
}

fn annotation_file(k: usize, style: usize) -> String {
    format!("ann_{k}_style{style}.png")
}

/// Writes samples (and, when given, their split membership) under `root`.
pub fn write_dataset(root: &Path, samples: &[AnnotatedSample], split_seed: Option<u64>) -> Result<Manifest> {
    write_entries(root, samples.iter().map(|s| (s, None)), split_seed)
}

pub fn write_split(root: &Path, split: &DatasetSplit) -> Result<Manifest> {
    let tagged = split
        .train
        .iter()
        .map(|s| (s, Some(SplitName::Train)))
        .chain(split.val.iter().map(|s| (s, Some(SplitName::Val))))
        .chain(split.test.iter().map(|s| (s, Some(SplitName::Test))));
    write_entries(root, tagged, Some(split.seed))
}

fn write_entries<'a>(
    root: &Path,
    samples: impl Iterator<Item = (&'a AnnotatedSample, Option<SplitName>)>,
    split_seed: Option<u64>,
) -> Result<Manifest> {
    fs::create_dir_all(root)?;
    let mut entries = Vec::new();
    let mut num_styles = 0;
    let mut image_channels = 0;
    for (sample, split) in samples {
        let dir = root.join(sample.sample_id());
        fs::create_dir_all(&dir)?;
        save_image_png(&dir.join("image.png"), sample.image())?;
        let mut annotations = Vec::new();
        for (k, ann) in sample.annotations().iter().enumerate() {
            let file = annotation_file(k, ann.style.id());
            save_mask_png(&dir.join(&file), &ann.mask)?;
            annotations.push(ManifestAnnotation {
                file,
                style: ann.style.id(),
            });
        }
        num_styles = sample.num_styles();
        image_channels = sample.image().channels();
        entries.push(ManifestEntry {
            id: sample.sample_id().to_string(),
            split,
            annotations,
        });
    }
    let manifest = Manifest {
        num_styles,
        image_channels,
        split_seed,
        samples: entries,
    };
    fs::write(root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(root.join(MANIFEST_FILE))?)?)
}

/// Reads every sample listed in the manifest, in manifest order.
pub fn read_dataset(root: &Path) -> Result<(Manifest, Vec<AnnotatedSample>)> {
    let manifest = read_manifest(root)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let dir = root.join(&entry.id);
        let image = load_image_png(&dir.join("image.png"), manifest.image_channels)?;
        let mut annotations = Vec::new();
        for ann in &entry.annotations {
            annotations.push(Annotation {
                mask: load_mask_png(&dir.join(&ann.file))?,
                style: LabelStyle::new(ann.style, manifest.num_styles)?,
            });
        }
        samples.push(AnnotatedSample::new(entry.id.clone(), image, annotations)?);
    }
    Ok((manifest, samples))
}

/// Reconstructs the split recorded in the manifest.
pub fn read_split(root: &Path) -> Result<DatasetSplit> {
    let (manifest, samples) = read_dataset(root)?;
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        ratios: [0.0; 3],
        seed: manifest.split_seed.unwrap_or(0),
    };
    for (entry, sample) in manifest.samples.iter().zip(samples) {
        match entry.split {
            Some(SplitName::Train) => split.train.push(sample),
            Some(SplitName::Val) => split.val.push(sample),
            Some(SplitName::Test) => split.test.push(sample),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "sample {} has no split membership in the manifest",
                    entry.id
                )))
            }
        }
    }
    let n = (split.train.len() + split.val.len() + split.test.len()).max(1) as f64;
    split.ratios = [
        split.train.len() as f64 / n,
        split.val.len() as f64 / n,
        split.test.len() as f64 / n,
    ];
    Ok(split)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image_png(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = image.dims();
    match image.channels() {
        1 => {
            let buf: GrayImage =
                ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(image.get(0, y as usize, x as usize))]));
            buf.save(path)?;
        }
        3 => {
            let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let (r, c) = (y as usize, x as usize);
                Rgb([to_u8(image.get(0, r, c)), to_u8(image.get(1, r, c)), to_u8(image.get(2, r, c))])
            });
            buf.save(path)?;
        }
        c => {
            return Err(Error::InvalidImage(format!("cannot store {c}-channel images as PNG")));
        }
    }
    Ok(())
}

pub fn load_image_png(path: &Path, channels: usize) -> Result<Image> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        3 => {
            let rgb = img.to_rgb8();
            let mut data = vec![0.0; 3 * h * w];
            for (x, y, px) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
                }
            }
            data
        }
        c => return Err(Error::InvalidImage(format!("unsupported channel count {c}"))),
    };
    Image::new(channels, h, w, data)
}

pub fn save_mask_png(path: &Path, mask: &SegmentationMask) -> Result<()> {
    let (h, w) = mask.dims();
    let buf: GrayImage =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }]));
    buf.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<SegmentationMask> {
    let gray = image::open(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    SegmentationMask::new(h, w, gray.into_raw().into_iter().map(|v| (v > 127) as u8).collect())
}

/// Instance label image (8- or 16-bit grey), zero is background. 8-bit
/// values are widened, which keeps distinct labels distinct.
pub fn load_label_map_png(path: &Path) -> Result<LabelMap> {
    let gray = image::open(path)?.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    LabelMap::new(h, w, gray.into_raw().into_iter().map(u32::from).collect())
}

