#![allow(dead_code)]

use stylecond::model::SegmentationModel;
use stylecond::{AnnotatedSample, Image, LabelStyle, Result, SegmentationMask};

/// Deterministic model whose sample for style `k` marks the first `k + 1` pixels.
pub struct StyleStub {
    pub num_styles: usize,
}

impl SegmentationModel for StyleStub {
    fn name(&self) -> String {
        "style-stub".into()
    }

    fn num_styles(&self) -> usize {
        self.num_styles
    }

    fn is_conditioned(&self) -> bool {
        true
    }

    fn sample_logits(&self, image: &Image, style: LabelStyle, n: usize, _seed: u64) -> Result<Vec<Vec<f64>>> {
        let (h, w) = image.dims();
        let field: Vec<f64> = (0..h * w).map(|i| if i <= style.id() { 15.0 } else { -15.0 }).collect();
        Ok(vec![field; n])
    }

    fn mean_logits(&self, image: &Image, style: LabelStyle) -> Result<Vec<f64>> {
        Ok(self.sample_logits(image, style, 1, 0)?.remove(0))
    }
}

/// Knows the answer: reproduces the first annotation of the requested style.
pub struct OracleModel {
    pub samples: Vec<AnnotatedSample>,
    pub num_styles: usize,
}

impl OracleModel {
    fn lookup(&self, image: &Image, style: LabelStyle) -> &SegmentationMask {
        let s = self.samples.iter().find(|s| s.image() == image).expect("image from the test set");
        s.masks_of_style(style.id()).next().expect("style annotated")
    }
}

impl SegmentationModel for OracleModel {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn num_styles(&self) -> usize {
        self.num_styles
    }

    fn is_conditioned(&self) -> bool {
        true
    }

    fn sample_logits(&self, image: &Image, style: LabelStyle, n: usize, _seed: u64) -> Result<Vec<Vec<f64>>> {
        let field: Vec<f64> = self.lookup(image, style).data().iter().map(|&b| if b == 1 { 15.0 } else { -15.0 }).collect();
        Ok(vec![field; n])
    }

    fn mean_logits(&self, image: &Image, style: LabelStyle) -> Result<Vec<f64>> {
        Ok(self.sample_logits(image, style, 1, 0)?.remove(0))
    }
}
