//! Training pairs, blank-label expansion, augmentation, synthetic data and
//! on-disk dataset layout.

pub mod augment;
pub mod io;
pub mod synth;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image};

pub use augment::{augment, augment_annotated, augment_parts, AugmentParams};
pub use io::{load_dataset, load_images, DatasetManifest, ManifestEntry, Split};
pub use synth::{
    generate, make_synthetic_dataset, synthesize_image, ShapeKind, ShapeSpec, VocabSpec,
};

/// One (image, prompt, target) training pair.
#[derive(Clone, Debug)]
pub struct SegmentationSample {
    pub image: Arc<Image>,
    pub label: String,
    pub mask: BinaryMask,
}

impl SegmentationSample {
    pub fn is_blank(&self) -> bool {
        self.mask.is_empty()
    }
}

/// An image with the masks of the classes it contains.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: Image,
    pub masks: BTreeMap<String, BinaryMask>,
}

impl AnnotatedImage {
    /// Ground truth for `label`, all-zero when the class is absent.
    pub fn mask_for(&self, label: &str) -> BinaryMask {
        self.masks
            .get(label)
            .cloned()
            .unwrap_or_else(|| BinaryMask::zeros(self.image.height, self.image.width))
    }
}

/// One pair per vocabulary label, in vocabulary order. Labels missing from
/// `ground_truth` get an all-zero mask.
pub fn expand_blank_labels(
    image: Arc<Image>,
    ground_truth: &BTreeMap<String, BinaryMask>,
    vocab: &[String],
) -> Result<Vec<SegmentationSample>> {
    for (label, mask) in ground_truth {
        if !vocab.contains(label) {
            return Err(Error::UnknownLabel(label.clone()));
        }
        if mask.height != image.height || mask.width != image.width {
            return Err(Error::Shape(format!(
                "mask for {label:?} is {}×{}, image is {}×{}",
                mask.height, mask.width, image.height, image.width
            )));
        }
    }
    Ok(vocab
        .iter()
        .map(|label| SegmentationSample {
            image: Arc::clone(&image),
            label: label.clone(),
            mask: ground_truth
                .get(label)
                .cloned()
                .unwrap_or_else(|| BinaryMask::zeros(image.height, image.width)),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vec<String> {
        ["Grasper", "Forceps", "Scissors"]
            .map(String::from)
            .to_vec()
    }

    fn blob() -> BinaryMask {
        let mut m = BinaryMask::zeros(4, 4);
        m.set(1, 1, true);
        m
    }

    #[test]
    fn absent_classes_become_blank_pairs() {
        let img = Arc::new(Image::filled(4, 4, 0.5));
        let gt = BTreeMap::from([("Grasper".to_string(), blob())]);
        let pairs = expand_blank_labels(img, &gt, &vocab()).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs.iter().filter(|p| p.is_blank()).count(), 2);
        let labels: Vec<_> = pairs.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, ["Grasper", "Forceps", "Scissors"]);
        assert_eq!(pairs[0].mask, blob());
    }

    #[test]
    fn full_and_empty_ground_truth() {
        let img = Arc::new(Image::filled(4, 4, 0.5));
        let gt: BTreeMap<_, _> = vocab().into_iter().map(|l| (l, blob())).collect();
        let pairs = expand_blank_labels(img.clone(), &gt, &vocab()).unwrap();
        assert!(pairs.iter().all(|p| !p.is_blank()));
        let pairs = expand_blank_labels(img, &BTreeMap::new(), &vocab()).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| p.is_blank()));
    }

    #[test]
    fn unknown_ground_truth_label_is_an_error() {
        let img = Arc::new(Image::filled(4, 4, 0.5));
        let gt = BTreeMap::from([("Clipper".to_string(), blob())]);
        assert!(matches!(
            expand_blank_labels(img, &gt, &vocab()),
            Err(Error::UnknownLabel(_))
        ));
    }
}
