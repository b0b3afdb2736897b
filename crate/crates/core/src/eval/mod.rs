//! Segmentation metrics, binarization and per-class evaluation.

mod metrics;
mod report;

use rayon::prelude::*;

pub use metrics::{binarize, dsc, final_mask, iou};
pub use report::{ClassReport, ClassScore, PairRecord};

use crate::data::{load_images, AnnotatedImage, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::raster::{BinaryMask, Image};
use crate::scalar::Scalar;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "BIASTUNE_THREADS";

/// Anything that maps an (image, prompt) pair to a binary mask.
pub trait Segmenter: Sync {
    fn segment(&self, image: &Image, label: &str) -> Result<BinaryMask>;

    /// Masks for several prompts on one image.
    fn segment_all(&self, image: &Image, labels: &[String]) -> Result<Vec<BinaryMask>> {
        labels.iter().map(|l| self.segment(image, l)).collect()
    }
}

impl<T: Scalar> Segmenter for Model<T> {
    fn segment(&self, image: &Image, label: &str) -> Result<BinaryMask> {
        self.predict_mask(image, label)
    }

    fn segment_all(&self, image: &Image, labels: &[String]) -> Result<Vec<BinaryMask>> {
        let emb = self.encode_image(image)?;
        labels
            .iter()
            .map(|label| {
                let text = self.embed_text(label)?;
                let token = self.encode_prompt(&self.text_affine(&text)?)?;
                let logits = self.decode_mask(&emb, &token)?;
                Ok(binarize(&logits, self.config.mask_threshold))
            })
            .collect()
    }
}

fn score_image<S: Segmenter + ?Sized>(
    model: &S,
    item: &AnnotatedImage,
    vocab: &[String],
) -> Result<Vec<PairRecord>> {
    let preds = model.segment_all(&item.image, vocab)?;
    vocab
        .iter()
        .zip(preds)
        .map(|(label, pred)| {
            let gt = item.mask_for(label);
            Ok(PairRecord {
                image_id: item.id.clone(),
                label: label.clone(),
                present: !gt.is_empty(),
                dsc: dsc(&gt, &pred)?,
                iou: iou(&gt, &pred)?,
                predicted_fraction: pred.foreground_fraction(),
            })
        })
        .collect()
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Scores every (image, label) pair, blank ground truth included, and
/// aggregates per class. Results do not depend on the thread count.
pub fn evaluate<S: Segmenter + ?Sized>(
    model: &S,
    images: &[AnnotatedImage],
    vocab: &[String],
) -> Result<ClassReport> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let run = || -> Result<Vec<Vec<PairRecord>>> {
        images
            .par_iter()
            .map(|item| score_image(model, item, vocab))
            .collect()
    };
    let per_image = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    ClassReport::from_records(vocab, per_image.into_iter().flatten().collect())
}

/// Loads a split and evaluates `model` on it.
pub fn evaluate_manifest<S: Segmenter + ?Sized>(
    model: &S,
    manifest: &DatasetManifest,
) -> Result<ClassReport> {
    let images = load_images(manifest)?;
    evaluate(model, &images, &manifest.class_vocab)
}
