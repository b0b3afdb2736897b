//! Overlap metrics and mask binarization.

use crate::error::{Error, Result};
use crate::model::MaskLogits;
use crate::raster::BinaryMask;
use crate::scalar::Scalar;

fn counts(y: &BinaryMask, y_hat: &BinaryMask) -> Result<(usize, usize, usize)> {
    if !y.same_shape(y_hat) {
        return Err(Error::Shape(format!(
            "masks are {}×{} and {}×{}",
            y.height, y.width, y_hat.height, y_hat.width
        )));
    }
    let (mut a, mut b, mut both) = (0, 0, 0);
    for (&p, &q) in y.data.iter().zip(&y_hat.data) {
        let (p, q) = (p != 0, q != 0);
        a += p as usize;
        b += q as usize;
        both += (p && q) as usize;
    }
    Ok((a, b, both))
}

/// Dice score `2|Y∩Ŷ| / (|Y|+|Ŷ|)`; 1 when both masks are empty.
pub fn dsc(y: &BinaryMask, y_hat: &BinaryMask) -> Result<f64> {
    let (a, b, both) = counts(y, y_hat)?;
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    })
}

/// Intersection over union; 1 when the union is empty.
pub fn iou(y: &BinaryMask, y_hat: &BinaryMask) -> Result<f64> {
    let (a, b, both) = counts(y, y_hat)?;
    let union = a + b - both;
    Ok(if union == 0 {
        1.0
    } else {
        both as f64 / union as f64
    })
}

/// Foreground iff `sigmoid(logit) >= threshold`.
pub fn binarize<T: Scalar>(logits: &MaskLogits<T>, threshold: f64) -> BinaryMask {
    let data = logits
        .data
        .iter()
        .map(|&z| {
            let p = 1.0 / (1.0 + (-z.as_f64()).exp());
            (p >= threshold) as u8
        })
        .collect();
    BinaryMask {
        height: logits.height,
        width: logits.width,
        data,
    }
}

/// Class-`index` mask of the per-pixel argmax over `scores` (`C×H×W`,
/// class-major). Ties go to the lowest class index.
pub fn final_mask<T: Scalar>(
    scores: &[T],
    classes: usize,
    height: usize,
    width: usize,
    index: usize,
) -> Result<BinaryMask> {
    if index >= classes {
        return Err(Error::Shape(format!(
            "class index {index} out of range for {classes} classes"
        )));
    }
    let hw = height * width;
    if scores.len() != classes * hw {
        return Err(Error::Shape(format!(
            "score volume has {} values, expected {classes}×{height}×{width}",
            scores.len()
        )));
    }
    let data = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..classes {
                if scores[c * hw + p] > scores[best * hw + p] {
                    best = c;
                }
            }
            (best == index) as u8
        })
        .collect();
    Ok(BinaryMask {
        height,
        width,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::from_values(1, bits.len(), bits.to_vec()).unwrap()
    }

    #[test]
    fn empty_conventions() {
        let e = mask(&[0, 0, 0]);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn hand_counted_values() {
        let y = mask(&[1, 1, 0, 0]);
        let y_hat = mask(&[0, 1, 1, 0]);
        assert_eq!(dsc(&y, &y_hat).unwrap(), 0.5);
        assert!((iou(&y, &y_hat).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dsc(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(dsc(&mask(&[1]), &mask(&[1, 0])).is_err());
        assert!(iou(&mask(&[1]), &mask(&[1, 0])).is_err());
    }

    #[test]
    fn zero_logit_is_foreground() {
        let z = MaskLogits {
            height: 1,
            width: 3,
            data: vec![0.0f32; 3],
        };
        assert_eq!(binarize(&z, 0.5).count(), 3);
        let n = MaskLogits {
            height: 1,
            width: 3,
            data: vec![-10.0f64; 3],
        };
        assert!(binarize(&n, 0.5).is_empty());
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let scores = [0.9f32, 0.5, 0.2, 0.5];
        assert_eq!(final_mask(&scores, 2, 1, 2, 0).unwrap().data, [1, 1]);
        assert_eq!(final_mask(&scores, 2, 1, 2, 1).unwrap().data, [0, 0]);
        assert_eq!(final_mask(&[0.1f32, 0.3], 1, 1, 2, 0).unwrap().data, [1, 1]);
        assert!(final_mask(&scores, 2, 1, 2, 2).is_err());
    }
}
