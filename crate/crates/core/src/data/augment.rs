//! Random rotation (±10°) plus saturation and brightness scaling in
//! `[1/2, 2]`, applied consistently to an image and its masks.

use rand::Rng;

use super::{AnnotatedImage, SegmentationSample};
use crate::raster::{BinaryMask, Image};

pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const MIN_SCALE: f64 = 0.5;
pub const MAX_SCALE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub saturation: f64,
    pub brightness: f64,
}

impl AugmentParams {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            saturation: rng.random_range(MIN_SCALE..=MAX_SCALE),
            brightness: rng.random_range(MIN_SCALE..=MAX_SCALE),
        }
    }
}

/// Maps an output pixel centre back to source coordinates.
fn source_coords(y: usize, x: usize, h: usize, w: usize, cos: f64, sin: f64) -> (f64, f64) {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let dy = y as f64 - cy;
    let dx = x as f64 - cx;
    // inverse rotation
    let sx = cos * dx + sin * dy + cx;
    let sy = -sin * dx + cos * dy + cy;
    (sy, sx)
}

pub fn rotate_image(img: &Image, angle_deg: f64) -> Image {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (h, w) = (img.height, img.width);
    let mut out = Image::filled(h, w, 0.0);
    let fetch = |yy: isize, xx: isize| -> [f32; 3] {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            [0.0; 3]
        } else {
            img.pixel(yy as usize, xx as usize)
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source_coords(y, x, h, w, cos, sin);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = (sy - y0) as f32;
            let fx = (sx - x0) as f32;
            let (y0, x0) = (y0 as isize, x0 as isize);
            let p00 = fetch(y0, x0);
            let p01 = fetch(y0, x0 + 1);
            let p10 = fetch(y0 + 1, x0);
            let p11 = fetch(y0 + 1, x0 + 1);
            let mut rgb = [0.0f32; 3];
            for c in 0..3 {
                let top = p00[c] * (1.0 - fx) + p01[c] * fx;
                let bot = p10[c] * (1.0 - fx) + p11[c] * fx;
                rgb[c] = top * (1.0 - fy) + bot * fy;
            }
            out.set_pixel(y, x, rgb);
        }
    }
    out
}

/// Nearest-neighbour rotation; pixels mapped from outside become 0.
pub fn rotate_mask(mask: &BinaryMask, angle_deg: f64) -> BinaryMask {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (h, w) = (mask.height, mask.width);
    let mut out = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source_coords(y, x, h, w, cos, sin);
            let (sy, sx) = (sy.round(), sx.round());
            if sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w {
                out.set(y, x, mask.get(sy as usize, sx as usize));
            }
        }
    }
    out
}

/// Saturation blend around luma, brightness scaling, then clipping to `[0, 1]`.
pub fn adjust_colors(img: &mut Image, saturation: f64, brightness: f64) {
    let (s, b) = (saturation as f32, brightness as f32);
    for px in img.data.chunks_mut(3) {
        let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            *v = ((gray + s * (*v - gray)) * b).clamp(0.0, 1.0);
        }
    }
}

pub fn augment_parts<R: Rng>(
    image: &Image,
    masks: &[&BinaryMask],
    rng: &mut R,
) -> (Image, Vec<BinaryMask>, AugmentParams) {
    let params = AugmentParams::sample(rng);
    let mut out = rotate_image(image, params.angle_deg);
    adjust_colors(&mut out, params.saturation, params.brightness);
    let masks = masks
        .iter()
        .map(|m| rotate_mask(m, params.angle_deg))
        .collect();
    (out, masks, params)
}

pub fn augment<R: Rng>(sample: &SegmentationSample, rng: &mut R) -> SegmentationSample {
    let (image, mut masks, _) = augment_parts(&sample.image, &[&sample.mask], rng);
    SegmentationSample {
        image: std::sync::Arc::new(image),
        label: sample.label.clone(),
        mask: masks.pop().expect("one mask in, one out"),
    }
}

/// Augments an image and all of its class masks with one parameter draw.
pub fn augment_annotated<R: Rng>(item: &AnnotatedImage, rng: &mut R) -> AnnotatedImage {
    let labels: Vec<&String> = item.masks.keys().collect();
    let masks: Vec<&BinaryMask> = item.masks.values().collect();
    let (image, masks, _) = augment_parts(&item.image, &masks, rng);
    AnnotatedImage {
        id: item.id.clone(),
        image,
        masks: labels.into_iter().cloned().zip(masks).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disk_sample() -> SegmentationSample {
        let mut img = Image::filled(32, 32, 0.2);
        let mut mask = BinaryMask::zeros(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                let (dy, dx) = (y as f64 - 15.5, x as f64 - 15.5);
                if dy * dy + dx * dx <= 64.0 {
                    mask.set(y, x, true);
                    img.set_pixel(y, x, [0.9, 0.2, 0.2]);
                }
            }
        }
        SegmentationSample {
            image: std::sync::Arc::new(img),
            label: "disk".into(),
            mask,
        }
    }

    #[test]
    fn same_seed_same_output() {
        let s = disk_sample();
        let a = augment(&s, &mut ChaCha8Rng::seed_from_u64(5));
        let b = augment(&s, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(*a.image, *b.image);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn blank_stays_blank() {
        let mut s = disk_sample();
        s.mask = BinaryMask::zeros(32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            assert!(augment(&s, &mut rng).mask.is_empty());
        }
    }

    #[test]
    fn zero_rotation_is_identity_on_masks() {
        let s = disk_sample();
        assert_eq!(rotate_mask(&s.mask, 0.0), s.mask);
    }

    #[test]
    fn parameters_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = AugmentParams::sample(&mut rng);
            assert!(p.angle_deg.abs() <= MAX_ROTATION_DEG);
            assert!((MIN_SCALE..=MAX_SCALE).contains(&p.saturation));
            assert!((MIN_SCALE..=MAX_SCALE).contains(&p.brightness));
        }
    }
}
