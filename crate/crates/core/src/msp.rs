//! Image-level perturbation: weak and strong views, and mixed samples whose
//! label is the union of both sources' pseudo-labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{flip_horizontal, BoundingBox, Detection, LabeledSample};
use crate::image::Image;
use crate::{Error, Result};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// One photometric operation with its drawn parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    AutoContrast,
    Brightness { factor: f32 },
    Color { factor: f32 },
    Contrast { factor: f32 },
    Grayscale,
    GaussBlur { sigma: f32 },
}

/// Which strong operations may fire, and with what probability each.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongConfig {
    pub prob: f64,
    pub autocontrast: bool,
    pub brightness: bool,
    pub color: bool,
    pub contrast: bool,
    pub grayscale: bool,
    pub blur: bool,
    pub factor_range: (f32, f32),
    pub sigma_range: (f32, f32),
}

impl Default for StrongConfig {
    fn default() -> Self {
        Self {
            prob: 0.5,
            autocontrast: true,
            brightness: true,
            color: true,
            contrast: true,
            grayscale: true,
            blur: true,
            factor_range: (0.6, 1.4),
            sigma_range: (0.1, 1.0),
        }
    }
}

impl StrongConfig {
    pub fn disabled() -> Self {
        Self {
            autocontrast: false,
            brightness: false,
            color: false,
            contrast: false,
            grayscale: false,
            blur: false,
            ..Self::default()
        }
    }
}

/// Augmentations applied to one image, for the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub flipped: bool,
    pub ops: Vec<AugOp>,
}

pub fn weak_augment_with(sample: &LabeledSample, flip: bool) -> LabeledSample {
    if flip {
        flip_horizontal(sample)
    } else {
        sample.clone()
    }
}

/// Horizontal flip with probability one half.
pub fn weak_augment(sample: &LabeledSample, rng: &mut impl Rng) -> (LabeledSample, bool) {
    let flip = rng.gen_bool(0.5);
    (weak_augment_with(sample, flip), flip)
}

fn luma(img: &Image, y: usize, x: usize) -> f32 {
    (0..3).map(|c| LUMA[c] * img.get(c, y, x)).sum()
}

pub fn apply_op(img: &Image, op: AugOp) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = match op {
        AugOp::AutoContrast => {
            let mut out = img.clone();
            for c in 0..3 {
                let p = out.plane_mut(c);
                let lo = p.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = p.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                if hi > lo {
                    p.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
                }
            }
            out
        }
        AugOp::Brightness { factor } => Image::from_fn(h, w, |c, y, x| factor * img.get(c, y, x)),
        AugOp::Color { factor } => Image::from_fn(h, w, |c, y, x| {
            let l = luma(img, y, x);
            l + factor * (img.get(c, y, x) - l)
        }),
        AugOp::Contrast { factor } => {
            let mean = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .map(|(y, x)| luma(img, y, x) as f64)
                .sum::<f64>() as f32
                / (h * w) as f32;
            Image::from_fn(h, w, |c, y, x| mean + factor * (img.get(c, y, x) - mean))
        }
        AugOp::Grayscale => Image::from_fn(h, w, |_, y, x| luma(img, y, x)),
        AugOp::GaussBlur { sigma } => img.gaussian_blur(sigma),
    };
    out.clamp01();
    out
}

pub fn apply_ops(img: &Image, ops: &[AugOp]) -> Image {
    ops.iter().fold(img.clone(), |acc, &op| apply_op(&acc, op))
}

/// Draws each enabled operation independently; order is fixed.
pub fn draw_ops(cfg: &StrongConfig, rng: &mut impl Rng) -> Vec<AugOp> {
    let mut ops = Vec::new();
    let (flo, fhi) = cfg.factor_range;
    let (slo, shi) = cfg.sigma_range;
    // every draw happens regardless of the switches, so toggling one
    // operation leaves the others' randomness unchanged
    let fire: Vec<bool> = (0..6).map(|_| rng.gen_bool(cfg.prob)).collect();
    let params: Vec<f32> = (0..3).map(|_| rng.gen_range(flo..=fhi)).collect();
    let sigma = rng.gen_range(slo..=shi);
    if cfg.autocontrast && fire[0] {
        ops.push(AugOp::AutoContrast);
    }
    if cfg.brightness && fire[1] {
        ops.push(AugOp::Brightness { factor: params[0] });
    }
    if cfg.color && fire[2] {
        ops.push(AugOp::Color { factor: params[1] });
    }
    if cfg.contrast && fire[3] {
        ops.push(AugOp::Contrast { factor: params[2] });
    }
    if cfg.grayscale && fire[4] {
        ops.push(AugOp::Grayscale);
    }
    if cfg.blur && fire[5] {
        ops.push(AugOp::GaussBlur { sigma });
    }
    ops
}

/// Photometric-only augmentation; boxes are untouched.
pub fn strong_augment(sample: &LabeledSample, cfg: &StrongConfig, rng: &mut impl Rng) -> (LabeledSample, Vec<AugOp>) {
    let ops = draw_ops(cfg, rng);
    let out = LabeledSample {
        image: apply_ops(&sample.image, &ops),
        ..sample.clone()
    };
    (out, ops)
}

/// `lambda * a + (1 - lambda) * b`. Swapping the images and complementing
/// lambda gives the same pixels whenever `1 - (1 - lambda) == lambda`.
pub fn mix_images(a: &Image, b: &Image, lambda: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("mix coefficient {lambda} outside [0, 1]")));
    }
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "cannot mix {}x{} with {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (wa, wb) = (lambda as f32, (1.0 - lambda) as f32);
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| wa * x + wb * y).collect();
    Image::new(a.height(), a.width(), data)
}

/// Hard union of two pseudo-label sets, in order, without deduplication.
pub fn mix_labels(pl_i: &[Detection], pl_j: &[Detection]) -> (Vec<BoundingBox>, Vec<u32>) {
    pl_i.iter().chain(pl_j).map(|d| (d.bbox, d.class_id)).unzip()
}

/// Mixed training sample. The second image (and its labels) is resized to
/// the first image's shape when they differ.
pub fn mix_samples(
    a: &Image,
    pl_a: &[Detection],
    b: &Image,
    pl_b: &[Detection],
    lambda: f64,
) -> Result<LabeledSample> {
    let (sy, sx) = (a.height() as f64 / b.height() as f64, a.width() as f64 / b.width() as f64);
    let (b_img, pl_b) = if a.same_shape(b) {
        (b.clone(), pl_b.to_vec())
    } else {
        let scaled = pl_b
            .iter()
            .map(|d| Detection {
                bbox: BoundingBox {
                    x1: d.bbox.x1 * sx,
                    y1: d.bbox.y1 * sy,
                    x2: d.bbox.x2 * sx,
                    y2: d.bbox.y2 * sy,
                },
                ..*d
            })
            .collect();
        (b.resize(a.height(), a.width()), scaled)
    };
    let image = mix_images(a, &b_img, lambda)?;
    let (boxes, classes) = mix_labels(pl_a, &pl_b);
    LabeledSample::new(image, boxes, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * 12 * 10).map(|_| rng.gen_range(0.0..1.0)).collect();
        Image::new(12, 10, data).unwrap()
    }

    fn det(x: f64, c: u32) -> Detection {
        Detection::new(BoundingBox::new(x, 1.0, x + 4.0, 6.0).unwrap(), c, 0.9).unwrap()
    }

    #[test]
    fn weak_view_examples() {
        let s = LabeledSample::new(img(1), vec![BoundingBox::new(1., 2., 4., 5.).unwrap()], vec![1]).unwrap();
        assert_eq!(weak_augment_with(&s, false), s);
        assert_eq!(weak_augment_with(&s, true), flip_horizontal(&s));
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| weak_augment(&s, &mut rng).1).collect::<Vec<_>>()
        };
        assert_eq!(run(4), run(4));
    }

    #[test]
    fn strong_view_examples() {
        let s = LabeledSample::unlabeled(img(2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, ops) = strong_augment(&s, &StrongConfig::disabled(), &mut rng);
        assert!(ops.is_empty());
        assert_eq!(out, s);
        let g = apply_op(&s.image, AugOp::Grayscale);
        for y in 0..12 {
            for x in 0..10 {
                assert_eq!(g.get(0, y, x), g.get(1, y, x));
                assert_eq!(g.get(1, y, x), g.get(2, y, x));
            }
        }
    }

    #[test]
    fn mix_examples() {
        let a = Image::filled(4, 4, [0.2; 3]);
        let b = Image::filled(4, 4, [0.6; 3]);
        let m = mix_images(&a, &b, 0.5).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
        assert_eq!(mix_images(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mix_images(&a, &b, 0.0).unwrap(), b);
        assert!(mix_images(&a, &Image::filled(4, 5, [0.0; 3]), 0.5).is_err());
    }

    #[test]
    fn label_union_examples() {
        let (a, b) = (det(1.0, 1), det(5.0, 2));
        let (boxes, classes) = mix_labels(&[a], &[b]);
        assert_eq!(boxes, vec![a.bbox, b.bbox]);
        assert_eq!(classes, vec![1, 2]);
        assert_eq!(mix_labels(&[], &[b]).1, vec![2]);
        assert!(mix_labels(&[], &[]).0.is_empty());
    }

    #[test]
    fn unequal_shapes_are_resized() {
        let a = Image::filled(12, 10, [0.5; 3]);
        let b = Image::filled(24, 20, [0.5; 3]);
        let s = mix_samples(&a, &[], &b, &[det(4.0, 1)], 0.5).unwrap();
        assert_eq!(s.boxes[0].to_array(), [2.0, 0.5, 4.0, 3.0]);
    }

    proptest! {
        #[test]
        fn mixing_is_symmetric(sa in 0u64..1000, sb in 0u64..1000, k in 0u32..=1024) {
            let lambda = k as f64 / 1024.0;
            let (a, b) = (img(sa), img(sb));
            prop_assert_eq!(mix_images(&a, &b, lambda).unwrap(), mix_images(&b, &a, 1.0 - lambda).unwrap());
        }

        #[test]
        fn union_length(n in 0usize..6, m in 0usize..6) {
            let pi: Vec<_> = (0..n).map(|i| det(i as f64, 1)).collect();
            let pj: Vec<_> = (0..m).map(|i| det(i as f64, 2)).collect();
            prop_assert_eq!(mix_labels(&pi, &pj).0.len(), n + m);
        }

        #[test]
        fn augmentations_preserve_shape_and_range(seed in 0u64..500) {
            let s = LabeledSample::unlabeled(img(seed));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = StrongConfig { prob: 0.8, ..StrongConfig::default() };
            let (out, _) = strong_augment(&s, &cfg, &mut rng);
            prop_assert!(out.image.same_shape(&s.image));
            prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let (w, _) = weak_augment(&s, &mut rng);
            prop_assert!(w.image.same_shape(&s.image));
        }
    }
}
