//! Boxes, detections and labeled samples, plus the small amount of
//! geometry every other module leans on (IoU, flipping, clipping, NMS).

use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates, corner-coded,
/// origin at the top-left of the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    /// Validated constructor: finite coordinates and strictly positive area.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Invalid(format!("degenerate box {b:?}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }

    /// Mirror across the vertical axis of an image of width `width`.
    pub fn flip_horizontal(&self, width: f64) -> Self {
        Self {
            x1: width - self.x2,
            y1: self.y1,
            x2: width - self.x1,
            y2: self.y2,
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Clamp to `[0,W]×[0,H]`; `None` when nothing of the box remains.
pub fn clip_box(b: &BoundingBox, height: usize, width: usize) -> Option<BoundingBox> {
    let (w, h) = (width as f64, height as f64);
    let c = BoundingBox {
        x1: b.x1.clamp(0.0, w),
        y1: b.y1.clamp(0.0, h),
        x2: b.x2.clamp(0.0, w),
        y2: b.y2.clamp(0.0, h),
    };
    c.is_valid().then_some(c)
}

/// A scored, classified box. Class 0 is background and never emitted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: u32,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, class_id: u32, score: f64) -> Result<Self> {
        if class_id == 0 {
            return Err(Error::Invalid("class id 0 is background".into()));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Invalid(format!("score {score} outside [0,1]")));
        }
        if !bbox.is_valid() {
            return Err(Error::Invalid(format!("degenerate box {bbox:?}")));
        }
        Ok(Self {
            bbox,
            class_id,
            score,
        })
    }
}

/// Greedy per-class suppression in descending score order. Survivors come
/// back grouped by class (ascending id), scores descending within a class.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut classes: Vec<u32> = dets.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut keep = Vec::new();
    for c in classes {
        let mut cand: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        cand.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut kept: Vec<Detection> = Vec::new();
        for d in cand {
            if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh) {
                kept.push(*d);
            }
        }
        keep.extend(kept);
    }
    keep
}

/// Class-agnostic NMS over raw boxes; returns kept indices in score order.
pub(crate) fn nms_indices(boxes: &[BoundingBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// An image with (possibly pseudo) hard labels and the sample weight ω.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub boxes: Vec<BoundingBox>,
    pub classes: Vec<u32>,
    pub weight: f32,
}

impl LabeledSample {
    pub fn new(image: Image, boxes: Vec<BoundingBox>, classes: Vec<u32>) -> Result<Self> {
        if boxes.len() != classes.len() {
            return Err(Error::Invalid(format!(
                "{} boxes but {} classes",
                boxes.len(),
                classes.len()
            )));
        }
        Ok(Self {
            image,
            boxes,
            classes,
            weight: 1.0,
        })
    }

    pub fn unlabeled(image: Image) -> Self {
        Self {
            image,
            boxes: Vec::new(),
            classes: Vec::new(),
            weight: 1.0,
        }
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Mirrors the image on its width axis and remaps every box.
pub fn flip_horizontal(sample: &LabeledSample) -> LabeledSample {
    let w = sample.width() as f64;
    LabeledSample {
        image: sample.image.flip_horizontal(),
        boxes: sample.boxes.iter().map(|b| b.flip_horizontal(w)).collect(),
        classes: sample.classes.clone(),
        weight: sample.weight,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BoundingBox, c: u32, s: f64) -> Detection {
        Detection::new(b, c, s).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(20., 20., 30., 30.)), 0.0);
        let v = iou(&bx(0., 0., 10., 10.), &bx(5., 5., 15., 15.));
        assert!((v - 25.0 / 175.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(0., 0., 0., 5.).is_err());
        assert!(BoundingBox::new(0., 0., f64::NAN, 5.).is_err());
        assert!(Detection::new(bx(0., 0., 1., 1.), 0, 0.5).is_err());
        assert!(Detection::new(bx(0., 0., 1., 1.), 1, 1.5).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_box(&bx(-5., -5., 10., 10.), 20, 20), Some(bx(0., 0., 10., 10.)));
        assert_eq!(clip_box(&bx(30., 30., 40., 40.), 20, 20), None);
        assert_eq!(clip_box(&bx(0., 0., 10., 10.), 20, 20), Some(bx(0., 0., 10., 10.)));
    }

    #[test]
    fn flip_examples() {
        let img = Image::from_fn(10, 100, |c, y, x| (c * 1000 + y * 100 + x) as f32 / 4000.0);
        let s = LabeledSample::new(img, vec![bx(10., 5., 20., 15.)], vec![1]).unwrap();
        let f = flip_horizontal(&s);
        assert_eq!(f.boxes, vec![bx(80., 5., 90., 15.)]);
        assert_eq!(f.classes, s.classes);
        assert_eq!(f.image.get(0, 3, 0), s.image.get(0, 3, 99));
        assert_eq!(flip_horizontal(&f), s);

        let empty = LabeledSample::unlabeled(s.image.clone());
        let fe = flip_horizontal(&empty);
        assert!(fe.boxes.is_empty());
        assert_eq!(fe.image, s.image.flip_horizontal());
    }

    #[test]
    fn nms_examples() {
        let a = det(bx(0., 0., 10., 10.), 1, 0.9);
        let b = det(bx(0., 0., 10., 10.), 1, 0.8);
        assert_eq!(nms(&[b, a], 0.5), vec![a]);
        let c = det(bx(50., 50., 60., 60.), 1, 0.3);
        assert_eq!(nms(&[a, c], 0.5), vec![a, c]);
        // same box, different class: both survive
        let d = det(bx(0., 0., 10., 10.), 2, 0.7);
        assert_eq!(nms(&[a, d], 0.5).len(), 2);
    }

    /// Exhaustive oracle: a detection survives iff no higher-scored
    /// surviving detection of its class overlaps it above the threshold,
    /// evaluated by scanning all pairs in score order.
    fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let n = dets.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        let mut alive = vec![true; n];
        for (pos, &i) in order.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            for &j in &order[pos + 1..] {
                if dets[j].class_id == dets[i].class_id && iou(&dets[i].bbox, &dets[j].bbox) > thr {
                    alive[j] = false;
                }
            }
        }
        let mut out: Vec<Detection> = order.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect();
        out.sort_by(|a, b| a.class_id.cmp(&b.class_id).then(b.score.total_cmp(&a.score)));
        out
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64)
            .prop_map(|(x, y, w, h)| BoundingBox { x1: x, y1: y, x2: x + w, y2: y + h })
    }

    fn arb_det() -> impl Strategy<Value = Detection> {
        (arb_box(), 1u32..3, 0.0..1.0f64).prop_map(|(b, c, s)| Detection { bbox: b, class_id: c, score: s })
    }

    // flip arithmetic W - (W - x) is exact on a dyadic grid
    fn arb_grid_box() -> impl Strategy<Value = BoundingBox> {
        (0u32..200, 0u32..200, 1u32..100, 1u32..100).prop_map(|(x, y, w, h)| BoundingBox {
            x1: x as f64 / 4.0,
            y1: y as f64 / 4.0,
            x2: (x + w) as f64 / 4.0,
            y2: (y + h) as f64 / 4.0,
        })
    }

    proptest! {
        #[test]
        fn iou_properties(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn nms_matches_oracle(dets in prop::collection::vec(arb_det(), 5), thr in 0.1..0.9f64) {
            prop_assert_eq!(nms(&dets, thr), nms_oracle(&dets, thr));
        }

        #[test]
        fn nms_survivors_are_subset_and_separated(dets in prop::collection::vec(arb_det(), 0..12), thr in 0.1..0.9f64) {
            let kept = nms(&dets, thr);
            for k in &kept {
                prop_assert!(dets.contains(k));
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    if a.class_id == b.class_id {
                        prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
                    }
                }
            }
        }

        #[test]
        fn flip_is_involution(boxes in prop::collection::vec(arb_grid_box(), 0..5), seed in 0u32..1000) {
            let img = Image::from_fn(8, 80, |c, y, x| ((seed as usize + c * 7 + y * 3 + x) % 11) as f32 / 10.0);
            let classes = vec![1; boxes.len()];
            let s = LabeledSample::new(img, boxes, classes).unwrap();
            prop_assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
        }
    }
}
