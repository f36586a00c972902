use rand::seq::index;
use rand::Rng;

use super::boxes::{encode, ROI_WEIGHTS, RPN_WEIGHTS};
use super::DetectorConfig;
use crate::geom::{iou, BoundingBox};

/// Sampled training targets for one image. Computing these is the only
/// non-differentiable, random part of the loss, so it is kept apart from
/// loss evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImagePlan {
    /// Sampled anchor indices and their objectness labels (1 or 0).
    pub rpn_idx: Vec<usize>,
    pub rpn_labels: Vec<f64>,
    /// Positive anchors with their regression targets.
    pub rpn_reg: Vec<(usize, [f64; 4])>,
    /// Sampled regions with class labels (0 = background).
    pub rois: Vec<BoundingBox>,
    pub roi_labels: Vec<usize>,
    /// Rows of `rois` that are foreground, with regression targets.
    pub roi_reg: Vec<(usize, [f64; 4])>,
}

/// Best IoU and its ground-truth index for each candidate.
fn best_match(cands: &[BoundingBox], gts: &[BoundingBox]) -> Vec<(f64, usize)> {
    cands
        .iter()
        .map(|c| {
            gts.iter()
                .enumerate()
                .map(|(j, g)| (iou(c, g), j))
                .fold((0.0, usize::MAX), |a, b| if b.0 > a.0 { b } else { a })
        })
        .collect()
}

fn sample(rng: &mut impl Rng, pool: &[usize], k: usize) -> Vec<usize> {
    if pool.len() <= k {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

pub fn plan_image(
    cfg: &DetectorConfig,
    anchors: &[BoundingBox],
    proposals: &[BoundingBox],
    gt_boxes: &[BoundingBox],
    gt_classes: &[u32],
    rng: &mut impl Rng,
) -> ImagePlan {
    assert_eq!(gt_boxes.len(), gt_classes.len());
    let mut plan = ImagePlan::default();

    // proposal head: -1 ignore, 0 negative, 1 positive
    let matches = best_match(anchors, gt_boxes);
    let mut label: Vec<i8> = matches
        .iter()
        .map(|&(m, _)| {
            if m >= cfg.rpn_fg_iou {
                1
            } else if m < cfg.rpn_bg_iou {
                0
            } else {
                -1
            }
        })
        .collect();
    let mut matched: Vec<usize> = matches.iter().map(|&(_, j)| j).collect();
    // every ground truth keeps its best anchor(s), however poor the overlap
    for (j, g) in gt_boxes.iter().enumerate() {
        let ious: Vec<f64> = anchors.iter().map(|a| iou(a, g)).collect();
        let best = ious.iter().copied().fold(0.0, f64::max);
        if best > 0.0 {
            for (i, &v) in ious.iter().enumerate() {
                if v == best {
                    label[i] = 1;
                    if matches[i].0 < cfg.rpn_fg_iou {
                        matched[i] = j;
                    }
                }
            }
        }
    }
    let pos: Vec<usize> = (0..anchors.len()).filter(|&i| label[i] == 1).collect();
    let neg: Vec<usize> = (0..anchors.len()).filter(|&i| label[i] == 0).collect();
    let max_pos = (cfg.rpn_batch as f64 * cfg.rpn_pos_fraction) as usize;
    let pos = sample(rng, &pos, max_pos);
    let neg = sample(rng, &neg, cfg.rpn_batch - pos.len());
    for &i in &pos {
        plan.rpn_idx.push(i);
        plan.rpn_labels.push(1.0);
        plan.rpn_reg.push((i, encode(&anchors[i], &gt_boxes[matched[i]], RPN_WEIGHTS)));
    }
    for &i in &neg {
        plan.rpn_idx.push(i);
        plan.rpn_labels.push(0.0);
    }

    // box head: proposals plus the ground truth itself
    let cands: Vec<BoundingBox> = proposals.iter().chain(gt_boxes).copied().collect();
    let matches = best_match(&cands, gt_boxes);
    let fg: Vec<usize> = (0..cands.len())
        .filter(|&i| !gt_boxes.is_empty() && matches[i].0 >= cfg.roi_fg_iou)
        .collect();
    let bg: Vec<usize> = (0..cands.len()).filter(|&i| matches[i].0 < cfg.roi_bg_iou).collect();
    let max_fg = (cfg.roi_batch as f64 * cfg.roi_pos_fraction) as usize;
    let fg = sample(rng, &fg, max_fg);
    let bg = sample(rng, &bg, cfg.roi_batch - fg.len());
    for &i in &fg {
        let j = matches[i].1;
        plan.roi_reg.push((plan.rois.len(), encode(&cands[i], &gt_boxes[j], ROI_WEIGHTS)));
        plan.rois.push(cands[i]);
        plan.roi_labels.push(gt_classes[j] as usize);
    }
    for &i in &bg {
        plan.rois.push(cands[i]);
        plan.roi_labels.push(0);
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bb(a: [f64; 4]) -> BoundingBox {
        BoundingBox::new(a[0], a[1], a[2], a[3]).unwrap()
    }

    #[test]
    fn empty_targets_give_background_only() {
        let cfg = DetectorConfig::default();
        let anchors = super::super::boxes::anchors(&cfg.anchor_sizes, 8, 8, 16.0);
        let props = vec![bb([0., 0., 20., 20.]), bb([40., 40., 70., 60.])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = plan_image(&cfg, &anchors, &props, &[], &[], &mut rng);
        assert_eq!(p.rpn_idx.len(), cfg.rpn_batch);
        assert!(p.rpn_labels.iter().all(|&l| l == 0.0));
        assert!(p.rpn_reg.is_empty() && p.roi_reg.is_empty());
        assert_eq!(p.roi_labels, vec![0, 0]);
    }

    #[test]
    fn every_gt_gets_a_positive_anchor_and_roi() {
        let cfg = DetectorConfig::default();
        let anchors = super::super::boxes::anchors(&cfg.anchor_sizes, 8, 8, 16.0);
        let gts = vec![bb([3., 5., 17., 13.]), bb([60., 60., 94., 90.])];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = plan_image(&cfg, &anchors, &[], &gts, &[1, 2], &mut rng);
        assert!(p.rpn_reg.len() >= 2);
        let mut labels = p.roi_labels.clone();
        labels.sort();
        assert_eq!(labels, vec![1, 2]);
        // a ground-truth ROI regresses onto itself
        assert!(p.roi_reg.iter().all(|(_, d)| d.iter().all(|v| v.abs() < 1e-12)));
    }

    #[test]
    fn sampling_respects_budget() {
        let cfg = DetectorConfig {
            roi_batch: 8,
            ..DetectorConfig::default()
        };
        let anchors = super::super::boxes::anchors(&cfg.anchor_sizes, 8, 8, 16.0);
        let gts = vec![bb([10., 10., 40., 40.])];
        let props: Vec<_> = (0..30)
            .map(|i| bb([10. + i as f64 * 0.1, 10., 40., 40.]))
            .chain((0..30).map(|i| bb([80., 80. + i as f64, 100., 110. + i as f64 * 0.5])))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = plan_image(&cfg, &anchors, &props, &gts, &[1], &mut rng);
        assert_eq!(p.rois.len(), 8);
        assert_eq!(p.roi_reg.len(), 4);
        assert_eq!(p.roi_labels.iter().filter(|&&l| l == 1).count(), 4);
    }
}
