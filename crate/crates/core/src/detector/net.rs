use rand::Rng;
use tape::{Graph, Real, Roi, Tensor, Var};

use super::boxes::{anchors, clip_corners, decode, ROI_WEIGHTS, RPN_WEIGHTS};
use super::targets::{plan_image, ImagePlan};
use super::{Bound, DetectorConfig, ParamStore, ROI_STAGE, ROI_STRIDE, RPN_STRIDE};
use crate::geom::{nms, nms_indices, BoundingBox, Detection, LabeledSample};
use crate::image::Image;
use crate::{Error, Result};

/// How normalization layers get their statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    /// Statistics of the current batch (source pretraining).
    Batch,
    /// Stored running statistics.
    Frozen,
}

/// Transformation applied to the stage-1 output before stage 2.
pub type Hook<'a, T> = &'a mut dyn FnMut(&mut Graph<T>, Var) -> Var;

pub struct BackboneOut<T> {
    /// Stage-1 output as produced by the convolutions.
    pub stage1_pre_hook: Var,
    /// Stage outputs; entry 0 is what stage 2 consumed (after the hook).
    pub stages: [Var; 4],
    /// `(layer prefix, batch mean, batch variance)` under [`Norm::Batch`].
    pub batch_stats: Vec<(String, Vec<T>, Vec<T>)>,
}

pub struct RpnOut {
    /// `[N, A, h, w]` logits.
    pub objectness: Var,
    /// `[N, 4A, h, w]` deltas, four consecutive channels per anchor size.
    pub deltas: Var,
    pub grid: (usize, usize),
}

pub struct RoiOut {
    /// `[R, C, s, s]`.
    pub pooled: Var,
    /// `[R, K+1]`.
    pub cls_logits: Var,
    /// `[R, 4]`, class agnostic.
    pub box_deltas: Var,
}

pub struct TrainForward<T> {
    pub backbone: BackboneOut<T>,
    pub rpn: RpnOut,
    pub anchors: Vec<BoundingBox>,
    pub proposals: Vec<Vec<(BoundingBox, f64)>>,
    pub image_hw: (usize, usize),
}

pub struct DetLoss {
    pub cls: Var,
    pub reg: Var,
}

/// Stacks same-shape images into `[N, 3, H, W]`, centred on zero.
pub fn images_to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    if h < 32 || w < 32 {
        return Err(Error::Shape(format!("image {h}x{w} below the 32-pixel minimum")));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if !img.same_shape(first) {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} with {}x{}",
                img.height(),
                img.width()
            )));
        }
        data.extend(img.data().iter().map(|&v| T::lit(v as f64 - 0.5)));
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data))
}

pub fn backbone_forward<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    ps: &ParamStore<T>,
    cfg: &DetectorConfig,
    x: Var,
    norm: Norm,
    mut hook: Option<Hook<T>>,
) -> BackboneOut<T> {
    let eps = T::lit(cfg.bn_eps);
    let mut h = x;
    let mut stages = [x; 4];
    let mut pre = x;
    let mut batch_stats = Vec::new();
    for s in 0..4 {
        for k in 1..=2 {
            let p = format!("backbone.s{}", s + 1);
            let stride = if k == 1 { 2 } else { 1 };
            let y = g.conv2d(h, b.var(&format!("{p}.conv{k}.weight")), None, stride, 1);
            let bn = format!("{p}.bn{k}");
            let (gamma, beta) = (b.var(&format!("{bn}.gamma")), b.var(&format!("{bn}.beta")));
            let y = match norm {
                Norm::Batch => {
                    let (y, m, v) = g.batch_norm(y, gamma, beta, eps);
                    batch_stats.push((bn, m, v));
                    y
                }
                Norm::Frozen => {
                    let rm = ps.expect(&format!("{bn}.running_mean")).data();
                    let rv = ps.expect(&format!("{bn}.running_var")).data();
                    g.channel_affine(y, gamma, beta, rm, rv, eps)
                }
            };
            h = g.relu(y);
        }
        if s == 0 {
            pre = h;
            if let Some(f) = hook.as_mut() {
                h = f(g, h);
            }
        }
        stages[s] = h;
    }
    BackboneOut {
        stage1_pre_hook: pre,
        stages,
        batch_stats,
    }
}

pub fn rpn_forward<T: Real>(g: &mut Graph<T>, b: &Bound, feat: Var) -> RpnOut {
    let h = g.conv2d(feat, b.var("rpn.conv.weight"), Some(b.var("rpn.conv.bias")), 1, 1);
    let h = g.relu(h);
    let objectness = g.conv2d(h, b.var("rpn.cls.weight"), Some(b.var("rpn.cls.bias")), 1, 0);
    let deltas = g.conv2d(h, b.var("rpn.bbox.weight"), Some(b.var("rpn.bbox.bias")), 1, 0);
    let s = g.shape(objectness);
    let grid = (s[2], s[3]);
    RpnOut {
        objectness,
        deltas,
        grid,
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Decoded, clipped, NMS-filtered proposals per image with objectness.
pub fn proposals<T: Real>(
    g: &Graph<T>,
    cfg: &DetectorConfig,
    rpn: &RpnOut,
    anchors: &[BoundingBox],
    image_hw: (usize, usize),
) -> Vec<Vec<(BoundingBox, f64)>> {
    let obj = g.value(rpn.objectness);
    let del = g.value(rpn.deltas);
    let n = obj.shape()[0];
    let na = anchors.len();
    let hw = rpn.grid.0 * rpn.grid.1;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let o = &obj.data()[i * na..(i + 1) * na];
        let d = &del.data()[i * 4 * na..(i + 1) * 4 * na];
        let mut cands: Vec<(BoundingBox, f64)> = Vec::with_capacity(na);
        for (k, anchor) in anchors.iter().enumerate() {
            let (a, cell) = (k / hw, k % hw);
            let dk = |j: usize| d[(4 * a + j) * hw + cell].to_f64().unwrap();
            let corners = decode(anchor, [dk(0), dk(1), dk(2), dk(3)], RPN_WEIGHTS);
            let score = o[k].to_f64().unwrap();
            if let Some(bx) = clip_corners(corners, image_hw.0, image_hw.1, 1.0) {
                if score.is_finite() {
                    cands.push((bx, score));
                }
            }
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1));
        cands.truncate(cfg.rpn_pre_nms);
        let boxes: Vec<BoundingBox> = cands.iter().map(|c| c.0).collect();
        let scores: Vec<f64> = cands.iter().map(|c| c.1).collect();
        let keep = nms_indices(&boxes, &scores, cfg.rpn_nms);
        out.push(
            keep.into_iter()
                .take(cfg.rpn_post_nms)
                .map(|k| (boxes[k], sigmoid(scores[k])))
                .collect(),
        );
    }
    out
}

/// Pools `rois` (batch index, box in image pixels) from `feat` and runs
/// the two-layer head.
pub fn roi_head<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &DetectorConfig,
    feat: Var,
    rois: &[(usize, BoundingBox)],
) -> RoiOut {
    let rr: Vec<Roi<T>> = rois
        .iter()
        .map(|&(batch, bx)| Roi {
            batch,
            x1: T::lit(bx.x1),
            y1: T::lit(bx.y1),
            x2: T::lit(bx.x2),
            y2: T::lit(bx.y2),
        })
        .collect();
    let s = cfg.roi_size;
    let pooled = g.roi_align(feat, &rr, T::lit(1.0 / ROI_STRIDE), (s, s), cfg.roi_sampling);
    let c = g.shape(feat)[1];
    let flat = g.reshape(pooled, &[rois.len(), c * s * s]);
    let h = g.linear(flat, b.var("roi.fc1.weight"), Some(b.var("roi.fc1.bias")));
    let h = g.relu(h);
    let h = g.linear(h, b.var("roi.fc2.weight"), Some(b.var("roi.fc2.bias")));
    let h = g.relu(h);
    let cls_logits = g.linear(h, b.var("roi.cls.weight"), Some(b.var("roi.cls.bias")));
    let box_deltas = g.linear(h, b.var("roi.bbox.weight"), Some(b.var("roi.bbox.bias")));
    RoiOut {
        pooled,
        cls_logits,
        box_deltas,
    }
}

/// Backbone, proposal head and proposals for a batch.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    ps: &ParamStore<T>,
    cfg: &DetectorConfig,
    images: &[&Image],
    norm: Norm,
    hook: Option<Hook<T>>,
) -> Result<TrainForward<T>> {
    let x = images_to_tensor::<T>(images)?;
    let image_hw = (x.shape()[2], x.shape()[3]);
    let x = g.constant(x);
    let backbone = backbone_forward(g, b, ps, cfg, x, norm, hook);
    let rpn = rpn_forward(g, b, backbone.stages[3]);
    let anchors = anchors(&cfg.anchor_sizes, rpn.grid.0, rpn.grid.1, RPN_STRIDE);
    let proposals = proposals(g, cfg, &rpn, &anchors, image_hw);
    Ok(TrainForward {
        backbone,
        rpn,
        anchors,
        proposals,
        image_hw,
    })
}

/// Weighted sum over images of the proposal-head and box-head losses.
/// Images with weight 0 contribute nothing.
pub fn detection_loss<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &DetectorConfig,
    fwd: &TrainForward<T>,
    plans: &[ImagePlan],
    weights: &[f64],
) -> DetLoss {
    assert_eq!(plans.len(), weights.len());
    let na = fwd.anchors.len();
    let hw = fwd.rpn.grid.0 * fwd.rpn.grid.1;
    let beta = T::lit(1.0 / 9.0);
    let mut cls_terms = Vec::new();
    let mut reg_terms = Vec::new();
    let mut rois = Vec::new();
    let mut roi_labels = Vec::new();
    let mut roi_weights = Vec::new();
    let mut reg_idx = Vec::new();
    let mut reg_tgt = Vec::new();
    let mut reg_scale = Vec::new();
    for (i, (plan, &w)) in plans.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        if !plan.rpn_idx.is_empty() {
            let scale = T::lit(w / plan.rpn_idx.len() as f64);
            let idx: Vec<usize> = plan.rpn_idx.iter().map(|&k| i * na + k).collect();
            let tgt: Vec<T> = plan.rpn_labels.iter().map(|&l| T::lit(l)).collect();
            cls_terms.push(g.sigmoid_bce(fwd.rpn.objectness, &idx, &tgt, scale));
            if !plan.rpn_reg.is_empty() {
                let mut idx = Vec::with_capacity(4 * plan.rpn_reg.len());
                let mut tgt = Vec::with_capacity(4 * plan.rpn_reg.len());
                for &(k, d) in &plan.rpn_reg {
                    let (a, cell) = (k / hw, k % hw);
                    for (j, &dj) in d.iter().enumerate() {
                        idx.push(i * 4 * na + (4 * a + j) * hw + cell);
                        tgt.push(T::lit(dj));
                    }
                }
                reg_terms.push(g.smooth_l1(fwd.rpn.deltas, &idx, &tgt, beta, scale));
            }
        }
        if !plan.rois.is_empty() {
            let per = w / plan.rois.len() as f64;
            let base = rois.len();
            for (r, &bx) in plan.rois.iter().enumerate() {
                rois.push((i, bx));
                roi_labels.push(plan.roi_labels[r]);
                roi_weights.push(T::lit(per));
            }
            for &(r, d) in &plan.roi_reg {
                for (j, &dj) in d.iter().enumerate() {
                    reg_idx.push((base + r) * 4 + j);
                    reg_tgt.push(T::lit(dj));
                    reg_scale.push(per);
                }
            }
        }
    }
    if !rois.is_empty() {
        let head = roi_head(g, b, cfg, fwd.backbone.stages[ROI_STAGE], &rois);
        cls_terms.push(g.softmax_cross_entropy(head.cls_logits, &roi_labels, &roi_weights));
        // group regression rows by their (per-image) scale
        let mut start = 0;
        while start < reg_idx.len() {
            let mut end = start;
            while end < reg_idx.len() && reg_scale[end] == reg_scale[start] {
                end += 1;
            }
            reg_terms.push(g.smooth_l1(
                head.box_deltas,
                &reg_idx[start..end],
                &reg_tgt[start..end],
                beta,
                T::lit(reg_scale[start]),
            ));
            start = end;
        }
    }
    DetLoss {
        cls: g.add_all(&cls_terms),
        reg: g.add_all(&reg_terms),
    }
}

/// Forward pass plus sampled-target loss against each sample's boxes.
#[allow(clippy::too_many_arguments)]
pub fn supervised_loss<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    ps: &ParamStore<T>,
    cfg: &DetectorConfig,
    samples: &[&LabeledSample],
    weights: &[f64],
    norm: Norm,
    hook: Option<Hook<T>>,
    rng: &mut impl Rng,
) -> Result<(DetLoss, TrainForward<T>)> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let fwd = forward(g, b, ps, cfg, &images, norm, hook)?;
    let plans: Vec<ImagePlan> = samples
        .iter()
        .zip(&fwd.proposals)
        .zip(weights)
        .map(|((s, props), &w)| {
            if w == 0.0 {
                return ImagePlan::default();
            }
            let props: Vec<BoundingBox> = props.iter().map(|p| p.0).collect();
            plan_image(cfg, &fwd.anchors, &props, &s.boxes, &s.classes, rng)
        })
        .collect();
    let loss = detection_loss(g, b, cfg, &fwd, &plans, weights);
    Ok((loss, fwd))
}

/// Inference on an existing graph; also returns the backbone maps so
/// callers can pool features from the same pass.
#[allow(clippy::too_many_arguments)]
pub fn predict_with<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    ps: &ParamStore<T>,
    cfg: &DetectorConfig,
    images: &[&Image],
    score_thresh: f64,
    nms_thresh: f64,
) -> Result<(Vec<Vec<Detection>>, BackboneOut<T>)> {
    let fwd = forward(g, b, ps, cfg, images, Norm::Frozen, None)?;
    let (ih, iw) = fwd.image_hw;
    let rois: Vec<(usize, BoundingBox)> = fwd
        .proposals
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.iter().map(move |&(bx, _)| (i, bx)))
        .collect();
    let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); images.len()];
    if !rois.is_empty() {
        let head = roi_head(g, b, cfg, fwd.backbone.stages[ROI_STAGE], &rois);
        let logits = g.value(head.cls_logits).data();
        let deltas = g.value(head.box_deltas).data();
        let k = cfg.num_classes + 1;
        for (r, &(i, prop)) in rois.iter().enumerate() {
            let row: Vec<f64> = logits[r * k..(r + 1) * k].iter().map(|v| v.to_f64().unwrap()).collect();
            let d: Vec<f64> = deltas[r * 4..(r + 1) * 4].iter().map(|v| v.to_f64().unwrap()).collect();
            let Some(bx) = clip_corners(decode(&prop, [d[0], d[1], d[2], d[3]], ROI_WEIGHTS), ih, iw, 1.0) else {
                continue;
            };
            for c in 1..k {
                // softmax probability of class c; strictly below 1 by construction
                let z: f64 = row.iter().map(|&l| (l - row[c]).exp()).sum();
                let p = (1.0 / z).min(1.0 - f64::EPSILON);
                if p.is_finite() && p >= score_thresh {
                    per_image[i].push(Detection {
                        bbox: bx,
                        class_id: c as u32,
                        score: p,
                    });
                }
            }
        }
    }
    let out = per_image
        .into_iter()
        .map(|dets| {
            let mut kept = nms(&dets, nms_thresh);
            kept.sort_by(|a, b| b.score.total_cmp(&a.score));
            kept.truncate(cfg.max_detections);
            kept
        })
        .collect();
    Ok((out, fwd.backbone))
}

/// Post-NMS detections per image, scores descending.
pub fn predict<T: Real>(
    ps: &ParamStore<T>,
    cfg: &DetectorConfig,
    images: &[&Image],
    score_thresh: f64,
    nms_thresh: f64,
) -> Result<Vec<Vec<Detection>>> {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, ps, |_| false);
    Ok(predict_with(&mut g, &b, ps, cfg, images, score_thresh, nms_thresh)?.0)
}
