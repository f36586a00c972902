//! Detection metrics: greedy IoU matching, all-point interpolated AP and
//! precision-recall artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{predict, DetectorConfig, ParamStore};
use crate::geom::{iou, BoundingBox, Detection, LabeledSample};
use crate::{Error, Result};

/// TP/FP flag per detection. `dets` must already be in descending score
/// order; each detection takes the best-overlapping still-unmatched ground
/// truth of its class.
pub fn match_detections(dets: &[Detection], gts: &[BoundingBox], gt_classes: &[u32], iou_thresh: f64) -> Vec<bool> {
    assert_eq!(gts.len(), gt_classes.len());
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|&(j, _)| !used[j] && gt_classes[j] == d.class_id)
                .map(|(j, g)| (iou(&d.bbox, g), j))
                .fold(None, |acc: Option<(f64, usize)>, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            match best {
                Some((v, j)) if v >= iou_thresh => {
                    used[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Precision-recall points, one per distinct score threshold (tied scores
/// enter together), in descending score order.
pub fn pr_curve(flags: &[bool], scores: &[f64], num_gt: usize) -> Vec<(f64, f64)> {
    assert_eq!(flags.len(), scores.len());
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if flags[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            let recall = if num_gt > 0 { tp as f64 / num_gt as f64 } else { 0.0 };
            points.push((recall, tp as f64 / (tp + fp) as f64));
        }
    }
    points
}

/// Area under the monotone precision envelope. `None` when there is
/// neither ground truth nor a detection.
pub fn average_precision(flags: &[bool], scores: &[f64], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let pts = pr_curve(flags, scores, num_gt);
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    // sweep from high recall to low, carrying the running max precision
    for k in (0..pts.len()).rev() {
        envelope = envelope.max(pts[k].1);
        let prev_recall = if k == 0 { 0.0 } else { pts[k - 1].0 };
        ap += (pts[k].0 - prev_recall) * envelope;
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub ap: Option<f64>,
    pub pr: Vec<(f64, f64)>,
    pub tp: usize,
    pub fp: usize,
    pub num_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: BTreeMap<u32, ClassResult>,
    pub map: f64,
}

/// Aggregates per-image predictions against ground truth for classes
/// `1..=num_classes`.
pub fn evaluate(
    predictions: &[Vec<Detection>],
    dataset: &[LabeledSample],
    num_classes: u32,
    iou_thresh: f64,
) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    if predictions.len() != dataset.len() {
        return Err(Error::Invalid(format!(
            "{} prediction lists for {} images",
            predictions.len(),
            dataset.len()
        )));
    }
    let mut flags: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
    let mut scores: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut num_gt: BTreeMap<u32, usize> = BTreeMap::new();
    for (dets, sample) in predictions.iter().zip(dataset) {
        for &c in &sample.classes {
            *num_gt.entry(c).or_default() += 1;
        }
        let mut sorted = dets.clone();
        sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
        let f = match_detections(&sorted, &sample.boxes, &sample.classes, iou_thresh);
        for (d, ok) in sorted.iter().zip(f) {
            flags.entry(d.class_id).or_default().push(ok);
            scores.entry(d.class_id).or_default().push(d.score);
        }
    }
    let mut per_class = BTreeMap::new();
    for c in 1..=num_classes {
        let fl = flags.remove(&c).unwrap_or_default();
        let sc = scores.remove(&c).unwrap_or_default();
        let ng = num_gt.get(&c).copied().unwrap_or(0);
        let tp = fl.iter().filter(|&&x| x).count();
        per_class.insert(
            c,
            ClassResult {
                ap: average_precision(&fl, &sc, ng),
                pr: pr_curve(&fl, &sc, ng),
                tp,
                fp: fl.len() - tp,
                num_gt: ng,
            },
        );
    }
    let aps: Vec<f64> = per_class.values().filter_map(|r| r.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(EvalResult { per_class, map })
}

/// Runs `params` over `dataset` in small batches and scores the result.
pub fn evaluate_model(
    params: &ParamStore<f32>,
    det: &DetectorConfig,
    dataset: &[LabeledSample],
    iou_thresh: f64,
) -> Result<EvalResult> {
    let mut preds = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(4) {
        let images: Vec<&crate::image::Image> = chunk.iter().map(|s| &s.image).collect();
        // batch only equal shapes together
        if images.iter().all(|i| i.same_shape(images[0])) {
            preds.extend(predict(params, det, &images, det.score_thresh, det.nms_thresh)?);
        } else {
            for i in images {
                preds.extend(predict(params, det, &[i], det.score_thresh, det.nms_thresh)?);
            }
        }
    }
    evaluate(&preds, dataset, det.num_classes as u32, iou_thresh)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

fn svg_chart(title: &str, pr: &[(f64, f64)]) -> String {
    let (w, h) = (640.0, 480.0);
    let (l, r, t, b) = (70.0, 30.0, 40.0, 60.0);
    let (pw, ph) = (w - l - r, h - t - b);
    let px = |x: f64| l + x * pw;
    let py = |y: f64| t + (1.0 - y) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>
<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#ddd"/><line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>
<text x="{x}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{v:.1}</text><text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="end">{v:.1}</text>"##,
            py(0.0),
            py(1.0),
            px(0.0),
            px(1.0),
            py(0.0) + 18.0,
            px(0.0) - 8.0,
            py(v) + 4.0,
            x = px(v),
            y = py(v),
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{l}" y="{t}" width="{pw}" height="{ph}" fill="none" stroke="black"/>
<text x="{}" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle">recall</text>
<text x="18" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle" transform="rotate(-90 18 {})">precision</text>"#,
        l + pw / 2.0,
        h - 15.0,
        t + ph / 2.0,
        t + ph / 2.0
    );
    if !pr.is_empty() {
        let pts: Vec<String> = pr.iter().map(|&(rc, pc)| format!("{:.2},{:.2}", px(rc), py(pc))).collect();
        let _ = writeln!(
            s,
            r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `pr_<name>.csv` and `pr_<name>.svg` per class; `names[c - 1]`
/// names class `c`, falling back to `class<c>`.
pub fn emit_pr_curve(result: &EvalResult, out_dir: &Path, names: &[&str]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;
    let mut written = Vec::new();
    for (&c, r) in &result.per_class {
        let name = names
            .get(c as usize - 1)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("class{c}"));
        let mut csv = String::from("recall,precision\n");
        for &(rc, pc) in &r.pr {
            let _ = writeln!(csv, "{rc},{pc}");
        }
        let csv_path = out_dir.join(format!("pr_{name}.csv"));
        write(&csv_path, &csv)?;
        let ap = r.ap.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        let svg_path = out_dir.join(format!("pr_{name}.svg"));
        write(&svg_path, &svg_chart(&format!("{name}  AP@0.5 = {ap}"), &r.pr))?;
        written.push(csv_path);
        written.push(svg_path);
    }
    Ok(written)
}

/// Parses a CSV written by [`emit_pr_curve`].
pub fn read_pr_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("recall,precision") {
        return Err(Error::Invalid("missing recall,precision header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| Error::Invalid(format!("bad row {l:?}")))?;
            let p = |s: &str| s.parse::<f64>().map_err(|e| Error::Invalid(format!("{s:?}: {e}")));
            Ok((p(a)?, p(b)?))
        })
        .collect()
}
