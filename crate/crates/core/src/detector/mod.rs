//! Miniature two-stage detector: staged convolutional backbone, a
//! single-scale proposal head and a pooled classification/regression head.

pub mod boxes;
mod net;
mod params;
mod targets;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use net::{
    backbone_forward, detection_loss, forward, images_to_tensor, predict, predict_with, proposals, roi_head, rpn_forward,
    supervised_loss, BackboneOut, DetLoss, Hook, Norm, RoiOut, RpnOut, TrainForward,
};
pub use params::{is_buffer, is_detector_param, Bound, ParamStore};
pub use targets::{plan_image, ImagePlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Foreground classes; ids run 1..=num_classes.
    pub num_classes: usize,
    pub channels: [usize; 4],
    pub anchor_sizes: Vec<f64>,
    pub rpn_hidden: usize,
    pub roi_size: usize,
    pub roi_sampling: usize,
    pub fc_dim: usize,
    pub rpn_pre_nms: usize,
    pub rpn_post_nms: usize,
    pub rpn_nms: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    pub roi_fg_iou: f64,
    pub roi_bg_iou: f64,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_detections: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            channels: [16, 32, 64, 128],
            anchor_sizes: vec![16.0, 24.0, 36.0],
            rpn_hidden: 64,
            roi_size: 7,
            roi_sampling: 2,
            fc_dim: 128,
            rpn_pre_nms: 100,
            rpn_post_nms: 50,
            rpn_nms: 0.7,
            rpn_batch: 64,
            rpn_pos_fraction: 0.5,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            roi_batch: 32,
            roi_pos_fraction: 0.5,
            roi_fg_iou: 0.5,
            roi_bg_iou: 0.4,
            score_thresh: 0.05,
            nms_thresh: 0.5,
            max_detections: 50,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// Stride of the stage-4 map that carries the proposal head.
pub const RPN_STRIDE: f64 = 16.0;
/// Stride of the stage-3 map pooled by the box head.
pub const ROI_STRIDE: f64 = 8.0;
/// Index into the stage list of the map pooled by the box head.
pub const ROI_STAGE: usize = 2;

impl DetectorConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: String| Err(crate::Error::Config(m));
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|&s| !(s > 0.0)) {
            return bad("anchor sizes must be positive".into());
        }
        for (k, v) in [
            ("rpn_nms", self.rpn_nms),
            ("nms_thresh", self.nms_thresh),
            ("rpn_pos_fraction", self.rpn_pos_fraction),
            ("roi_pos_fraction", self.roi_pos_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{k} must lie in (0, 1], got {v}"));
            }
        }
        if self.rpn_bg_iou > self.rpn_fg_iou || self.roi_bg_iou > self.roi_fg_iou {
            return bad("background IoU bound exceeds foreground bound".into());
        }
        if !(0.0..=1.0).contains(&self.score_thresh) {
            return bad(format!("score_thresh {} outside [0, 1]", self.score_thresh));
        }
        if self.roi_size == 0 || self.roi_sampling == 0 || self.rpn_batch == 0 || self.roi_batch == 0 {
            return bad("pooling and sampling sizes must be >= 1".into());
        }
        Ok(())
    }

    /// Hash of everything that determines parameter names and shapes.
    pub fn fingerprint(&self) -> String {
        let desc = format!(
            "stages=4x2 conv3x3-bn-relu;channels={:?};anchors={};rpn_hidden={};roi={}x{}@stage3;fc={};classes={}",
            self.channels,
            self.anchor_sizes.len(),
            self.rpn_hidden,
            self.roi_size,
            self.roi_size,
            self.fc_dim,
            self.num_classes
        );
        let digest = Sha256::digest(desc.as_bytes());
        hex::encode(&digest[..8])
    }
}
