//! Training orchestration: supervised source pretraining and the
//! source-free mean-teacher adaptation loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tape::{Graph, Tensor, Var};

use crate::afsp::{self, afsp_forward, AfspConfig};
use crate::detector::{
    is_detector_param, predict, predict_with, supervised_loss, Bound, DetectorConfig, Norm, ParamStore,
    ROI_STAGE, ROI_STRIDE,
};
use crate::eval::evaluate_model;
use crate::geom::{Detection, LabeledSample};
use crate::image::Image;
use crate::msp::{mix_samples, strong_augment, weak_augment, AugRecord, StrongConfig};
use crate::pfd::{self, class_features, local_prototypes, pfd_loss, ClassBox, PfdConfig, PrototypeBank};
use crate::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// `v = m v + (g + wd p)`, `p -= lr v` for every named gradient.
    pub fn step(&mut self, ps: &mut ParamStore<f32>, grads: &[(String, Tensor<f32>)], lr: f64) -> Result<()> {
        let (m, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for (name, g) in grads {
            let p = ps
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("{name}: gradient shape {:?} vs {:?}", g.shape(), p.shape())));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = m * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`
/// (no-op for `max_norm <= 0`). Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(String, Tensor<f32>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

fn collect_grads(g: &Graph<f32>, b: &Bound, loss: Var) -> Vec<(String, Tensor<f32>)> {
    let mut grads = g.backward(loss);
    b.iter()
        .filter_map(|(name, &v)| grads.take(v).map(|t| (name.clone(), t)))
        .collect()
}

fn check_rate(name: &str, v: f64, lo_open: bool) -> Result<()> {
    let ok = if lo_open { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
    if ok && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} outside {}", if lo_open { "(0, 1]" } else { "[0, 1]" })))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Rate from `decay_epoch` on.
    pub lr_decayed: f64,
    pub decay_epoch: usize,
    /// Linear ramp of the rate over the first iterations.
    pub warmup_iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Joint gradient-norm cap; 0 disables.
    pub grad_clip: f64,
    /// Random horizontal flips of the training images.
    pub flip: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 7,
            batch_size: 2,
            lr: 0.02,
            lr_decayed: 0.002,
            decay_epoch: 5,
            warmup_iters: 200,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 10.0,
            flip: true,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be positive".into()));
        }
        for (n, v) in [("pretrain.lr", self.lr), ("pretrain.lr_decayed", self.lr_decayed)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{n} = {v} must be positive")));
            }
        }
        check_rate("pretrain.momentum", self.momentum, false)?;
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::Config("pretrain.weight_decay and grad_clip must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize, iter: usize) -> f64 {
        let base = if epoch < self.decay_epoch { self.lr } else { self.lr_decayed };
        if iter < self.warmup_iters {
            base * (iter + 1) as f64 / self.warmup_iters as f64
        } else {
            base
        }
    }
}

#[derive(Serialize)]
struct PretrainLine {
    iter: usize,
    epoch: usize,
    lr: f64,
    loss_cls: f64,
    loss_reg: f64,
    loss_total: f64,
}

/// Result of [`pretrain`]. On divergence `params` holds the last weights
/// that produced a finite loss and `diverged` says where it happened.
#[derive(Debug)]
pub struct PretrainOutcome {
    pub params: ParamStore<f32>,
    pub iterations: usize,
    pub diverged: Option<Error>,
}

/// Supervised training of the detector on labelled source data, with
/// batch statistics in the normalization layers.
pub fn pretrain(
    data: &[LabeledSample],
    det: &DetectorConfig,
    cfg: &PretrainConfig,
    init: ParamStore<f32>,
    log: &mut dyn Write,
) -> Result<PretrainOutcome> {
    det.validate()?;
    cfg.validate()?;
    init.validate(det)?;
    if cfg.epochs > 0 && data.len() < cfg.batch_size {
        return Err(Error::Invalid(format!(
            "{} training images for batch size {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let mut params = init;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut iter = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let weights = vec![1.0 / cfg.batch_size as f64; cfg.batch_size];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch: Vec<LabeledSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.flip {
                        weak_augment(&data[i], &mut rng).0
                    } else {
                        data[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&LabeledSample> = batch.iter().collect();
            let lr = cfg.lr_at(epoch, iter);
            let mut g = Graph::<f32>::new();
            let b = Bound::new(&mut g, &params, |_| true);
            let (loss, fwd) = supervised_loss(&mut g, &b, &params, det, &refs, &weights, Norm::Batch, None, &mut rng)?;
            let total = g.add(loss.cls, loss.reg);
            let (lc, lr_, lt) = (
                g.value(loss.cls).item() as f64,
                g.value(loss.reg).item() as f64,
                g.value(total).item() as f64,
            );
            if !lt.is_finite() {
                return Ok(PretrainOutcome {
                    params,
                    iterations: iter,
                    diverged: Some(Error::Diverged {
                        iter: iter as u64,
                        detail: format!("loss cls={lc} reg={lr_}"),
                    }),
                });
            }
            let mut grads = collect_grads(&g, &b, total);
            clip_grad_norm(&mut grads, cfg.grad_clip);
            let last_good = params.clone();
            opt.step(&mut params, &grads, lr)?;
            if !params.is_finite() {
                return Ok(PretrainOutcome {
                    params: last_good,
                    iterations: iter,
                    diverged: Some(Error::Diverged {
                        iter: iter as u64,
                        detail: "non-finite parameters after update".into(),
                    }),
                });
            }
            let m = det.bn_momentum as f32;
            for (prefix, mean, var) in &fwd.backbone.batch_stats {
                for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                    let t = params
                        .get_mut(&format!("{prefix}.{suffix}"))
                        .ok_or_else(|| Error::Shape(format!("missing {prefix}.{suffix}")))?;
                    for (r, &v) in t.data_mut().iter_mut().zip(batch) {
                        *r = (1.0 - m) * *r + m * v;
                    }
                }
            }
            write_line(
                log,
                &PretrainLine {
                    iter,
                    epoch,
                    lr,
                    loss_cls: lc,
                    loss_reg: lr_,
                    loss_total: lt,
                },
            )?;
            iter += 1;
        }
    }
    Ok(PretrainOutcome {
        params,
        iterations: iter,
        diverged: None,
    })
}

fn write_line(log: &mut dyn Write, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string(v).map_err(|e| Error::Invalid(format!("metrics line: {e}")))?;
    s.push('\n');
    log.write_all(s.as_bytes())
        .map_err(|e| Error::io_at(std::path::Path::new("<metrics log>"), e))
}

/// Keeps detections scoring at least `tau`; the weight is 1 when any
/// survive and 0 otherwise.
pub fn gate_pseudo_labels(dets: &[Detection], tau: f64) -> (Vec<Detection>, f64) {
    let kept: Vec<Detection> = dets.iter().filter(|d| d.score >= tau).copied().collect();
    let w = if kept.is_empty() { 0.0 } else { 1.0 };
    (kept, w)
}

/// Teacher prediction on a weak view, gated at `tau`.
pub fn pseudo_label(
    teacher: &ParamStore<f32>,
    det: &DetectorConfig,
    image_weak: &Image,
    tau: f64,
) -> Result<(Vec<Detection>, f64)> {
    let dets = predict(teacher, det, &[image_weak], det.score_thresh.min(tau), det.nms_thresh)?;
    Ok(gate_pseudo_labels(&dets[0], tau))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Pseudo-label score threshold.
    pub tau: f64,
    /// Teacher EMA rate.
    pub eta: f64,
    /// Iterations between teacher updates; one epoch when unset.
    pub ema_period: Option<usize>,
    /// Weight of the prototype loss.
    pub gamma: f64,
    /// Pixel mixing coefficient.
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decayed: f64,
    pub decay_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Joint gradient-norm cap; 0 disables.
    pub grad_clip: f64,
    /// Stop after this many iterations regardless of `epochs`.
    pub max_iter: Option<usize>,
    pub seed: u64,
    pub enable_msp: bool,
    pub enable_afsp: bool,
    pub enable_pfd: bool,
    pub afsp: AfspConfig,
    pub pfd: PfdConfig,
    pub strong: StrongConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            eta: 0.9,
            ema_period: None,
            gamma: 0.5,
            lambda: 0.5,
            batch_size: 2,
            epochs: 7,
            lr: 1e-3,
            lr_decayed: 1e-4,
            decay_epoch: 5,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 10.0,
            max_iter: None,
            seed: 0,
            enable_msp: true,
            enable_afsp: true,
            enable_pfd: true,
            afsp: AfspConfig::default(),
            pfd: PfdConfig::default(),
            strong: StrongConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        check_rate("engine.tau", self.tau, true)?;
        check_rate("engine.eta", self.eta, true)?;
        check_rate("engine.gamma", self.gamma, false)?;
        check_rate("engine.lambda", self.lambda, false)?;
        check_rate("engine.momentum", self.momentum, false)?;
        check_rate("engine.afsp.alpha", self.afsp.alpha, false)?;
        check_rate("engine.afsp.warmup_fraction", self.afsp.warmup_fraction, false)?;
        check_rate("engine.pfd.beta", self.pfd.beta, true)?;
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "engine.batch_size = {} must be even and at least 2",
                self.batch_size
            )));
        }
        if self.ema_period == Some(0) {
            return Err(Error::Config("engine.ema_period must be positive".into()));
        }
        for (n, v) in [("engine.lr", self.lr), ("engine.lr_decayed", self.lr_decayed)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{n} = {v} must be positive")));
            }
        }
        if !(self.afsp.eps > 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::Config(
                "engine.afsp.eps must be positive; weight_decay and grad_clip non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.lr
        } else {
            self.lr_decayed
        }
    }
}

/// Everything the adaptation loop mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Detector weights plus the perturbation predictor and the prototype
    /// transformation layer.
    pub student: ParamStore<f32>,
    pub teacher: ParamStore<f32>,
    pub bank_teacher: PrototypeBank,
    pub bank_student: PrototypeBank,
    pub opt: Sgd,
    pub iter: usize,
    pub skipped: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Student and teacher both start from the source weights.
    pub fn new(source: &ParamStore<f32>, det: &DetectorConfig, cfg: &AdaptConfig) -> Result<Self> {
        source.validate(det)?;
        let teacher = source.filtered(is_detector_param);
        let mut student = teacher.clone();
        student.merge(&afsp::init_params(det.channels[0], cfg.seed ^ 0xAF5F));
        student.merge(&pfd::init_transform(det.channels[ROI_STAGE]));
        Ok(Self {
            student,
            teacher,
            bank_teacher: PrototypeBank::new(&cfg.pfd),
            bank_student: PrototypeBank::new(&cfg.pfd),
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            iter: 0,
            skipped: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    /// The student's detector weights alone.
    pub fn student_detector(&self) -> ParamStore<f32> {
        self.student.filtered(is_detector_param)
    }
}

/// Loss terms of one step. Terms of disabled modules are absent; the
/// plain self-training term appears only when the feature perturbation is
/// off.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_mixup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_afsp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_mt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_pro: Option<f64>,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossReport,
    pub skipped: bool,
    pub pseudo_labels: usize,
    pub aug: Vec<AugRecord>,
    /// Per-sample relative L1 change across the feature perturbation.
    pub norm_deviation: Vec<f64>,
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

/// One iteration: pseudo-labels from the teacher on weak views, then the
/// mixed-sample, perturbed-feature and prototype losses on the student,
/// and a single optimizer step on their weighted sum.
pub fn adapt_step(
    state: &mut TrainState,
    images: &[&Image],
    det: &DetectorConfig,
    cfg: &AdaptConfig,
    lr: f64,
    alpha: f64,
) -> Result<StepReport> {
    let n = images.len();
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::Invalid(format!("batch of {n} images; need an even count")));
    }
    let mut weak = Vec::with_capacity(n);
    let mut strong = Vec::with_capacity(n);
    let mut aug = Vec::with_capacity(n);
    for img in images {
        let (w, flipped) = weak_augment(&LabeledSample::unlabeled((*img).clone()), &mut state.rng);
        let (s, ops) = strong_augment(&w, &cfg.strong, &mut state.rng);
        weak.push(w);
        strong.push(s);
        aug.push(AugRecord { flipped, ops });
    }

    let mut gt = Graph::<f32>::new();
    let bt = Bound::new(&mut gt, &state.teacher, |_| false);
    let weak_refs: Vec<&Image> = weak.iter().map(|s| &s.image).collect();
    let (dets, tb) = predict_with(
        &mut gt,
        &bt,
        &state.teacher,
        det,
        &weak_refs,
        det.score_thresh.min(cfg.tau),
        det.nms_thresh,
    )?;
    let pls: Vec<(Vec<Detection>, f64)> = dets.iter().map(|d| gate_pseudo_labels(d, cfg.tau)).collect();
    let pseudo_labels = pls.iter().map(|p| p.0.len()).sum();
    state.iter += 1;
    if pls.iter().all(|p| p.1 == 0.0) {
        state.skipped += 1;
        return Ok(StepReport {
            losses: LossReport::default(),
            skipped: true,
            pseudo_labels,
            aug,
            norm_deviation: Vec::new(),
        });
    }

    let mut g = Graph::<f32>::new();
    let b = Bound::new(&mut g, &state.student, |_| true);
    let mut report = LossReport::default();
    let mut parts = Vec::new();

    if cfg.enable_msp {
        let half = n / 2;
        let mut mixed = Vec::with_capacity(half);
        let mut w = Vec::with_capacity(half);
        for i in 0..half {
            let j = i + half;
            let m = mix_samples(&strong[i].image, &pls[i].0, &strong[j].image, &pls[j].0, cfg.lambda)?;
            w.push(if m.boxes.is_empty() { 0.0 } else { 1.0 / half as f64 });
            mixed.push(m);
        }
        let refs: Vec<&LabeledSample> = mixed.iter().collect();
        let (l, _) = supervised_loss(&mut g, &b, &state.student, det, &refs, &w, Norm::Frozen, None, &mut state.rng)?;
        let v = g.add(l.cls, l.reg);
        report.loss_mixup = Some(scalar(&g, v));
        parts.push(v);
    }

    let targets: Vec<LabeledSample> = strong
        .iter()
        .zip(&pls)
        .map(|(s, (d, _))| LabeledSample {
            image: s.image.clone(),
            boxes: d.iter().map(|d| d.bbox).collect(),
            classes: d.iter().map(|d| d.class_id).collect(),
            weight: 1.0,
        })
        .collect();
    let refs: Vec<&LabeledSample> = targets.iter().collect();
    let w: Vec<f64> = pls.iter().map(|p| p.1 / n as f64).collect();
    let mut norm_deviation = Vec::new();
    let (l, fwd) = if cfg.enable_afsp {
        let mut hook = |g: &mut Graph<f32>, fm: Var| {
            let o = afsp_forward(g, &b, fm, &cfg.afsp, alpha, true);
            norm_deviation.extend(o.norm_deviation);
            o.out
        };
        supervised_loss(
            &mut g,
            &b,
            &state.student,
            det,
            &refs,
            &w,
            Norm::Frozen,
            Some(&mut hook),
            &mut state.rng,
        )?
    } else {
        supervised_loss(&mut g, &b, &state.student, det, &refs, &w, Norm::Frozen, None, &mut state.rng)?
    };
    let v = g.add(l.cls, l.reg);
    if cfg.enable_afsp {
        report.loss_afsp = Some(scalar(&g, v));
    } else {
        report.loss_mt = Some(scalar(&g, v));
    }
    parts.push(v);

    let mut pending = None;
    if cfg.enable_pfd {
        let boxes: Vec<ClassBox> = pls
            .iter()
            .enumerate()
            .flat_map(|(i, (d, _))| {
                d.iter().map(move |d| ClassBox {
                    batch: i,
                    bbox: d.bbox,
                    class_id: d.class_id,
                })
            })
            .collect();
        let scale = 1.0 / ROI_STRIDE;
        let mut bank_t = state.bank_teacher.clone();
        let mut student_gp: BTreeMap<u32, Var> = BTreeMap::new();
        let mut student_lp: BTreeMap<u32, Var> = BTreeMap::new();
        if let Some((tf, tc)) = class_features(&mut gt, tb.stages[ROI_STAGE], &boxes, scale, det.roi_size, det.roi_sampling)
        {
            for (c, lp) in local_prototypes(&mut gt, tf, &tc) {
                bank_t.update(c, &pfd::values(&gt, lp));
            }
            let mapped = pfd::apply_transform(&mut g, &b, fwd.backbone.stages[ROI_STAGE]);
            if let Some((sf, sc)) = class_features(&mut g, mapped, &boxes, scale, det.roi_size, det.roi_sampling) {
                for (c, lp) in local_prototypes(&mut g, sf, &sc) {
                    let gp = state.bank_student.update_var(&mut g, c, lp);
                    student_lp.insert(c, lp);
                    student_gp.insert(c, gp);
                }
            }
        }
        for (c, gp) in &state.bank_student.global {
            student_gp.entry(*c).or_insert_with(|| {
                g.constant(Tensor::new(vec![gp.len()], gp.iter().map(|&x| x as f32).collect()))
            });
        }
        let lpro = pfd_loss(&mut g, &bank_t.global, &student_gp);
        report.loss_pro = Some(scalar(&g, lpro));
        parts.push(g.scale(lpro, cfg.gamma as f32));
        pending = Some((bank_t, student_lp, student_gp));
    }

    let total = g.add_all(&parts);
    report.loss_total = scalar(&g, total);
    if !report.loss_total.is_finite() {
        return Err(Error::Diverged {
            iter: state.iter as u64,
            detail: format!("{report:?}"),
        });
    }
    let mut grads = collect_grads(&g, &b, total);
    clip_grad_norm(&mut grads, cfg.grad_clip);
    state.opt.step(&mut state.student, &grads, lr)?;
    if !state.student.is_finite() {
        return Err(Error::Diverged {
            iter: state.iter as u64,
            detail: "non-finite student parameters after update".into(),
        });
    }
    if let Some((bank_t, lps, gps)) = pending {
        state.bank_teacher = bank_t;
        for (c, lp) in lps {
            let gp = pfd::values(&g, gps[&c]);
            state.bank_student.commit(c, pfd::values(&g, lp), gp);
        }
    }
    Ok(StepReport {
        losses: report,
        skipped: false,
        pseudo_labels,
        aug,
        norm_deviation,
    })
}

/// `teacher = eta * teacher + (1 - eta) * student` over the teacher's
/// tensors; student-only tensors are ignored.
pub fn ema_update<T: tape::Real>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, eta: f64) -> Result<()> {
    for (name, t) in teacher.iter() {
        let s = student
            .get(name)
            .ok_or_else(|| Error::Shape(format!("student lacks teacher tensor {name}")))?;
        if s.shape() != t.shape() {
            return Err(Error::Shape(format!("{name}: teacher {:?} vs student {:?}", t.shape(), s.shape())));
        }
    }
    for (name, t) in teacher.iter_mut() {
        let s = student.expect(name);
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            let (a, b) = (tv.to_f64().unwrap(), sv.to_f64().unwrap());
            *tv = T::lit(eta * a + (1.0 - eta) * b);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct IterLine<'a> {
    iter: usize,
    epoch: usize,
    lr: f64,
    alpha: f64,
    #[serde(flatten)]
    losses: &'a LossReport,
    skipped: bool,
    pseudo_labels: usize,
    aug: &'a [AugRecord],
}

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    iter: usize,
    skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    map_monitor: Option<f64>,
    prototype_distances: BTreeMap<u32, f64>,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    /// The final model.
    pub teacher: ParamStore<f32>,
    pub state: TrainState,
    /// Teacher mAP on the monitoring split after each epoch.
    pub monitor_map: Vec<f64>,
    /// Relative L1 change of every perturbed sample, in order.
    pub norm_deviation: Vec<f64>,
}

/// Source-free adaptation on unlabelled target images. `monitor`, when
/// given, is only evaluated, never trained on.
pub fn adapt(
    target: &[Image],
    source: &ParamStore<f32>,
    det: &DetectorConfig,
    cfg: &AdaptConfig,
    monitor: Option<&[LabeledSample]>,
    log: &mut dyn Write,
) -> Result<AdaptOutcome> {
    det.validate()?;
    cfg.validate()?;
    let mut state = TrainState::new(source, det, cfg)?;
    let per_epoch = target.len() / cfg.batch_size;
    let scheduled = cfg.epochs * per_epoch;
    let total = cfg.max_iter.map_or(scheduled, |m| m.min(scheduled));
    if total > 0 && per_epoch == 0 {
        return Err(Error::Invalid(format!(
            "{} target images for batch size {}",
            target.len(),
            cfg.batch_size
        )));
    }
    let period = cfg.ema_period.unwrap_or(per_epoch.max(1));
    let mut order: Vec<usize> = (0..target.len()).collect();
    let mut monitor_map = Vec::new();
    let mut norm_deviation = Vec::new();
    let mut epoch = 0;
    while state.iter < total {
        order.shuffle(&mut state.rng);
        let lr = cfg.lr_at(epoch);
        for chunk in order.chunks_exact(cfg.batch_size) {
            if state.iter >= total {
                break;
            }
            let alpha = cfg.afsp.alpha_at(state.iter, total);
            let batch: Vec<&Image> = chunk.iter().map(|&i| &target[i]).collect();
            let rep = adapt_step(&mut state, &batch, det, cfg, lr, alpha)?;
            norm_deviation.extend_from_slice(&rep.norm_deviation);
            write_line(
                log,
                &IterLine {
                    iter: state.iter,
                    epoch,
                    lr,
                    alpha,
                    losses: &rep.losses,
                    skipped: rep.skipped,
                    pseudo_labels: rep.pseudo_labels,
                    aug: &rep.aug,
                },
            )?;
            if state.iter % period == 0 {
                let student = state.student.clone();
                ema_update(&mut state.teacher, &student, cfg.eta)?;
            }
        }
        let map_monitor = match monitor {
            Some(m) => {
                let r = evaluate_model(&state.teacher, det, m, 0.5)?;
                monitor_map.push(r.map);
                Some(r.map)
            }
            None => None,
        };
        write_line(
            log,
            &EpochLine {
                epoch,
                iter: state.iter,
                skipped: state.skipped,
                map_monitor,
                prototype_distances: pfd::prototype_distances(&state.bank_teacher, &state.bank_student),
            },
        )?;
        epoch += 1;
    }
    Ok(AdaptOutcome {
        teacher: state.teacher.clone(),
        state,
        monitor_map,
        norm_deviation,
    })
}
