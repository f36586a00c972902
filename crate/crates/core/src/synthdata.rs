//! Procedural two-domain detection benchmark.
//!
//! Scenes contain axis-aligned "vehicles" (filled rectangles) and
//! "airplanes" (an ellipse body crossed by a wing bar) on a textured
//! background. A domain is a rendering style: palette, background kind,
//! and a post-render channel affine, blur and pixel noise. Object geometry
//! depends only on the scene seed, so two domains rendered with the same
//! seed differ only in their domain-variant attributes.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::fsguard::FsGuard;
use crate::geom::{clip_box, iou, BoundingBox, LabeledSample};
use crate::image::Image;
use crate::{Error, Result};

pub const CLASS_VEHICLE: u32 = 1;
pub const CLASS_AIRPLANE: u32 = 2;
pub const CLASS_NAMES: [&str; 2] = ["vehicle", "airplane"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    Flat { rgb: [f32; 3] },
    /// Smooth value noise around `base`, lattice spacing `cell` pixels.
    Noise { base: [f32; 3], amplitude: f32, cell: f32 },
    /// Vertical linear ramp from `top` to `bottom`.
    Gradient { top: [f32; 3], bottom: [f32; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub palette: Vec<[f32; 3]>,
    pub background: Background,
    pub gain: [f32; 3],
    pub bias: [f32; 3],
    pub noise_sigma: f32,
    pub blur_radius: f32,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.palette.is_empty() {
            return Err(Error::Invalid("domain palette is empty".into()));
        }
        if self.gain.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::Invalid(format!("channel gains must be > 0, got {:?}", self.gain)));
        }
        if !(0.0..=0.2).contains(&self.noise_sigma) {
            return Err(Error::Invalid(format!("noise_sigma {} outside [0, 0.2]", self.noise_sigma)));
        }
        if !(self.blur_radius >= 0.0 && self.blur_radius.is_finite()) {
            return Err(Error::Invalid(format!("blur_radius {} must be >= 0", self.blur_radius)));
        }
        Ok(())
    }

    /// Named preset; `None` for an unknown name.
    pub fn preset(name: &str) -> Option<Self> {
        let base = Self {
            name: name.to_string(),
            palette: vec![
                [0.80, 0.22, 0.20],
                [0.22, 0.66, 0.30],
                [0.25, 0.35, 0.85],
                [0.88, 0.80, 0.30],
                [0.85, 0.85, 0.85],
            ],
            background: Background::Noise {
                base: [0.42, 0.44, 0.40],
                amplitude: 0.12,
                cell: 16.0,
            },
            gain: [1.0, 1.0, 1.0],
            bias: [0.0, 0.0, 0.0],
            noise_sigma: 0.0,
            blur_radius: 0.0,
        };
        match name {
            "source" => Some(base),
            "target-color" => Some(Self {
                gain: [1.4, 1.0, 0.7],
                noise_sigma: 0.05,
                ..base
            }),
            "target-noise" => Some(Self {
                noise_sigma: 0.12,
                ..base
            }),
            "target-style" => Some(Self {
                palette: vec![
                    [0.60, 0.30, 0.55],
                    [0.30, 0.55, 0.60],
                    [0.70, 0.55, 0.35],
                    [0.90, 0.90, 0.75],
                ],
                background: Background::Gradient {
                    top: [0.30, 0.36, 0.42],
                    bottom: [0.55, 0.50, 0.42],
                },
                gain: [0.9, 1.05, 1.2],
                blur_radius: 1.0,
                ..base
            }),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 4] = ["source", "target-color", "target-noise", "target-style"];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    EllipseCross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: (usize, usize),
    pub objects_per_image: (usize, usize),
    /// (class id, primitive) pairs.
    pub object_kinds: Vec<(u32, ShapeKind)>,
    /// Long-side extent range in pixels.
    pub scale: (f64, f64),
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: (128, 128),
            objects_per_image: (2, 8),
            object_kinds: vec![(CLASS_VEHICLE, ShapeKind::Rectangle), (CLASS_AIRPLANE, ShapeKind::EllipseCross)],
            scale: (16.0, 34.0),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 32 || w < 32 {
            return Err(Error::Invalid(format!("image size {h}x{w} below 32")));
        }
        let (lo, hi) = self.objects_per_image;
        if lo > hi {
            return Err(Error::Invalid("objects_per_image range is inverted".into()));
        }
        if self.object_kinds.is_empty() || self.object_kinds.iter().any(|(c, _)| *c == 0) {
            return Err(Error::Invalid("object kinds must be non-empty with class ids >= 1".into()));
        }
        let (smin, smax) = self.scale;
        if !(smin >= 4.0 && smax >= smin && smax < h.min(w) as f64) {
            return Err(Error::Invalid(format!("scale range {:?} unusable for {h}x{w}", self.scale)));
        }
        Ok(())
    }
}

/// One placed object, in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedObject {
    pub class_id: u32,
    pub kind: ShapeKind,
    pub bbox: BoundingBox,
    /// Long axis horizontal?
    pub horizontal: bool,
}

impl PlacedObject {
    /// Does the shape cover the point `(px, py)`?
    pub fn covers(&self, px: f64, py: f64) -> bool {
        let b = &self.bbox;
        if px < b.x1 || px >= b.x2 || py < b.y1 || py >= b.y2 {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::EllipseCross => {
                let (cx, cy) = b.center();
                let (mut u, mut v) = ((px - cx) / (0.5 * b.width()), (py - cy) / (0.5 * b.height()));
                if !self.horizontal {
                    std::mem::swap(&mut u, &mut v);
                }
                // fuselage along u, wing bar along v, tail stub near the back
                let body = u * u + (v / 0.26) * (v / 0.26) <= 1.0;
                let wing = u.abs() <= 0.16 && v.abs() <= 1.0;
                let tail = (u + 0.8).abs() <= 0.1 && v.abs() <= 0.45;
                body || wing || tail
            }
        }
    }
}

fn stream(seed: u64, index: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(4).wrapping_add(salt));
    rng
}

/// Object layout of image `index`: depends on the scene only.
pub fn layout(scene: &SceneSpec, index: u64) -> Vec<PlacedObject> {
    let mut rng = stream(scene.seed, index, 0);
    let (h, w) = scene.image_size;
    let (lo, hi) = scene.objects_per_image;
    let n = rng.gen_range(lo..=hi);
    let mut placed: Vec<PlacedObject> = Vec::with_capacity(n);
    let mut attempts = 0;
    while placed.len() < n && attempts < 200 {
        attempts += 1;
        let (class_id, kind) = *scene.object_kinds.choose(&mut rng).expect("validated non-empty");
        let long = rng.gen_range(scene.scale.0..=scene.scale.1).round();
        let short = match kind {
            ShapeKind::Rectangle => (long * rng.gen_range(0.45..0.65)).round(),
            ShapeKind::EllipseCross => (long * rng.gen_range(0.85..1.0)).round(),
        };
        let horizontal = rng.gen_bool(0.5);
        let (bw, bh) = if horizontal { (long, short) } else { (short, long) };
        let x1 = rng.gen_range(0.0..=(w as f64 - bw)).floor();
        let y1 = rng.gen_range(0.0..=(h as f64 - bh)).floor();
        let bbox = BoundingBox {
            x1,
            y1,
            x2: x1 + bw,
            y2: y1 + bh,
        };
        if placed.iter().any(|p| iou(&p.bbox, &bbox) > 0.3) {
            continue;
        }
        placed.push(PlacedObject {
            class_id,
            kind,
            bbox,
            horizontal,
        });
    }
    placed
}

fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f32) -> Vec<f32> {
    let gh = (h as f32 / cell).ceil() as usize + 2;
    let gw = (w as f32 / cell).ceil() as usize + 2;
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f32 / cell;
        let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f32 / cell;
            let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let l = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
            let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn render_background(bg: &Background, rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    match bg {
        Background::Flat { rgb } => Image::filled(h, w, *rgb),
        Background::Noise {
            base,
            amplitude,
            cell,
        } => {
            let coarse = value_noise(rng, h, w, *cell);
            let fine = value_noise(rng, h, w, (*cell / 3.0).max(2.0));
            let tint: [f32; 3] = [rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1)];
            Image::from_fn(h, w, |c, y, x| {
                let n = 0.7 * coarse[y * w + x] + 0.3 * fine[y * w + x];
                base[c] * tint[c] + amplitude * n
            })
        }
        Background::Gradient { top, bottom } => Image::from_fn(h, w, |c, y, _| {
            let t = y as f32 / (h.max(2) - 1) as f32;
            top[c] * (1.0 - t) + bottom[c] * t
        }),
    }
}

/// Renders image `index` of the domain; returns the image (before PNG
/// quantization) and its annotation.
pub fn render(domain: &DomainSpec, scene: &SceneSpec, index: u64) -> (Image, Vec<BoundingBox>, Vec<u32>) {
    let (h, w) = scene.image_size;
    let objects = layout(scene, index);
    let mut rng = stream(scene.seed, index, 1);
    let mut img = render_background(&domain.background, &mut rng, h, w);
    for obj in &objects {
        let color = *domain.palette.choose(&mut rng).expect("validated non-empty");
        let shade: f32 = rng.gen_range(0.85..1.0);
        let b = obj.bbox;
        for y in (b.y1.floor() as usize)..(b.y2.ceil() as usize).min(h) {
            for x in (b.x1.floor() as usize)..(b.x2.ceil() as usize).min(w) {
                if obj.covers(x as f64 + 0.5, y as f64 + 0.5) {
                    // darker rim one pixel in from the box edge
                    let edge = !obj.covers(x as f64 - 0.5, y as f64 + 0.5)
                        || !obj.covers(x as f64 + 1.5, y as f64 + 0.5)
                        || !obj.covers(x as f64 + 0.5, y as f64 - 0.5)
                        || !obj.covers(x as f64 + 0.5, y as f64 + 1.5);
                    let k = if edge { 0.7 * shade } else { shade };
                    for (c, &v) in color.iter().enumerate() {
                        img.set(c, y, x, v * k);
                    }
                }
            }
        }
    }
    for c in 0..3 {
        let (g, bi) = (domain.gain[c], domain.bias[c]);
        img.plane_mut(c).iter_mut().for_each(|v| *v = g * *v + bi);
    }
    let mut img = img.gaussian_blur(domain.blur_radius);
    if domain.noise_sigma > 0.0 {
        let mut nrng = stream(scene.seed, index, 2);
        let normal = Normal::new(0.0f32, domain.noise_sigma).expect("sigma validated");
        img.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut nrng));
    }
    img.clamp01();
    let boxes = objects.iter().map(|o| o.bbox).collect();
    let classes = objects.iter().map(|o| o.class_id).collect();
    (img, boxes, classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub ids: Vec<String>,
    pub domain: DomainSpec,
    pub scene: SceneSpec,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}

/// Writes `n_images` PNG images, per-image JSON annotations and a manifest
/// under `out_dir`. Deterministic in (domain, scene, n).
pub fn generate_domain(domain: &DomainSpec, scene: &SceneSpec, n_images: usize, out_dir: &Path) -> Result<Manifest> {
    domain.validate()?;
    scene.validate()?;
    if n_images == 0 {
        return Err(Error::Invalid("n_images must be >= 1".into()));
    }
    for sub in ["images", "annotations"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io_at(&d, e))?;
    }
    let mut ids = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let id = format!("{i:06}");
        let (img, boxes, classes) = render(domain, scene, i as u64);
        img.save_png(&out_dir.join("images").join(format!("{id}.png")))?;
        let ann = Annotation {
            boxes: boxes.iter().map(|b| b.to_array()).collect(),
            classes,
        };
        let json = serde_json::to_vec(&ann).expect("annotation serializes");
        write_file(&out_dir.join("annotations").join(format!("{id}.json")), &json)?;
        ids.push(id);
    }
    let manifest = Manifest {
        ids,
        domain: domain.clone(),
        scene: scene.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&out_dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

fn corrupt(path: &Path, reason: impl ToString) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn read_manifest(dir: &Path, guard: &FsGuard) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = guard.read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| corrupt(&path, e))
}

/// Loads an image-only view of a dataset (annotations are not read).
pub fn load_images(dir: &Path, guard: &FsGuard) -> Result<Vec<LabeledSample>> {
    let manifest = read_manifest(dir, guard)?;
    manifest
        .ids
        .iter()
        .map(|id| {
            let p = image_path(dir, id);
            Ok(LabeledSample::unlabeled(Image::decode_png(&guard.read(&p)?, &p)?))
        })
        .collect()
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.png"))
}

pub fn annotation_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("annotations").join(format!("{id}.json"))
}

/// Samples in manifest order with images in `[0,1]` and validated,
/// clipped boxes.
pub fn load_dataset(dir: &Path, guard: &FsGuard) -> Result<Vec<LabeledSample>> {
    let manifest = read_manifest(dir, guard)?;
    let mut out = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        let ip = image_path(dir, id);
        let image = Image::decode_png(&guard.read(&ip)?, &ip)?;
        let ap = annotation_path(dir, id);
        let ann: Annotation = serde_json::from_str(&guard.read_to_string(&ap)?).map_err(|e| corrupt(&ap, e))?;
        if ann.boxes.len() != ann.classes.len() {
            return Err(corrupt(&ap, format!("{} boxes but {} classes", ann.boxes.len(), ann.classes.len())));
        }
        let (mh, mw) = manifest.scene.image_size;
        if image.height() != mh || image.width() != mw {
            return Err(Error::Shape(format!(
                "{}: image is {}x{}, manifest says {mh}x{mw}",
                ip.display(),
                image.height(),
                image.width()
            )));
        }
        let mut boxes = Vec::with_capacity(ann.boxes.len());
        let mut classes = Vec::with_capacity(ann.boxes.len());
        for (b, &c) in ann.boxes.iter().zip(&ann.classes) {
            if c == 0 {
                return Err(corrupt(&ap, "class id 0 is reserved for background"));
            }
            let bb = BoundingBox::new(b[0], b[1], b[2], b[3]).map_err(|e| corrupt(&ap, e))?;
            match clip_box(&bb, image.height(), image.width()) {
                Some(clipped) => {
                    boxes.push(clipped);
                    classes.push(c);
                }
                None => return Err(corrupt(&ap, format!("box {b:?} lies outside the image"))),
            }
        }
        out.push(LabeledSample::new(image, boxes, classes)?);
    }
    Ok(out)
}

/// Bilinear resize so the short edge equals `target`; boxes scale with it.
pub fn resize_short_edge(sample: &LabeledSample, target: usize) -> Result<LabeledSample> {
    if target < 32 {
        return Err(Error::Invalid(format!("short-edge target {target} below 32")));
    }
    let (h, w) = (sample.height(), sample.width());
    let factor = target as f64 / h.min(w) as f64;
    let (nh, nw) = if h <= w {
        (target, (w as f64 * factor).round() as usize)
    } else {
        ((h as f64 * factor).round() as usize, target)
    };
    Ok(LabeledSample {
        image: sample.image.resize(nh, nw),
        boxes: sample.boxes.iter().map(|b| b.scale(factor)).collect(),
        classes: sample.classes.clone(),
        weight: sample.weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_rect_scene() -> (DomainSpec, SceneSpec) {
        let domain = DomainSpec {
            name: "flat".into(),
            palette: vec![[0.9, 0.9, 0.9]],
            background: Background::Flat { rgb: [0.1, 0.1, 0.1] },
            gain: [1.0; 3],
            bias: [0.0; 3],
            noise_sigma: 0.0,
            blur_radius: 0.0,
        };
        let scene = SceneSpec {
            objects_per_image: (1, 1),
            object_kinds: vec![(1, ShapeKind::Rectangle)],
            seed: 11,
            ..SceneSpec::default()
        };
        (domain, scene)
    }

    /// Tight bounds of pixels that differ from the flat background.
    fn raster_bounds(img: &Image, bg: f32) -> Option<[f64; 4]> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..img.height() {
            for x in 0..img.width() {
                if (img.get(0, y, x) - bg).abs() > 1e-3 {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        (x1 != usize::MAX).then_some([x1 as f64, y1 as f64, x2 as f64, y2 as f64])
    }

    #[test]
    fn rectangle_annotation_matches_raster() {
        let (domain, scene) = one_rect_scene();
        for i in 0..10 {
            let (img, boxes, _) = render(&domain, &scene, i);
            let r = raster_bounds(&img, 0.1).unwrap();
            let a = boxes[0].to_array();
            for k in 0..4 {
                assert!((r[k] - a[k]).abs() <= 1.0, "image {i}: raster {r:?} vs box {a:?}");
            }
        }
    }

    #[test]
    fn every_box_overlaps_its_raster_support() {
        let domain = DomainSpec::preset("source").unwrap();
        let scene = SceneSpec {
            seed: 5,
            ..SceneSpec::default()
        };
        for i in 0..20 {
            for obj in layout(&scene, i) {
                let b = obj.bbox;
                let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
                for y in (b.y1 as usize)..(b.y2 as usize) {
                    for x in (b.x1 as usize)..(b.x2 as usize) {
                        if obj.covers(x as f64 + 0.5, y as f64 + 0.5) {
                            x1 = x1.min(x as f64);
                            y1 = y1.min(y as f64);
                            x2 = x2.max(x as f64 + 1.0);
                            y2 = y2.max(y as f64 + 1.0);
                        }
                    }
                }
                let support = BoundingBox::new(x1, y1, x2, y2).unwrap();
                assert!(iou(&support, &b) >= 0.5);
            }
            let _ = render(&domain, &scene, i);
        }
    }

    #[test]
    fn generation_rejects_overlap() {
        let scene = SceneSpec {
            objects_per_image: (8, 8),
            seed: 3,
            ..SceneSpec::default()
        };
        for i in 0..30 {
            let objs = layout(&scene, i);
            for (a, oa) in objs.iter().enumerate() {
                for ob in &objs[a + 1..] {
                    assert!(iou(&oa.bbox, &ob.bbox) <= 0.3);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_geometry_across_domains() {
        let scene = SceneSpec {
            seed: 9,
            ..SceneSpec::default()
        };
        let s = DomainSpec::preset("source").unwrap();
        let t = DomainSpec::preset("target-color").unwrap();
        for i in 0..5 {
            let (_, bs, cs) = render(&s, &scene, i);
            let (_, bt, ct) = render(&t, &scene, i);
            assert_eq!(bs, bt);
            assert_eq!(cs, ct);
        }
    }

    #[test]
    fn channel_gain_shifts_statistics() {
        let scene = SceneSpec {
            seed: 21,
            ..SceneSpec::default()
        };
        let s = DomainSpec::preset("source").unwrap();
        let t = DomainSpec::preset("target-color").unwrap();
        let mean = |d: &DomainSpec| {
            let mut acc = [0.0; 3];
            for i in 0..50 {
                let m = render(d, &scene, i).0.channel_means();
                (0..3).for_each(|c| acc[c] += m[c] / 50.0);
            }
            acc
        };
        let (ms, mt) = (mean(&s), mean(&t));
        assert!((mt[0] - ms[0]).abs() > 0.05, "R {ms:?} vs {mt:?}");
        assert!((mt[2] - ms[2]).abs() > 0.05, "B {ms:?} vs {mt:?}");
    }

    #[test]
    fn invalid_specs_rejected_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let mut d = DomainSpec::preset("source").unwrap();
        d.gain = [0.0, 1.0, 1.0];
        assert!(generate_domain(&d, &SceneSpec::default(), 2, &out).is_err());
        assert!(!out.exists());
        let d = DomainSpec::preset("source").unwrap();
        assert!(generate_domain(&d, &SceneSpec::default(), 0, &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn resize_examples() {
        let img = Image::filled(100, 200, [0.5; 3]);
        let s = LabeledSample::new(img, vec![BoundingBox::new(10., 20., 30., 50.).unwrap()], vec![1]).unwrap();
        let r = resize_short_edge(&s, 200).unwrap();
        assert_eq!((r.height(), r.width()), (200, 400));
        assert_eq!(r.boxes[0].to_array(), [20., 40., 60., 100.]);
        let ratio = r.boxes[0].area() / s.boxes[0].area();
        assert!((ratio - 4.0).abs() / 4.0 < 1e-6);

        let img = Image::filled(128, 256, [0.5; 3]);
        let s = LabeledSample::unlabeled(img);
        let r = resize_short_edge(&s, 128).unwrap();
        assert_eq!((r.height(), r.width()), (128, 256));
        assert!(resize_short_edge(&s, 16).is_err());
    }
}
