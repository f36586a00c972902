use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};
use tape::{Graph, Real, Tensor, Var};

use super::DetectorConfig;
use crate::{Error, Result};

/// Named tensors of one network: trainable weights plus normalization
/// buffers (`*.running_mean`, `*.running_var`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { map: BTreeMap::new() }
    }
}

pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Detector-proper parameters, as opposed to adaptation-only add-ons.
pub fn is_detector_param(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("rpn.") || name.starts_with("roi.")
}

fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("std > 0");
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(d.sample(rng))).collect())
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let d = Uniform::new_inclusive(-bound, bound);
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(d.sample(rng))).collect())
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh detector weights: He-normal convolutions, unit normalization,
    /// small-std prediction heads.
    pub fn init_detector(cfg: &DetectorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = Self::new();
        let mut cin = 3;
        for (s, &co) in cfg.channels.iter().enumerate() {
            for k in 1..=2 {
                let ci = if k == 1 { cin } else { co };
                let p = format!("backbone.s{}", s + 1);
                let std = (2.0 / (ci * 9) as f64).sqrt();
                ps.insert(format!("{p}.conv{k}.weight"), normal(&mut rng, &[co, ci, 3, 3], std));
                ps.insert(format!("{p}.bn{k}.gamma"), Tensor::full(vec![co], T::one()));
                ps.insert(format!("{p}.bn{k}.beta"), Tensor::zeros(vec![co]));
                ps.insert(format!("{p}.bn{k}.running_mean"), Tensor::zeros(vec![co]));
                ps.insert(format!("{p}.bn{k}.running_var"), Tensor::full(vec![co], T::one()));
            }
            cin = co;
        }
        let a = cfg.anchor_sizes.len();
        let c4 = cfg.channels[3];
        let h = cfg.rpn_hidden;
        ps.insert("rpn.conv.weight".into(), normal(&mut rng, &[h, c4, 3, 3], 0.01));
        ps.insert("rpn.conv.bias".into(), Tensor::zeros(vec![h]));
        ps.insert("rpn.cls.weight".into(), normal(&mut rng, &[a, h, 1, 1], 0.01));
        ps.insert("rpn.cls.bias".into(), Tensor::zeros(vec![a]));
        ps.insert("rpn.bbox.weight".into(), normal(&mut rng, &[4 * a, h, 1, 1], 0.01));
        ps.insert("rpn.bbox.bias".into(), Tensor::zeros(vec![4 * a]));
        let flat = cfg.channels[2] * cfg.roi_size * cfg.roi_size;
        let f = cfg.fc_dim;
        ps.insert("roi.fc1.weight".into(), uniform(&mut rng, &[f, flat], 1.0 / (flat as f64).sqrt()));
        ps.insert("roi.fc1.bias".into(), uniform(&mut rng, &[f], 1.0 / (flat as f64).sqrt()));
        ps.insert("roi.fc2.weight".into(), uniform(&mut rng, &[f, f], 1.0 / (f as f64).sqrt()));
        ps.insert("roi.fc2.bias".into(), uniform(&mut rng, &[f], 1.0 / (f as f64).sqrt()));
        ps.insert("roi.cls.weight".into(), normal(&mut rng, &[cfg.num_classes + 1, f], 0.01));
        ps.insert("roi.cls.bias".into(), Tensor::zeros(vec![cfg.num_classes + 1]));
        ps.insert("roi.bbox.weight".into(), normal(&mut rng, &[4, f], 0.001));
        ps.insert("roi.bbox.bias".into(), Tensor::zeros(vec![4]));
        ps
    }

    pub fn insert(&mut self, name: String, t: Tensor<T>) -> Option<Tensor<T>> {
        self.map.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    /// Panics with the name when absent; shapes are validated up front.
    pub fn expect(&self, name: &str) -> &Tensor<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    /// Entries whose names satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            map: self
                .map
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts every entry of `other`, replacing existing names.
    pub fn merge(&mut self, other: &Self) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|t| t.is_finite())
    }

    /// Content hash over names, shapes and values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.map {
            h.update(k.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_f64().unwrap().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks that every detector tensor the architecture needs is present
    /// with the right shape.
    pub fn validate(&self, cfg: &DetectorConfig) -> Result<()> {
        let reference = ParamStore::<f32>::init_detector(cfg, 0);
        for (name, t) in reference.iter() {
            match self.get(name) {
                None => return Err(Error::Shape(format!("parameter {name} missing"))),
                Some(have) if have.shape() != t.shape() => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, architecture needs {:?}",
                        have.shape(),
                        t.shape()
                    )))
                }
                Some(have) if !have.is_finite() => {
                    return Err(Error::Invalid(format!("parameter {name} is not finite")))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Graph handles for the non-buffer entries of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Records every non-buffer tensor on `g`; `trainable(name)` decides
    /// between a gradient-receiving leaf and a constant.
    pub fn new<T: Real>(g: &mut Graph<T>, ps: &ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = ps
            .iter()
            .filter(|(k, _)| !is_buffer(k))
            .map(|(k, v)| {
                let var = if trainable(k) {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
