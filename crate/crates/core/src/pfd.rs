//! Prototype distillation: class-wise mean ROI features of teacher and
//! student, smoothed over iterations and pulled together with an L2 loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tape::{Graph, Real, Roi, Tensor, Var};

use crate::detector::{Bound, ParamStore};
use crate::geom::BoundingBox;

pub const PREFIX: &str = "pfd.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfdConfig {
    /// Weight of the current local prototype in the global update.
    pub beta: f64,
    /// Blend against the previous local prototype instead of the previous
    /// global one.
    pub literal_local_recurrence: bool,
}

impl Default for PfdConfig {
    fn default() -> Self {
        Self {
            beta: 0.7,
            literal_local_recurrence: false,
        }
    }
}

/// 3x3 transformation conv on the student path, initialised to the
/// identity map.
pub fn init_transform<T: Real>(d: usize) -> ParamStore<T> {
    let mut w = Tensor::zeros(vec![d, d, 3, 3]);
    for c in 0..d {
        w.data_mut()[((c * d + c) * 3 + 1) * 3 + 1] = T::one();
    }
    let mut ps = ParamStore::new();
    ps.insert("pfd.tf.weight".into(), w);
    ps.insert("pfd.tf.bias".into(), Tensor::zeros(vec![d]));
    ps
}

pub fn apply_transform<T: Real>(g: &mut Graph<T>, b: &Bound, fm: Var) -> Var {
    g.conv2d(fm, b.var("pfd.tf.weight"), Some(b.var("pfd.tf.bias")), 1, 1)
}

/// Box with its batch index and class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassBox {
    pub batch: usize,
    pub bbox: BoundingBox,
    pub class_id: u32,
}

/// Pooled, spatially averaged feature per usable box: `[R, d]` rows and
/// the class of each row. Boxes that collapse on the feature grid are
/// skipped. `None` when no box is usable.
pub fn class_features<T: Real>(
    g: &mut Graph<T>,
    fm: Var,
    boxes: &[ClassBox],
    spatial_scale: f64,
    out_size: usize,
    sampling: usize,
) -> Option<(Var, Vec<u32>)> {
    let mut rois = Vec::new();
    let mut classes = Vec::new();
    for cb in boxes {
        let b = cb.bbox;
        let (w, h) = (b.width() * spatial_scale, b.height() * spatial_scale);
        if !(w.is_finite() && h.is_finite() && w > 1e-6 && h > 1e-6) {
            log::debug!("skipping degenerate prototype box {:?}", b.to_array());
            continue;
        }
        rois.push(Roi {
            batch: cb.batch,
            x1: T::lit(b.x1),
            y1: T::lit(b.y1),
            x2: T::lit(b.x2),
            y2: T::lit(b.y2),
        });
        classes.push(cb.class_id);
    }
    if rois.is_empty() {
        return None;
    }
    let pooled = g.roi_align(fm, &rois, T::lit(spatial_scale), (out_size, out_size), sampling);
    Some((g.spatial_mean(pooled), classes))
}

/// Mean of the rows of each class, keyed by class id.
pub fn local_prototypes<T: Real>(g: &mut Graph<T>, feats: Var, classes: &[u32]) -> BTreeMap<u32, Var> {
    let mut rows: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        rows.entry(c).or_default().push(i);
    }
    rows.into_iter().map(|(c, r)| (c, g.mean_rows(feats, &r))).collect()
}

/// Global prototypes with their update state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub beta: f64,
    pub literal_local_recurrence: bool,
    pub global: BTreeMap<u32, Vec<f64>>,
    pub last_local: BTreeMap<u32, Vec<f64>>,
}

impl PrototypeBank {
    pub fn new(cfg: &PfdConfig) -> Self {
        Self {
            beta: cfg.beta,
            literal_local_recurrence: cfg.literal_local_recurrence,
            global: BTreeMap::new(),
            last_local: BTreeMap::new(),
        }
    }

    /// The history term the next update for `class_id` blends against.
    pub fn history(&self, class_id: u32) -> Option<&Vec<f64>> {
        if self.literal_local_recurrence {
            self.last_local.get(&class_id)
        } else {
            self.global.get(&class_id)
        }
    }

    /// Value-level update: first sight initialises, afterwards
    /// `beta * lp + (1 - beta) * history`.
    pub fn update(&mut self, class_id: u32, lp: &[f64]) -> &Vec<f64> {
        let gp = match self.history(class_id) {
            None => lp.to_vec(),
            Some(h) => lp
                .iter()
                .zip(h)
                .map(|(&l, &p)| self.beta * l + (1.0 - self.beta) * p)
                .collect(),
        };
        self.last_local.insert(class_id, lp.to_vec());
        self.global.insert(class_id, gp);
        &self.global[&class_id]
    }

    /// Graph-level update: the returned global prototype carries gradient
    /// through `lp` only. Call [`PrototypeBank::commit`] afterwards.
    pub fn update_var<T: Real>(&self, g: &mut Graph<T>, class_id: u32, lp: Var) -> Var {
        match self.history(class_id) {
            None => lp,
            Some(h) => {
                let hist = g.constant(Tensor::new(vec![h.len()], h.iter().map(|&v| T::lit(v)).collect()));
                let a = g.scale(lp, T::lit(self.beta));
                let b = g.scale(hist, T::lit(1.0 - self.beta));
                g.add(a, b)
            }
        }
    }

    /// Stores the values computed by [`PrototypeBank::update_var`].
    pub fn commit(&mut self, class_id: u32, lp: Vec<f64>, gp: Vec<f64>) {
        self.last_local.insert(class_id, lp);
        self.global.insert(class_id, gp);
    }

    pub fn is_initialized(&self, class_id: u32) -> bool {
        self.global.contains_key(&class_id)
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `sum_c ||GP^t_c - GP^s_c||` over classes initialised in both banks.
pub fn pfd_loss_values(teacher: &PrototypeBank, student: &PrototypeBank) -> f64 {
    teacher
        .global
        .iter()
        .filter_map(|(c, t)| student.global.get(c).map(|s| l2(t, s)))
        .sum()
}

/// Per-class distance, for logging.
pub fn prototype_distances(teacher: &PrototypeBank, student: &PrototypeBank) -> BTreeMap<u32, f64> {
    teacher
        .global
        .iter()
        .filter_map(|(c, t)| student.global.get(c).map(|s| (*c, l2(t, s))))
        .collect()
}

/// Graph form of the loss; teacher prototypes enter as constants.
pub fn pfd_loss<T: Real>(g: &mut Graph<T>, teacher: &BTreeMap<u32, Vec<f64>>, student: &BTreeMap<u32, Var>) -> Var {
    let mut terms = Vec::new();
    for (c, s) in student {
        if let Some(t) = teacher.get(c) {
            let tv = g.constant(Tensor::new(vec![t.len()], t.iter().map(|&v| T::lit(v)).collect()));
            let d = g.sub(tv, *s);
            terms.push(g.l2_norm(d));
        }
    }
    if terms.is_empty() {
        log::debug!("no class shared by both prototype banks");
    }
    g.add_all(&terms)
}

pub fn values<T: Real>(g: &Graph<T>, v: Var) -> Vec<f64> {
    g.value(v).data().iter().map(|x| x.to_f64().unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank(beta: f64) -> PrototypeBank {
        PrototypeBank::new(&PfdConfig {
            beta,
            ..PfdConfig::default()
        })
    }

    #[test]
    fn update_examples() {
        let mut b = bank(0.7);
        assert_eq!(b.update(1, &[1.0, 0.0]), &vec![1.0, 0.0]);
        let mut b = bank(0.7);
        b.update(1, &[0.0, 0.0]);
        assert_eq!(b.update(1, &[1.0, 1.0]), &vec![0.7, 0.7]);
        let mut b = bank(1.0);
        b.update(2, &[3.0]);
        assert_eq!(b.update(2, &[-1.0]), &vec![-1.0]);
    }

    #[test]
    fn literal_recurrence_uses_previous_local() {
        let mut b = PrototypeBank::new(&PfdConfig {
            beta: 0.5,
            literal_local_recurrence: true,
        });
        b.update(1, &[4.0]);
        b.update(1, &[0.0]); // global 2, local 0
        assert_eq!(b.update(1, &[2.0]), &vec![1.0]);
    }

    #[test]
    fn loss_examples() {
        let mut t = bank(0.7);
        let mut s = bank(0.7);
        t.update(1, &[3.0, 4.0]);
        s.update(1, &[0.0, 0.0]);
        assert_eq!(pfd_loss_values(&t, &s), 5.0);
        assert_eq!(pfd_loss_values(&t, &t), 0.0);
        t.update(2, &[1.0, 0.0]);
        s.update(2, &[0.0, 0.0]);
        assert_eq!(pfd_loss_values(&t, &s), 6.0);
        // classes missing from one side are ignored
        t.update(3, &[9.0, 9.0]);
        assert_eq!(pfd_loss_values(&t, &s), 6.0);
    }

    #[test]
    fn local_prototype_is_class_mean() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::new(vec![3, 2], vec![1.0, 3.0, 9.0, 9.0, 3.0, 5.0]));
        let lp = local_prototypes(&mut g, f, &[1, 2, 1]);
        assert_eq!(values(&g, lp[&1]), vec![2.0, 4.0]);
        assert_eq!(values(&g, lp[&2]), vec![9.0, 9.0]);
        let lp = local_prototypes(&mut g, f, &[1, 1, 1]);
        let lp_rev = {
            let r = g.constant(Tensor::new(vec![3, 2], vec![3.0, 5.0, 9.0, 9.0, 1.0, 3.0]));
            local_prototypes(&mut g, r, &[1, 1, 1])
        };
        assert_eq!(values(&g, lp[&1]), values(&g, lp_rev[&1]));
    }

    #[test]
    fn class_features_of_constant_map() {
        let mut g = Graph::<f64>::new();
        let fm = g.constant(Tensor::full(vec![1, 4, 16, 16], 0.25));
        let bx = |x: f64, c| ClassBox {
            batch: 0,
            bbox: BoundingBox::new(x, 4.0, x + 30.0, 50.0).unwrap(),
            class_id: c,
        };
        let (f, classes) = class_features(&mut g, fm, &[bx(3.0, 1), bx(40.0, 1)], 0.125, 7, 2).unwrap();
        assert_eq!(classes, vec![1, 1]);
        assert_eq!(g.shape(f), &[2, 4]);
        assert!(g.value(f).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn identity_transform() {
        let ps = init_transform::<f64>(3);
        let mut g = Graph::<f64>::new();
        let b = Bound::new(&mut g, &ps, |_| false);
        let x = g.constant(Tensor::new(vec![1, 3, 4, 4], (0..48).map(|v| v as f64).collect()));
        let y = apply_transform(&mut g, &b, x);
        assert_eq!(g.value(y), g.value(x));
    }

    proptest! {
        #[test]
        fn global_stays_in_envelope(
            beta in 0.05f64..=1.0,
            seq in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..40),
        ) {
            let mut b = bank(beta);
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for lp in &seq {
                for k in 0..3 {
                    lo[k] = lo[k].min(lp[k]);
                    hi[k] = hi[k].max(lp[k]);
                }
                let gp = b.update(1, lp).clone();
                for k in 0..3 {
                    prop_assert!(gp[k] >= lo[k] - 1e-12 && gp[k] <= hi[k] + 1e-12);
                }
            }
        }
    }
}
