//! Feature-level perturbation: an adversarially trained predictor proposes
//! new channel statistics for the stage-1 features, which are mixed with
//! the originals and imposed AdaIN-style, then rescaled to keep each
//! sample's L1 norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tape::{ChanOp, Graph, Real, Tensor, Var};

use crate::detector::{Bound, ParamStore};

pub const PREFIX: &str = "afsp.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AfspConfig {
    /// Weight of the adversarial statistics in the mix.
    pub alpha: f64,
    /// Fraction of all iterations over which alpha ramps up from 0.
    pub warmup_fraction: f64,
    pub eps: f64,
    /// Gradient reversal on the predictor's input and output. Switching it
    /// off turns the predictor into an ordinary collaborator.
    pub reverse_gradients: bool,
}

impl Default for AfspConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            warmup_fraction: 0.1,
            eps: 1e-5,
            reverse_gradients: true,
        }
    }
}

impl AfspConfig {
    /// Preset value for adaptation across sensors.
    pub const CROSS_SENSOR_ALPHA: f64 = 0.3;

    /// Mix weight at iteration `iter` of `total`.
    pub fn alpha_at(&self, iter: usize, total: usize) -> f64 {
        let ramp = self.warmup_fraction * total as f64;
        if ramp <= 0.0 {
            return self.alpha;
        }
        self.alpha * (iter as f64 / ramp).min(1.0)
    }
}

/// Predictor weights for `d` input channels, hidden width `d`.
pub fn init_params<T: Real>(d: usize, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).unwrap();
    let mut draw = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect())
    };
    let mut ps = ParamStore::new();
    ps.insert("afsp.fc1.weight".into(), draw(vec![d, 2 * d]));
    ps.insert("afsp.fc1.bias".into(), Tensor::zeros(vec![d]));
    ps.insert("afsp.fc2.weight".into(), draw(vec![2 * d, d]));
    ps.insert("afsp.fc2.bias".into(), Tensor::zeros(vec![2 * d]));
    ps
}

/// Per-sample, per-channel `(mu, sigma)` with `sigma = sqrt(var + eps^2)`.
pub fn channel_stats<T: Real>(g: &mut Graph<T>, fm: Var, eps: f64) -> (Var, Var) {
    let mu = g.spatial_mean(fm);
    let sigma = g.spatial_std(fm, T::lit(eps));
    (mu, sigma)
}

/// `FC(ReLU(FC([mu, sigma])))` split into `(mu_adv, sigma_adv)`, with
/// softplus keeping `sigma_adv >= eps`.
pub fn predict_adversarial_style<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    mu: Var,
    sigma: Var,
    eps: f64,
    reverse: bool,
) -> (Var, Var) {
    let d = g.shape(mu)[1];
    let mut x = g.concat_cols(mu, sigma);
    if reverse {
        x = g.reverse_grad(x);
    }
    let h = g.linear(x, b.var("afsp.fc1.weight"), Some(b.var("afsp.fc1.bias")));
    let h = g.relu(h);
    let mut y = g.linear(h, b.var("afsp.fc2.weight"), Some(b.var("afsp.fc2.bias")));
    if reverse {
        y = g.reverse_grad(y);
    }
    let mu_adv = g.slice_cols(y, 0, d);
    let raw = g.slice_cols(y, d, d);
    let sp = g.softplus(raw);
    let n = g.shape(sp)[0];
    let floor = g.constant(Tensor::full(vec![n, d], T::lit(eps)));
    let sigma_adv = g.add(sp, floor);
    (mu_adv, sigma_adv)
}

/// `alpha * adv + (1 - alpha) * original`, for both statistics.
pub fn mix_styles<T: Real>(
    g: &mut Graph<T>,
    (mu, sigma): (Var, Var),
    (mu_adv, sigma_adv): (Var, Var),
    alpha: f64,
) -> (Var, Var) {
    let mut blend = |orig: Var, adv: Var| {
        let a = g.scale(adv, T::lit(alpha));
        let o = g.scale(orig, T::lit(1.0 - alpha));
        g.add(a, o)
    };
    (blend(mu, mu_adv), blend(sigma, sigma_adv))
}

/// `sigma_mix * (fm - mu) / sigma + mu_mix`, channel-wise.
pub fn restyle<T: Real>(g: &mut Graph<T>, fm: Var, (mu, sigma): (Var, Var), (mu_mix, sigma_mix): (Var, Var)) -> Var {
    let c = g.chan(fm, mu, ChanOp::Sub);
    let n = g.chan(c, sigma, ChanOp::Div);
    let s = g.chan(n, sigma_mix, ChanOp::Mul);
    g.chan(s, mu_mix, ChanOp::Add)
}

/// Rescales each sample of `fp` to the L1 norm of the same sample of
/// `reference`. Samples where `fp` is all zero are replaced by `reference`.
pub fn l1_renormalize<T: Real>(g: &mut Graph<T>, fp: Var, reference: Var) -> Var {
    let n_in = g.sample_abs_sum(reference);
    let n_out = g.sample_abs_sum(fp);
    let zero: Vec<bool> = g.value(n_out).data().iter().map(|&v| v == T::zero()).collect();
    if !zero.iter().any(|&z| z) {
        let ratio = g.div(n_in, n_out);
        return g.sample_scale(fp, ratio);
    }
    let n = zero.len();
    let pad = g.constant(Tensor::new(
        vec![n],
        zero.iter().map(|&z| if z { T::one() } else { T::zero() }).collect(),
    ));
    let safe = g.add(n_out, pad);
    let ratio = g.div(n_in, safe);
    let scaled = g.sample_scale(fp, ratio);
    let kept = g.sample_scale(reference, pad);
    g.add(scaled, kept)
}

pub struct AfspOut {
    pub out: Var,
    /// Per-sample `|‖out‖₁ − ‖in‖₁| / ‖in‖₁`, measured in f64.
    pub norm_deviation: Vec<f64>,
}

fn sample_l1<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    let n = t.shape()[0];
    let per = t.numel() / n;
    t.data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v.to_f64().unwrap().abs()).sum())
        .collect()
}

/// The whole module. Outside training it is the identity and returns
/// `fm` itself.
pub fn afsp_forward<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    fm: Var,
    cfg: &AfspConfig,
    alpha: f64,
    training: bool,
) -> AfspOut {
    if !training {
        return AfspOut {
            out: fm,
            norm_deviation: vec![0.0; g.shape(fm)[0]],
        };
    }
    let stats = channel_stats(g, fm, cfg.eps);
    let adv = predict_adversarial_style(g, b, stats.0, stats.1, cfg.eps, cfg.reverse_gradients);
    let mixed = mix_styles(g, stats, adv, alpha);
    let styled = restyle(g, fm, stats, mixed);
    let out = l1_renormalize(g, styled, fm);
    let before = sample_l1(g.value(fm));
    let after = sample_l1(g.value(out));
    let norm_deviation = before
        .iter()
        .zip(&after)
        .map(|(&a, &b)| if a > 0.0 { (b - a).abs() / a } else { b })
        .collect();
    AfspOut { out, norm_deviation }
}
