//! Training objectives: Dice, edge-aware self-supervision and the WGAN-GP
//! critic and generator terms.

mod transform;

use std::rc::Rc;

use log::debug;
use serde::{Deserialize, Serialize};
use vesselseg_autograd::{Graph, Real, SpatialMap, Tensor, Var};

pub use transform::{sample_transform, AffineTransform, Interp, TransformConfig};

use crate::error::{Error, Result};
use crate::nets::{build_background_triplet, build_triplet};
use crate::raster::Mask;
use crate::weaklabel::edge_weight_map_soft;

/// A differentiable map from one tensor to another (network forward pass).
pub type Net<'a, 'g, T> = &'a dyn Fn(Var<'g, T>) -> Result<Var<'g, T>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Laplace smoothing of the Dice ratio.
    pub zeta: f64,
    pub tau: f64,
    pub eta: f64,
    pub lambda: f64,
    /// Scale on each adversarial term of the segmenter objective.
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { zeta: 1.0, tau: 1.0, eta: 2.0, lambda: 10.0, adv: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta > 0.0) {
            return Err(Error::Config(format!("zeta must be positive, got {}", self.zeta)));
        }
        for (name, v) in [("tau", self.tau), ("eta", self.eta), ("lambda", self.lambda), ("adv", self.adv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Soft Dice loss `1 - (2 Σ p m + ζ) / (Σ p + Σ m + ζ)`, per sample, averaged
/// over the batch.
pub fn dice_loss<'g, T: Real>(pred: Var<'g, T>, target: Var<'g, T>, zeta: f64) -> Result<Var<'g, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("dice: prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let n = pred.shape()[0];
    let inter = (pred * target).sum_per_sample().scale(2.0).offset(zeta);
    let total = (pred.sum_per_sample() + target.sum_per_sample()).offset(zeta);
    let per = inter.div(total).scale(-1.0).offset(1.0);
    Ok(per.sum().scale(1.0 / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfSupConfig {
    /// Half-width of the edge ring used as weight map.
    pub r3: usize,
    /// Divide each sample's squared error by its count of valid weighted
    /// pixels (otherwise the raw sum is used).
    pub normalize: bool,
    pub transforms: TransformConfig,
}

impl Default for SelfSupConfig {
    fn default() -> Self {
        Self { r3: 15, normalize: true, transforms: TransformConfig::default() }
    }
}

fn weight_maps<T: Real>(pred: &Tensor<T>, r3: usize) -> Tensor<T> {
    let [n, _, h, w] = pred.shape();
    let mut out = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let soft: Vec<f32> = pred.narrow_batch(i, 1).data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        out.extend(edge_weight_map_soft(h, w, &soft, r3).data().iter().map(|&b| if b == 1 { T::one() } else { T::zero() }));
    }
    Tensor::new([n, 1, h, w], out)
}

fn mask_tensor<T: Real>(masks: &[Mask]) -> Tensor<T> {
    let (h, w) = (masks[0].height, masks[0].width);
    let data = masks.iter().flat_map(|m| m.data().iter().map(|&b| if b == 1 { T::one() } else { T::zero() })).collect();
    Tensor::new([masks.len(), 1, h, w], data)
}

/// Per-sample maps and validity masks for a batch of transforms.
pub fn transform_maps(transforms: &[AffineTransform], h: usize, w: usize) -> Result<(Rc<[SpatialMap]>, Vec<Mask>)> {
    let mut maps = Vec::with_capacity(transforms.len());
    let mut valid = Vec::with_capacity(transforms.len());
    for t in transforms {
        let (m, v) = t.spatial_map(h, w)?;
        maps.push(m);
        valid.push(v);
    }
    Ok((maps.into(), valid))
}

/// Edge-aware self-supervision `‖w'·F(Mx) − M{w·F(x)}‖²`, restricted to the
/// transform's valid pixels. `pred` is `F(x)` when already computed.
pub fn self_sup_with_prediction<'g, T: Real>(
    seg: Net<'_, 'g, T>,
    x: Var<'g, T>,
    pred: Var<'g, T>,
    transforms: &[AffineTransform],
    cfg: &SelfSupConfig,
) -> Result<Var<'g, T>> {
    let [n, _, h, w] = x.shape();
    if transforms.len() != n {
        return Err(Error::Shape(format!("{} transforms for a batch of {n}", transforms.len())));
    }
    if pred.shape() != [n, 1, h, w] {
        return Err(Error::Shape(format!("prediction {:?} for input {:?}", pred.shape(), x.shape())));
    }
    let g = x.graph();
    let (maps, valid) = transform_maps(transforms, h, w)?;
    let mx = x.spatial(maps.clone(), false);
    let pred_m = seg(mx)?;
    let w_x = g.constant(weight_maps(&pred.value(), cfg.r3));
    let w_mx = g.constant(weight_maps(&pred_m.value(), cfg.r3));
    let moved = (w_x * pred).spatial(maps.clone(), false);
    let valid_t = mask_tensor::<T>(&valid);
    let diff = w_mx * pred_m - moved;
    let sq = (diff * diff) * g.constant(valid_t.clone());
    let per = sq.sum_per_sample();
    let per = if cfg.normalize {
        let moved_w = w_x.spatial(maps, false).value();
        let wv = w_mx.value();
        let counts: Vec<T> = (0..n)
            .map(|i| {
                let lo = i * h * w;
                let c = (lo..lo + h * w)
                    .filter(|&k| valid_t.data()[k] > T::zero() && (wv.data()[k] > T::zero() || moved_w.data()[k] > T::zero()))
                    .count();
                T::from_f64c(c.max(1) as f64)
            })
            .collect();
        per.div(g.constant(Tensor::new([n, 1, 1, 1], counts)))
    } else {
        per
    };
    Ok(per.sum().scale(1.0 / n as f64))
}

pub fn self_sup_loss<'g, T: Real>(seg: Net<'_, 'g, T>, x: Var<'g, T>, transforms: &[AffineTransform], cfg: &SelfSupConfig) -> Result<Var<'g, T>> {
    let pred = seg(x)?;
    self_sup_with_prediction(seg, x, pred, transforms, cfg)
}

pub struct Penalty<'g, T> {
    /// `λ · mean (‖∇‖ − 1)²`.
    pub value: Var<'g, T>,
    /// Per-sample input-gradient norms.
    pub norms: Vec<f64>,
}

/// WGAN-GP penalty at `ε·real + (1−ε)·fake`, one `ε` per sample.
pub fn gradient_penalty<'g, T: Real>(
    g: &'g Graph<T>,
    critic: Net<'_, 'g, T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: &[f64],
    lambda: f64,
) -> Result<Penalty<'g, T>> {
    let shape = real.shape();
    if fake.shape() != shape || eps.len() != shape[0] {
        return Err(Error::Shape(format!("penalty: real {:?}, fake {:?}, {} eps", shape, fake.shape(), eps.len())));
    }
    let per = shape[1] * shape[2] * shape[3];
    let mixed: Vec<T> = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let e = T::from_f64c(eps[i / per]);
            e * r + (T::one() - e) * f
        })
        .collect();
    let hat = g.variable(Tensor::new(shape, mixed));
    let scores = critic(hat)?;
    let grad = g.grad_graph(scores.sum(), &[hat]).remove(0);
    if !grad.value().all_finite() {
        return Err(Error::NonFinite { context: "gradient penalty input gradient".into() });
    }
    let norm = (grad * grad).sum_per_sample().offset(1e-24).sqrt();
    let norms = norm.value().data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let value = norm.offset(-1.0).square().sum().scale(lambda / shape[0] as f64);
    Ok(Penalty { value, norms })
}

pub struct CriticLoss<'g, T> {
    /// `E[D(fake)] − E[D(real)] + GP`.
    pub loss: Var<'g, T>,
    pub d_real: f64,
    pub d_fake: f64,
    pub gp: f64,
}

pub fn critic_loss<'g, T: Real>(
    g: &'g Graph<T>,
    critic: Net<'_, 'g, T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: &[f64],
    lambda: f64,
) -> Result<CriticLoss<'g, T>> {
    let d_real = critic(g.constant(real.clone()))?.mean();
    let d_fake = critic(g.constant(fake.clone()))?.mean();
    let gp = gradient_penalty(g, critic, real, fake, eps, lambda)?;
    let loss = d_fake - d_real + gp.value;
    let f = |v: Var<'g, T>| v.item().to_f64().unwrap_or(f64::NAN);
    Ok(CriticLoss { loss, d_real: f(d_real), d_fake: f(d_fake), gp: f(gp.value) })
}

/// Which generator terms are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GeneratorTerms {
    pub dice: bool,
    pub self_sup: bool,
    pub over: bool,
    pub under: bool,
}

pub struct GeneratorLoss<'g, T> {
    pub total: Var<'g, T>,
    pub dice: Option<f64>,
    pub self_sup: Option<f64>,
    /// Mean background-critic score of the predicted background triplets.
    pub adv_over: Option<f64>,
    /// Mean vessel-critic score of the predicted vessel triplets.
    pub adv_under: Option<f64>,
}

/// `τ·L_dic + η·L_sel − E[D_b(bg triplet)] − E[D_v(vessel triplet)]`.
///
/// Terms whose weight is zero, whose switch is off, or whose inputs are
/// missing (no labelled batch, no critic) are skipped.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss<'g, T: Real>(
    g: &'g Graph<T>,
    seg: Net<'_, 'g, T>,
    labeled: Option<(Var<'g, T>, Var<'g, T>)>,
    unlabeled: Var<'g, T>,
    transforms: &[AffineTransform],
    critic_over: Option<Net<'_, 'g, T>>,
    critic_under: Option<Net<'_, 'g, T>>,
    weights: &LossWeights,
    self_sup: &SelfSupConfig,
    terms: GeneratorTerms,
) -> Result<GeneratorLoss<'g, T>> {
    let f = |v: Var<'g, T>| v.item().to_f64().unwrap_or(f64::NAN);
    let mut parts: Vec<Var<'g, T>> = Vec::new();
    let mut out = GeneratorLoss { total: g.scalar(0.0), dice: None, self_sup: None, adv_over: None, adv_under: None };

    if terms.dice && weights.tau > 0.0 {
        match labeled {
            Some((x, m)) if x.shape()[0] > 0 => {
                let d = dice_loss(seg(x)?, m, weights.zeta)?;
                out.dice = Some(f(d));
                parts.push(d.scale(weights.tau));
            }
            _ => debug!("no labelled batch: dice term skipped"),
        }
    }
    let needs_pred = (terms.self_sup && weights.eta > 0.0) || (terms.over && critic_over.is_some()) || (terms.under && critic_under.is_some());
    if needs_pred {
        let pred = seg(unlabeled)?;
        if terms.self_sup && weights.eta > 0.0 {
            let s = self_sup_with_prediction(seg, unlabeled, pred, transforms, self_sup)?;
            out.self_sup = Some(f(s));
            parts.push(s.scale(weights.eta));
        }
        if let (true, Some(d)) = (terms.over, critic_over) {
            let score = d(build_background_triplet(unlabeled, pred)?)?.mean();
            out.adv_over = Some(f(score));
            parts.push(score.scale(-weights.adv));
        }
        if let (true, Some(d)) = (terms.under, critic_under) {
            let score = d(build_triplet(unlabeled, pred)?)?.mean();
            out.adv_under = Some(f(score));
            parts.push(score.scale(-weights.adv));
        }
    }
    if let Some((first, rest)) = parts.split_first() {
        out.total = rest.iter().fold(*first, |acc, &p| acc + p);
    }
    if !out.total.value().all_finite() {
        return Err(Error::NonFinite { context: "generator loss".into() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
