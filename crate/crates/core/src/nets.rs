//! Segmentation network and critics.
//!
//! Networks are described by a config plus a flat parameter list; forward
//! passes take parameters as graph handles so the caller decides what is
//! trainable and what is frozen.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vesselseg_autograd::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};

const SEG_SLOPE: f64 = 0.1;
const CRITIC_SLOPE: f64 = 0.2;

/// Skip-connected encoder-decoder. Level `l` has `base_width * 2^l` channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    pub input_channels: usize,
    pub base_width: usize,
    /// Number of downsampling levels.
    pub depth: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self { input_channels: 3, base_width: 8, depth: 3 }
    }
}

/// Strided-convolution critic ending in global average pooling and a linear
/// map to one unbounded score. No normalisation layers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub input_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 layers; `None` picks the smallest depth whose
    /// receptive field covers half the patch.
    pub depth: Option<usize>,
    pub max_width: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { input_channels: 7, base_width: 8, depth: None, max_width: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
    /// Fan-in for He initialisation; 0 marks a bias (zero-initialised).
    pub fan_in: usize,
}

fn conv_spec(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize) {
    out.push(ParamSpec { name: format!("{name}.w"), shape: [cout, cin, k, k], fan_in: cin * k * k });
    out.push(ParamSpec { name: format!("{name}.b"), shape: [1, cout, 1, 1], fan_in: 0 });
}

/// He-normal weights, zero biases.
pub fn init_params<T: Real, R: Rng>(specs: &[ParamSpec], gain: f64, rng: &mut R) -> Vec<Tensor<T>> {
    specs
        .iter()
        .map(|s| {
            if s.fan_in == 0 {
                return Tensor::zeros(s.shape);
            }
            let normal = Normal::new(0.0, (gain / s.fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(s.shape, |_| T::from_f64c(normal.sample(rng)))
        })
        .collect()
}

pub fn zero_params<T: Real>(specs: &[ParamSpec]) -> Vec<Tensor<T>> {
    specs.iter().map(|s| Tensor::zeros(s.shape)).collect()
}

pub fn param_count(specs: &[ParamSpec]) -> usize {
    specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Binds parameter tensors into `g` as variables (`trainable`) or constants.
pub fn bind<'g, T: Real>(g: &'g Graph<T>, params: &[Tensor<T>], trainable: bool) -> Vec<Var<'g, T>> {
    params
        .iter()
        .map(|p| if trainable { g.variable(p.clone()) } else { g.constant(p.clone()) })
        .collect()
}

fn check_params<T: Real>(specs: &[ParamSpec], params: &[Var<'_, T>], what: &str) -> Result<()> {
    if specs.len() != params.len() {
        return Err(Error::Shape(format!("{what}: expected {} parameter tensors, got {}", specs.len(), params.len())));
    }
    for (s, p) in specs.iter().zip(params) {
        if s.shape != p.shape() {
            return Err(Error::Shape(format!("{what}: {} has shape {:?}, expected {:?}", s.name, p.shape(), s.shape)));
        }
    }
    Ok(())
}

fn conv<'g, T: Real>(x: Var<'g, T>, w: Var<'g, T>, b: Var<'g, T>, stride: usize) -> Var<'g, T> {
    let k = w.shape()[2];
    x.conv2d(w, stride, (k - 1) / 2).add_bias(b)
}

impl SegNetConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("segnet widths must be positive".into()));
        }
        if self.depth > 6 {
            return Err(Error::Config(format!("segnet depth {} is too large", self.depth)));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = Vec::new();
        conv_spec(&mut s, "stem", self.input_channels, self.width(0), 3);
        for l in 1..=self.depth {
            conv_spec(&mut s, &format!("enc{l}"), self.width(l - 1), self.width(l), 3);
        }
        conv_spec(&mut s, "mid", self.width(self.depth), self.width(self.depth), 3);
        for l in (1..=self.depth).rev() {
            conv_spec(&mut s, &format!("up{l}"), self.width(l), self.width(l - 1), 1);
            conv_spec(&mut s, &format!("dec{l}"), self.width(l - 1), self.width(l - 1), 3);
        }
        conv_spec(&mut s, "head", self.width(0), 1, 1);
        s
    }

    /// Spatial sides must be divisible by `2^depth`.
    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        let f = 1usize << self.depth;
        if c != self.input_channels || h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "segnet input {shape:?}: need {} channels and sides divisible by {f}",
                self.input_channels
            )));
        }
        Ok(())
    }

    /// Per-pixel vessel probability, shape `[n, 1, h, w]`.
    pub fn forward<'g, T: Real>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_input(x.shape())?;
        check_params(&self.param_specs(), p, "segnet")?;
        let act = |v: Var<'g, T>| v.leaky_relu(SEG_SLOPE);
        let mut i = 0;
        let mut next = || {
            i += 2;
            (p[i - 2], p[i - 1])
        };
        let (w, b) = next();
        let mut h = act(conv(x, w, b, 1));
        let mut skips = vec![h];
        for _ in 1..=self.depth {
            let (w, b) = next();
            h = act(conv(h.avg_pool2(), w, b, 1));
            skips.push(h);
        }
        let (w, b) = next();
        h = act(conv(h, w, b, 1));
        for l in (1..=self.depth).rev() {
            let (w, b) = next();
            let up = conv(h, w, b, 1).upsample2();
            let (w, b) = next();
            h = act(conv(up + skips[l - 1], w, b, 1));
        }
        let (w, b) = next();
        Ok(conv(h, w, b, 1).sigmoid())
    }

    /// Inference without gradient tracking.
    pub fn predict<T: Real>(&self, params: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = bind(&g, params, false);
        let y = self.forward(&p, g.constant(x.clone()))?;
        let out = y.value().as_ref().clone();
        Ok(out)
    }
}

impl CriticConfig {
    pub fn depth_for(&self, size: usize) -> usize {
        if let Some(d) = self.depth {
            return d;
        }
        // receptive field of d stacked 4x4 / stride-2 layers: 1 + 3 (2^d - 1)
        let mut d = 1;
        while 1 + 3 * ((1usize << d) - 1) < size.div_ceil(2) {
            d += 1;
        }
        d
    }

    pub fn width(&self, layer: usize) -> usize {
        (self.base_width << layer).min(self.max_width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_width == 0 || self.max_width == 0 {
            return Err(Error::Config("critic widths must be positive".into()));
        }
        if self.depth == Some(0) {
            return Err(Error::Config("critic depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn param_specs(&self, size: usize) -> Vec<ParamSpec> {
        let mut s = Vec::new();
        let mut cin = self.input_channels;
        for l in 0..self.depth_for(size) {
            conv_spec(&mut s, &format!("down{l}"), cin, self.width(l), 4);
            cin = self.width(l);
        }
        conv_spec(&mut s, "score", cin, 1, 1);
        s
    }

    /// One score per sample, shape `[n, 1, 1, 1]`.
    pub fn forward<'g, T: Real>(&self, p: &[Var<'g, T>], t: Var<'g, T>) -> Result<Var<'g, T>> {
        let [_, c, h, w] = t.shape();
        if c != self.input_channels || h != w || h == 0 {
            return Err(Error::Shape(format!("critic input {:?}: need {} channels, square", t.shape(), self.input_channels)));
        }
        let depth = self.depth_for(h);
        if h >> depth == 0 || h % (1 << depth) != 0 {
            return Err(Error::Shape(format!("critic input side {h} not divisible by 2^{depth}")));
        }
        check_params(&self.param_specs(h), p, "critic")?;
        let mut x = t;
        for l in 0..depth {
            x = x.conv2d(p[2 * l], 2, 1).add_bias(p[2 * l + 1]).leaky_relu(CRITIC_SLOPE);
            if !x.value().all_finite() {
                return Err(Error::NonFinite { context: format!("critic layer {l}") });
            }
        }
        let [n, c, h, w] = x.shape();
        let pooled = x.sum_to([n, c, 1, 1]).scale(1.0 / (h * w) as f64);
        let score = pooled.conv2d(p[2 * depth], 1, 0).add_bias(p[2 * depth + 1]);
        if !score.value().all_finite() {
            return Err(Error::NonFinite { context: format!("critic layer {depth} (score)") });
        }
        Ok(score)
    }
}

/// `[image, mask, mask * image]` stacked on channels (7 channels).
pub fn build_triplet<'g, T: Real>(x: Var<'g, T>, mask: Var<'g, T>) -> Result<Var<'g, T>> {
    let [n, c, h, w] = x.shape();
    if c != 3 || mask.shape() != [n, 1, h, w] {
        return Err(Error::Shape(format!("triplet of image {:?} and mask {:?}", x.shape(), mask.shape())));
    }
    let lo = T::zero();
    let hi = T::one();
    if mask.value().data().iter().any(|&v| !(v >= lo && v <= hi)) {
        return Err(Error::Data("triplet mask values outside [0, 1]".into()));
    }
    let masked = mask.expand([n, 3, h, w]) * x;
    Ok(x.graph().concat(&[x, mask, masked]))
}

/// The background triplet uses the reversed mask `1 - m`.
pub fn build_background_triplet<'g, T: Real>(x: Var<'g, T>, mask: Var<'g, T>) -> Result<Var<'g, T>> {
    build_triplet(x, mask.scale(-1.0).offset(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.gen_range(0.0..1.0))
    }

    #[test]
    fn segnet_shape_and_range() {
        let cfg = SegNetConfig { base_width: 4, depth: 3, ..Default::default() };
        let params = init_params::<f64, _>(&cfg.param_specs(), 2.0, &mut ChaCha8Rng::seed_from_u64(0));
        let y = cfg.predict(&params, &rand_tensor([2, 3, 128, 128], 1)).unwrap();
        assert_eq!(y.shape(), [2, 1, 128, 128]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(cfg.predict(&params, &rand_tensor([1, 3, 20, 20], 1)).is_err());
        assert!(cfg.predict(&params, &rand_tensor([1, 4, 16, 16], 1)).is_err());
    }

    #[test]
    fn zero_head_gives_midpoint() {
        let cfg = SegNetConfig { base_width: 4, depth: 2, ..Default::default() };
        let mut params = init_params::<f64, _>(&cfg.param_specs(), 2.0, &mut ChaCha8Rng::seed_from_u64(0));
        let n = params.len();
        params[n - 2] = Tensor::zeros(params[n - 2].shape());
        params[n - 1] = Tensor::zeros(params[n - 1].shape());
        let y = cfg.predict(&params, &Tensor::zeros([1, 3, 16, 16])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_critic_scores_zero() {
        let cfg = CriticConfig { base_width: 4, ..Default::default() };
        let g = Graph::<f64>::new();
        let p = bind(&g, &zero_params(&cfg.param_specs(16)), false);
        let s = cfg.forward(&p, g.constant(rand_tensor([3, 7, 16, 16], 2))).unwrap();
        assert!(s.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn critic_depth_covers_half_the_patch() {
        let cfg = CriticConfig::default();
        assert_eq!(cfg.depth_for(64), 4);
        assert_eq!(cfg.depth_for(128), 5);
        for size in [16, 32, 64, 128] {
            let d = cfg.depth_for(size);
            assert!(1 + 3 * ((1 << d) - 1) >= size / 2);
        }
    }

    #[test]
    fn critic_batching_is_per_sample() {
        let cfg = CriticConfig { base_width: 4, ..Default::default() };
        let params = init_params::<f64, _>(&cfg.param_specs(16), 2.0, &mut ChaCha8Rng::seed_from_u64(3));
        let x = rand_tensor([4, 7, 16, 16], 4);
        let g = Graph::new();
        let p = bind(&g, &params, false);
        let batched = cfg.forward(&p, g.constant(x.clone())).unwrap().value();
        let perm = [2usize, 0, 3, 1];
        for (k, &i) in perm.iter().enumerate() {
            let single = cfg.forward(&p, g.constant(x.narrow_batch(i, 1))).unwrap().item();
            assert!((single - batched.data()[i]).abs() < 1e-12, "sample {k}");
        }
        let parts: Vec<Tensor<f64>> = perm.iter().map(|&i| x.narrow_batch(i, 1)).collect();
        let shuffled = Tensor::stack(&parts.iter().collect::<Vec<_>>());
        let out = cfg.forward(&p, g.constant(shuffled)).unwrap().value();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(out.data()[k], batched.data()[i]);
        }
    }

    #[test]
    fn triplet_identities() {
        let g = Graph::<f64>::new();
        let x = g.constant(rand_tensor([2, 3, 8, 8], 5));
        let ones = g.constant(Tensor::ones([2, 1, 8, 8]));
        let t = build_triplet(x, ones).unwrap().value();
        assert_eq!(t.shape(), [2, 7, 8, 8]);
        let xv = x.value();
        for n in 0..2 {
            for c in 0..3 {
                for y in 0..8 {
                    for xx in 0..8 {
                        assert_eq!(t.at([n, 4 + c, y, xx]), xv.at([n, c, y, xx]));
                    }
                }
            }
        }
        let zeros = g.constant(Tensor::zeros([2, 1, 8, 8]));
        let t0 = build_triplet(x, zeros).unwrap().value();
        assert!((0..2).all(|n| (4..7).all(|c| (0..64).all(|i| t0.at([n, c, i / 8, i % 8]) == 0.0))));
        let m = g.constant(rand_tensor([2, 1, 8, 8], 6));
        let tb = build_background_triplet(x, m).unwrap().value();
        let tv = build_triplet(x, m).unwrap().value();
        for n in 0..2 {
            for i in 0..64 {
                let s = tb.at([n, 3, i / 8, i % 8]) + tv.at([n, 3, i / 8, i % 8]);
                assert!((s - 1.0).abs() < 1e-15);
            }
        }
        assert!(build_triplet(x, g.constant(Tensor::zeros([2, 1, 4, 4]))).is_err());
        assert!(build_triplet(x, g.constant(Tensor::full([2, 1, 8, 8], 1.5))).is_err());
    }
}
