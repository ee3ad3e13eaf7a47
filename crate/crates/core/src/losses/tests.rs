use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nets::{bind, init_params, CriticConfig, SegNetConfig};
use crate::weaklabel::edge_weight_map;

fn net<'g, F: Fn(Var<'g, f64>) -> Result<Var<'g, f64>>>(f: F) -> F {
    f
}

/// Scores every sample with the same constant.
fn constant_net<'g>(c: f64) -> impl Fn(Var<'g, f64>) -> Result<Var<'g, f64>> {
    move |t| Ok(t.graph().constant(Tensor::full([t.shape()[0], 1, 1, 1], c)))
}

fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.gen_range(0.0..1.0))
}

fn binary_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    rand_tensor(shape, seed).map(|v| if v < 0.5 { 0.0 } else { 1.0 })
}

#[test]
fn dice_identity_and_empty_are_zero() {
    for seed in 0..5 {
        let m = binary_tensor([2, 1, 16, 16], seed);
        let g = Graph::new();
        let d = dice_loss(g.constant(m.clone()), g.constant(m), 1.0).unwrap();
        assert_eq!(d.item(), 0.0);
        let g32 = Graph::<f32>::new();
        let m32 = binary_tensor([2, 1, 16, 16], seed).cast::<f32>();
        assert_eq!(dice_loss(g32.constant(m32.clone()), g32.constant(m32), 1.0).unwrap().item(), 0.0);
    }
    let g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros([1, 1, 8, 8]));
    assert_eq!(dice_loss(z, z, 1.0).unwrap().item(), 0.0);
}

#[test]
fn dice_disjoint_hundreds() {
    let a = Tensor::from_fn([1, 1, 20, 20], |[_, _, y, _]| if y < 5 { 1.0 } else { 0.0 });
    let b = Tensor::from_fn([1, 1, 20, 20], |[_, _, y, _]| if (10..15).contains(&y) { 1.0 } else { 0.0 });
    let g = Graph::<f64>::new();
    let d = dice_loss(g.constant(a), g.constant(b), 1.0).unwrap().item();
    assert!((d - (1.0 - 1.0 / 201.0)).abs() < 1e-9);
}

#[test]
fn dice_rejects_shape_mismatch() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([1, 1, 8, 8]));
    let b = g.constant(Tensor::zeros([1, 1, 8, 4]));
    assert!(dice_loss(a, b, 1.0).is_err());
}

#[test]
fn dice_gradient_matches_central_differences() {
    for seed in 0..5 {
        let p = rand_tensor([1, 1, 8, 8], 100 + seed);
        let m = binary_tensor([1, 1, 8, 8], 200 + seed);
        let g = Graph::new();
        let pv = g.variable(p.clone());
        let d = dice_loss(pv, g.constant(m.clone()), 1.0).unwrap();
        let grad = g.grad(d, &[pv]).remove(0);
        let eval = |t: Tensor<f64>| {
            let g = Graph::new();
            dice_loss(g.constant(t), g.constant(m.clone()), 1.0).unwrap().item()
        };
        let h = 1e-6;
        for i in 0..p.len() {
            let mut up = p.clone();
            up.data_mut()[i] += h;
            let mut dn = p.clone();
            dn.data_mut()[i] -= h;
            let fd = (eval(up) - eval(dn)) / (2.0 * h);
            let a = grad.data()[i];
            assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-8), "{fd} vs {a}");
        }
    }
}

proptest! {
    #[test]
    fn dice_in_unit_interval(p in prop::collection::vec(0.0f64..=1.0, 64), m in prop::collection::vec(any::<bool>(), 64)) {
        let g = Graph::<f64>::new();
        let pt = g.constant(Tensor::new([1, 1, 8, 8], p));
        let mt = g.constant(Tensor::new([1, 1, 8, 8], m.into_iter().map(|b| b as u8 as f64).collect()));
        let d = dice_loss(pt, mt, 1.0).unwrap().item();
        prop_assert!((0.0..1.0).contains(&d));
    }
}

fn tiny_segnet(seed: u64) -> (SegNetConfig, Vec<Tensor<f64>>) {
    let cfg = SegNetConfig { base_width: 3, depth: 2, ..Default::default() };
    let params = init_params(&cfg.param_specs(), 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
    (cfg, params)
}

fn ss_cfg() -> SelfSupConfig {
    SelfSupConfig { r3: 2, normalize: true, transforms: TransformConfig::default() }
}

#[test]
fn self_sup_identity_is_zero() {
    let (cfg, params) = tiny_segnet(1);
    let g = Graph::new();
    let p = bind(&g, &params, true);
    let seg = net(|x| cfg.forward(&p, x));
    let x = g.constant(rand_tensor([3, 3, 16, 16], 2));
    for interp in [Interp::Nearest, Interp::Bilinear] {
        let ts = vec![AffineTransform::identity().with_interp(interp); 3];
        let l = self_sup_loss(&seg, x, &ts, &ss_cfg()).unwrap();
        assert_eq!(l.item(), 0.0);
    }
}

#[test]
fn self_sup_constant_function_under_flip_is_zero() {
    let g = Graph::<f64>::new();
    let half = net(|x| {
        let [n, _, h, w] = x.shape();
        Ok(x.graph().constant(Tensor::full([n, 1, h, w], 0.5)))
    });
    let x = g.constant(rand_tensor([2, 3, 16, 16], 3));
    let l = self_sup_loss(&half, x, &[AffineTransform::hflip(); 2], &ss_cfg()).unwrap();
    assert_eq!(l.item(), 0.0);
}

fn flip_w(t: &Tensor<f64>) -> Tensor<f64> {
    let [_, _, _, w] = t.shape();
    Tensor::from_fn(t.shape(), |[n, c, y, x]| t.at([n, c, y, w - 1 - x]))
}

/// Recomputes the flip loss by explicit pixel permutation, in the same
/// floating-point order as the library.
fn brute_flip_loss(cfg: &SegNetConfig, params: &[Tensor<f64>], x: &Tensor<f64>, r3: usize) -> f64 {
    let [n, _, h, w] = x.shape();
    let p = cfg.predict(params, x).unwrap();
    let pm = cfg.predict(params, &flip_w(x)).unwrap();
    let ring = |t: &Tensor<f64>, i: usize| {
        let soft: Vec<f32> = t.narrow_batch(i, 1).data().iter().map(|&v| v as f32).collect();
        edge_weight_map(&Mask::binarize(h, w, &soft), r3)
    };
    let mut per = Vec::new();
    for i in 0..n {
        let (wx, wm) = (ring(&p, i), ring(&pm, i));
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for y in 0..h {
            for xx in 0..w {
                let src = w - 1 - xx;
                let wxv = if wx.get(y, src) { 1.0 } else { 0.0 };
                let wmv = if wm.get(y, xx) { 1.0 } else { 0.0 };
                let moved = wxv * p.at([i, 0, y, src]);
                let d = wmv * pm.at([i, 0, y, xx]) - moved;
                acc += (d * d) * 1.0;
                if wxv > 0.0 || wmv > 0.0 {
                    count += 1;
                }
            }
        }
        per.push(acc / count.max(1) as f64);
    }
    per.iter().fold(0.0, |a, &v| a + v) * (1.0 / n as f64)
}

#[test]
fn self_sup_flip_matches_pixel_permutation_bitwise() {
    for seed in 0..4 {
        let (cfg, params) = tiny_segnet(10 + seed);
        let x = rand_tensor([2, 3, 16, 16], 20 + seed);
        let g = Graph::new();
        let p = bind(&g, &params, true);
        let seg = net(|v| cfg.forward(&p, v));
        let l = self_sup_loss(&seg, g.constant(x.clone()), &[AffineTransform::hflip(); 2], &ss_cfg()).unwrap().item();
        let b = brute_flip_loss(&cfg, &params, &x, 2);
        assert_eq!(l.to_bits(), b.to_bits(), "{l} vs {b}");
    }
}

#[test]
fn self_sup_is_nonnegative_and_differentiable() {
    let (cfg, params) = tiny_segnet(5);
    let g = Graph::new();
    let p = bind(&g, &params, true);
    let seg = net(|v| cfg.forward(&p, v));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ts: Vec<_> = (0..3).map(|_| sample_transform(&mut rng, &TransformConfig::default())).collect();
    let l = self_sup_loss(&seg, g.constant(rand_tensor([3, 3, 16, 16], 6)), &ts, &ss_cfg()).unwrap();
    assert!(l.item() >= 0.0);
    let grads = g.grad(l, &p);
    assert!(grads.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
}

fn linear_critic<'g>(a: &Tensor<f64>) -> impl Fn(Var<'g, f64>) -> Result<Var<'g, f64>> + '_ {
    move |t| {
        let [n, c, h, w] = t.shape();
        let av = t.graph().constant(a.clone()).expand([n, c, h, w]);
        Ok((t * av).sum_per_sample())
    }
}

#[test]
fn penalty_of_unit_linear_critic_vanishes() {
    let mut a = rand_tensor([1, 7, 8, 8], 1).map(|v| v - 0.5);
    let norm = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    a = a.map(|v| v / norm);
    let g = Graph::new();
    let critic = linear_critic(&a);
    let p = gradient_penalty(&g, &critic, &rand_tensor([4, 7, 8, 8], 2), &rand_tensor([4, 7, 8, 8], 3), &[0.1, 0.5, 0.7, 0.9], 10.0).unwrap();
    assert!(p.value.item() < 1e-10, "{}", p.value.item());
}

#[test]
fn penalty_of_constant_critic_is_lambda() {
    let g = Graph::new();
    let critic = constant_net(3.0);
    let p = gradient_penalty(&g, &critic, &rand_tensor([3, 7, 8, 8], 2), &rand_tensor([3, 7, 8, 8], 3), &[0.2, 0.4, 0.6], 10.0).unwrap();
    assert!((p.value.item() - 10.0).abs() < 1e-9);
    let cl = critic_loss(&g, &critic, &rand_tensor([3, 7, 8, 8], 2), &rand_tensor([3, 7, 8, 8], 3), &[0.2, 0.4, 0.6], 10.0).unwrap();
    assert!((cl.loss.item() - 10.0).abs() < 1e-9);
}

fn tiny_critic(seed: u64) -> (CriticConfig, Vec<Tensor<f64>>) {
    let cfg = CriticConfig { base_width: 2, ..Default::default() };
    let params = init_params(&cfg.param_specs(16), 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
    (cfg, params)
}

#[test]
fn penalty_norms_match_finite_differences() {
    let (cfg, params) = tiny_critic(4);
    let real = rand_tensor([2, 7, 16, 16], 5);
    let fake = rand_tensor([2, 7, 16, 16], 6);
    let eps = [0.3, 0.8];
    let g = Graph::new();
    let p = bind(&g, &params, true);
    let critic = net(|t| cfg.forward(&p, t));
    let pen = gradient_penalty(&g, &critic, &real, &fake, &eps, 10.0).unwrap();
    let score = |t: &Tensor<f64>| {
        let g = Graph::new();
        let p = bind(&g, &params, false);
        cfg.forward(&p, g.constant(t.clone())).unwrap().item()
    };
    let mut expect = 0.0;
    for (i, &e) in eps.iter().enumerate() {
        let hat = real.narrow_batch(i, 1).zip_map(&fake.narrow_batch(i, 1), |r, f| e * r + (1.0 - e) * f);
        let h = 1e-5;
        let mut sq = 0.0;
        for k in 0..hat.len() {
            let mut up = hat.clone();
            up.data_mut()[k] += h;
            let mut dn = hat.clone();
            dn.data_mut()[k] -= h;
            let d = (score(&up) - score(&dn)) / (2.0 * h);
            sq += d * d;
        }
        let fd = sq.sqrt();
        assert!((pen.norms[i] - fd).abs() < 1e-3 * fd, "{} vs {fd}", pen.norms[i]);
        expect += 10.0 * (fd - 1.0).powi(2) / 2.0;
    }
    assert!((pen.value.item() - expect).abs() < 1e-3 * expect.max(1e-12));
}

#[test]
fn penalty_parameter_gradient_matches_finite_differences() {
    let (cfg, params) = tiny_critic(7);
    let real = rand_tensor([2, 7, 16, 16], 8);
    let fake = rand_tensor([2, 7, 16, 16], 9);
    let eps = [0.25, 0.6];
    let value = |ps: &[Tensor<f64>]| {
        let g = Graph::new();
        let p = bind(&g, ps, true);
        let critic = net(|t| cfg.forward(&p, t));
        gradient_penalty(&g, &critic, &real, &fake, &eps, 10.0).unwrap().value.item()
    };
    let g = Graph::new();
    let p = bind(&g, &params, true);
    let critic = net(|t| cfg.forward(&p, t));
    let pen = gradient_penalty(&g, &critic, &real, &fake, &eps, 10.0).unwrap();
    let grads = g.grad(pen.value, &p);
    let h = 1e-6;
    for (t, k) in [(0usize, 0usize), (0, 17), (2, 5), (4, 1)] {
        let mut up = params.clone();
        up[t].data_mut()[k] += h;
        let mut dn = params.clone();
        dn[t].data_mut()[k] -= h;
        let fd = (value(&up) - value(&dn)) / (2.0 * h);
        let a = grads[t].data()[k];
        assert!((fd - a).abs() <= 1e-4 * (1.0 + fd.abs()), "param {t}[{k}]: {fd} vs {a}");
    }
}

#[test]
fn critic_loss_with_equal_batches_is_the_penalty() {
    let (cfg, params) = tiny_critic(11);
    let x = rand_tensor([3, 7, 16, 16], 12);
    let g = Graph::new();
    let p = bind(&g, &params, true);
    let critic = net(|t| cfg.forward(&p, t));
    let cl = critic_loss(&g, &critic, &x, &x, &[0.1, 0.2, 0.3], 10.0).unwrap();
    assert_eq!(cl.loss.item(), cl.gp);
    let zero = constant_net(0.0);
    let cl0 = critic_loss(&g, &zero, &x, &rand_tensor([3, 7, 16, 16], 13), &[0.1, 0.2, 0.3], 10.0).unwrap();
    assert!((cl0.loss.item() - 10.0).abs() < 1e-9);
}

#[test]
fn one_critic_step_lowers_the_loss() {
    let (cfg, params) = tiny_critic(14);
    let real = rand_tensor([4, 7, 16, 16], 15).map(|v| v * 0.5 + 0.5);
    let fake = rand_tensor([4, 7, 16, 16], 16).map(|v| v * 0.5);
    let eps = [0.2, 0.4, 0.6, 0.8];
    let loss = |ps: &[Tensor<f64>]| {
        let g = Graph::new();
        let p = bind(&g, ps, true);
        let critic = net(|t| cfg.forward(&p, t));
        let cl = critic_loss(&g, &critic, &real, &fake, &eps, 10.0).unwrap();
        (cl.loss.item(), g.grad(cl.loss, &p))
    };
    let (before, grads) = loss(&params);
    let stepped: Vec<_> = params.iter().zip(&grads).map(|(p, g)| p.zip_map(g, |a, b| a - 1e-3 * b)).collect();
    let (after, _) = loss(&stepped);
    assert!(after < before, "{after} >= {before}");
}

fn all_terms() -> GeneratorTerms {
    GeneratorTerms { dice: true, self_sup: true, over: true, under: true }
}

#[test]
fn generator_loss_term_bookkeeping() {
    let (cfg, params) = tiny_segnet(21);
    let g = Graph::new();
    let p = bind(&g, &params, true);
    let seg = net(|v| cfg.forward(&p, v));
    let xl = g.constant(rand_tensor([2, 3, 16, 16], 22));
    let ml = g.constant(binary_tensor([2, 1, 16, 16], 23));
    let xu = g.constant(rand_tensor([2, 3, 16, 16], 24));
    let ts = [AffineTransform::hflip(), AffineTransform::rot90(1)];
    let (zero, cb, cv) = (constant_net(0.0), constant_net(0.7), constant_net(-0.3));

    let w0 = LossWeights { tau: 0.0, eta: 0.0, ..Default::default() };
    let l = generator_loss(&g, &seg, Some((xl, ml)), xu, &ts, Some(&zero), Some(&zero), &w0, &ss_cfg(), all_terms()).unwrap();
    assert_eq!(l.total.item(), 0.0);

    let w = LossWeights::default();
    let l = generator_loss(&g, &seg, Some((xl, ml)), xu, &ts, Some(&cb), Some(&cv), &w, &ss_cfg(), all_terms()).unwrap();
    let dice = dice_loss(seg(xl).unwrap(), ml, 1.0).unwrap().item();
    let ss = self_sup_loss(&seg, xu, &ts, &ss_cfg()).unwrap().item();
    assert_eq!(l.dice, Some(dice));
    assert_eq!(l.self_sup, Some(ss));
    assert!((l.total.item() - (dice + 2.0 * ss - 0.7 + 0.3)).abs() < 1e-12);

    let l0 = generator_loss(&g, &seg, None, xu, &ts, Some(&cb), Some(&cv), &w, &ss_cfg(), all_terms()).unwrap();
    assert_eq!(l0.dice, None);
    assert!((l0.total.item() - (2.0 * ss - 0.7 + 0.3)).abs() < 1e-12);

    let no_ss = GeneratorTerms { self_sup: false, ..all_terms() };
    let l1 = generator_loss(&g, &seg, None, xu, &ts, Some(&cb), None, &w, &ss_cfg(), no_ss).unwrap();
    assert_eq!((l1.self_sup, l1.adv_under), (None, None));
    assert!((l1.total.item() + 0.7).abs() < 1e-12);
    let grads = g.grad(l.total, &p);
    assert!(grads.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
}
