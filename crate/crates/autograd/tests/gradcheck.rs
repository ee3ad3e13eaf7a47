use std::rc::Rc;

use vesselseg_autograd::{ConvGeom, Graph, SpatialMap, Tensor, Var};

fn lcg(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }
}

fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut r = lcg(seed);
    Tensor::from_fn(shape, |_| r())
}

/// Compares the analytic gradient of `f` at `x` with central differences.
fn check<F>(x: Tensor<f64>, f: F, tol: f64)
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>,
{
    let g = Graph::new();
    let xv = g.variable(x.clone());
    let y = f(&g, xv).sum();
    let analytic = g.grad(y, &[xv]).remove(0);
    let h = 1e-6;
    let eval = |t: Tensor<f64>| {
        let g = Graph::new();
        let v = g.variable(t);
        f(&g, v).sum().item()
    };
    let mut max_err: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus) - eval(minus)) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (fd - a).abs() / (1.0 + fd.abs().max(a.abs()));
        max_err = max_err.max(err);
    }
    assert!(max_err < tol, "max relative error {max_err}");
}

#[test]
fn elementwise_ops() {
    let x = rand_tensor([2, 3, 4, 5], 1);
    check(x.clone(), |_, v| v.sigmoid() * v, 1e-6);
    check(x.clone(), |_, v| v.leaky_relu(0.2).scale(3.0).offset(1.0), 1e-6);
    check(x.map(|v| v.abs() + 0.5), |_, v| v.sqrt() + v.recip(), 1e-6);
    check(x.clone(), |_, v| (v - v.square()).square(), 1e-6);
    check(x.map(|v| v.abs() + 0.5), |_, v| v.sigmoid().div(v) + v.div(v.square().offset(1.0)), 1e-6);
}

#[test]
fn division_is_exact_on_equal_operands() {
    let g = Graph::<f32>::new();
    let x = g.variable(Tensor::from_fn([1, 1, 1, 64], |[_, _, _, i]| 1.0 + i as f32 * 0.37));
    let q = x.div(x);
    assert!(q.value().data().iter().all(|&v| v == 1.0));
}

#[test]
fn broadcast_and_reduce() {
    let x = rand_tensor([2, 3, 4, 5], 2);
    check(x.clone(), |_, v| v.sum_to([2, 1, 4, 1]).square(), 1e-6);
    check(x.clone(), |g, v| {
        let b = g.constant(rand_tensor([1, 3, 1, 1], 3));
        v.add_bias(b).square()
    }, 1e-6);
    check(rand_tensor([1, 3, 1, 1], 4), |g, b| {
        let x = g.constant(rand_tensor([2, 3, 4, 5], 5));
        x.add_bias(b).square()
    }, 1e-6);
    check(x, |_, v| v.sum_per_sample().square(), 1e-6);
}

#[test]
fn conv_input_and_weight() {
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 4), (1, 0, 1), (2, 0, 3)] {
        let w = rand_tensor([4, 3, k, k], 7);
        let x = rand_tensor([2, 3, 8, 8], 8);
        let wc = w.clone();
        check(x.clone(), move |g, v| v.conv2d(g.constant(wc.clone()), stride, pad).square(), 1e-6);
        let xc = x.clone();
        check(w, move |g, v| g.constant(xc.clone()).conv2d(v, stride, pad).square(), 1e-6);
    }
}

#[test]
fn conv_adjoint_ops_are_differentiable() {
    let geom = ConvGeom { kh: 3, kw: 3, stride: 2, pad: 1 };
    let w = rand_tensor([4, 3, 3, 3], 9);
    let gy = rand_tensor([2, 4, 4, 4], 10);
    let x = rand_tensor([2, 3, 8, 8], 11);
    let wc = w.clone();
    check(gy.clone(), move |g, v| v.conv_input_grad(g.constant(wc.clone()), geom, (8, 8)).square(), 1e-6);
    let gc = gy.clone();
    check(w.clone(), move |g, v| g.constant(gc.clone()).conv_input_grad(v, geom, (8, 8)).square(), 1e-6);
    let xc = x.clone();
    check(gy, move |g, v| g.constant(xc.clone()).conv_weight_grad(v, geom).square(), 1e-6);
    let gc = rand_tensor([2, 4, 4, 4], 12);
    check(x, move |g, v| v.conv_weight_grad(g.constant(gc.clone()), geom).square(), 1e-6);
}

#[test]
fn pooling_concat_slice() {
    let x = rand_tensor([2, 3, 4, 6], 13);
    check(x.clone(), |_, v| v.avg_pool2().upsample2().square(), 1e-6);
    check(x.clone(), |g, v| {
        let other = g.constant(rand_tensor([2, 2, 4, 6], 14));
        g.concat(&[other, v, v.scale(2.0)]).square().slice_channels(1, 4)
    }, 1e-6);
}

#[test]
fn spatial_map_and_transpose() {
    // horizontal flip blended with a shift on a 3x4 plane
    let (h, w) = (3usize, 4usize);
    let rows: Vec<Vec<(usize, f64)>> = (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            let mut r = vec![(y * w + (w - 1 - x), 0.75)];
            if x + 1 < w {
                r.push((y * w + x + 1, 0.25));
            }
            r
        })
        .collect();
    let maps: Rc<[SpatialMap]> = vec![SpatialMap::from_rows((h, w), (h, w), &rows)].into();
    let m1 = maps.clone();
    check(rand_tensor([2, 2, h, w], 15), move |_, v| v.spatial(m1.clone(), false).square(), 1e-6);
    let m2 = maps.clone();
    check(rand_tensor([2, 2, h, w], 16), move |_, v| v.spatial(m2.clone(), true).square(), 1e-6);
}

/// `‖∇ₓ D(x)‖²` differentiated with respect to the critic weights, compared
/// with finite differences of the first-order gradient norm.
#[test]
fn second_order_through_small_critic() {
    let x = rand_tensor([2, 2, 8, 8], 17);
    let w1 = rand_tensor([3, 2, 4, 4], 18).map(|v| v * 0.5);
    let w2 = rand_tensor([1, 3, 4, 4], 19).map(|v| v * 0.5);

    fn penalty(x: &Tensor<f64>, w1: &Tensor<f64>, w2: &Tensor<f64>, create: bool) -> (f64, Option<Vec<Tensor<f64>>>) {
        let g = Graph::new();
        let xv = g.variable(x.clone());
        let a = g.variable(w1.clone());
        let b = g.variable(w2.clone());
        let h = xv.conv2d(a, 2, 1).leaky_relu(0.2);
        let score = h.conv2d(b, 2, 1).avg_pool2();
        let gx = g.grad_graph(score.sum(), &[xv]).remove(0);
        let norms = gx.square().sum_per_sample().offset(1e-12).sqrt();
        let pen = norms.offset(-1.0).square().mean();
        let val = pen.item();
        if create {
            (val, Some(g.grad(pen, &[a, b])))
        } else {
            (val, None)
        }
    }

    let (_, grads) = penalty(&x, &w1, &w2, true);
    let grads = grads.unwrap();
    let h = 1e-6;
    for (which, base) in [(0usize, &w1), (1usize, &w2)] {
        for i in 0..base.len() {
            let mut p = base.clone();
            p.data_mut()[i] += h;
            let mut m = base.clone();
            m.data_mut()[i] -= h;
            let (fp, fm) = if which == 0 {
                (penalty(&x, &p, &w2, false).0, penalty(&x, &m, &w2, false).0)
            } else {
                (penalty(&x, &w1, &p, false).0, penalty(&x, &w1, &m, false).0)
            };
            let fd = (fp - fm) / (2.0 * h);
            let a = grads[which].data()[i];
            assert!((fd - a).abs() <= 1e-5 * (1.0 + fd.abs()), "param {which}[{i}]: fd {fd} vs analytic {a}");
        }
    }
}

#[test]
fn constants_do_not_record() {
    let g = Graph::<f64>::new();
    let c = g.constant(Tensor::ones([1, 1, 2, 2]));
    let y = c.sigmoid().square();
    assert!(!y.is_tracked());
    let v = g.variable(Tensor::ones([1, 1, 2, 2]));
    assert!((v * y).is_tracked());
}

#[test]
fn unreachable_gradient_is_zero() {
    let g = Graph::<f64>::new();
    let a = g.variable(Tensor::ones([1, 1, 2, 2]));
    let b = g.variable(Tensor::ones([1, 1, 2, 2]));
    let y = a.square().sum();
    let gr = g.grad(y, &[a, b]);
    assert_eq!(gr[0].data(), &[2.0; 4]);
    assert_eq!(gr[1].data(), &[0.0; 4]);
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

    /// `⟨conv(x, w), y⟩ = ⟨x, convᵀ(y, w)⟩` for any geometry.
    #[test]
    fn conv_input_grad_is_the_adjoint(k in 1usize..5, stride in 1usize..3, pad in 0usize..3, side in 4usize..10, cin in 1usize..4, cout in 1usize..4, seed in 0u64..1000) {
        proptest::prop_assume!(side + 2 * pad >= k);
        let geom = ConvGeom { kh: k, kw: k, stride, pad };
        let out = (side + 2 * pad - k) / stride + 1;
        let x = rand_tensor([2, cin, side, side], seed);
        let w = rand_tensor([cout, cin, k, k], seed + 1);
        let y = rand_tensor([2, cout, out, out], seed + 2);
        let g = Graph::new();
        let fwd = g.constant(x.clone()).conv2d(g.constant(w.clone()), stride, pad).value();
        let back = g.constant(y.clone()).conv_input_grad(g.constant(w), geom, (side, side)).value();
        let (l, r) = (dot(&fwd, &y), dot(&x, &back));
        proptest::prop_assert!((l - r).abs() <= 1e-9 * (1.0 + l.abs()), "{} vs {}", l, r);
    }

    /// Gradients of a sum are linear in the upstream scale.
    #[test]
    fn gradient_scales_linearly(c in -3.0f64..3.0, seed in 0u64..1000) {
        let x = rand_tensor([1, 2, 4, 4], seed);
        let g = Graph::new();
        let v = g.variable(x);
        let base = v.sigmoid().square().sum();
        let ga = g.grad(base, &[v]).remove(0);
        let gb = g.grad(base.scale(c), &[v]).remove(0);
        for (a, b) in ga.data().iter().zip(gb.data()) {
            proptest::prop_assert!((a * c - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
