use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::spatial::{apply_maps, SpatialMap};
use crate::tensor::{Real, Tensor};

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Sqrt(usize),
    Recip(usize),
    Conv(usize, usize, ConvGeom),
    ConvInputGrad(usize, usize, ConvGeom),
    ConvWeightGrad(usize, usize, ConvGeom),
    Expand(usize),
    SumTo(usize),
    AvgPool2(usize),
    Upsample2(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Spatial(usize, Rc<[SpatialMap]>, bool),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Conv(a, b, _) | ConvInputGrad(a, b, _) | ConvWeightGrad(a, b, _) => vec![*a, *b],
            Scale(a, _) | Offset(a) | Sigmoid(a) | LeakyRelu(a, _) | Sqrt(a) | Recip(a) => vec![*a],
            Expand(a) | SumTo(a) | AvgPool2(a) | Upsample2(a) | Slice(a, _) => vec![*a],
            Spatial(a, _, _) => vec![*a],
            Concat(v) => v.clone(),
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op,
}

/// A dynamically built computation graph (a "tape").
///
/// Nodes are appended in evaluation order, so node ids are a topological
/// order. Gradients are themselves built from graph operations, which is what
/// makes [`Graph::grad_graph`] differentiable again.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    tracked: RefCell<Vec<bool>>,
    recording: Cell<bool>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    id: usize,
    graph: &'g Graph<T>,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), tracked: RefCell::new(Vec::new()), recording: Cell::new(true) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op) -> Var<'_, T> {
        let tracked = {
            let tr = self.tracked.borrow();
            self.recording.get() && op.parents().iter().any(|&p| tr[p])
        };
        self.push_raw(Rc::new(value), if tracked { op } else { Op::Leaf }, tracked)
    }

    fn push_raw(&self, value: Rc<Tensor<T>>, op: Op, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        self.tracked.borrow_mut().push(tracked);
        Var { id: nodes.len() - 1, graph: self }
    }

    /// Leaf that participates in differentiation.
    pub fn variable(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push_raw(Rc::new(t), Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push_raw(Rc::new(t), Op::Leaf, false)
    }

    pub fn constant_rc(&self, t: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::from_f64c(v)))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn var(&self, id: usize) -> Var<'_, T> {
        Var { id, graph: self }
    }

    /// Concatenates along channels.
    pub fn concat(&self, parts: &[Var<'_, T>]) -> Var<'_, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| self.value_of(p.id)).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat_channels(&refs);
        self.push(out, Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    /// Gradients of `sum(y)` with respect to `xs`, as plain tensors.
    pub fn grad(&self, y: Var<'_, T>, xs: &[Var<'_, T>]) -> Vec<Tensor<T>> {
        let ids = self.backward(y.id, xs, false);
        ids.into_iter()
            .zip(xs)
            .map(|(g, x)| match g {
                Some(id) => self.value_of(id).as_ref().clone(),
                None => Tensor::zeros(x.shape()),
            })
            .collect()
    }

    /// Gradients of `sum(y)` with respect to `xs`, recorded in the graph so
    /// they can be differentiated again.
    pub fn grad_graph<'g>(&'g self, y: Var<'g, T>, xs: &[Var<'g, T>]) -> Vec<Var<'g, T>> {
        let ids = self.backward(y.id, xs, true);
        ids.into_iter()
            .zip(xs)
            .map(|(g, x)| match g {
                Some(id) => self.var(id),
                None => self.constant(Tensor::zeros(x.shape())),
            })
            .collect()
    }

    fn backward(&self, y: usize, xs: &[Var<'_, T>], create: bool) -> Vec<Option<usize>> {
        let n = y + 1;
        let mut relevant = vec![false; n];
        let mut start = n;
        {
            let tracked = self.tracked.borrow();
            for x in xs {
                assert!(tracked[x.id], "gradient requested for an untracked node");
                if x.id < n {
                    relevant[x.id] = true;
                    start = start.min(x.id);
                }
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in start..n {
                if !relevant[i] {
                    relevant[i] = nodes[i].op.parents().iter().any(|&p| relevant[p]);
                }
            }
        }
        let mut grads: Vec<Option<usize>> = vec![None; n];
        if !relevant[y] {
            return vec![None; xs.len()];
        }
        let prev = self.recording.replace(create);
        let seed = Tensor::ones(self.value_of(y).shape());
        grads[y] = Some(self.constant(seed).id);
        for i in (start..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(gid) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let want = |p: usize| relevant[p];
            for (p, contrib) in self.backward_op(&op, i, self.var(gid), &want) {
                grads[p] = Some(match grads[p] {
                    Some(acc) => (self.var(acc) + contrib).id,
                    None => contrib.id,
                });
            }
        }
        self.recording.set(prev);
        xs.iter().map(|x| if x.id < n { grads[x.id] } else { None }).collect()
    }

    fn backward_op<'g>(
        &'g self,
        op: &Op,
        out: usize,
        g: Var<'g, T>,
        want: &dyn Fn(usize) -> bool,
    ) -> Vec<(usize, Var<'g, T>)> {
        let mut res = Vec::new();
        let mut emit = |p: usize, f: &dyn Fn() -> Var<'g, T>| {
            if want(p) {
                res.push((p, f()));
            }
        };
        let v = |id: usize| self.var(id);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g);
            }
            Op::Sub(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                emit(a, &|| g * v(b));
                emit(b, &|| g * v(a));
            }
            Op::Div(a, b) => {
                emit(a, &|| g.div(v(b)));
                emit(b, &|| (g * v(out)).div(v(b)).scale(-1.0));
            }
            Op::Scale(a, c) => emit(a, &|| g.scale(c)),
            Op::Offset(a) => emit(a, &|| g),
            Op::Sigmoid(a) => emit(a, &|| {
                let y = v(out);
                g * (y * y.scale(-1.0).offset(1.0))
            }),
            Op::LeakyRelu(a, slope) => emit(a, &|| {
                let slope = T::from_f64c(slope);
                let mask = self.value_of(a).map(|x| if x > T::zero() { T::one() } else { slope });
                g * self.constant(mask)
            }),
            Op::Sqrt(a) => emit(a, &|| (g * v(out).recip()).scale(0.5)),
            Op::Recip(a) => emit(a, &|| {
                let y = v(out);
                (g * (y * y)).scale(-1.0)
            }),
            Op::Conv(x, w, geom) => {
                emit(x, &|| {
                    let s = v(x).shape();
                    g.conv_input_grad(v(w), geom, (s[2], s[3]))
                });
                emit(w, &|| v(x).conv_weight_grad(g, geom));
            }
            Op::ConvInputGrad(gy, w, geom) => {
                emit(gy, &|| g.conv(v(w), geom));
                emit(w, &|| g.conv_weight_grad(v(gy), geom));
            }
            Op::ConvWeightGrad(x, gy, geom) => {
                emit(gy, &|| v(x).conv(g, geom));
                emit(x, &|| {
                    let s = v(x).shape();
                    v(gy).conv_input_grad(g, geom, (s[2], s[3]))
                });
            }
            Op::Expand(a) => emit(a, &|| g.sum_to(v(a).shape())),
            Op::SumTo(a) => emit(a, &|| g.expand(v(a).shape())),
            Op::AvgPool2(a) => emit(a, &|| g.upsample2().scale(0.25)),
            Op::Upsample2(a) => emit(a, &|| g.avg_pool2().scale(4.0)),
            Op::Concat(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = v(p).shape()[1];
                    emit(p, &|| g.slice_channels(start, len));
                    start += len;
                }
            }
            Op::Slice(a, start) => emit(a, &|| {
                let [n, c, h, w] = v(a).shape();
                let len = g.shape()[1];
                let mut parts = Vec::new();
                if start > 0 {
                    parts.push(self.constant(Tensor::zeros([n, start, h, w])));
                }
                parts.push(g);
                if start + len < c {
                    parts.push(self.constant(Tensor::zeros([n, c - start - len, h, w])));
                }
                self.concat(&parts)
            }),
            Op::Spatial(a, ref maps, transposed) => emit(a, &|| g.spatial(maps.clone(), !transposed)),
        }
        res
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn is_tracked(&self) -> bool {
        self.graph.tracked.borrow()[self.id]
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant_rc(self.value())
    }

    fn unary(&self, f: impl FnOnce(&Tensor<T>) -> Tensor<T>, op: Op) -> Var<'g, T> {
        let out = f(&self.value());
        self.graph.push(out, op)
    }

    fn binary(&self, other: Var<'g, T>, f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Tensor<T>, op: Op) -> Var<'g, T> {
        let out = f(&self.value(), &other.value());
        self.graph.push(out, op)
    }

    pub fn scale(&self, c: f64) -> Var<'g, T> {
        let k = T::from_f64c(c);
        self.unary(|x| x.map(|v| v * k), Op::Scale(self.id, c))
    }

    pub fn offset(&self, c: f64) -> Var<'g, T> {
        let k = T::from_f64c(c);
        self.unary(|x| x.map(|v| v + k), Op::Offset(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(|x| x.map(|v| T::one() / (T::one() + (-v).exp())), Op::Sigmoid(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g, T> {
        let s = T::from_f64c(slope);
        self.unary(|x| x.map(|v| if v > T::zero() { v } else { v * s }), Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.leaky_relu(0.0)
    }

    pub fn sqrt(&self) -> Var<'g, T> {
        self.unary(|x| x.map(|v| v.sqrt()), Op::Sqrt(self.id))
    }

    pub fn recip(&self) -> Var<'g, T> {
        self.unary(|x| x.map(|v| T::one() / v), Op::Recip(self.id))
    }

    pub fn square(&self) -> Var<'g, T> {
        *self * *self
    }

    pub fn div(&self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a.zip_map(b, |x, y| x / y), Op::Div(self.id, other.id))
    }

    /// 2-D cross-correlation with weight `[out, in, kh, kw]`.
    pub fn conv(&self, w: Var<'g, T>, geom: ConvGeom) -> Var<'g, T> {
        self.binary(w, |x, w| kernels::conv2d(x, w, geom), Op::Conv(self.id, w.id, geom))
    }

    pub fn conv2d(&self, w: Var<'g, T>, stride: usize, pad: usize) -> Var<'g, T> {
        let [_, _, kh, kw] = w.shape();
        self.conv(w, ConvGeom { kh, kw, stride, pad })
    }

    /// Transposed convolution: the input-adjoint of [`Var::conv`].
    pub fn conv_input_grad(&self, w: Var<'g, T>, geom: ConvGeom, in_hw: (usize, usize)) -> Var<'g, T> {
        self.binary(w, |g, w| kernels::conv2d_input_grad(g, w, geom, in_hw), Op::ConvInputGrad(self.id, w.id, geom))
    }

    /// Weight-adjoint of [`Var::conv`]: `self` is the input, `gy` the output gradient.
    pub fn conv_weight_grad(&self, gy: Var<'g, T>, geom: ConvGeom) -> Var<'g, T> {
        self.binary(gy, |x, g| kernels::conv2d_weight_grad(x, g, geom), Op::ConvWeightGrad(self.id, gy.id, geom))
    }

    pub fn expand(&self, shape: [usize; 4]) -> Var<'g, T> {
        if self.shape() == shape {
            return *self;
        }
        self.unary(|x| kernels::expand(x, shape), Op::Expand(self.id))
    }

    pub fn sum_to(&self, shape: [usize; 4]) -> Var<'g, T> {
        if self.shape() == shape {
            return *self;
        }
        self.unary(|x| kernels::sum_to(x, shape), Op::SumTo(self.id))
    }

    pub fn sum(&self) -> Var<'g, T> {
        self.sum_to([1, 1, 1, 1])
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Per-sample sum, shape `[n, 1, 1, 1]`.
    pub fn sum_per_sample(&self) -> Var<'g, T> {
        self.sum_to([self.shape()[0], 1, 1, 1])
    }

    /// Adds a `[1, c, 1, 1]` (or broadcastable) bias.
    pub fn add_bias(&self, b: Var<'g, T>) -> Var<'g, T> {
        *self + b.expand(self.shape())
    }

    pub fn avg_pool2(&self) -> Var<'g, T> {
        self.unary(kernels::avg_pool2, Op::AvgPool2(self.id))
    }

    pub fn upsample2(&self) -> Var<'g, T> {
        self.unary(kernels::upsample2, Op::Upsample2(self.id))
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Var<'g, T> {
        self.unary(|x| kernels::slice_channels(x, start, len), Op::Slice(self.id, start))
    }

    /// Resamples every channel with a fixed sparse map (or its transpose).
    pub fn spatial(&self, maps: Rc<[SpatialMap]>, transposed: bool) -> Var<'g, T> {
        let out = apply_maps(&self.value(), &maps, transposed);
        self.graph.push(out, Op::Spatial(self.id, maps, transposed))
    }
}

impl<'g, T: Real> ops::Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        self.binary(rhs, |a, b| a.zip_map(b, |x, y| x + y), Op::Add(self.id, rhs.id))
    }
}

impl<'g, T: Real> ops::Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.binary(rhs, |a, b| a.zip_map(b, |x, y| x - y), Op::Sub(self.id, rhs.id))
    }
}

impl<'g, T: Real> ops::Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.binary(rhs, |a, b| a.zip_map(b, |x, y| x * y), Op::Mul(self.id, rhs.id))
    }
}

impl<'g, T: Real> ops::Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        self.scale(-1.0)
    }
}
