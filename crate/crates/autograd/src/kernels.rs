//! Raw tensor kernels. Every function here is pure; the graph layer wires
//! them together and supplies the adjoint relations.

use crate::tensor::{Real, Tensor};

/// Geometry of a square-stride 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        assert!(
            h + 2 * self.pad >= self.kh && w + 2 * self.pad >= self.kw,
            "kernel larger than padded input"
        );
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose stride-1 source column `ox + kx - pad` lies inside `[0, w)`.
fn valid_span(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(wo);
    let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kx, g.pad, w, wo);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        let s0 = lo + kx - g.pad;
                        out_row[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                        continue;
                    }
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let p = ho * wo;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kx, g.pad, w, wo);
                        let s0 = lo + kx - g.pad;
                        for (d, &v) in dst[s0..s0 + hi - lo].iter_mut().zip(&src[oy * wo + lo..oy * wo + hi]) {
                            *d = *d + v;
                        }
                        continue;
                    }
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation `y[n,o] = Σ_c w[o,c] ⋆ x[n,c]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, wt: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let [o, wc, kh, kw] = wt.shape();
    assert_eq!((wc, kh, kw), (c, g.kh, g.kw), "conv2d: weight shape {:?} vs input {:?}", wt.shape(), x.shape());
    let (ho, wo) = g.out_hw(h, w);
    let (k, p) = (c * kh * kw, ho * wo);
    let mut out = Tensor::zeros([n, o, ho, wo]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..n {
        let xb = x.sample(b);
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, c, h, w, g, ho, wo, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[b * o * p..(b + 1) * o * p];
        T::gemm(o, k, p, wt.data(), (k as isize, 1), src, (p as isize, 1), T::zero(), dst, (p as isize, 1));
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input (a transposed convolution).
pub fn conv2d_input_grad<T: Real>(
    gy: &Tensor<T>,
    wt: &Tensor<T>,
    g: ConvGeom,
    in_hw: (usize, usize),
) -> Tensor<T> {
    let [n, o, ho, wo] = gy.shape();
    let [wo_ch, c, kh, kw] = wt.shape();
    assert_eq!(wo_ch, o, "conv2d_input_grad: channel mismatch");
    let (h, w) = in_hw;
    assert_eq!(g.out_hw(h, w), (ho, wo), "conv2d_input_grad: spatial mismatch");
    let (k, p) = (c * kh * kw, ho * wo);
    let mut out = Tensor::zeros([n, c, h, w]);
    let mut cols = vec![T::zero(); k * p];
    for b in 0..n {
        let gb = gy.sample(b);
        let dst = &mut out.data_mut()[b * c * h * w..(b + 1) * c * h * w];
        if g.is_pointwise() {
            T::gemm(k, o, p, wt.data(), (1, k as isize), gb, (p as isize, 1), T::zero(), dst, (p as isize, 1));
        } else {
            T::gemm(k, o, p, wt.data(), (1, k as isize), gb, (p as isize, 1), T::zero(), &mut cols, (p as isize, 1));
            col2im_add(&cols, c, h, w, g, ho, wo, dst);
        }
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad<T: Real>(x: &Tensor<T>, gy: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let [gn, o, ho, wo] = gy.shape();
    assert_eq!(gn, n, "conv2d_weight_grad: batch mismatch");
    assert_eq!(g.out_hw(h, w), (ho, wo), "conv2d_weight_grad: spatial mismatch");
    let (k, p) = (c * g.kh * g.kw, ho * wo);
    let mut out = Tensor::zeros([o, c, g.kh, g.kw]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..n {
        let xb = x.sample(b);
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, c, h, w, g, ho, wo, &mut cols);
            &cols
        };
        T::gemm(o, p, k, gy.sample(b), (p as isize, 1), src, (1, p as isize), T::one(), out.data_mut(), (k as isize, 1));
    }
    out
}

/// Broadcasts `x` to `shape`; every axis of `x` must be 1 or equal to the target.
pub fn expand<T: Real>(x: &Tensor<T>, shape: [usize; 4]) -> Tensor<T> {
    let s = x.shape();
    for d in 0..4 {
        assert!(s[d] == shape[d] || s[d] == 1, "cannot expand {s:?} to {shape:?}");
    }
    let st = broadcast_strides(s);
    let src = x.data();
    let mut data = Vec::with_capacity(shape.iter().product());
    for n in 0..shape[0] {
        for c in 0..shape[1] {
            for h in 0..shape[2] {
                let base = n * st[0] + c * st[1] + h * st[2];
                if st[3] == 0 {
                    data.extend(std::iter::repeat(src[base]).take(shape[3]));
                } else {
                    data.extend_from_slice(&src[base..base + shape[3]]);
                }
            }
        }
    }
    Tensor::new(shape, data)
}

/// Sums `x` down to `shape` (the adjoint of [`expand`]). Accumulation follows
/// row-major order of `x`.
pub fn sum_to<T: Real>(x: &Tensor<T>, shape: [usize; 4]) -> Tensor<T> {
    let s = x.shape();
    for d in 0..4 {
        assert!(shape[d] == s[d] || shape[d] == 1, "cannot reduce {s:?} to {shape:?}");
    }
    let st = broadcast_strides(shape);
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    let mut i = 0;
    let src = x.data();
    for n in 0..s[0] {
        for c in 0..s[1] {
            for h in 0..s[2] {
                let base = n * st[0] + c * st[1] + h * st[2];
                for w in 0..s[3] {
                    let o = base + w * st[3];
                    dst[o] = dst[o] + src[i];
                    i += 1;
                }
            }
        }
    }
    out
}

fn broadcast_strides(s: [usize; 4]) -> [usize; 4] {
    let full = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let mut st = [0; 4];
    for d in 0..4 {
        st[d] = if s[d] == 1 { 0 } else { full[d] };
    }
    st
}

/// 2×2 average pooling with stride 2. Spatial dims must be even.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
    let quarter = T::from_f64c(0.25);
    Tensor::from_fn([n, c, h / 2, w / 2], |[b, ch, y, xx]| {
        let o = x.offset([b, ch, 2 * y, 2 * xx]);
        let d = x.data();
        (d[o] + d[o + 1] + d[o + w] + d[o + w + 1]) * quarter
    })
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, 2 * h, 2 * w], |[b, ch, y, xx]| x.at([b, ch, y / 2, xx / 2]))
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let [n, _, h, w] = parts[0].shape();
    let c: usize = parts
        .iter()
        .map(|p| {
            let s = p.shape();
            assert!(s[0] == n && s[2] == h && s[3] == w, "concat_channels: shape mismatch");
            s[1]
        })
        .sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for p in parts {
            data.extend_from_slice(p.sample(b));
        }
    }
    Tensor::new([n, c, h, w], data)
}

pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(start + len <= c, "slice_channels out of range");
    let plane = h * w;
    let mut data = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let s = x.sample(b);
        data.extend_from_slice(&s[start * plane..(start + len) * plane]);
    }
    Tensor::new([n, len, h, w], data)
}
