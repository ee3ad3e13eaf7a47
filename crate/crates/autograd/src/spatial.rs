use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
struct Csr {
    row_ptr: Vec<usize>,
    idx: Vec<usize>,
    weight: Vec<f64>,
}

impl Csr {
    fn apply_plane<T: Real>(&self, src: &[T], dst: &mut [T]) {
        for (r, d) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc = acc + T::from_f64c(self.weight[k]) * src[self.idx[k]];
            }
            *d = acc;
        }
    }

    fn transpose(&self, n_cols: usize) -> Csr {
        let mut counts = vec![0usize; n_cols + 1];
        for &c in &self.idx {
            counts[c + 1] += 1;
        }
        for i in 0..n_cols {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut idx = vec![0; self.idx.len()];
        let mut weight = vec![0.0; self.idx.len()];
        for r in 0..self.row_ptr.len() - 1 {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.idx[k];
                idx[fill[c]] = r;
                weight[fill[c]] = self.weight[k];
                fill[c] += 1;
            }
        }
        Csr { row_ptr: counts, idx, weight }
    }
}

/// A fixed sparse linear map between image planes, applied identically to
/// every channel. Used for resampling under geometric transforms.
#[derive(Clone, Debug)]
pub struct SpatialMap {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    fwd: Csr,
    bwd: Csr,
}

impl SpatialMap {
    /// `rows[p]` lists `(source pixel, weight)` pairs contributing to output pixel `p`
    /// (row-major flat indices).
    pub fn from_rows(in_hw: (usize, usize), out_hw: (usize, usize), rows: &[Vec<(usize, f64)>]) -> Self {
        assert_eq!(rows.len(), out_hw.0 * out_hw.1, "one row per output pixel");
        let n_in = in_hw.0 * in_hw.1;
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut idx = Vec::new();
        let mut weight = Vec::new();
        row_ptr.push(0);
        for r in rows {
            for &(i, wgt) in r {
                assert!(i < n_in, "source index out of range");
                idx.push(i);
                weight.push(wgt);
            }
            row_ptr.push(idx.len());
        }
        let fwd = Csr { row_ptr, idx, weight };
        let bwd = fwd.transpose(n_in);
        Self { in_hw, out_hw, fwd, bwd }
    }

    pub fn in_hw(&self) -> (usize, usize) {
        self.in_hw
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    /// Applies the map (or its transpose) to one `[h, w]` plane.
    pub fn apply_plane<T: Real>(&self, src: &[T], dst: &mut [T], transposed: bool) {
        if transposed {
            self.bwd.apply_plane(src, dst)
        } else {
            self.fwd.apply_plane(src, dst)
        }
    }

    pub fn dst_hw(&self, transposed: bool) -> (usize, usize) {
        if transposed {
            self.in_hw
        } else {
            self.out_hw
        }
    }
}

/// Applies `maps[n]` (or a single shared map) to every channel of sample `n`.
pub fn apply_maps<T: Real>(x: &Tensor<T>, maps: &[SpatialMap], transposed: bool) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(maps.len() == 1 || maps.len() == n, "need one map per sample or a shared map");
    let (oh, ow) = maps[0].dst_hw(transposed);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        let m = &maps[if maps.len() == 1 { 0 } else { b }];
        let src_hw = if transposed { m.out_hw } else { m.in_hw };
        assert_eq!(src_hw, (h, w), "spatial map input size mismatch");
        assert_eq!(m.dst_hw(transposed), (oh, ow), "spatial maps disagree on output size");
        for ch in 0..c {
            let so = x.offset([b, ch, 0, 0]);
            let d_off = ((b * c) + ch) * oh * ow;
            let src = &x.data()[so..so + h * w];
            let dst = &mut out.data_mut()[d_off..d_off + oh * ow];
            m.apply_plane(src, dst, transposed);
        }
    }
    out
}
