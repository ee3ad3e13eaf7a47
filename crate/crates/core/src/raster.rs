//! Planar RGB images and binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar (channel-major) RGB image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image buffer of {} values for {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(plane));
        }
        Self { height, width, data }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    /// Luma (BT.601 weights).
    pub fn gray(&self) -> Vec<f32> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Image { height: h, width: w, data }
    }

    /// Area-averaging resample: each output pixel is the coverage-weighted
    /// mean of the input pixels its footprint overlaps.
    pub fn resize_area(&self, h: usize, w: usize) -> Image {
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        let ys = area_weights(self.height, h);
        let xs = area_weights(self.width, w);
        let mut data = vec![0f32; 3 * h * w];
        for c in 0..3 {
            let src = self.plane(c);
            for (oy, yw) in ys.iter().enumerate() {
                for (ox, xw) in xs.iter().enumerate() {
                    let mut acc = 0f64;
                    for &(iy, wy) in yw {
                        let row = iy * self.width;
                        for &(ix, wx) in xw {
                            acc += wy * wx * src[row + ix] as f64;
                        }
                    }
                    data[(c * h + oy) * w + ox] = acc as f32;
                }
            }
        }
        Image { height: h, width: w, data }
    }

    /// Rounds every intensity to the nearest 8-bit level so that PNG
    /// persistence is lossless.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// `1 - v` on every channel.
    pub fn inverted(&self) -> Image {
        Image { height: self.height, width: self.width, data: self.data.iter().map(|v| 1.0 - v).collect() }
    }
}

/// Per output index, the input indices and normalised overlap weights.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut v = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < n_in {
                let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    v.push((i, overlap / scale));
                }
                i += 1;
            }
            v
        })
        .collect()
}

/// Binary mask stored as 0/1 bytes, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    /// Builds a mask from 0/1 values; any other value is rejected.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("mask buffer of {} values for {height}x{width}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Data("mask is not binary".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    /// Thresholds a soft map: values `>= 0.5` become 1.
    pub fn binarize(height: usize, width: usize, soft: &[f32]) -> Self {
        assert_eq!(soft.len(), height * width);
        Self { height, width, data: soft.iter().map(|&v| (v >= 0.5) as u8).collect() }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn not(&self) -> Mask {
        Mask { height: self.height, width: self.width, data: self.data.iter().map(|&v| 1 - v).collect() }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a | b)
    }

    /// `self \ other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a & (1 - b))
    }

    fn zip(&self, other: &Mask, f: impl Fn(u8, u8) -> u8) -> Mask {
        assert_eq!((self.height, self.width), (other.height, other.width), "mask shape mismatch");
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a & b == 0)
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.and(other).count();
        let union = self.or(other).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Mask {
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Mask { height: h, width: w, data }
    }

    /// Nearest-neighbour resample (keeps the mask binary).
    pub fn resize_nearest(&self, h: usize, w: usize) -> Mask {
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        Mask::from_fn(h, w, |y, x| {
            let sy = ((y as f64 + 0.5) * self.height as f64 / h as f64) as usize;
            let sx = ((x as f64 + 0.5) * self.width as f64 / w as f64) as usize;
            self.get(sy.min(self.height - 1), sx.min(self.width - 1))
        })
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}
