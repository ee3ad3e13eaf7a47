//! Affine resampling for the self-supervision branch.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use vesselseg_autograd::SpatialMap;

use crate::error::{Error, Result};
use crate::raster::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Nearest,
    Bilinear,
}

/// `p_out = A p_in + t` on `(row, col)` coordinates measured from the image
/// centre. `matrix = [[a00, a01, t0], [a10, a11, t1]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 2],
    pub interp: Interp,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self::linear([[1.0, 0.0], [0.0, 1.0]])
    }

    fn linear(a: [[f64; 2]; 2]) -> Self {
        Self { matrix: [[a[0][0], a[0][1], 0.0], [a[1][0], a[1][1], 0.0]], interp: Interp::Nearest }
    }

    pub fn hflip() -> Self {
        Self::linear([[1.0, 0.0], [0.0, -1.0]])
    }

    pub fn vflip() -> Self {
        Self::linear([[-1.0, 0.0], [0.0, 1.0]])
    }

    /// Rotation by `k` quarter turns, with exact integer entries.
    pub fn rot90(k: usize) -> Self {
        let (c, s) = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][k % 4];
        Self::linear([[c, -s], [s, c]])
    }

    /// Element `i` (0..8) of the dihedral group: `rot90(i % 4)`, followed by a
    /// horizontal flip when `i >= 4`.
    pub fn dihedral(i: usize) -> Self {
        let r = Self::rot90(i % 4);
        if i % 8 >= 4 {
            Self::hflip().compose(&r)
        } else {
            r
        }
    }

    /// Rotation by `theta` radians and isotropic scale `s`.
    pub fn rotation_scale(theta: f64, s: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        Self { interp: Interp::Bilinear, ..Self::linear([[s * cos, -s * sin], [s * sin, s * cos]]) }
    }

    /// `self ∘ other`: apply `other` first. Bilinear wins over nearest.
    pub fn compose(&self, other: &Self) -> Self {
        let (a, b) = (&self.matrix, &other.matrix);
        let mut m = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
            m[i][2] = a[i][0] * b[0][2] + a[i][1] * b[1][2] + a[i][2];
        }
        let interp = if self.interp == Interp::Bilinear || other.interp == Interp::Bilinear { Interp::Bilinear } else { Interp::Nearest };
        Self { matrix: m, interp }
    }

    pub fn with_interp(mut self, interp: Interp) -> Self {
        self.interp = interp;
        self
    }

    /// Flips and quarter turns: every output pixel copies exactly one input pixel.
    pub fn is_permutation(&self) -> bool {
        let m = &self.matrix;
        let unit = |v: f64| v == 0.0 || v == 1.0 || v == -1.0;
        m[0][2] == 0.0 && m[1][2] == 0.0 && [m[0][0], m[0][1], m[1][0], m[1][1]].iter().all(|&v| unit(v)) && (m[0][0] * m[1][1] - m[0][1] * m[1][0]).abs() == 1.0
    }

    fn inverse_linear(&self) -> Result<[[f64; 2]; 2]> {
        let m = &self.matrix;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Config("singular affine transform".into()));
        }
        if self.is_permutation() {
            // orthogonal with unit entries: the inverse is the transpose, exactly
            return Ok([[m[0][0], m[1][0]], [m[0][1], m[1][1]]]);
        }
        Ok([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
    }

    /// Resampling map for an `h x w` plane and the mask of output pixels
    /// whose pre-image lies inside the frame.
    pub fn spatial_map(&self, h: usize, w: usize) -> Result<(SpatialMap, Mask)> {
        if h != w && (self.matrix[0][1] != 0.0 || self.matrix[1][0] != 0.0) {
            return Err(Error::Shape(format!("rotations need a square plane, got {h}x{w}")));
        }
        let inv = self.inverse_linear()?;
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (ty, tx) = (self.matrix[0][2], self.matrix[1][2]);
        let mut rows = Vec::with_capacity(h * w);
        let mut valid = Mask::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                let (py, px) = (i as f64 - cy - ty, j as f64 - cx - tx);
                let qy = inv[0][0] * py + inv[0][1] * px + cy;
                let qx = inv[1][0] * py + inv[1][1] * px + cx;
                let mut row = Vec::new();
                match self.interp {
                    Interp::Nearest => {
                        let (ry, rx) = (qy.round(), qx.round());
                        if ry >= 0.0 && rx >= 0.0 && ry <= h as f64 - 1.0 && rx <= w as f64 - 1.0 {
                            row.push((ry as usize * w + rx as usize, 1.0));
                        }
                    }
                    Interp::Bilinear => {
                        let eps = 1e-9;
                        if qy >= -eps && qx >= -eps && qy <= h as f64 - 1.0 + eps && qx <= w as f64 - 1.0 + eps {
                            let (qy, qx) = (qy.clamp(0.0, h as f64 - 1.0), qx.clamp(0.0, w as f64 - 1.0));
                            let (y0, x0) = (qy.floor(), qx.floor());
                            let (fy, fx) = (qy - y0, qx - x0);
                            for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
                                for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                                    let wgt = wy * wx;
                                    if wgt > 0.0 {
                                        let (yy, xx) = (y0 as usize + dy, x0 as usize + dx);
                                        if yy < h && xx < w {
                                            row.push((yy * w + xx, wgt));
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if !row.is_empty() {
                    valid.set(i, j, true);
                }
                rows.push(row);
            }
        }
        Ok((SpatialMap::from_rows((h, w), (h, w), &rows), valid))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    /// Compose each dihedral element with a small random rotation and scale.
    pub random_affine: bool,
    pub max_rotation_deg: f64,
    pub max_scale_delta: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self { random_affine: true, max_rotation_deg: 15.0, max_scale_delta: 0.1 }
    }
}

/// A uniformly drawn flip/quarter-turn, optionally perturbed.
pub fn sample_transform<R: Rng + ?Sized>(rng: &mut R, cfg: &TransformConfig) -> AffineTransform {
    let d = AffineTransform::dihedral(rng.gen_range(0..8));
    if !cfg.random_affine {
        return d;
    }
    let theta = rng.gen_range(-1.0..=1.0) * cfg.max_rotation_deg * PI / 180.0;
    let s = 1.0 + rng.gen_range(-1.0..=1.0) * cfg.max_scale_delta;
    AffineTransform::rotation_scale(theta, s).compose(&d)
}
