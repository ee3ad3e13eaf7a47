//! Synthetic pseudo-pathology slides with exact vessel ground truth.
//!
//! A slide is a pink, nucleus-speckled tissue background with bright,
//! near-white vessel lumens. Lumens are deformed ellipses whose boundary is
//! blurred in the image but not in the ground truth. A configurable fraction
//! of vessels carry dark cell clusters inside the lumen (the MVI-like case);
//! the ground truth covers those clusters as vessel.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};
use crate::weaklabel::{self, WeakConfig, WeakPair};

/// Parameters of one synthetic slide. Identical specs give bit-identical slides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideSpec {
    pub width: usize,
    pub height: usize,
    pub vessel_count: usize,
    /// Inclusive range of the mean lumen radius, in pixels.
    pub vessel_scale_range: (f64, f64),
    pub edge_blur_sigma: f64,
    pub mvi_fraction: f64,
    /// Per-slide stain colour jitter amplitude.
    pub stain_jitter: f64,
    /// Background nuclei per pixel.
    pub nucleus_density: f64,
    pub seed: u64,
}

impl Default for SlideSpec {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 1024,
            vessel_count: 12,
            vessel_scale_range: (10.0, 56.0),
            edge_blur_sigma: 2.0,
            mvi_fraction: 0.25,
            stain_jitter: 0.06,
            nucleus_density: 0.0025,
            seed: 0,
        }
    }
}

impl SlideSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.width < 256 || self.height < 256 {
            return fail(format!("slide {}x{} is smaller than 256x256", self.width, self.height));
        }
        if self.vessel_count == 0 {
            return fail("vessel_count must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mvi_fraction) {
            return fail(format!("mvi_fraction {} outside [0, 1]", self.mvi_fraction));
        }
        let (lo, hi) = self.vessel_scale_range;
        if !(lo >= 2.0 && hi >= lo) {
            return fail(format!("vessel_scale_range ({lo}, {hi}) must satisfy 2 <= lo <= hi"));
        }
        if 2.6 * hi + 8.0 >= self.width.min(self.height) as f64 {
            return fail(format!("vessels of radius {hi} do not fit a {}x{} slide", self.width, self.height));
        }
        if self.edge_blur_sigma < 0.0 || self.stain_jitter < 0.0 || self.nucleus_density < 0.0 {
            return fail("blur, jitter and density must be non-negative".into());
        }
        Ok(())
    }
}

/// Geometry of one generated vessel, kept so ground truth can be re-derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselRecord {
    pub center: (f64, f64),
    pub radius: f64,
    pub aspect: f64,
    pub angle: f64,
    /// `(amplitude, phase)` of boundary harmonics 2, 3, 4, ...
    pub harmonics: Vec<(f64, f64)>,
    pub mvi: bool,
    /// Cluster cells as `(y, x, radius)`.
    pub cells: Vec<(f64, f64, f64)>,
}

impl VesselRecord {
    /// Normalised radial coordinate: `<= 1` inside the (pre-blur) lumen.
    pub fn rho(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = (-s * dx + c * dy) / self.aspect;
        let r = (u * u + v * v).sqrt();
        let th = v.atan2(u);
        let boundary = self.radius
            * (1.0 + self.harmonics.iter().enumerate().map(|(k, &(a, p))| a * ((k + 2) as f64 * th + p).cos()).sum::<f64>());
        r / boundary
    }

    /// Whether pixel `(y, x)` (sampled at its centre) lies in the lumen.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.rho(y as f64 + 0.5, x as f64 + 0.5) <= 1.0
    }

    fn extent(&self) -> f64 {
        self.radius * (1.0 + self.harmonics.iter().map(|h| h.0.abs()).sum::<f64>())
    }
}

pub struct Slide {
    pub image: Image,
    /// Lumen mask (1 = vessel), including any cell clusters.
    pub gt: Mask,
    /// Dark cluster pixels (a subset of `gt`).
    pub clusters: Mask,
    pub vessels: Vec<VesselRecord>,
}

fn jitter<R: Rng>(rng: &mut R, base: [f64; 3], amp: f64) -> [f64; 3] {
    base.map(|v| (v + rng.gen_range(-amp..=amp)).clamp(0.0, 1.0))
}

fn gaussian_blur(plane: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let rad = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-rad..=rad).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - rad).clamp(0, w as isize - 1) as usize;
                acc += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - rad).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Soft disk coverage for anti-aliased drawing.
fn disk_alpha(d: f64, r: f64) -> f32 {
    (r + 0.5 - d).clamp(0.0, 1.0) as f32
}

fn blend(img: &mut Image, y: usize, x: usize, rgb: [f64; 3], a: f32) {
    if a <= 0.0 {
        return;
    }
    for (c, &v) in rgb.iter().enumerate() {
        let cur = img.get(c, y, x);
        img.set(c, y, x, cur * (1.0 - a) + v as f32 * a);
    }
}

fn place_vessels<R: Rng>(spec: &SlideSpec, rng: &mut R) -> Result<Vec<VesselRecord>> {
    let (lo, hi) = spec.vessel_scale_range;
    let mut vessels: Vec<VesselRecord> = Vec::with_capacity(spec.vessel_count);
    for _ in 0..spec.vessel_count {
        let radius = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let harmonics: Vec<(f64, f64)> = (0..3).map(|_| (rng.gen_range(0.0..0.06), rng.gen_range(0.0..2.0 * PI))).collect();
        let mut v = VesselRecord {
            center: (0.0, 0.0),
            radius,
            aspect: rng.gen_range(0.6..=1.0),
            angle: rng.gen_range(0.0..PI),
            harmonics,
            mvi: false,
            cells: Vec::new(),
        };
        let margin = 1.3 * v.extent() + 4.0;
        let mut placed = false;
        for _ in 0..2000 {
            let cy = rng.gen_range(margin..spec.height as f64 - margin);
            let cx = rng.gen_range(margin..spec.width as f64 - margin);
            let clear = vessels.iter().all(|o| {
                let d = ((o.center.0 - cy).powi(2) + (o.center.1 - cx).powi(2)).sqrt();
                d > 1.3 * (o.extent() + v.extent()) + 8.0
            });
            if clear {
                v.center = (cy, cx);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidSpec(format!(
                "could not place {} non-overlapping vessels on a {}x{} slide",
                spec.vessel_count, spec.width, spec.height
            )));
        }
        vessels.push(v);
    }
    let n_mvi = (spec.mvi_fraction * spec.vessel_count as f64).round() as usize;
    let mut order: Vec<usize> = (0..vessels.len()).collect();
    order.shuffle(rng);
    for &i in order.iter().take(n_mvi) {
        let v = &mut vessels[i];
        v.mvi = true;
        let n_clusters = rng.gen_range(1..=3);
        for _ in 0..n_clusters {
            // cluster anchor well inside the lumen
            let (ay, ax) = loop {
                let (ry, rx) = (rng.gen_range(-0.5..0.5) * v.radius, rng.gen_range(-0.5..0.5) * v.radius);
                let (y, x) = (v.center.0 + ry, v.center.1 + rx);
                if v.rho(y, x) <= 0.5 {
                    break (y, x);
                }
            };
            let spread = (0.18 * v.radius).max(2.0);
            let n_cells = rng.gen_range(5..=16);
            let normal = Normal::new(0.0, spread).expect("positive spread");
            let mut made = 0;
            for _ in 0..n_cells * 4 {
                if made == n_cells {
                    break;
                }
                let (y, x) = (ay + normal.sample(rng), ax + normal.sample(rng));
                let r = rng.gen_range(1.6..=3.0f64).min(0.25 * v.radius);
                if v.rho(y, x) <= 0.75 {
                    v.cells.push((y, x, r));
                    made += 1;
                }
            }
            if made == 0 {
                v.cells.push((ay, ax, 1.6f64.min(0.25 * v.radius)));
            }
        }
    }
    Ok(vessels)
}

/// Renders a slide and its exact ground truth.
pub fn generate_slide(spec: &SlideSpec) -> Result<Slide> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let j = spec.stain_jitter;
    let eosin = jitter(&mut rng, [0.90, 0.58, 0.74], j);
    let wall = jitter(&mut rng, [0.82, 0.44, 0.60], j);
    let hema = jitter(&mut rng, [0.40, 0.24, 0.55], j);
    let cell = jitter(&mut rng, [0.30, 0.15, 0.42], j * 0.5);
    let lumen = jitter(&mut rng, [0.965, 0.945, 0.955], j * 0.25);

    let vessels = place_vessels(spec, &mut rng)?;

    // low-frequency stain texture
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let th = rng.gen_range(0.0..PI);
            let len = rng.gen_range(60.0..300.0);
            (th.cos() * 2.0 * PI / len, th.sin() * 2.0 * PI / len, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.02..0.05))
        })
        .collect();
    let noise = Normal::new(0.0, 0.018f64).expect("valid sigma");
    let mut image = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves.iter().map(|&(ky, kx, ph, a)| a * (ky * y as f64 + kx * x as f64 + ph).sin()).sum();
            let n = noise.sample(&mut rng);
            for c in 0..3 {
                image.set(c, y, x, (eosin[c] * (1.0 + t) + n) as f32);
            }
        }
    }

    // vessel walls: darker ring just outside each lumen
    for v in &vessels {
        let ext = v.extent() * 1.3 + 4.0;
        let (y0, y1) = ((v.center.0 - ext).max(0.0) as usize, ((v.center.0 + ext) as usize).min(h - 1));
        let (x0, x1) = ((v.center.1 - ext).max(0.0) as usize, ((v.center.1 + ext) as usize).min(w - 1));
        let thick = (0.12 * v.radius).max(2.0) / v.radius;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let r = v.rho(y as f64 + 0.5, x as f64 + 0.5);
                if r > 1.0 && r <= 1.0 + thick {
                    blend(&mut image, y, x, wall, 0.7);
                }
            }
        }
    }

    // background nuclei
    let n_nuclei = (spec.nucleus_density * (h * w) as f64) as usize;
    for _ in 0..n_nuclei {
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let r = rng.gen_range(1.5..3.5f64);
        let shade = rng.gen_range(0.6..0.95f32);
        let (y0, y1) = ((cy - r - 1.0).max(0.0) as usize, ((cy + r + 1.0) as usize).min(h - 1));
        let (x0, x1) = ((cx - r - 1.0).max(0.0) as usize, ((cx + r + 1.0) as usize).min(w - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                blend(&mut image, y, x, hema, disk_alpha(d, r) * shade);
            }
        }
    }

    // lumen: exact mask, blurred alpha
    let mut gt = Mask::zeros(h, w);
    for v in &vessels {
        let ext = v.extent() + 2.0;
        let (y0, y1) = ((v.center.0 - ext).max(0.0) as usize, ((v.center.0 + ext) as usize).min(h - 1));
        let (x0, x1) = ((v.center.1 - ext).max(0.0) as usize, ((v.center.1 + ext) as usize).min(w - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                if v.contains(y, x) {
                    gt.set(y, x, true);
                }
            }
        }
    }
    let alpha = gaussian_blur(&gt.to_f32(), h, w, spec.edge_blur_sigma);
    let faint = Normal::new(0.0, 0.008f64).expect("valid sigma");
    for y in 0..h {
        for x in 0..w {
            let a = alpha[y * w + x];
            if a > 0.0 {
                let n = faint.sample(&mut rng);
                blend(&mut image, y, x, lumen.map(|c| c + n), a);
            }
        }
    }

    // carcinoma-like cell clusters, clipped to the lumen
    let mut clusters = Mask::zeros(h, w);
    for v in &vessels {
        for &(cy, cx, r) in &v.cells {
            let (y0, y1) = ((cy - r - 1.0).max(0.0) as usize, ((cy + r + 1.0) as usize).min(h - 1));
            let (x0, x1) = ((cx - r - 1.0).max(0.0) as usize, ((cx + r + 1.0) as usize).min(w - 1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if !gt.get(y, x) {
                        continue;
                    }
                    let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                    let a = disk_alpha(d, r);
                    blend(&mut image, y, x, cell, a);
                    if a >= 0.5 {
                        clusters.set(y, x, true);
                    }
                }
            }
        }
    }

    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Slide { image, gt, clusters, vessels })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Where a patch was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub slide: usize,
    /// Top-left corner of the crop in slide pixels.
    pub y: usize,
    pub x: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub id: String,
    pub image: Image,
    pub gt_mask: Option<Mask>,
    /// Side of the square crop before the canonical resize.
    pub scale: usize,
    pub is_mvi: bool,
    pub origin: PatchOrigin,
    pub split: Split,
}

impl Patch {
    pub fn size(&self) -> (usize, usize) {
        (self.image.height, self.image.width)
    }
}

/// Centres of white (bright, unsaturated) regions.
///
/// A pixel is white when its mean intensity exceeds 0.85 and its channel
/// spread is below 0.1. The response is the fraction of white pixels in a
/// box of side `min_scale + 1`; local maxima above 5% are kept and thinned by
/// greedy non-maximum suppression with radius `min_scale / 2`. Output is
/// sorted by `(y, x)`.
pub fn locate_white_centers(image: &Image, min_scale: usize) -> Vec<(usize, usize)> {
    let (h, w) = (image.height, image.width);
    let mut integral = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            let [r, g, b] = image.pixel(y, x);
            let mean = (r + g + b) / 3.0;
            let spread = r.max(g).max(b) - r.min(g).min(b);
            row += (mean > 0.85 && spread < 0.1) as u32;
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let rad = (min_scale / 2).max(1);
    let area = ((2 * rad + 1) * (2 * rad + 1)) as f64;
    let response: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let (y0, y1) = (y.saturating_sub(rad), (y + rad + 1).min(h));
            let (x0, x1) = (x.saturating_sub(rad), (x + rad + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0]
                - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0];
            s as f64 / area
        })
        .collect();
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let r = response[y * w + x];
            if r < 0.05 {
                continue;
            }
            let mut is_max = true;
            'n: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if (dy, dx) != (0, 0) && yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && response[yy as usize * w + xx as usize] > r {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                cands.push((r, y, x));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let nms = (min_scale / 2) as f64;
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (_, y, x) in cands {
        if kept.iter().all(|&(ky, kx)| ((ky as f64 - y as f64).powi(2) + (kx as f64 - x as f64).powi(2)).sqrt() >= nms) {
            kept.push((y, x));
        }
    }
    kept.sort();
    kept
}

fn crop_window(center: usize, size: usize, extent: usize) -> usize {
    (center as isize - size as isize / 2).clamp(0, (extent - size) as isize) as usize
}

/// Cuts one patch per (white centre, scale) and resizes it to `patch_size`.
/// Patches are ordered by `(y, x, scale)`.
pub fn locate_and_cut(slide: &Slide, slide_index: usize, scales: &[usize], patch_size: usize, split: Split) -> Result<Vec<Patch>> {
    let (h, w) = (slide.image.height, slide.image.width);
    if (slide.gt.height, slide.gt.width) != (h, w) {
        return Err(Error::Shape("slide image and ground truth differ in size".into()));
    }
    let Some(&min_scale) = scales.iter().min() else {
        return Ok(Vec::new());
    };
    let mut scales = scales.to_vec();
    scales.sort_unstable();
    let mut out = Vec::new();
    for (cy, cx) in locate_white_centers(&slide.image, min_scale) {
        for &s in &scales {
            if s > h || s > w {
                continue;
            }
            let (y0, x0) = (crop_window(cy, s, h), crop_window(cx, s, w));
            let mut image = slide.image.crop(y0, x0, s, s).resize_area(patch_size, patch_size);
            image.quantize();
            let gt_crop = slide.gt.crop(y0, x0, s, s);
            let is_mvi = !gt_crop.and(&slide.clusters.crop(y0, x0, s, s)).is_empty();
            out.push(Patch {
                id: format!("s{slide_index:04}-y{cy:04}-x{cx:04}-{s}"),
                image,
                gt_mask: Some(gt_crop.resize_nearest(patch_size, patch_size)),
                scale: s,
                is_mvi,
                origin: PatchOrigin { slide: slide_index, y: y0, x: x0 },
                split,
            });
        }
    }
    Ok(out)
}

/// Random vessel-free, white-free crops used as compositing donors.
pub fn cut_backgrounds<R: Rng>(slide: &Slide, slide_index: usize, count: usize, scale: usize, patch_size: usize, rng: &mut R) -> Vec<Patch> {
    let (h, w) = (slide.image.height, slide.image.width);
    let mut out = Vec::new();
    if scale > h || scale > w {
        return out;
    }
    for _ in 0..count * 50 {
        if out.len() == count {
            break;
        }
        let (y0, x0) = (rng.gen_range(0..=h - scale), rng.gen_range(0..=w - scale));
        if !slide.gt.crop(y0, x0, scale, scale).is_empty() {
            continue;
        }
        let crop = slide.image.crop(y0, x0, scale, scale);
        if !locate_white_centers(&crop, scale).is_empty() {
            continue;
        }
        let mut image = crop.resize_area(patch_size, patch_size);
        image.quantize();
        out.push(Patch {
            id: format!("bg{slide_index:04}-y{y0:04}-x{x0:04}-{scale}"),
            image,
            gt_mask: Some(Mask::zeros(patch_size, patch_size)),
            scale,
            is_mvi: false,
            origin: PatchOrigin { slide: slide_index, y: y0, x: x0 },
            split: Split::Train,
        });
    }
    out
}

/// Keeps the labelled patch's vessel pixels and replaces its background by
/// the mean of its own background and the donor's, clamped to `[0, 1]`.
pub fn composite_background(labeled: &Patch, donor: &Patch) -> Result<Patch> {
    let gt = labeled
        .gt_mask
        .as_ref()
        .ok_or_else(|| Error::Data(format!("patch {} has no ground truth to composite", labeled.id)))?;
    let donor_gt = donor
        .gt_mask
        .as_ref()
        .ok_or_else(|| Error::Data(format!("donor {} has no ground truth", donor.id)))?;
    if !donor_gt.is_empty() {
        return Err(Error::Data(format!("donor {} contains vessel pixels", donor.id)));
    }
    if labeled.size() != donor.size() {
        return Err(Error::Shape(format!("donor {:?} vs patch {:?}", donor.size(), labeled.size())));
    }
    let (h, w) = labeled.size();
    let mut image = labeled.image.clone();
    for c in 0..3 {
        let d = donor.image.plane(c);
        let p = image.plane_mut(c);
        for i in 0..h * w {
            if gt.data()[i] == 0 {
                p[i] = ((p[i] + d[i]) / 2.0).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Patch { image, ..labeled.clone() })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { train: 48, val: 6, test: 6 }
    }
}

/// Everything needed to regenerate a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Template for every slide; each slide gets its own derived seed.
    pub slide: SlideSpec,
    /// Number of slides per split.
    pub slides: SplitCounts,
    pub scales: Vec<usize>,
    pub patch_size: usize,
    /// Optional caps on patches per split (seeded subsample).
    pub max_patches: Option<SplitCounts>,
    pub backgrounds_per_slide: usize,
    /// Number of labelled train patches (`K`).
    pub labeled: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            slide: SlideSpec::default(),
            slides: SplitCounts::default(),
            scales: vec![64, 128, 256],
            patch_size: 128,
            max_patches: None,
            backgrounds_per_slide: 2,
            labeled: 10,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.slide.validate()?;
        if self.scales.is_empty() || self.scales.iter().any(|&s| s < 8) {
            return Err(Error::Config("scales must be non-empty and at least 8 pixels".into()));
        }
        if self.patch_size < 8 {
            return Err(Error::Config("patch_size must be at least 8".into()));
        }
        if self.slides.train == 0 {
            return Err(Error::Config("need at least one train slide".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finaliser, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The patch sets used for training and evaluation.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub patches: Vec<Patch>,
    /// Unlabelled train patches (ground truth withheld).
    pub unlabeled: Vec<usize>,
    /// Labelled train patches, in selection order.
    pub labeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Vessel-free donors for background compositing.
    pub backgrounds: Vec<Patch>,
    pub over: Vec<WeakPair>,
    pub under: Vec<WeakPair>,
    pub config: CorpusConfig,
}

/// Generates slides, cuts patches, assigns splits by slide and selects the
/// `K` labelled patches. Weak-label sets are left empty (see [`Corpus::fill_weak`]).
pub fn make_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut patches = Vec::new();
    let mut backgrounds = Vec::new();
    let splits = [(Split::Train, cfg.slides.train), (Split::Val, cfg.slides.val), (Split::Test, cfg.slides.test)];
    let mut bg_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let min_scale = *cfg.scales.iter().min().expect("validated");
    let mut slide_index = 0;
    for (split, n) in splits {
        let mut cut = Vec::new();
        for _ in 0..n {
            let spec = SlideSpec { seed: derive_seed(cfg.seed, 1000 + slide_index as u64), ..cfg.slide.clone() };
            let slide = generate_slide(&spec)?;
            cut.extend(locate_and_cut(&slide, slide_index, &cfg.scales, cfg.patch_size, split)?);
            if split == Split::Train {
                backgrounds.extend(cut_backgrounds(&slide, slide_index, cfg.backgrounds_per_slide, min_scale, cfg.patch_size, &mut bg_rng));
            }
            slide_index += 1;
        }
        let cap = cfg.max_patches.as_ref().map(|m| match split {
            Split::Train => m.train,
            Split::Val => m.val,
            Split::Test => m.test,
        });
        if let Some(cap) = cap.filter(|&c| c < cut.len()) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2 + split as u64));
            let mut keep: Vec<usize> = (0..cut.len()).collect();
            keep.shuffle(&mut rng);
            keep.truncate(cap);
            keep.sort_unstable();
            cut = keep.into_iter().map(|i| cut[i].clone()).collect();
        }
        patches.extend(cut);
    }

    let train: Vec<usize> = (0..patches.len()).filter(|&i| patches[i].split == Split::Train).collect();
    if cfg.labeled > train.len() {
        return Err(Error::Config(format!("K = {} exceeds the {} available train patches", cfg.labeled, train.len())));
    }
    let mut order = train.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 5)));
    let labeled: Vec<usize> = order[..cfg.labeled].to_vec();
    let mut unlabeled: Vec<usize> = order[cfg.labeled..].to_vec();
    unlabeled.sort_unstable();
    for &i in &unlabeled {
        patches[i].gt_mask = None;
    }
    let pick = |s: Split| (0..patches.len()).filter(|&i| patches[i].split == s).collect::<Vec<_>>();
    let (val, test) = (pick(Split::Val), pick(Split::Test));
    Ok(Corpus { patches, unlabeled, labeled, val, test, backgrounds, over: Vec::new(), under: Vec::new(), config: cfg.clone() })
}

impl Corpus {
    /// All train patches (labelled and unlabelled), in index order.
    pub fn train_pool(&self) -> Vec<&Patch> {
        let mut idx: Vec<usize> = self.unlabeled.iter().chain(&self.labeled).copied().collect();
        idx.sort_unstable();
        idx.into_iter().map(|i| &self.patches[i]).collect()
    }

    /// Draws the over-/under-segmented sets from the train pool.
    pub fn fill_weak(&mut self, cfg: &WeakConfig) -> Result<weaklabel::WeakSets> {
        let sets = weaklabel::build_weak_sets(&self.train_pool(), cfg, derive_seed(self.config.seed, 7))?;
        self.over = sets.over.clone();
        self.under = sets.under.clone();
        Ok(sets)
    }

    /// Keeps only the first `k` labelled patches; the others become unlabelled.
    pub fn with_label_budget(&self, k: usize) -> Result<Corpus> {
        if k > self.labeled.len() {
            return Err(Error::Config(format!("label budget {k} exceeds the {} labelled patches", self.labeled.len())));
        }
        let mut c = self.clone();
        for &i in &self.labeled[k..] {
            c.patches[i].gt_mask = None;
            c.unlabeled.push(i);
        }
        c.unlabeled.sort_unstable();
        c.labeled.truncate(k);
        c.config.labeled = k;
        Ok(c)
    }

    pub fn split(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.labeled,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn patch_index(&self, id: &str) -> Option<usize> {
        self.patches.iter().position(|p| p.id == id)
    }

    pub fn patch_size(&self) -> usize {
        self.config.patch_size
    }
}
