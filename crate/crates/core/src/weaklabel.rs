//! OTSU binarisation, disk morphology and the weak-label sets built from them.
//!
//! For a patch with OTSU vessel mask `V` and radii `r1 > r2`:
//!
//! * under-segmented vessel mask: `(V ⊖ r1) ⊕ r2`, always a subset of `V`;
//! * over-segmented background mask: `¬((V ⊕ r1) ⊖ r2)`, always disjoint from `V`.
//!
//! Both containments follow from `r2 <= r1` and are exact.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};
use crate::synthgen::Patch;

/// Euclidean disk structuring element: offsets with `dy² + dx² <= r²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiskElement {
    pub radius: usize,
}

impl DiskElement {
    pub fn new(radius: usize) -> Self {
        Self { radius }
    }

    pub fn contains(&self, dy: isize, dx: isize) -> bool {
        let r = self.radius as isize;
        dy * dy + dx * dx <= r * r
    }

    /// Half-width of the element's row at vertical offset `dy`, for `dy` in `-r..=r`.
    fn spans(&self) -> Vec<(isize, usize)> {
        let r = self.radius as isize;
        (-r..=r)
            .map(|dy| {
                let rem = (r * r - dy * dy) as usize;
                let mut h = (rem as f64).sqrt() as usize;
                while h * h > rem {
                    h -= 1;
                }
                while (h + 1) * (h + 1) <= rem {
                    h += 1;
                }
                (dy, h)
            })
            .collect()
    }
}

fn row_prefix(mask: &Mask) -> Vec<u32> {
    let w = mask.width;
    let mut p = vec![0u32; mask.height * (w + 1)];
    for y in 0..mask.height {
        for x in 0..w {
            p[y * (w + 1) + x + 1] = p[y * (w + 1) + x] + mask.get(y, x) as u32;
        }
    }
    p
}

/// Minkowski erosion; pixels outside the image count as 0.
pub fn erode(mask: &Mask, e: DiskElement) -> Mask {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let p = row_prefix(mask);
    let spans = e.spans();
    Mask::from_fn(mask.height, mask.width, |y, x| {
        spans.iter().all(|&(dy, hw)| {
            let yy = y as isize + dy;
            let (a, b) = (x as isize - hw as isize, x as isize + hw as isize);
            if yy < 0 || yy >= h || a < 0 || b >= w {
                return false;
            }
            let row = yy as usize * (mask.width + 1);
            (p[row + b as usize + 1] - p[row + a as usize]) as isize == b - a + 1
        })
    })
}

/// Minkowski dilation; pixels outside the image count as 0.
pub fn dilate(mask: &Mask, e: DiskElement) -> Mask {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let p = row_prefix(mask);
    let spans = e.spans();
    Mask::from_fn(mask.height, mask.width, |y, x| {
        spans.iter().any(|&(dy, hw)| {
            let yy = y as isize + dy;
            if yy < 0 || yy >= h {
                return false;
            }
            let a = (x as isize - hw as isize).max(0) as usize;
            let b = (x as isize + hw as isize).min(w - 1) as usize;
            let row = yy as usize * (mask.width + 1);
            p[row + b + 1] > p[row + a]
        })
    })
}

/// `(m ⊕ r1) ⊖ r2` evaluated on the unbounded plane (everything outside the
/// image is background) and restricted back to the image.
fn closing_unbounded(mask: &Mask, r1: usize, r2: usize) -> Mask {
    let pad = r1.max(r2);
    let (h, w) = (mask.height + 2 * pad, mask.width + 2 * pad);
    let canvas = Mask::from_fn(h, w, |y, x| {
        y >= pad && x >= pad && y < pad + mask.height && x < pad + mask.width && mask.get(y - pad, x - pad)
    });
    let closed = erode(&dilate(&canvas, DiskElement::new(r1)), DiskElement::new(r2));
    closed.crop(pad, pad, mask.height, mask.width)
}

/// Result of OTSU thresholding on 256 gray levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtsuThreshold {
    /// Highest level of the darker class.
    pub level: u8,
    /// Intensity boundary between `level` and `level + 1`.
    pub value: f32,
}

pub fn gray_level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// OTSU threshold over a 256-bin histogram of `gray` (values in `[0, 1]`).
/// Maximises between-class variance; ties go to the lowest level.
pub fn otsu_threshold(gray: &[f32]) -> Result<OtsuThreshold> {
    let mut hist = [0u64; 256];
    for &v in gray {
        hist[gray_level(v) as usize] += 1;
    }
    otsu_from_histogram(&hist)
}

pub fn otsu_from_histogram(hist: &[u64; 256]) -> Result<OtsuThreshold> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let total: u64 = hist.iter().sum();
    let sum_all: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    // Between-class variance up to the constant 1/N²:
    //   (N·S0 − n0·S)² / (n0·n1)
    // compared exactly as fractions in i128.
    let mut best: Option<(i128, i128, u8)> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for t in 0..255u8 {
        n0 += hist[t as usize];
        s0 += t as u64 * hist[t as usize];
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = total as i128 * s0 as i128 - n0 as i128 * sum_all as i128;
        let num = diff * diff;
        let den = n0 as i128 * n1 as i128;
        let better = match best {
            None => true,
            Some((bn, bd, _)) => greater_fraction(num, den, bn, bd),
        };
        if better {
            best = Some((num, den, t));
        }
    }
    let (_, _, level) = best.ok_or(Error::DegenerateHistogram)?;
    Ok(OtsuThreshold { level, value: (level as f32 + 0.5) / 255.0 })
}

/// `a/b > c/d` for positive denominators, exact when the products fit.
fn greater_fraction(a: i128, b: i128, c: i128, d: i128) -> bool {
    match (a.checked_mul(d), c.checked_mul(b)) {
        (Some(l), Some(r)) => l > r,
        _ => (a as f64 / b as f64) > (c as f64 / d as f64),
    }
}

/// OTSU vessel mask: the brighter class is labelled 1 (vessel lumen is white).
pub fn otsu_vessel(image: &Image) -> Result<Mask> {
    let gray = image.gray();
    let t = otsu_threshold(&gray)?;
    Ok(Mask::from_vec(
        image.height,
        image.width,
        gray.iter().map(|&v| (gray_level(v) > t.level) as u8).collect(),
    )
    .expect("binary by construction"))
}

fn check_radii(r1: usize, r2: usize) -> Result<()> {
    if r1 <= r2 {
        return Err(Error::Config(format!("weak-label radii need r1 > r2, got r1={r1}, r2={r2}")));
    }
    Ok(())
}

/// Under-segmented vessel mask `(V ⊖ r1) ⊕ r2 ⊆ V`.
pub fn under_mask(vessel: &Mask, r1: usize, r2: usize) -> Result<Mask> {
    check_radii(r1, r2)?;
    Ok(dilate(&erode(vessel, DiskElement::new(r1)), DiskElement::new(r2)))
}

/// Over-segmented background mask `¬((V ⊕ r1) ⊖ r2)`, disjoint from `V`.
pub fn over_background(vessel: &Mask, r1: usize, r2: usize) -> Result<Mask> {
    check_radii(r1, r2)?;
    Ok(closing_unbounded(vessel, r1, r2).not())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeakKind {
    Over,
    Under,
}

impl WeakKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            WeakKind::Over => "over",
            WeakKind::Under => "under",
        }
    }
}

/// A patch paired with a weak mask. For `Under` the mask is a pure-vessel
/// mask; for `Over` it is a pure-background mask.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakPair {
    pub patch_id: String,
    pub mask: Mask,
    pub kind: WeakKind,
    pub radii: (usize, usize),
}

pub fn make_under(patch: &Patch, r1: usize, r2: usize) -> Result<WeakPair> {
    let v = otsu_vessel(&patch.image)?;
    Ok(WeakPair { patch_id: patch.id.clone(), mask: under_mask(&v, r1, r2)?, kind: WeakKind::Under, radii: (r1, r2) })
}

pub fn make_over(patch: &Patch, r1: usize, r2: usize) -> Result<WeakPair> {
    let v = otsu_vessel(&patch.image)?;
    Ok(WeakPair { patch_id: patch.id.clone(), mask: over_background(&v, r1, r2)?, kind: WeakKind::Over, radii: (r1, r2) })
}

/// Inclusive integer range for the weak-label radii.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadiusRange {
    pub lo: usize,
    pub hi: usize,
}

impl Default for RadiusRange {
    fn default() -> Self {
        Self { lo: 5, hi: 30 }
    }
}

impl RadiusRange {
    pub fn validate(&self) -> Result<()> {
        if self.lo < 1 || self.hi <= self.lo {
            return Err(Error::Config(format!(
                "radius range [{}, {}] cannot produce r1 > r2 >= 1",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Draws `(r1, r2)` uniformly from the range with `r1 > r2`.
pub fn sample_radii<R: Rng + ?Sized>(rng: &mut R, range: RadiusRange) -> Result<(usize, usize)> {
    range.validate()?;
    loop {
        let a = rng.gen_range(range.lo..=range.hi);
        let b = rng.gen_range(range.lo..=range.hi);
        if a != b {
            return Ok((a.max(b), a.min(b)));
        }
    }
}

/// Ring of half-width `r3` around the boundary of a (soft, thresholded at 0.5) mask.
pub fn edge_weight_map(mask: &Mask, r3: usize) -> Mask {
    let e = DiskElement::new(r3);
    dilate(mask, e).minus(&erode(mask, e))
}

pub fn edge_weight_map_soft(height: usize, width: usize, soft: &[f32], r3: usize) -> Mask {
    edge_weight_map(&Mask::binarize(height, width, soft), r3)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakConfig {
    /// Number of over-segmented pairs to draw.
    pub over: usize,
    /// Number of under-segmented pairs to draw.
    pub under: usize,
    pub radii: RadiusRange,
    /// Drop pairs whose mask came out empty (e.g. erosion removed a thin vessel).
    pub skip_empty: bool,
}

impl Default for WeakConfig {
    fn default() -> Self {
        Self { over: 500, under: 500, radii: RadiusRange::default(), skip_empty: true }
    }
}

#[derive(Clone, Debug, Default)]
pub struct WeakSets {
    pub over: Vec<WeakPair>,
    pub under: Vec<WeakPair>,
    /// Patch ids rejected for a degenerate histogram.
    pub degenerate: Vec<String>,
    /// Pairs dropped because the mask came out empty.
    pub empty: usize,
}

/// Draws the over- and under-segmented sets from `pool`.
///
/// Patches are visited in a seeded random order (cycling when more pairs are
/// requested than patches exist). Degenerate patches are recorded, never
/// silently dropped.
pub fn build_weak_sets(pool: &[&Patch], cfg: &WeakConfig, seed: u64) -> Result<WeakSets> {
    cfg.radii.validate()?;
    let mut out = WeakSets::default();
    if pool.is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for kind in [WeakKind::Over, WeakKind::Under] {
        let want = if kind == WeakKind::Over { cfg.over } else { cfg.under };
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let mut made = Vec::with_capacity(want);
        let mut attempts = 0usize;
        let max_attempts = want.saturating_mul(4).max(pool.len());
        while made.len() < want && attempts < max_attempts {
            let patch = pool[order[attempts % order.len()]];
            attempts += 1;
            let (r1, r2) = sample_radii(&mut rng, cfg.radii)?;
            let pair = match kind {
                WeakKind::Over => make_over(patch, r1, r2),
                WeakKind::Under => make_under(patch, r1, r2),
            };
            match pair {
                Ok(p) if cfg.skip_empty && p.mask.is_empty() => out.empty += 1,
                Ok(p) => made.push(p),
                Err(Error::DegenerateHistogram) => {
                    warn!("skipping {}: degenerate histogram", patch.id);
                    if !out.degenerate.contains(&patch.id) {
                        out.degenerate.push(patch.id.clone());
                    }
                }
                Err(e) => return Err(e),
            }
        }
        if made.len() < want {
            warn!("{} set: produced {} of {} requested pairs", kind.as_str(), made.len(), want);
        }
        match kind {
            WeakKind::Over => out.over = made,
            WeakKind::Under => out.under = made,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Per-pixel neighbourhood scan, independent of the span/prefix-sum route.
    fn brute(mask: &Mask, r: usize, erosion: bool) -> Mask {
        let e = DiskElement::new(r);
        let ri = r as isize;
        Mask::from_fn(mask.height, mask.width, |y, x| {
            let mut all = true;
            let mut any = false;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if !e.contains(dy, dx) {
                        continue;
                    }
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    let inside = yy >= 0 && xx >= 0 && yy < mask.height as isize && xx < mask.width as isize;
                    let v = inside && mask.get(yy as usize, xx as usize);
                    all &= v;
                    any |= v;
                }
            }
            if erosion {
                all
            } else {
                any
            }
        })
    }

    fn disk_mask(n: usize, cy: f64, cx: f64, r: f64) -> Mask {
        Mask::from_fn(n, n, |y, x| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            dy * dy + dx * dx <= r * r
        })
    }

    fn sym_diff(a: &Mask, b: &Mask) -> usize {
        a.minus(b).count() + b.minus(a).count()
    }

    #[test]
    fn element_membership() {
        let e = DiskElement::new(2);
        assert!(e.contains(0, 0) && e.contains(2, 0) && e.contains(1, 1));
        assert!(!e.contains(2, 1));
        for dy in -3..=3 {
            for dx in -3..=3 {
                assert_eq!(e.contains(dy, dx), e.contains(-dy, -dx));
            }
        }
    }

    #[test]
    fn erode_block_radius_one() {
        let m = Mask::from_fn(9, 9, |y, x| (2..7).contains(&y) && (2..7).contains(&x));
        let e = erode(&m, DiskElement::new(1));
        assert_eq!(e, Mask::from_fn(9, 9, |y, x| (3..6).contains(&y) && (3..6).contains(&x)));
        assert_eq!(e, brute(&m, 1, true));
    }

    #[test]
    fn dilate_single_pixel_is_cross() {
        let m = Mask::from_fn(5, 5, |y, x| y == 2 && x == 2);
        let d = dilate(&m, DiskElement::new(1));
        assert_eq!(d.count(), 5);
        for (y, x) in [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)] {
            assert!(d.get(y, x));
        }
    }

    #[test]
    fn radius_zero_is_identity() {
        let m = Mask::from_fn(7, 6, |y, x| (y * 3 + x) % 4 == 0);
        assert_eq!(erode(&m, DiskElement::new(0)), m);
        assert_eq!(dilate(&m, DiskElement::new(0)), m);
    }

    #[test]
    fn otsu_two_spikes() {
        let mut hist = [0u64; 256];
        hist[0] = 4;
        hist[255] = 4;
        let t = otsu_from_histogram(&hist).unwrap();
        // Brute force: every split between the spikes is optimal; the lowest wins.
        assert_eq!(t.level, 0);
        assert!(t.value > 0.0 && t.value < 1.0);
    }

    #[test]
    fn otsu_two_flat_halves() {
        let gray: Vec<f32> = (0..64).map(|i| if i < 32 { 0.2 } else { 0.8 }).collect();
        let t = otsu_threshold(&gray).unwrap();
        assert!(t.value > 0.2 && t.value < 0.8, "{t:?}");
    }

    /// Between-class variance recomputed in floating point over all splits.
    #[test]
    fn otsu_matches_brute_force() {
        let mut state = 12345u64;
        for _ in 0..50 {
            let mut hist = [0u64; 256];
            for _ in 0..300 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                let bump = ((state >> 33) % 3) as usize;
                let lvl = if (state >> 20) % 2 == 0 { 40 + ((state >> 40) % 50) as usize } else { 150 + ((state >> 40) % 80) as usize };
                hist[(lvl + bump).min(255)] += 1;
            }
            let total: f64 = hist.iter().sum::<u64>() as f64;
            let mut best = (f64::NEG_INFINITY, 0usize);
            for t in 0..255 {
                let (mut w0, mut m0, mut w1, mut m1) = (0.0, 0.0, 0.0, 0.0);
                for (i, &c) in hist.iter().enumerate() {
                    if i <= t {
                        w0 += c as f64;
                        m0 += (i as f64) * c as f64;
                    } else {
                        w1 += c as f64;
                        m1 += (i as f64) * c as f64;
                    }
                }
                if w0 == 0.0 || w1 == 0.0 {
                    continue;
                }
                let var = (w0 / total) * (w1 / total) * (m0 / w0 - m1 / w1).powi(2);
                if var > best.0 * (1.0 + 1e-12) {
                    best = (var, t);
                }
            }
            assert_eq!(otsu_from_histogram(&hist).unwrap().level as usize, best.1);
        }
    }

    #[test]
    fn otsu_constant_is_degenerate() {
        assert!(matches!(otsu_threshold(&[0.5; 100]), Err(Error::DegenerateHistogram)));
        let img = Image::filled(8, 8, [0.4, 0.4, 0.4]);
        assert!(matches!(otsu_vessel(&img), Err(Error::DegenerateHistogram)));
    }

    #[test]
    fn otsu_vessel_polarity() {
        let mut img = Image::filled(32, 32, [0.8, 0.5, 0.6]);
        let disk = disk_mask(32, 15.5, 15.5, 8.0);
        for y in 0..32 {
            for x in 0..32 {
                if disk.get(y, x) {
                    for c in 0..3 {
                        img.set(c, y, x, 0.95);
                    }
                }
            }
        }
        let v = otsu_vessel(&img).unwrap();
        assert_eq!(v, disk);
        assert_eq!(otsu_vessel(&img.inverted()).unwrap(), disk.not());
    }

    #[test]
    fn under_of_disk_radius_ten() {
        let v = disk_mask(41, 20.0, 20.0, 10.0);
        let u = under_mask(&v, 1, 0).unwrap();
        assert_eq!(u, brute(&v, 1, true));
        assert!(u.is_subset_of(&v));
        // Within a one-pixel rim of the radius-9 disk.
        assert!(sym_diff(&u, &disk_mask(41, 20.0, 20.0, 9.0)) <= 16, "{}", sym_diff(&u, &disk_mask(41, 20.0, 20.0, 9.0)));
    }

    #[test]
    fn over_of_disk_radius_ten() {
        let v = disk_mask(61, 30.0, 30.0, 10.0);
        let b = over_background(&v, 3, 1).unwrap();
        let oracle = brute(&brute(&v, 3, false), 1, true).not();
        assert_eq!(b, oracle);
        assert!(b.is_disjoint(&v));
        let approx = disk_mask(61, 30.0, 30.0, 12.0).not();
        assert!(sym_diff(&b, &approx) <= 24, "{}", sym_diff(&b, &approx));
    }

    #[test]
    fn thin_line_vanishes_under_erosion() {
        let v = Mask::from_fn(20, 20, |y, _| y == 10);
        assert!(under_mask(&v, 2, 1).unwrap().is_empty());
    }

    #[test]
    fn full_vessel_gives_empty_background() {
        let v = Mask::ones(16, 16);
        assert!(over_background(&v, 3, 1).unwrap().is_empty());
    }

    #[test]
    fn radii_preconditions() {
        let v = Mask::ones(4, 4);
        assert!(under_mask(&v, 0, 0).is_err());
        assert!(over_background(&v, 1, 2).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_radii(&mut rng, RadiusRange { lo: 2, hi: 2 }).is_err());
        assert!(sample_radii(&mut rng, RadiusRange { lo: 0, hi: 3 }).is_err());
        for _ in 0..1000 {
            let (r1, r2) = sample_radii(&mut rng, RadiusRange { lo: 5, hi: 30 }).unwrap();
            assert!(5 <= r2 && r2 < r1 && r1 <= 30);
        }
        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| sample_radii(&mut r, RadiusRange::default()).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| sample_radii(&mut r, RadiusRange::default()).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn edge_weight_annulus() {
        let n = 96;
        let m = disk_mask(n, 47.5, 47.5, 20.0);
        let w = edge_weight_map(&m, 15);
        let oracle = brute(&m, 15, false).minus(&brute(&m, 15, true));
        assert_eq!(w, oracle);
        let annulus = disk_mask(n, 47.5, 47.5, 35.0).minus(&disk_mask(n, 47.5, 47.5, 5.0));
        assert!(w.iou(&annulus) > 0.95, "{}", w.iou(&annulus));
    }

    #[test]
    fn edge_weight_trivial_masks() {
        assert!(edge_weight_map(&Mask::zeros(10, 10), 3).is_empty());
        let w = edge_weight_map(&Mask::ones(12, 12), 3);
        assert_eq!(w, Mask::from_fn(12, 12, |y, x| y < 3 || x < 3 || y >= 9 || x >= 9));
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (4usize..20, 4usize..20).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..=1, h * w).prop_map(move |d| Mask::from_vec(h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(m in arb_mask(), r in 0usize..4) {
            prop_assert_eq!(erode(&m, DiskElement::new(r)), brute(&m, r, true));
            prop_assert_eq!(dilate(&m, DiskElement::new(r)), brute(&m, r, false));
        }

        #[test]
        fn extensivity_and_duality(m in arb_mask(), r in 0usize..4) {
            let e = DiskElement::new(r);
            let er = erode(&m, e);
            let di = dilate(&m, e);
            prop_assert!(er.is_subset_of(&m));
            prop_assert!(m.is_subset_of(&di));
            // ¬m padded with ones: dilate on a canvas whose border ring is set.
            let pad = r;
            let canvas = Mask::from_fn(m.height + 2 * pad, m.width + 2 * pad, |y, x| {
                y < pad || x < pad || y >= pad + m.height || x >= pad + m.width || !m.get(y - pad, x - pad)
            });
            let dual = dilate(&canvas, e).crop(pad, pad, m.height, m.width).not();
            prop_assert_eq!(er, dual);
        }

        #[test]
        fn monotone_in_radius(m in arb_mask(), r in 0usize..3) {
            let (a, b) = (DiskElement::new(r), DiskElement::new(r + 1));
            prop_assert!(erode(&m, b).is_subset_of(&erode(&m, a)));
            prop_assert!(dilate(&m, a).is_subset_of(&dilate(&m, b)));
        }

        #[test]
        fn purity_theorems(m in arb_mask(), r2 in 0usize..3, gap in 1usize..3) {
            let r1 = r2 + gap;
            prop_assert!(under_mask(&m, r1, r2).unwrap().is_subset_of(&m));
            prop_assert!(over_background(&m, r1, r2).unwrap().is_disjoint(&m));
        }
    }
}
