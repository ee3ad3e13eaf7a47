//! Confusion-matrix segmentation metrics (PA, MPA, MIoU, FWIoU, Dice).

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel counts of a binary segmentation (1 = vessel).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Adds the per-pixel counts of one prediction/ground-truth pair.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let mut add = ConfusionMatrix::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (1, 1) => add.tp += 1,
                (1, 0) => add.fp += 1,
                (0, 1) => add.fn_ += 1,
                (0, 0) => add.tn += 1,
                _ => return Err(Error::Data(format!("non-binary value in metric input ({p}, {g})"))),
            }
        }
        *self += add;
        Ok(())
    }

    pub fn from_pair(pred: &[u8], gt: &[u8]) -> Result<Self> {
        let mut cm = Self::default();
        cm.accumulate(pred, gt)?;
        Ok(cm)
    }

    pub fn compute(&self) -> Result<MetricsReport> {
        MetricsReport::from_confusion(*self)
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Classes whose ratio had a zero denominator; each scores 1.0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroDenominator {
    pub vessel: bool,
    pub background: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pa: f64,
    pub mpa: f64,
    pub miou: f64,
    pub fwiou: f64,
    /// Foreground (vessel) Dice.
    pub dice: f64,
    pub iou_vessel: f64,
    pub iou_background: f64,
    pub confusion: ConfusionMatrix,
    pub zero_denominator: ZeroDenominator,
}

/// Exact fraction; each metric is rounded once, at the final division.
#[derive(Clone, Copy)]
struct Frac(u128, u128);

impl Frac {
    /// `num / den`, or `1/1` (recording the fallback) when `den` is zero.
    fn of(num: u64, den: u64, fallback: &mut bool) -> Self {
        if den == 0 {
            *fallback = true;
            Frac(1, 1)
        } else {
            Frac(num as u128, den as u128)
        }
    }

    /// `(a + b) / 2`.
    fn mean(a: Self, b: Self) -> Self {
        Frac(a.0 * b.1 + b.0 * a.1, 2 * a.1 * b.1)
    }

    fn value(self) -> f64 {
        if self.0 >> 53 == 0 && self.1 >> 53 == 0 {
            self.0 as f64 / self.1 as f64
        } else {
            let g = gcd(self.0, self.1);
            (self.0 / g) as f64 / (self.1 / g) as f64
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        let n = cm.total();
        if n == 0 {
            return Err(Error::Data("metrics over zero pixels".into()));
        }
        let ConfusionMatrix { tp, fp, fn_, tn } = cm;
        let mut zd = ZeroDenominator::default();
        let recall_v = Frac::of(tp, tp + fn_, &mut zd.vessel);
        let recall_b = Frac::of(tn, tn + fp, &mut zd.background);
        let iou_v = Frac::of(tp, tp + fp + fn_, &mut zd.vessel);
        let iou_b = Frac::of(tn, tn + fn_ + fp, &mut zd.background);
        let mut unused = false;
        let dice = Frac::of(2 * tp, 2 * tp + fp + fn_, &mut unused);
        // Σ freq_c · IoU_c over a common denominator.
        let fw = Frac(
            (tp + fn_) as u128 * iou_v.0 * iou_b.1 + (tn + fp) as u128 * iou_b.0 * iou_v.1,
            n as u128 * iou_v.1 * iou_b.1,
        );
        Ok(Self {
            pa: Frac((tp + tn) as u128, n as u128).value(),
            mpa: Frac::mean(recall_v, recall_b).value(),
            miou: Frac::mean(iou_v, iou_b).value(),
            fwiou: fw.value(),
            dice: dice.value(),
            iou_vessel: iou_v.value(),
            iou_background: iou_b.value(),
            confusion: cm,
            zero_denominator: zd,
        })
    }
}

/// How per-patch confusion matrices are combined over a split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// One confusion matrix over every pixel of the split.
    #[default]
    Dataset,
    /// Metrics per patch, then averaged.
    PerImage,
}

/// Combines per-patch matrices. `PerImage` averages each metric; the
/// returned confusion matrix is still the pixel total.
pub fn aggregate(per_patch: &[ConfusionMatrix], how: Aggregation) -> Result<MetricsReport> {
    if per_patch.is_empty() {
        return Err(Error::Data("no patches to aggregate".into()));
    }
    let total = per_patch.iter().fold(ConfusionMatrix::default(), |a, &b| a + b);
    match how {
        Aggregation::Dataset => total.compute(),
        Aggregation::PerImage => {
            let reports = per_patch.iter().map(|c| c.compute()).collect::<Result<Vec<_>>>()?;
            let k = reports.len() as f64;
            let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
            Ok(MetricsReport {
                pa: mean(|r| r.pa),
                mpa: mean(|r| r.mpa),
                miou: mean(|r| r.miou),
                fwiou: mean(|r| r.fwiou),
                dice: mean(|r| r.dice),
                iou_vessel: mean(|r| r.iou_vessel),
                iou_background: mean(|r| r.iou_background),
                confusion: total,
                zero_denominator: ZeroDenominator {
                    vessel: reports.iter().any(|r| r.zero_denominator.vessel),
                    background: reports.iter().any(|r| r.zero_denominator.background),
                },
            })
        }
    }
}

/// Aligned text table, one row per labelled report, values in percent.
pub fn render_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>7} {:>7} {:>7} {:>7} {:>7}", "subset", "PA", "MPA", "MIoU", "FWIoU", "Dice");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            name,
            100.0 * r.pa,
            100.0 * r.mpa,
            100.0 * r.miou,
            100.0 * r.fwiou,
            100.0 * r.dice
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_case() {
        let gt = [1, 1, 0, 0];
        let pred = [1, 0, 0, 0];
        let cm = ConfusionMatrix::from_pair(&pred, &gt).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 1, fp: 0, fn_: 1, tn: 2 });
        let r = cm.compute().unwrap();
        assert_eq!(r.pa, 0.75);
        assert_eq!(r.mpa, 0.75);
        assert_eq!(r.iou_vessel, 0.5);
        assert_eq!(r.iou_background, 2.0 / 3.0);
        assert_eq!(r.miou, 7.0 / 12.0);
        assert_eq!(r.fwiou, 7.0 / 12.0);
        assert_eq!(r.dice, 2.0 / 3.0);
    }

    #[test]
    fn perfect_and_inverted() {
        let gt = [1, 0, 1, 1, 0];
        let r = ConfusionMatrix::from_pair(&gt, &gt).unwrap().compute().unwrap();
        for v in [r.pa, r.mpa, r.miou, r.fwiou, r.dice] {
            assert_eq!(v, 1.0);
        }
        let inv: Vec<u8> = gt.iter().map(|v| 1 - v).collect();
        let cm = ConfusionMatrix::from_pair(&inv, &gt).unwrap();
        assert_eq!((cm.tp, cm.tn), (0, 0));
    }

    #[test]
    fn absent_class_scores_one() {
        let r = ConfusionMatrix::from_pair(&[0, 0], &[0, 0]).unwrap().compute().unwrap();
        assert!(r.zero_denominator.vessel);
        assert_eq!(r.iou_vessel, 1.0);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ConfusionMatrix::from_pair(&[0, 2], &[0, 1]).is_err());
        assert!(ConfusionMatrix::from_pair(&[0], &[0, 1]).is_err());
        assert!(ConfusionMatrix::default().compute().is_err());
    }

    #[test]
    fn per_image_aggregation_averages() {
        let a = ConfusionMatrix::from_pair(&[1, 1], &[1, 1]).unwrap();
        let b = ConfusionMatrix::from_pair(&[0, 0], &[1, 1]).unwrap();
        let r = aggregate(&[a, b], Aggregation::PerImage).unwrap();
        assert!((r.dice - 0.5).abs() < 1e-15);
        assert_eq!(r.confusion, a + b);
    }

    fn pairs() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (1usize..200).prop_flat_map(|n| (proptest::collection::vec(0u8..=1, n), proptest::collection::vec(0u8..=1, n)))
    }

    proptest! {
        #[test]
        fn dice_iou_identity((p, g) in pairs()) {
            let r = ConfusionMatrix::from_pair(&p, &g).unwrap().compute().unwrap();
            prop_assert!((r.dice - 2.0 * r.iou_vessel / (1.0 + r.iou_vessel)).abs() < 1e-12);
            prop_assert!(r.pa >= r.fwiou - 1e-12);
            prop_assert!(r.fwiou >= r.iou_vessel.min(r.iou_background) - 1e-12);
            prop_assert!(r.miou >= r.iou_vessel.min(r.iou_background) - 1e-12);
            prop_assert!(r.miou <= r.iou_vessel.max(r.iou_background) + 1e-12);
        }

        #[test]
        fn additive_and_permutation_invariant((p, g) in pairs(), split in 0usize..200, rot in 0usize..200) {
            let k = split % (p.len() + 1);
            let whole = ConfusionMatrix::from_pair(&p, &g).unwrap();
            let parts = ConfusionMatrix::from_pair(&p[..k], &g[..k]).unwrap() + ConfusionMatrix::from_pair(&p[k..], &g[k..]).unwrap();
            prop_assert_eq!(whole, parts);
            let r = rot % p.len();
            let (mut p2, mut g2) = (p.clone(), g.clone());
            p2.rotate_left(r);
            g2.rotate_left(r);
            prop_assert_eq!(ConfusionMatrix::from_pair(&p2, &g2).unwrap(), whole);
        }
    }
}
