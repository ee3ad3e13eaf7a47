use serde::{Deserialize, Serialize};
use vesselseg_autograd::Tensor;

use crate::error::{Error, Result};
use crate::metrics::{aggregate, Aggregation, ConfusionMatrix, MetricsReport};
use crate::nets::SegNetConfig;
use crate::raster::Mask;
use crate::synthgen::{Corpus, Patch, Split};

/// Anything that turns patches into binary vessel masks.
pub trait Predictor {
    fn predict_masks(&self, patches: &[&Patch]) -> Result<Vec<Mask>>;
}

pub struct SegPredictor<'a> {
    pub config: &'a SegNetConfig,
    pub params: &'a [Tensor<f32>],
    pub batch: usize,
}

impl<'a> SegPredictor<'a> {
    pub fn new(config: &'a SegNetConfig, params: &'a [Tensor<f32>]) -> Self {
        Self { config, params, batch: 16 }
    }

    /// Soft vessel probabilities, one plane per patch.
    pub fn probabilities(&self, patches: &[&Patch]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(self.batch.max(1)) {
            let (h, w) = chunk[0].size();
            let mut data = Vec::with_capacity(chunk.len() * 3 * h * w);
            for p in chunk {
                if p.size() != (h, w) {
                    return Err(Error::Shape(format!("patch {} is {:?}, expected {:?}", p.id, p.size(), (h, w))));
                }
                data.extend_from_slice(p.image.data());
            }
            let y = self.config.predict(self.params, &Tensor::new([chunk.len(), 3, h, w], data))?;
            if !y.all_finite() {
                return Err(Error::NonFinite { context: "segmenter prediction".into() });
            }
            out.extend(y.data().chunks(h * w).map(|c| c.to_vec()));
        }
        Ok(out)
    }
}

impl Predictor for SegPredictor<'_> {
    fn predict_masks(&self, patches: &[&Patch]) -> Result<Vec<Mask>> {
        Ok(self
            .probabilities(patches)?
            .into_iter()
            .zip(patches)
            .map(|(p, patch)| Mask::binarize(patch.image.height, patch.image.width, &p))
            .collect())
    }
}

/// Returns each patch's ground truth.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict_masks(&self, patches: &[&Patch]) -> Result<Vec<Mask>> {
        patches
            .iter()
            .map(|p| p.gt_mask.clone().ok_or_else(|| Error::Data(format!("oracle: patch {} has no ground truth", p.id))))
            .collect()
    }
}

/// Metrics over a split, overall and on the patches containing clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub aggregation: Aggregation,
    pub patches: usize,
    pub mvi_patches: usize,
    pub all: MetricsReport,
    pub mvi: Option<MetricsReport>,
}

pub fn evaluate_patches(pred: &dyn Predictor, patches: &[&Patch], split: Split, how: Aggregation) -> Result<EvalReport> {
    if patches.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    let masks = pred.predict_masks(patches)?;
    let mut all = Vec::with_capacity(patches.len());
    let mut mvi = Vec::new();
    for (p, m) in patches.iter().zip(&masks) {
        let gt = p.gt_mask.as_ref().ok_or_else(|| Error::Data(format!("patch {} has no ground truth", p.id)))?;
        let cm = ConfusionMatrix::from_pair(m.data(), gt.data())?;
        all.push(cm);
        if p.is_mvi {
            mvi.push(cm);
        }
    }
    Ok(EvalReport {
        split,
        aggregation: how,
        patches: all.len(),
        mvi_patches: mvi.len(),
        all: aggregate(&all, how)?,
        mvi: if mvi.is_empty() { None } else { Some(aggregate(&mvi, how)?) },
    })
}

/// Dataset-level evaluation of a split (the labelled set for `Train`),
/// optionally on only its first `limit` patches.
pub fn evaluate(pred: &dyn Predictor, corpus: &Corpus, split: Split, limit: Option<usize>) -> Result<EvalReport> {
    let idx = corpus.split(split);
    let n = limit.map_or(idx.len(), |l| l.min(idx.len()));
    let patches: Vec<&Patch> = idx[..n].iter().map(|&i| &corpus.patches[i]).collect();
    evaluate_patches(pred, &patches, split, Aggregation::Dataset)
}
