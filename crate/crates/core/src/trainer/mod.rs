//! Alternating critic/generator training.
//!
//! Each outer step runs `n_critic` updates of the two critics (segmenter
//! frozen), then one segmenter update (critics frozen). Freezing is by
//! construction: frozen parameters enter the graph as constants.

mod adam;
mod checkpoint;
mod eval;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vesselseg_autograd::{Graph, Tensor};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{config_hash, load_checkpoint, read_header, save_checkpoint, Checkpoint, CheckpointHeader, ModelKind};
pub use eval::{evaluate, evaluate_patches, EvalReport, OraclePredictor, Predictor, SegPredictor};

use crate::error::{Error, Result};
use crate::losses::{self, sample_transform, GeneratorTerms, LossWeights, SelfSupConfig, TransformConfig};
use crate::nets::{bind, build_background_triplet, build_triplet, init_params, CriticConfig, SegNetConfig};
use crate::raster::Mask;
use crate::synthgen::{composite_background, derive_seed, Corpus, Patch, Split};
use crate::weaklabel::{RadiusRange, WeakPair};

/// Switches that remove one term each; they compose freely.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_self_sup: bool,
    /// Drop the over-segmentation (background) critic.
    pub no_os_d: bool,
    /// Drop the under-segmentation (vessel) critic.
    pub no_us_d: bool,
    pub no_discriminators: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 4] = ["no_self_sup", "no_os_d", "no_us_d", "no_discriminators"];

    pub fn set(&mut self, flag: &str) -> Result<()> {
        match flag {
            "no_self_sup" => self.no_self_sup = true,
            "no_os_d" => self.no_os_d = true,
            "no_us_d" => self.no_us_d = true,
            "no_discriminators" => self.no_discriminators = true,
            "none" => {}
            other => return Err(Error::Config(format!("unknown ablation `{other}` (expected one of {:?})", Self::FLAGS))),
        }
        Ok(())
    }

    pub fn use_over(&self) -> bool {
        !self.no_os_d && !self.no_discriminators
    }

    pub fn use_under(&self) -> bool {
        !self.no_us_d && !self.no_discriminators
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = Self::FLAGS
            .iter()
            .zip([self.no_self_sup, self.no_os_d, self.no_us_d, self.no_discriminators])
            .filter_map(|(n, b)| b.then_some(*n))
            .collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub n_critic: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lr_seg: f64,
    pub lr_critics: f64,
    /// Half-width of the self-supervision edge ring.
    pub r3: usize,
    /// Radii used to draw the weak-label sets (recorded with the run).
    pub radii: RadiusRange,
    pub transforms: TransformConfig,
    /// Normalise the self-supervision error by the weighted pixel count.
    pub self_sup_normalize: bool,
    pub max_steps: u64,
    pub val_every: u64,
    /// Stop after this many validations without improvement.
    pub patience: Option<u64>,
    /// Evaluate at most this many validation patches.
    pub val_limit: Option<usize>,
    pub seed: u64,
    pub ablation: Ablation,
    /// Labelled-patch budget; `None` uses every labelled patch in the corpus.
    pub k: Option<usize>,
    /// Probability of compositing a labelled sample onto a donor background.
    pub composite_prob: f64,
    pub seg: SegNetConfig,
    pub critic: CriticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            n_critic: 5,
            batch_size: 64,
            adam: AdamConfig::default(),
            lr_seg: 1e-4,
            lr_critics: 1e-4,
            r3: 15,
            radii: RadiusRange::default(),
            transforms: TransformConfig::default(),
            self_sup_normalize: true,
            max_steps: 5000,
            val_every: 200,
            patience: None,
            val_limit: None,
            seed: 0,
            ablation: Ablation::default(),
            k: None,
            composite_prob: 0.5,
            seg: SegNetConfig::default(),
            critic: CriticConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.radii.validate()?;
        self.seg.validate()?;
        self.critic.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be positive".into()));
        }
        for (n, v) in [("lr_seg", self.lr_seg), ("lr_critics", self.lr_critics)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{n} must be a non-negative number")));
            }
        }
        if !(0.0..=1.0).contains(&self.composite_prob) {
            return Err(Error::Config("composite_prob must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn self_sup(&self) -> SelfSupConfig {
        SelfSupConfig { r3: self.r3, normalize: self.self_sup_normalize, transforms: self.transforms.clone() }
    }

    fn terms(&self) -> GeneratorTerms {
        GeneratorTerms { dice: true, self_sup: !self.ablation.no_self_sup, over: self.ablation.use_over(), under: self.ablation.use_under() }
    }
}

/// Serde adapter for parameter lists.
pub(crate) mod stored {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use vesselseg_autograd::Tensor;

    #[derive(Serialize, Deserialize)]
    struct Stored {
        shape: [usize; 4],
        data: Vec<f32>,
    }

    pub fn serialize<S: Serializer>(ts: &[Tensor<f32>], s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Stored> = ts.iter().map(|t| Stored { shape: t.shape(), data: t.data().to_vec() }).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Tensor<f32>>, D::Error> {
        let v = Vec::<Stored>::deserialize(d)?;
        v.into_iter()
            .map(|s| {
                if s.shape.iter().product::<usize>() != s.data.len() {
                    return Err(serde::de::Error::custom(format!("tensor data does not fill shape {:?}", s.shape)));
                }
                Ok(Tensor::new(s.shape, s.data))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub step: u64,
    pub val_miou: f64,
    #[serde(with = "stored")]
    pub seg: Vec<Tensor<f32>>,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    #[serde(with = "stored")]
    pub seg: Vec<Tensor<f32>>,
    /// Background (over-segmentation) critic.
    #[serde(with = "stored")]
    pub critic_over: Vec<Tensor<f32>>,
    /// Vessel (under-segmentation) critic.
    #[serde(with = "stored")]
    pub critic_under: Vec<Tensor<f32>>,
    pub adam_seg: AdamState,
    pub adam_over: AdamState,
    pub adam_under: AdamState,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub best: Option<BestSnapshot>,
    pub stale_validations: u64,
}

impl RunState {
    pub fn new(cfg: &TrainConfig, patch_size: usize) -> Self {
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11));
        let seg = init_params(&cfg.seg.param_specs(), 2.0, &mut init);
        let cspecs = cfg.critic.param_specs(patch_size);
        let critic_over = init_params(&cspecs, 2.0, &mut init);
        let critic_under = init_params(&cspecs, 2.0, &mut init);
        Self {
            adam_seg: AdamState::new(&seg),
            adam_over: AdamState::new(&critic_over),
            adam_under: AdamState::new(&critic_under),
            seg,
            critic_over,
            critic_under,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 12)),
            best: None,
            stale_validations: 0,
        }
    }

    /// Best-validation parameters if any validation ran, else the current ones.
    pub fn best_params(&self) -> &[Tensor<f32>] {
        self.best.as_ref().map_or(&self.seg, |b| &b.seg)
    }
}

/// One line of `history.jsonl`.
#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    pub L_dic: Option<f64>,
    pub L_sel: Option<f64>,
    /// Background-critic loss, averaged over the step's critic updates.
    pub L_adv_ovr: Option<f64>,
    /// Vessel-critic loss, averaged over the step's critic updates.
    pub L_adv_udr: Option<f64>,
    pub gp_b: Option<f64>,
    pub gp_v: Option<f64>,
    /// Total generator objective.
    pub L_gen: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

struct WeakRef<'a> {
    patch: &'a Patch,
    mask: &'a Mask,
}

/// Corpus views used for sampling.
pub struct TrainData<'a> {
    unlabeled: Vec<&'a Patch>,
    labeled: Vec<&'a Patch>,
    over: Vec<WeakRef<'a>>,
    under: Vec<WeakRef<'a>>,
    backgrounds: &'a [Patch],
    corpus: &'a Corpus,
    size: usize,
}

fn resolve_weak<'a>(corpus: &'a Corpus, pairs: &'a [WeakPair], by_id: &HashMap<&str, usize>) -> Result<Vec<WeakRef<'a>>> {
    pairs
        .iter()
        .map(|p| {
            let i = by_id.get(p.patch_id.as_str()).ok_or_else(|| Error::Data(format!("weak pair refers to unknown patch {}", p.patch_id)))?;
            Ok(WeakRef { patch: &corpus.patches[*i], mask: &p.mask })
        })
        .collect()
}

impl<'a> TrainData<'a> {
    pub fn new(corpus: &'a Corpus, cfg: &TrainConfig) -> Result<Self> {
        let size = corpus.patch_size();
        let by_id: HashMap<&str, usize> = corpus.patches.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
        let labeled: Vec<&Patch> = corpus.labeled.iter().map(|&i| &corpus.patches[i]).collect();
        let mut unlabeled: Vec<&Patch> = corpus.unlabeled.iter().map(|&i| &corpus.patches[i]).collect();
        if unlabeled.is_empty() {
            unlabeled = labeled.clone();
        }
        if unlabeled.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        let over = if cfg.ablation.use_over() { resolve_weak(corpus, &corpus.over, &by_id)? } else { Vec::new() };
        let under = if cfg.ablation.use_under() { resolve_weak(corpus, &corpus.under, &by_id)? } else { Vec::new() };
        if cfg.ablation.use_over() && over.is_empty() {
            return Err(Error::Data("the over-segmented set is empty; run weak-label generation first".into()));
        }
        if cfg.ablation.use_under() && under.is_empty() {
            return Err(Error::Data("the under-segmented set is empty; run weak-label generation first".into()));
        }
        if labeled.is_empty() {
            info!("no labelled patches: training without the dice term");
        }
        cfg.seg.check_input([1, 3, size, size])?;
        Ok(Self { unlabeled, labeled, over, under, backgrounds: &corpus.backgrounds, corpus, size })
    }
}

fn image_batch(patches: &[&Patch]) -> Tensor<f32> {
    let (h, w) = patches[0].size();
    let mut data = Vec::with_capacity(patches.len() * 3 * h * w);
    for p in patches {
        data.extend_from_slice(p.image.data());
    }
    Tensor::new([patches.len(), 3, h, w], data)
}

fn mask_batch<'m>(masks: impl Iterator<Item = &'m Mask>) -> Tensor<f32> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut hw = (0, 0);
    for m in masks {
        data.extend(m.data().iter().map(|&b| b as f32));
        hw = (m.height, m.width);
        n += 1;
    }
    Tensor::new([n, 1, hw.0, hw.1], data)
}

fn finite(v: f64, context: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { context: context() })
    }
}

fn all_finite(ts: &[Tensor<f32>]) -> bool {
    ts.iter().all(|t| t.all_finite())
}

#[derive(Clone, Copy)]
enum Which {
    Over,
    Under,
}

/// Outputs of one critic update.
#[derive(Clone, Copy, Debug, Default)]
pub struct CriticStats {
    pub loss_over: Option<f64>,
    pub loss_under: Option<f64>,
    pub gp_over: Option<f64>,
    pub gp_under: Option<f64>,
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub state: RunState,
    data: TrainData<'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, corpus: &'a Corpus) -> Result<Self> {
        cfg.validate()?;
        let state = RunState::new(&cfg, corpus.patch_size());
        Self::resume(cfg, corpus, state)
    }

    pub fn resume(cfg: TrainConfig, corpus: &'a Corpus, state: RunState) -> Result<Self> {
        cfg.validate()?;
        let data = TrainData::new(corpus, &cfg)?;
        let cspecs = cfg.critic.param_specs(data.size);
        let shapes_ok = state.seg.iter().map(|t| t.shape()).eq(cfg.seg.param_specs().iter().map(|s| s.shape))
            && state.critic_over.iter().map(|t| t.shape()).eq(cspecs.iter().map(|s| s.shape))
            && state.critic_under.iter().map(|t| t.shape()).eq(cspecs.iter().map(|s| s.shape));
        if !shapes_ok {
            return Err(Error::Shape("run state does not match the configured networks".into()));
        }
        Ok(Self { cfg, state, data })
    }

    fn sample<'p, T>(rng: &mut ChaCha8Rng, pool: &'p [T], n: usize) -> Vec<&'p T> {
        (0..n).map(|_| &pool[rng.gen_range(0..pool.len())]).collect()
    }

    fn unlabeled_batch(&mut self) -> Tensor<f32> {
        let picks: Vec<&Patch> = Self::sample(&mut self.state.rng, &self.data.unlabeled, self.cfg.batch_size).into_iter().copied().collect();
        image_batch(&picks)
    }

    fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.cfg.seg.predict(&self.state.seg, x)
    }

    fn critic_update(&mut self, which: Which, fake_x: &Tensor<f32>, fake_m: &Tensor<f32>) -> Result<(f64, f64)> {
        let t = self.cfg.batch_size;
        let pool = match which {
            Which::Over => &self.data.over,
            Which::Under => &self.data.under,
        };
        let picks = Self::sample(&mut self.state.rng, pool, t);
        let real_x = image_batch(&picks.iter().map(|w| w.patch).collect::<Vec<_>>());
        let real_m = mask_batch(picks.iter().map(|w| w.mask));
        let eps: Vec<f64> = (0..t).map(|_| self.state.rng.gen_range(0.0..1.0)).collect();

        let g = Graph::<f32>::new();
        let (real, fake) = {
            let (rx, rm, fx, fm) = (g.constant(real_x), g.constant(real_m), g.constant(fake_x.clone()), g.constant(fake_m.clone()));
            match which {
                Which::Over => (build_triplet(rx, rm)?, build_background_triplet(fx, fm)?),
                Which::Under => (build_triplet(rx, rm)?, build_triplet(fx, fm)?),
            }
        };
        let params = match which {
            Which::Over => &self.state.critic_over,
            Which::Under => &self.state.critic_under,
        };
        let p = bind(&g, params, true);
        let ccfg = &self.cfg.critic;
        let critic = |v| ccfg.forward(&p, v);
        let cl = losses::critic_loss(&g, &critic, &real.value(), &fake.value(), &eps, self.cfg.weights.lambda)?;
        let name = match which {
            Which::Over => "background critic",
            Which::Under => "vessel critic",
        };
        let loss = finite(cl.loss.item() as f64, || format!("{name} loss at step {}", self.state.step))?;
        let grads = g.grad(cl.loss, &p);
        if !all_finite(&grads) {
            return Err(Error::NonFinite { context: format!("{name} gradient at step {}", self.state.step) });
        }
        let (params, adam) = match which {
            Which::Over => (&mut self.state.critic_over, &mut self.state.adam_over),
            Which::Under => (&mut self.state.critic_under, &mut self.state.adam_under),
        };
        adam.update(params, &grads, self.cfg.lr_critics, &self.cfg.adam);
        Ok((loss, cl.gp))
    }

    /// One update of each active critic on fresh batches; the segmenter is frozen.
    pub fn critic_step(&mut self) -> Result<CriticStats> {
        let mut stats = CriticStats::default();
        let (use_over, use_under) = (self.cfg.ablation.use_over(), self.cfg.ablation.use_under());
        if !use_over && !use_under {
            return Ok(stats);
        }
        let x = self.unlabeled_batch();
        let m = self.predict(&x)?;
        if use_over {
            let (l, gp) = self.critic_update(Which::Over, &x, &m)?;
            stats.loss_over = Some(l);
            stats.gp_over = Some(gp);
        }
        if use_under {
            let (l, gp) = self.critic_update(Which::Under, &x, &m)?;
            stats.loss_under = Some(l);
            stats.gp_under = Some(gp);
        }
        Ok(stats)
    }

    fn labeled_batch(&mut self) -> Result<Option<(Tensor<f32>, Tensor<f32>)>> {
        if self.data.labeled.is_empty() {
            return Ok(None);
        }
        let t = self.cfg.batch_size;
        let mut picks = Vec::with_capacity(t);
        for _ in 0..t {
            let p = self.data.labeled[self.state.rng.gen_range(0..self.data.labeled.len())];
            let composite = !self.data.backgrounds.is_empty() && self.state.rng.gen_bool(self.cfg.composite_prob);
            if composite {
                let donor = &self.data.backgrounds[self.state.rng.gen_range(0..self.data.backgrounds.len())];
                picks.push(composite_background(p, donor)?);
            } else {
                picks.push(p.clone());
            }
        }
        let refs: Vec<&Patch> = picks.iter().collect();
        let masks = picks.iter().map(|p| p.gt_mask.as_ref().expect("labelled patches carry ground truth"));
        Ok(Some((image_batch(&refs), mask_batch(masks))))
    }

    /// Runs one outer iteration and returns its history record.
    pub fn step(&mut self) -> Result<HistoryRecord> {
        let n = self.cfg.n_critic;
        let mut sums = [0.0f64; 4];
        let mut any = CriticStats::default();
        for _ in 0..n {
            let s = self.critic_step()?;
            for (acc, v) in sums.iter_mut().zip([s.loss_over, s.loss_under, s.gp_over, s.gp_under]) {
                *acc += v.unwrap_or(0.0);
            }
            any = s;
        }
        let avg = |present: Option<f64>, sum: f64| present.map(|_| sum / n as f64);
        let gen = self.generator_step()?;
        self.state.step += 1;
        Ok(HistoryRecord {
            step: self.state.step,
            L_dic: gen.dice,
            L_sel: gen.self_sup,
            L_adv_ovr: avg(any.loss_over, sums[0]),
            L_adv_udr: avg(any.loss_under, sums[1]),
            gp_b: avg(any.gp_over, sums[2]),
            gp_v: avg(any.gp_under, sums[3]),
            L_gen: gen.total,
            val_miou: None,
        })
    }

    /// One segmenter update; critics are frozen.
    pub fn generator_step(&mut self) -> Result<GenStats> {
        let labeled = self.labeled_batch()?;
        let xu = self.unlabeled_batch();
        let tcfg = self.cfg.transforms.clone();
        let transforms: Vec<_> = (0..self.cfg.batch_size).map(|_| sample_transform(&mut self.state.rng, &tcfg)).collect();

        let g = Graph::<f32>::new();
        let p = bind(&g, &self.state.seg, true);
        let po = bind(&g, &self.state.critic_over, false);
        let pu = bind(&g, &self.state.critic_under, false);
        let (scfg, ccfg) = (&self.cfg.seg, &self.cfg.critic);
        let seg = |v| scfg.forward(&p, v);
        let d_over = |v| ccfg.forward(&po, v);
        let d_under = |v| ccfg.forward(&pu, v);
        let labeled = labeled.map(|(x, m)| (g.constant(x), g.constant(m)));
        let loss = losses::generator_loss(
            &g,
            &seg,
            labeled,
            g.constant(xu),
            &transforms,
            self.cfg.ablation.use_over().then_some(&d_over as _),
            self.cfg.ablation.use_under().then_some(&d_under as _),
            &self.cfg.weights,
            &self.cfg.self_sup(),
            self.cfg.terms(),
        )?;
        let total = finite(loss.total.item() as f64, || format!("generator loss at step {}", self.state.step))?;
        if loss.total.is_tracked() {
            let grads = g.grad(loss.total, &p);
            if !all_finite(&grads) {
                return Err(Error::NonFinite { context: format!("segmenter gradient at step {}", self.state.step) });
            }
            self.state.adam_seg.update(&mut self.state.seg, &grads, self.cfg.lr_seg, &self.cfg.adam);
        }
        Ok(GenStats { total, dice: loss.dice, self_sup: loss.self_sup })
    }

    /// Validation MIoU with the current parameters.
    pub fn validate(&self) -> Result<f64> {
        let pred = SegPredictor::new(&self.cfg.seg, &self.state.seg);
        Ok(evaluate(&pred, self.data.corpus, Split::Val, self.cfg.val_limit)?.all.miou)
    }

    /// Validates, updates the best snapshot and reports whether patience ran out.
    fn validation_point(&mut self, rec: &mut HistoryRecord) -> Result<bool> {
        if self.data.corpus.val.is_empty() {
            return Ok(false);
        }
        let miou = self.validate()?;
        rec.val_miou = Some(miou);
        let improved = self.state.best.as_ref().is_none_or(|b| miou > b.val_miou);
        if improved {
            self.state.best = Some(BestSnapshot { step: self.state.step, val_miou: miou, seg: self.state.seg.clone() });
            self.state.stale_validations = 0;
        } else {
            self.state.stale_validations += 1;
        }
        info!("step {}: val MIoU {:.4}{}", self.state.step, miou, if improved { " (best)" } else { "" });
        Ok(self.cfg.patience.is_some_and(|p| self.state.stale_validations >= p))
    }

    /// Trains until `max_steps` or early stop, handing every record to `sink`.
    pub fn run(&mut self, sink: &mut dyn FnMut(&HistoryRecord, &RunState, bool) -> Result<()>) -> Result<()> {
        while self.state.step < self.cfg.max_steps {
            let before = self.state.clone();
            let mut rec = match self.step() {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => {
                    self.state = before;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let at_val = self.state.step % self.cfg.val_every == 0 || self.state.step == self.cfg.max_steps;
            let stop = if at_val { self.validation_point(&mut rec)? } else { false };
            sink(&rec, &self.state, at_val)?;
            if stop {
                info!("early stop at step {}", self.state.step);
                break;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GenStats {
    pub total: f64,
    pub dice: Option<f64>,
    pub self_sup: Option<f64>,
}

/// Applies the config's label budget to a corpus.
pub fn prepare_corpus(corpus: &Corpus, cfg: &TrainConfig) -> Result<Corpus> {
    match cfg.k {
        Some(k) if k != corpus.labeled.len() => corpus.with_label_budget(k),
        _ => Ok(corpus.clone()),
    }
}

/// Trains in memory and returns the final state and history.
pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<(RunState, Vec<HistoryRecord>)> {
    let corpus = prepare_corpus(corpus, cfg)?;
    let mut trainer = Trainer::new(cfg.clone(), &corpus)?;
    let mut history = Vec::new();
    trainer.run(&mut |rec, _, _| {
        history.push(rec.clone());
        Ok(())
    })?;
    Ok((trainer.state, history))
}

/// Paths inside a run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn history(&self) -> PathBuf {
        self.root.join("history.jsonl")
    }
    pub fn best(&self) -> PathBuf {
        self.root.join("ckpt-best")
    }
    pub fn last(&self) -> PathBuf {
        self.root.join("ckpt-last")
    }
    pub fn diverged(&self) -> PathBuf {
        self.root.join("ckpt-diverged")
    }
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|source| Error::Json { path: path.into(), source }))
        .collect()
}

/// Trains with artifacts in `dir`: history, best and last checkpoints.
/// With `resume`, continues from `ckpt-last`.
pub fn train_in_dir(cfg: &TrainConfig, corpus: &Corpus, dir: &RunDir, resume: bool) -> Result<RunState> {
    fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
    let corpus = prepare_corpus(corpus, cfg)?;
    let hash = config_hash(cfg)?;
    let mut trainer = if resume && dir.last().exists() {
        let ck = load_checkpoint(&dir.last())?;
        if ck.header.config_hash != hash {
            return Err(Error::Config(format!("{} was written with a different configuration", dir.last().display())));
        }
        let state = ck.state.ok_or_else(|| Error::Data("last checkpoint has no run state".into()))?;
        let kept: Vec<HistoryRecord> = if dir.history().exists() {
            read_history(&dir.history())?.into_iter().filter(|r| r.step <= state.step).collect()
        } else {
            Vec::new()
        };
        let mut text = String::new();
        for r in &kept {
            text += &serde_json::to_string(r).map_err(|source| Error::Json { path: dir.history(), source })?;
            text.push('\n');
        }
        fs::write(dir.history(), text).map_err(|e| Error::io(dir.history(), e))?;
        info!("resuming from step {}", state.step);
        Trainer::resume(cfg.clone(), &corpus, state)?
    } else {
        fs::write(dir.history(), "").map_err(|e| Error::io(dir.history(), e))?;
        Trainer::new(cfg.clone(), &corpus)?
    };
    let mut log = fs::OpenOptions::new().append(true).open(dir.history()).map_err(|e| Error::io(dir.history(), e))?;
    let mut last_best_step = trainer.state.best.as_ref().map(|b| b.step);
    let result = trainer.run(&mut |rec, state, at_val| {
        let line = serde_json::to_string(rec).map_err(|source| Error::Json { path: dir.history(), source })?;
        writeln!(log, "{line}").map_err(|e| Error::io(dir.history(), e))?;
        if at_val {
            save_checkpoint(&dir.last(), &cfg.seg, ModelKind::SegNet, state.step, &state.seg, Some(state), &hash)?;
            if let Some(b) = &state.best {
                if last_best_step != Some(b.step) {
                    save_checkpoint(&dir.best(), &cfg.seg, ModelKind::SegNet, b.step, &b.seg, None, &hash)?;
                    last_best_step = Some(b.step);
                }
            }
        }
        Ok(())
    });
    if let Err(e @ Error::NonFinite { .. }) = &result {
        warn!("{e}; writing diagnostic snapshot");
        save_checkpoint(&dir.diverged(), &cfg.seg, ModelKind::SegNet, trainer.state.step, &trainer.state.seg, Some(&trainer.state), &hash)?;
    }
    result?;
    let state = trainer.state;
    save_checkpoint(&dir.last(), &cfg.seg, ModelKind::SegNet, state.step, &state.seg, Some(&state), &hash)?;
    if state.best.is_none() {
        save_checkpoint(&dir.best(), &cfg.seg, ModelKind::SegNet, state.step, &state.seg, None, &hash)?;
    }
    Ok(state)
}
