use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::{info, warn};
use serde_json::{json, Value};
use vesselseg::config::ExperimentConfig;
use vesselseg::metrics::render_table;
use vesselseg::persist::{load_corpus, save_corpus, save_mask_png, save_weak, write_json};
use vesselseg::raster::{Image, Mask};
use vesselseg::synthgen::{make_corpus, Corpus, Patch, Split};
use vesselseg::trainer::{
    evaluate, evaluate_patches, load_checkpoint, read_history, train_in_dir, Checkpoint, EvalReport, HistoryRecord, ModelKind,
    OraclePredictor, Predictor, RunDir, SegPredictor,
};
use vesselseg::weaklabel::{otsu_vessel, WeakKind};
use vesselseg::{Error, Result};

use crate::manifest::{dir_digest, prepare_dir, RunManifest};
use crate::plot::{Canvas, PALETTE};
use crate::{Common, Target};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.into(), source: e }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()?).map_err(io(&p))
}

fn split_counts(c: &Corpus) -> Value {
    let mvi = |idx: &[usize]| idx.iter().filter(|&&i| c.patches[i].is_mvi).count();
    json!({
        "labeled": c.labeled.len(),
        "unlabeled": c.unlabeled.len(),
        "val": c.val.len(),
        "test": c.test.len(),
        "backgrounds": c.backgrounds.len(),
        "mvi": { "val": mvi(&c.val), "test": mvi(&c.test) },
    })
}

pub fn gen_data(common: &Common) -> Result<Value> {
    let cfg = common.experiment()?;
    let dir = common.corpus_dir(&common.out);
    prepare_dir(&dir, common.force)?;
    let corpus = make_corpus(&cfg.data)?;
    save_corpus(&dir, &corpus)?;
    write_config(&dir, &cfg)?;
    let manifest = RunManifest::new("corpus", "corpus", cfg.hash(), dir_digest(&dir)?, cfg.seed);
    manifest.save(&dir)?;
    info!("corpus written to {}", dir.display());
    Ok(json!({ "corpus": dir, "k": corpus.labeled.len(), "patches": split_counts(&corpus) }))
}

/// Checks every weak mask against the OTSU vessel mask of its patch.
fn containment_violations(corpus: &Corpus) -> Result<usize> {
    let by_id: std::collections::HashMap<&str, &Patch> = corpus.patches.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut bad = 0;
    for pair in corpus.over.iter().chain(&corpus.under) {
        let patch = by_id.get(pair.patch_id.as_str()).ok_or_else(|| Error::Data(format!("weak pair for unknown patch {}", pair.patch_id)))?;
        let vessel = otsu_vessel(&patch.image)?;
        let ok = match pair.kind {
            WeakKind::Under => pair.mask.is_subset_of(&vessel),
            WeakKind::Over => pair.mask.is_disjoint(&vessel),
        };
        if !ok {
            warn!("{} pair of {} violates containment", pair.kind.as_str(), pair.patch_id);
            bad += 1;
        }
    }
    Ok(bad)
}

pub fn weak_labels(common: &Common, dir: &Path) -> Result<Value> {
    let cfg = common.experiment()?;
    let mut corpus = load_corpus(dir)?;
    if dir.join("weak.json").exists() {
        if !common.force {
            return Err(Error::Data(format!("{} already has weak labels (use --force to redraw)", dir.display())));
        }
        for sub in ["over", "under"] {
            let p = dir.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).map_err(io(&p))?;
            }
        }
    }
    let sets = corpus.fill_weak(&cfg.weak)?;
    let violations = containment_violations(&corpus)?;
    if violations > 0 {
        return Err(Error::Data(format!("{violations} weak masks violate containment")));
    }
    save_weak(dir, &corpus.over, &corpus.under)?;
    let summary = json!({
        "over": corpus.over.len(),
        "under": corpus.under.len(),
        "radii": cfg.weak.radii,
        "empty_dropped": sets.empty,
        "degenerate": sets.degenerate,
        "containment_violations": violations,
    });
    write_json(&dir.join("weak-report.json"), &summary)?;
    let mut manifest = RunManifest::load(dir)?.unwrap_or_else(|| RunManifest::new("corpus", "corpus", String::new(), String::new(), cfg.seed));
    manifest.touch();
    manifest.corpus_hash = dir_digest(dir)?;
    manifest.save(dir)?;
    Ok(summary)
}

fn run_name(cfg: &ExperimentConfig) -> String {
    let k = cfg.train.k.map_or("all".to_string(), |k| k.to_string());
    format!("{}-k{}-seed{}", cfg.train.ablation.label(), k, cfg.seed)
}

pub fn train(common: &Common, corpus_dir: &Path, resume: bool) -> Result<Value> {
    let cfg = common.experiment()?;
    let corpus = load_corpus(corpus_dir)?;
    let corpus_hash = dir_digest(corpus_dir)?;
    let dir = common.out.clone().unwrap_or_else(|| common.run_root.join(run_name(&cfg)));
    let run = RunDir::new(&dir);
    let manifest = match (resume, RunManifest::load(&dir)?) {
        (true, Some(mut m)) => {
            if m.corpus_hash != corpus_hash {
                return Err(Error::Data(format!("{} no longer matches the corpus this run was trained on", corpus_dir.display())));
            }
            // the trainer rejects configuration changes beyond run length
            m.config_hash = cfg.hash();
            m.touch();
            m
        }
        _ => {
            prepare_dir(&dir, common.force)?;
            write_config(&dir, &cfg)?;
            RunManifest::new(&run_name(&cfg), "run", cfg.hash(), corpus_hash, cfg.seed)
        }
    };
    manifest.save(&dir)?;
    let state = train_in_dir(&cfg.train, &corpus, &run, resume)?;
    let mut manifest = manifest;
    manifest.touch();
    manifest.save(&dir)?;
    Ok(json!({
        "run": dir,
        "steps": state.step,
        "best_step": state.best.as_ref().map(|b| b.step),
        "best_val_miou": state.best.as_ref().map(|b| b.val_miou),
    }))
}

fn load_target(target: &Target) -> Result<Checkpoint> {
    let path = match (&target.checkpoint, &target.run) {
        (Some(p), _) => p.clone(),
        (None, Some(r)) => RunDir::new(r).best(),
        (None, None) => return Err(Error::Config("pass --run or --checkpoint".into())),
    };
    load_checkpoint(&path)
}

fn with_predictor<R>(ck: &Checkpoint, f: impl FnOnce(&dyn Predictor) -> Result<R>) -> Result<R> {
    match ck.header.model {
        ModelKind::Oracle => f(&OraclePredictor),
        ModelKind::SegNet => f(&SegPredictor::new(&ck.seg_config, &ck.params)),
    }
}

fn output_dir(common: &Common, target: &Target) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| target.run.clone())
        .or_else(|| target.checkpoint.as_ref().and_then(|p| p.parent().map(Path::to_path_buf)))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn metric_table(report: &EvalReport) -> String {
    let mut rows = vec![("all", &report.all)];
    if let Some(m) = &report.mvi {
        rows.push(("mvi", m));
    }
    render_table(&rows)
}

pub fn eval(common: &Common, target: &Target, limit: Option<usize>) -> Result<Value> {
    let ck = load_target(target)?;
    let corpus = load_corpus(&common.corpus_dir(&target.corpus))?;
    let report = with_predictor(&ck, |p| evaluate(p, &corpus, target.split, limit))?;
    let out = output_dir(common, target);
    fs::create_dir_all(&out).map_err(io(&out))?;
    let name = format!("eval-{}", target.split.as_str());
    write_json(&out.join(format!("{name}.json")), &report)?;
    let table = metric_table(&report);
    let p = out.join(format!("{name}.txt"));
    fs::write(&p, &table).map_err(io(&p))?;
    eprint!("{table}");
    serde_json::to_value(&report).map_err(|e| Error::Data(e.to_string()))
}

fn split_patches(corpus: &Corpus, split: Split) -> Result<Vec<&Patch>> {
    let idx = corpus.split(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    Ok(idx.iter().map(|&i| &corpus.patches[i]).collect())
}

pub fn predict(common: &Common, target: &Target) -> Result<Value> {
    let ck = load_target(target)?;
    let corpus = load_corpus(&common.corpus_dir(&target.corpus))?;
    let patches = split_patches(&corpus, target.split)?;
    let out = common.out.clone().unwrap_or_else(|| output_dir(common, target).join(format!("pred-{}", target.split.as_str())));
    prepare_dir(&out, common.force)?;
    let masks = with_predictor(&ck, |p| p.predict_masks(&patches))?;
    for (patch, m) in patches.iter().zip(&masks) {
        save_mask_png(&out.join(format!("{}.png", patch.id)), m)?;
    }
    RunManifest::new("predictions", "predictions", ck.header.config_hash.clone(), String::new(), 0).save(&out)?;
    Ok(json!({ "dir": out, "split": target.split, "masks": masks.len() }))
}

fn tile_image(img: &Image) -> RgbImage {
    RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        Rgb(img.pixel(y as usize, x as usize).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn tile_mask(m: &Mask) -> RgbImage {
    RgbImage::from_fn(m.width as u32, m.height as u32, |x, y| if m.get(y as usize, x as usize) { Rgb([255; 3]) } else { Rgb([0; 3]) })
}

/// Green true positives, red false positives, blue misses.
fn tile_errors(pred: &Mask, gt: &Mask) -> RgbImage {
    RgbImage::from_fn(pred.width as u32, pred.height as u32, |x, y| {
        match (pred.get(y as usize, x as usize), gt.get(y as usize, x as usize)) {
            (true, true) => Rgb([40, 170, 60]),
            (true, false) => Rgb([220, 40, 40]),
            (false, true) => Rgb([40, 80, 220]),
            (false, false) => Rgb([20, 20, 20]),
        }
    })
}

const SERIES: [&str; 8] = ["L_dic", "L_sel", "L_adv_ovr", "L_adv_udr", "gp_b", "gp_v", "L_gen", "val_miou"];

fn series_value(r: &HistoryRecord, name: &str) -> Option<f64> {
    match name {
        "L_dic" => r.L_dic,
        "L_sel" => r.L_sel,
        "L_adv_ovr" => r.L_adv_ovr,
        "L_adv_udr" => r.L_adv_udr,
        "gp_b" => r.gp_b,
        "gp_v" => r.gp_v,
        "L_gen" => Some(r.L_gen),
        "val_miou" => r.val_miou,
        _ => None,
    }
}

/// One stacked panel per recorded series, each scaled to its own range.
fn draw_curves(history: &[HistoryRecord], path: &Path) -> Result<Vec<Value>> {
    let present: Vec<(&str, Vec<(f64, f64)>)> = SERIES
        .iter()
        .map(|&n| (n, history.iter().filter_map(|r| series_value(r, n).map(|v| (r.step as f64, v))).collect::<Vec<_>>()))
        .filter(|(_, pts)| !pts.is_empty())
        .collect();
    let (w, ph, pad) = (640i64, 90i64, 8i64);
    let h = pad + present.len().max(1) as i64 * (ph + pad);
    let mut canvas = Canvas::new(w as u32, h as u32, [255, 255, 255]);
    let xr = (history.first().map_or(0.0, |r| r.step as f64), history.last().map_or(1.0, |r| r.step as f64));
    let mut panels = Vec::new();
    for (i, (name, pts)) in present.iter().enumerate() {
        let y0 = pad + i as i64 * (ph + pad);
        let color = PALETTE[i % PALETTE.len()];
        canvas.series((pad, y0, w - 2 * pad, ph), pts, xr, color);
        let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
        panels.push(json!({ "series": name, "color": color, "min": lo, "max": hi, "points": pts.len() }));
    }
    canvas.img.save(path).map_err(|source| Error::Image { path: path.into(), source })?;
    Ok(panels)
}

pub fn report(common: &Common, target: &Target, rows: usize) -> Result<Value> {
    let ck = load_target(target)?;
    let corpus = load_corpus(&common.corpus_dir(&target.corpus))?;
    let out = output_dir(common, target);
    fs::create_dir_all(&out).map_err(io(&out))?;

    let curves = match &target.run {
        Some(r) if RunDir::new(r).history().exists() => {
            let history = read_history(&RunDir::new(r).history())?;
            Some(json!({ "file": "curves.png", "panels": draw_curves(&history, &out.join("curves.png"))? }))
        }
        _ => None,
    };

    let patches = split_patches(&corpus, target.split)?;
    let report = with_predictor(&ck, |p| evaluate_patches(p, &patches, target.split, Default::default()))?;
    let mut chosen: Vec<(&str, &Patch)> = patches.iter().take(rows).map(|&p| ("all", p)).collect();
    chosen.extend(patches.iter().filter(|p| p.is_mvi).take(rows).map(|&p| ("mvi", p)));
    let refs: Vec<&Patch> = chosen.iter().map(|c| c.1).collect();
    let masks = with_predictor(&ck, |p| p.predict_masks(&refs))?;

    let size = corpus.patch_size() as i64;
    let (gap, stripe) = (4i64, 6i64);
    let w = stripe + gap + 4 * (size + gap);
    let h = gap + chosen.len() as i64 * (size + gap);
    let mut canvas = Canvas::new(w as u32, h.max(1) as u32, [255, 255, 255]);
    let mut grid_rows = Vec::new();
    for (r, ((group, patch), pred)) in chosen.iter().zip(&masks).enumerate() {
        let y = gap + r as i64 * (size + gap);
        canvas.rect(0, y, stripe, size, if *group == "mvi" { [200, 30, 30] } else { [110, 110, 110] });
        let gt = patch.gt_mask.as_ref().ok_or_else(|| Error::Data(format!("patch {} has no ground truth", patch.id)))?;
        let tiles = [tile_image(&patch.image), tile_mask(gt), tile_mask(pred), tile_errors(pred, gt)];
        for (c, t) in tiles.iter().enumerate() {
            canvas.blit(stripe + gap + c as i64 * (size + gap), y, t);
        }
        grid_rows.push(json!({ "group": group, "id": patch.id }));
    }
    let grid = out.join("grid.png");
    canvas.img.save(&grid).map_err(|source| Error::Image { path: grid.clone(), source })?;

    let table = metric_table(&report);
    let p = out.join("report.txt");
    fs::write(&p, &table).map_err(io(&p))?;
    eprint!("{table}");
    let summary = json!({
        "curves": curves,
        "grid": { "file": "grid.png", "columns": ["image", "ground_truth", "prediction", "errors"], "rows": grid_rows },
        "metrics": report,
    });
    write_json(&out.join("report.json"), &summary)?;
    Ok(summary)
}
