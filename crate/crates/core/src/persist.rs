//! On-disk corpus layout.
//!
//! ```text
//! corpus.json            config, patch metadata, split indices
//! images/<id>.png        8-bit RGB patches
//! masks/<id>.png         ground truth (labelled, val and test patches only)
//! backgrounds/<id>.png   compositing donors
//! weak.json              weak-pair metadata
//! over/<n>-<id>.png      background masks of the over-segmented set
//! under/<n>-<id>.png     vessel masks of the under-segmented set
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};
use crate::synthgen::{Corpus, CorpusConfig, Patch, PatchOrigin, Split};
use crate::weaklabel::{WeakKind, WeakPair};

pub fn save_image_png(path: &Path, img: &Image) -> Result<()> {
    let mut out = RgbImage::new(img.width as u32, img.height as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let p = img.pixel(y as usize, x as usize);
        *px = Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn load_image_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::filled(h, w, [0.0; 3]);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
        }
    }
    Ok(img)
}

/// Masks are stored as 0/255 grayscale.
pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let out = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }]));
    out.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let g = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let data: Vec<u8> = g
        .pixels()
        .map(|p| match p.0[0] {
            0 => Ok(0),
            255 | 1 => Ok(1),
            v => Err(Error::Data(format!("{}: mask value {v} is not binary", path.display()))),
        })
        .collect::<Result<_>>()?;
    Mask::from_vec(h, w, data)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.into(), source })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct PatchMeta {
    id: String,
    split: Split,
    scale: usize,
    is_mvi: bool,
    origin: PatchOrigin,
    has_gt: bool,
}

impl PatchMeta {
    fn of(p: &Patch) -> Self {
        Self { id: p.id.clone(), split: p.split, scale: p.scale, is_mvi: p.is_mvi, origin: p.origin, has_gt: p.gt_mask.is_some() }
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    format: String,
    config: CorpusConfig,
    patches: Vec<PatchMeta>,
    backgrounds: Vec<PatchMeta>,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct WeakMeta {
    kind: WeakKind,
    patch_id: String,
    radii: (usize, usize),
    file: String,
}

const CORPUS_FORMAT: &str = "vesselseg-corpus/1";

/// Writes the patch corpus (not the weak sets) under `dir`.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    for sub in ["images", "masks", "backgrounds"] {
        mkdir(&dir.join(sub))?;
    }
    for p in &corpus.patches {
        save_image_png(&dir.join("images").join(format!("{}.png", p.id)), &p.image)?;
        if let Some(m) = &p.gt_mask {
            save_mask_png(&dir.join("masks").join(format!("{}.png", p.id)), m)?;
        }
    }
    for b in &corpus.backgrounds {
        save_image_png(&dir.join("backgrounds").join(format!("{}.png", b.id)), &b.image)?;
    }
    let meta = CorpusMeta {
        format: CORPUS_FORMAT.into(),
        config: corpus.config.clone(),
        patches: corpus.patches.iter().map(PatchMeta::of).collect(),
        backgrounds: corpus.backgrounds.iter().map(PatchMeta::of).collect(),
        labeled: corpus.labeled.clone(),
        unlabeled: corpus.unlabeled.clone(),
        val: corpus.val.clone(),
        test: corpus.test.clone(),
    };
    write_json(&dir.join("corpus.json"), &meta)
}

fn load_patch(dir: &Path, m: PatchMeta, image_dir: &str) -> Result<Patch> {
    let image = load_image_png(&dir.join(image_dir).join(format!("{}.png", m.id)))?;
    let gt_mask = if m.has_gt && image_dir == "images" {
        let mask = load_mask_png(&dir.join("masks").join(format!("{}.png", m.id)))?;
        if (mask.height, mask.width) != (image.height, image.width) {
            return Err(Error::Shape(format!("mask and image of {} differ in size", m.id)));
        }
        Some(mask)
    } else if m.has_gt {
        Some(Mask::zeros(image.height, image.width))
    } else {
        None
    };
    Ok(Patch { id: m.id, image, gt_mask, scale: m.scale, is_mvi: m.is_mvi, origin: m.origin, split: m.split })
}

/// Reads a corpus written by [`save_corpus`], including weak sets if present.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta_path = dir.join("corpus.json");
    if !meta_path.exists() {
        return Err(Error::Data(format!("{} is not a corpus directory (no corpus.json)", dir.display())));
    }
    let meta: CorpusMeta = read_json(&meta_path)?;
    if meta.format != CORPUS_FORMAT {
        return Err(Error::Data(format!("unsupported corpus format `{}`", meta.format)));
    }
    let n = meta.patches.len();
    if meta.labeled.iter().chain(&meta.unlabeled).chain(&meta.val).chain(&meta.test).any(|&i| i >= n) {
        return Err(Error::Data("split index out of range".into()));
    }
    let patches = meta.patches.into_iter().map(|m| load_patch(dir, m, "images")).collect::<Result<Vec<_>>>()?;
    let backgrounds = meta.backgrounds.into_iter().map(|m| load_patch(dir, m, "backgrounds")).collect::<Result<Vec<_>>>()?;
    let mut corpus = Corpus {
        patches,
        unlabeled: meta.unlabeled,
        labeled: meta.labeled,
        val: meta.val,
        test: meta.test,
        backgrounds,
        over: Vec::new(),
        under: Vec::new(),
        config: meta.config,
    };
    if dir.join("weak.json").exists() {
        let (over, under) = load_weak(dir)?;
        corpus.over = over;
        corpus.under = under;
    }
    Ok(corpus)
}

pub fn save_weak(dir: &Path, over: &[WeakPair], under: &[WeakPair]) -> Result<()> {
    let mut meta = Vec::new();
    for (sub, set) in [("over", over), ("under", under)] {
        let d = dir.join(sub);
        mkdir(&d)?;
        for (n, pair) in set.iter().enumerate() {
            let file = format!("{sub}/{n:05}-{}.png", pair.patch_id);
            save_mask_png(&dir.join(&file), &pair.mask)?;
            meta.push(WeakMeta { kind: pair.kind, patch_id: pair.patch_id.clone(), radii: pair.radii, file });
        }
    }
    write_json(&dir.join("weak.json"), &meta)
}

pub fn load_weak(dir: &Path) -> Result<(Vec<WeakPair>, Vec<WeakPair>)> {
    let meta: Vec<WeakMeta> = read_json(&dir.join("weak.json"))?;
    let (mut over, mut under) = (Vec::new(), Vec::new());
    for m in meta {
        let mask = load_mask_png(&dir.join(&m.file))?;
        let pair = WeakPair { patch_id: m.patch_id, mask, kind: m.kind, radii: m.radii };
        match m.kind {
            WeakKind::Over => over.push(pair),
            WeakKind::Under => under.push(pair),
        }
    }
    Ok((over, under))
}

/// `dir/<name>`, refusing to clobber an existing path unless `force`.
pub fn output_path(dir: &Path, name: &str, force: bool) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.exists() && !force {
        return Err(Error::Data(format!("{} already exists (use --force to overwrite)", p.display())));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{make_corpus, SlideSpec, SplitCounts};
    use crate::weaklabel::WeakConfig;

    #[test]
    fn corpus_round_trip_is_exact() {
        let cfg = CorpusConfig {
            slide: SlideSpec { width: 256, height: 256, vessel_count: 3, vessel_scale_range: (6.0, 16.0), ..SlideSpec::default() },
            slides: SplitCounts { train: 2, val: 1, test: 1 },
            scales: vec![32, 64],
            patch_size: 32,
            labeled: 3,
            ..CorpusConfig::default()
        };
        let mut c = make_corpus(&cfg).unwrap();
        c.fill_weak(&WeakConfig { over: 5, under: 5, radii: crate::weaklabel::RadiusRange { lo: 1, hi: 4 }, skip_empty: true }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &c).unwrap();
        save_weak(dir.path(), &c.over, &c.under).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.patches, c.patches);
        assert_eq!(back.backgrounds, c.backgrounds);
        assert_eq!((back.labeled, back.unlabeled, back.val, back.test), (c.labeled, c.unlabeled, c.val, c.test));
        assert_eq!(back.over, c.over);
        assert_eq!(back.under, c.under);
        assert_eq!(back.config, c.config);
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        GrayImage::from_fn(4, 4, |x, _| Luma([x as u8 * 60])).save(&p).unwrap();
        assert!(matches!(load_mask_png(&p), Err(Error::Data(_))));
    }
}
