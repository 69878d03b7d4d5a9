//! Directory-level pipeline stages: synth, tile, pretrain, embed, train-mil,
//! eval and heatmap. Every stage reads the previous stage's artifacts, writes
//! its own plus a `run.json` record, and is deterministic given its inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EvalSettings, RunConfig, SynthSettings, TileSettings};
use crate::dino::{pretrain, StepRecord};
use crate::error::{Error, Result};
use crate::eval::{accuracy, localization_hit_rate, render_overlay, roc_auc, roc_dat, z_filter, Heatmap};
use crate::io::{
    csv_bytes, list_embeddings, read_embeddings, read_json, read_labels, sha256_hex, write_bytes, write_embeddings,
    write_json, write_labels, Checkpoint, CorpusManifest, CorpusSlide, EmbeddingFile, EmbeddingSidecar, LabelRow,
    Split, TileEntry, TileManifest,
};
use crate::mil::{train_mil, Bag, BagPrediction, MilConfig, MilModel};
use crate::preprocess::{
    choose_planted_cells, filter_tiles, macenko_normalize, synth_slide, SlideImage, StainProfile, TileStatus,
};
use crate::rng::{mix_seed, seeded};
use crate::vit::{image_tensor, Vit, VitConfig};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));
pub const VIT_KIND: &str = "vit";
pub const MIL_KIND: &str = "mil";
pub const DECISION_THRESHOLD: f64 = 0.5;

#[cfg(feature = "parallel")]
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Provenance written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub timestamp_unix: u64,
}

impl RunRecord {
    pub fn new(command: &str, seed: Option<u64>, config_hash: String) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed,
            config_hash,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn write(mut self, out: &Path, outputs: Vec<String>) -> Result<()> {
        self.outputs = outputs;
        write_json(&out.join("run.json"), &self)
    }
}

/// Writes `n_slides` synthetic slides as PNGs plus `manifest.json` and
/// `labels.csv`. Positives and the held-out split are drawn per seed.
pub fn synth_corpus(settings: &SynthSettings, seed: u64, out: &Path) -> Result<CorpusManifest> {
    let n = settings.n_slides;
    if n == 0 {
        return Err(Error::Parameter("n_slides must be positive".into()));
    }
    let n_pos = (n as f64 * settings.positive_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, 10));
    let positive: BTreeSet<usize> = order[..n_pos].iter().copied().collect();

    // stratified hold-out
    let mut test = BTreeSet::new();
    let mut rng = seeded(seed, 11);
    for class in [true, false] {
        let mut members: Vec<usize> = (0..n).filter(|i| positive.contains(i) == class).collect();
        members.shuffle(&mut rng);
        let k = (members.len() as f64 * settings.test_fraction).round() as usize;
        test.extend(members.into_iter().take(k));
    }

    fs::create_dir_all(out)?;
    let grid = (settings.grid_rows, settings.grid_cols);
    let slides = par_map(&(0..n).collect::<Vec<_>>(), |&i| -> Result<CorpusSlide> {
        let slide_seed = mix_seed(seed, i as u64);
        let is_pos = positive.contains(&i);
        let planted = if is_pos {
            let count = seeded(slide_seed, 12).random_range(settings.planted_min..=settings.planted_max);
            choose_planted_cells(slide_seed, grid.0, grid.1, count)
        } else {
            BTreeSet::new()
        };
        let synth = synth_slide(slide_seed, grid, is_pos && !planted.is_empty(), &planted, &settings.slide)?;
        let slide_id = format!("slide_{i:04}");
        let file = format!("{slide_id}.png");
        synth.slide.pixels.save(out.join(&file))?;
        Ok(CorpusSlide {
            slide_id,
            file,
            label: synth.bag_label(),
            split: if test.contains(&i) { Split::Test } else { Split::Train },
            grid_rows: synth.grid_rows,
            grid_cols: synth.grid_cols,
            cell_size: synth.cell_size,
            instance_labels: synth.instance_labels,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let manifest = CorpusManifest { seed, slides };
    write_json(&out.join("manifest.json"), &manifest)?;
    let labels: Vec<LabelRow> = manifest
        .slides
        .iter()
        .map(|s| LabelRow {
            slide_id: s.slide_id.clone(),
            label: s.label,
            split: s.split,
        })
        .collect();
    write_labels(&out.join("labels.csv"), &labels)?;
    Ok(manifest)
}

/// Slides found in `dir`: the corpus manifest if present, otherwise every PNG.
fn discover_slides(dir: &Path) -> Result<Vec<(String, PathBuf, Option<CorpusSlide>)>> {
    let manifest = dir.join("manifest.json");
    if manifest.exists() {
        let corpus: CorpusManifest = read_json(&manifest)?;
        return Ok(corpus
            .slides
            .into_iter()
            .map(|s| (s.slide_id.clone(), dir.join(&s.file), Some(s)))
            .collect());
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            found.push((id, path, None));
        }
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    if found.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no slides in {}", dir.display()),
        )));
    }
    Ok(found)
}

fn tile_file(row: u32, col: u32) -> String {
    format!("r{row:03}_c{col:03}.png")
}

/// Tiles every slide in `slides_dir` into `out/<slide_id>/` with a manifest each.
/// Normalisation maps every tile onto the standard H&E profile, which is
/// written to `out/stain_reference.json`.
pub fn tile_corpus(slides_dir: &Path, settings: &TileSettings, out: &Path) -> Result<Vec<TileManifest>> {
    let slides = discover_slides(slides_dir)?;
    let reference = StainProfile::standard_he();
    fs::create_dir_all(out)?;
    if settings.normalize {
        write_json(&out.join("stain_reference.json"), &reference)?;
    }
    let mut manifests = Vec::with_capacity(slides.len());
    for (slide_id, path, corpus) in slides {
        let pixels = image::open(&path)?.to_rgb8();
        let slide = SlideImage {
            pixels,
            slide_id: slide_id.clone(),
            label: corpus.as_ref().map(|c| c.label),
        };
        let set = filter_tiles(&slide, settings.patch_size, settings.min_foreground)?;
        let dir = out.join(&slide_id);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        // instance labels only carry over when tiles coincide with cells
        let cell_labels = corpus
            .as_ref()
            .filter(|c| c.cell_size == settings.patch_size)
            .map(|c| (c.grid_cols, &c.instance_labels));
        let mut degenerate = 0usize;
        let entries = set
            .tiles
            .iter()
            .zip(&set.coords)
            .map(|(tile, &(r, c))| -> Result<TileEntry> {
                let img = if settings.normalize {
                    let n = macenko_normalize(tile, &reference, &settings.macenko);
                    degenerate += usize::from(n.degenerate);
                    n.image
                } else {
                    tile.clone()
                };
                let file = tile_file(r, c);
                img.save(dir.join(&file))?;
                Ok(TileEntry {
                    row: r,
                    col: c,
                    file,
                    instance_label: cell_labels.map(|(cols, l)| l[(r * cols + c) as usize]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if degenerate > 0 {
            log::info!("{slide_id}: {degenerate} tiles left unnormalised (no stable stain basis)");
        }
        if set.status == TileStatus::SlideTooSmall {
            log::warn!("{slide_id}: smaller than one patch, no tiles");
        }
        let manifest = TileManifest {
            slide_id,
            patch_size: set.patch_size,
            grid_rows: set.grid_rows,
            grid_cols: set.grid_cols,
            otsu_threshold: set.threshold,
            status: set.status,
            label: slide.label,
            normalized: settings.normalize,
            tiles: entries,
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

/// Tile manifests under `tiles_dir`, sorted by slide id.
pub fn read_tile_manifests(tiles_dir: &Path) -> Result<Vec<(PathBuf, TileManifest)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(tiles_dir)? {
        let dir = entry?.path();
        let m = dir.join("manifest.json");
        if dir.is_dir() && m.exists() {
            out.push((dir, read_json::<TileManifest>(&m)?));
        }
    }
    out.sort_by(|a, b| a.1.slide_id.cmp(&b.1.slide_id));
    if out.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no tile manifests under {}", tiles_dir.display()),
        )));
    }
    Ok(out)
}

fn load_tiles(dir: &Path, manifest: &TileManifest, size: u32) -> Result<Vec<RgbImage>> {
    manifest
        .tiles
        .iter()
        .map(|t| {
            let img = image::open(dir.join(&t.file))?.to_rgb8();
            Ok(if img.dimensions() == (size, size) {
                img
            } else {
                imageops::resize(&img, size, size, FilterType::Triangle)
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub trace: Vec<StepRecord>,
    pub n_tiles: usize,
    pub checkpoint: PathBuf,
}

/// Self-distillation over the tiles of the selected slides (all if `slides`
/// is `None`). Writes `teacher.ckpt`, `loss.csv` and `config.json`.
pub fn pretrain_stage(
    tiles_dir: &Path,
    cfg: &RunConfig,
    seed: u64,
    slides: Option<&BTreeSet<String>>,
    out: &Path,
) -> Result<PretrainSummary> {
    cfg.validate()?;
    let size = cfg.vit.image_size as u32;
    let mut tiles = Vec::new();
    for (dir, m) in read_tile_manifests(tiles_dir)? {
        if slides.is_none_or(|s| s.contains(&m.slide_id)) {
            tiles.extend(load_tiles(&dir, &m, size)?);
        }
    }
    fs::create_dir_all(out)?;
    let outcome = pretrain(&tiles, cfg.vit, cfg.dino, seed, |_| {})?;
    let ckpt = Checkpoint::new(VIT_KIND, &cfg.vit, outcome.state.teacher.vit.params().clone())?;
    let path = out.join("teacher.ckpt");
    ckpt.save(&path)?;
    write_bytes(&out.join("loss.csv"), &csv_bytes(&outcome.trace)?)?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(PretrainSummary {
        trace: outcome.trace,
        n_tiles: outcome.used_tiles.len(),
        checkpoint: path,
    })
}

/// Feature vectors for every tile of every slide, one embedding file per slide.
pub fn embed_stage(tiles_dir: &Path, checkpoint: &Path, k_last: usize, out: &Path) -> Result<usize> {
    let bytes = fs::read(checkpoint)?;
    let embedder_hash = sha256_hex(&bytes);
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    ckpt.expect_kind(VIT_KIND)?;
    let config: VitConfig = ckpt.parse_config()?;
    let vit = Vit::from_params(config, ckpt.params)?;
    crate::vit::check_k_last(&config, k_last)?;
    let dim = config.feature_dim(k_last);
    fs::create_dir_all(out)?;
    let mut count = 0;
    for (dir, m) in read_tile_manifests(tiles_dir)? {
        let tiles = load_tiles(&dir, &m, config.image_size as u32)?;
        let rows = par_map(&tiles, |t| vit.extract_features(&image_tensor(t), k_last))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let file = EmbeddingFile {
            slide_id: m.slide_id.clone(),
            dim,
            rows: rows.concat(),
        };
        let sidecar = EmbeddingSidecar {
            slide_id: m.slide_id.clone(),
            embedder_hash: embedder_hash.clone(),
            k_last,
            patch_size: m.patch_size,
            grid_rows: m.grid_rows,
            grid_cols: m.grid_cols,
            coords: m.coords(),
            label: m.label,
            instance_labels: m.instance_labels(),
        };
        write_embeddings(out, &file, &sidecar)?;
        count += 1;
    }
    Ok(count)
}

/// Aggregator checkpoint configuration; ties the model to its embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilCheckpointConfig {
    pub dim: usize,
    pub query_dim: usize,
    pub embedder_hash: String,
    pub training: MilConfig,
}

/// Bags for the labelled slides, restricted to `split` when given.
pub fn load_bags(emb_dir: &Path, labels: &[LabelRow], split: Option<Split>) -> Result<(Vec<Bag>, String)> {
    let available: BTreeSet<String> = list_embeddings(emb_dir)?.into_iter().collect();
    let mut bags = Vec::new();
    let mut hash: Option<String> = None;
    for row in labels.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
        if !available.contains(&row.slide_id) {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no embeddings for {} in {}", row.slide_id, emb_dir.display()),
            )));
        }
        let (file, side) = read_embeddings(emb_dir, &row.slide_id)?;
        match &hash {
            None => hash = Some(side.embedder_hash.clone()),
            Some(h) if *h != side.embedder_hash => {
                return Err(Error::Version {
                    expected: h.clone(),
                    found: side.embedder_hash,
                })
            }
            Some(_) => {}
        }
        let mut bag = if file.rows.is_empty() {
            Bag {
                slide_id: row.slide_id.clone(),
                label: row.label,
                dim: file.dim,
                embeddings: Vec::new(),
                coords: Vec::new(),
                instance_labels: None,
            }
        } else {
            Bag::new(row.slide_id.clone(), row.label, file.dim, file.rows)?
        };
        bag.coords = side.coords;
        bag.instance_labels = side.instance_labels;
        bags.push(bag);
    }
    let hash = hash.ok_or_else(|| Error::Validation("no labelled slides selected".into()))?;
    if let Some(b) = bags.iter().find(|b| b.dim != bags[0].dim) {
        return Err(Error::dim("load_bags", &[bags[0].dim], &[b.dim]));
    }
    Ok((bags, hash))
}

#[derive(Debug, Clone, Serialize)]
struct EpochLoss {
    epoch: usize,
    loss: f64,
}

/// Trains the aggregator on the training split. Writes `mil.ckpt`,
/// `train_loss.csv` and `config.json`.
pub fn train_mil_stage(emb_dir: &Path, labels: &Path, cfg: &MilConfig, seed: u64, out: &Path) -> Result<Vec<f64>> {
    let rows = read_labels(labels)?;
    let (bags, embedder_hash) = load_bags(emb_dir, &rows, Some(Split::Train))?;
    let dim = bags[0].dim;
    let model = MilModel::new(dim, cfg.query_dim, &mut seeded(seed, 20))?;
    let outcome = train_mil(&bags, model, cfg, seed)?;
    fs::create_dir_all(out)?;
    let meta = MilCheckpointConfig {
        dim,
        query_dim: cfg.query_dim,
        embedder_hash,
        training: *cfg,
    };
    Checkpoint::new(MIL_KIND, &meta, outcome.model.params().clone())?.save(&out.join("mil.ckpt"))?;
    let losses: Vec<EpochLoss> = outcome
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(epoch, &loss)| EpochLoss { epoch, loss })
        .collect();
    write_bytes(&out.join("train_loss.csv"), &csv_bytes(&losses)?)?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(outcome.epoch_losses)
}

pub fn load_mil(path: &Path) -> Result<(MilModel, MilCheckpointConfig)> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind(MIL_KIND)?;
    let meta: MilCheckpointConfig = ckpt.parse_config()?;
    let model = MilModel::from_params(ckpt.params)?;
    if model.dim() != meta.dim || model.query_dim() != meta.query_dim {
        return Err(Error::format("checkpoint", "aggregator shapes disagree with header"));
    }
    Ok((model, meta))
}

fn check_embedder(meta: &MilCheckpointConfig, found: &str) -> Result<()> {
    if meta.embedder_hash != found {
        return Err(Error::Version {
            expected: format!("embedder {}", meta.embedder_hash),
            found: format!("embedder {found}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auc: f64,
    pub n_test: usize,
    pub threshold: f64,
    /// Present when every positive bag carries instance labels.
    pub localization_hit_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct PredictionRow<'a> {
    slide_id: &'a str,
    label: u8,
    final_score: f64,
    predicted: u8,
    top_attention_row: u32,
    top_attention_col: u32,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub predictions: Vec<(Bag, BagPrediction)>,
}

/// Scores the selected split and writes `metrics.json`, `roc.dat` and `predictions.csv`.
pub fn eval_stage(model: &Path, emb_dir: &Path, labels: &Path, split: Option<Split>, out: &Path) -> Result<EvalReport> {
    let (model, meta) = load_mil(model)?;
    let rows = read_labels(labels)?;
    let (bags, hash) = load_bags(emb_dir, &rows, split)?;
    check_embedder(&meta, &hash)?;
    let mut predictions = Vec::with_capacity(bags.len());
    for bag in bags {
        if bag.is_empty() {
            return Err(Error::Validation(format!("bag {} has no instances", bag.slide_id)));
        }
        let p = model.predict(&bag)?;
        predictions.push((bag, p));
    }
    let labels: Vec<u8> = predictions.iter().map(|(b, _)| b.label).collect();
    let scores: Vec<f64> = predictions.iter().map(|(_, p)| p.final_score).collect();
    let predicted: Vec<u8> = predictions.iter().map(|(_, p)| p.predicted).collect();
    let roc = roc_auc(&scores, &labels)?;
    let hit_rate = {
        let positives: Vec<_> = predictions.iter().filter(|(b, _)| b.label == 1).collect();
        if !positives.is_empty() && positives.iter().all(|(b, _)| b.instance_labels.is_some()) {
            let triples: Vec<(u8, &[f64], &[u8])> = positives
                .iter()
                .map(|(b, p)| (b.label, p.attention.as_slice(), b.instance_labels.as_deref().unwrap()))
                .collect();
            Some(localization_hit_rate(&triples)?)
        } else {
            None
        }
    };
    let metrics = Metrics {
        accuracy: accuracy(&predicted, &labels)?,
        auc: roc.auc,
        n_test: labels.len(),
        threshold: DECISION_THRESHOLD,
        localization_hit_rate: hit_rate,
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    write_bytes(&out.join("roc.dat"), roc_dat(&roc).as_bytes())?;
    let table: Vec<PredictionRow> = predictions
        .iter()
        .map(|(b, p)| {
            let top = b.coords[crate::mil::argmax_first(&p.attention)];
            PredictionRow {
                slide_id: &b.slide_id,
                label: b.label,
                final_score: p.final_score,
                predicted: p.predicted,
                top_attention_row: top.0,
                top_attention_col: top.1,
            }
        })
        .collect();
    write_bytes(&out.join("predictions.csv"), &csv_bytes(&table)?)?;
    Ok(EvalReport { metrics, predictions })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub heatmap: Heatmap,
    pub prediction: BagPrediction,
    pub z_cap: f64,
    pub overlay: String,
}

/// Attention heatmap for one slide: z-filtered intensities, a JSON record and
/// a PNG overlay with ground truth outlined when known.
pub fn heatmap_stage(
    model: &Path,
    slide: &Path,
    emb_dir: &Path,
    settings: &EvalSettings,
    out: &Path,
) -> Result<HeatmapReport> {
    let (model, meta) = load_mil(model)?;
    let slide_id = slide
        .file_stem()
        .ok_or_else(|| Error::Usage(format!("cannot derive a slide id from {}", slide.display())))?
        .to_string_lossy()
        .into_owned();
    let (file, side) = read_embeddings(emb_dir, &slide_id)?;
    check_embedder(&meta, &side.embedder_hash)?;
    let mut bag = Bag::new(slide_id.clone(), side.label.unwrap_or(0), file.dim, file.rows)?;
    bag.coords = side.coords.clone();
    let prediction = model.predict(&bag)?;
    let intensities = z_filter(&prediction.attention, settings.z_cap, settings.outlier_mode)?;
    let heatmap = Heatmap::from_tiles(
        slide_id.clone(),
        (side.grid_rows, side.grid_cols),
        side.patch_size,
        &side.coords,
        &intensities,
    )?;

    let pixels = image::open(slide)?.to_rgb8();
    let p = side.patch_size;
    if pixels.width() / p != side.grid_cols || pixels.height() / p != side.grid_rows {
        return Err(Error::dim(
            "heatmap",
            &[(pixels.height() / p) as usize, (pixels.width() / p) as usize],
            &[side.grid_rows as usize, side.grid_cols as usize],
        ));
    }
    let cropped = imageops::crop_imm(&pixels, 0, 0, side.grid_cols * p, side.grid_rows * p).to_image();
    let mask = side.instance_labels.as_ref().map(|labels| {
        let mut mask = vec![false; (side.grid_rows * side.grid_cols) as usize];
        for (&(r, c), &l) in side.coords.iter().zip(labels) {
            mask[(r * side.grid_cols + c) as usize] = l == 1;
        }
        mask
    });
    let overlay = render_overlay(&cropped, &heatmap, mask.as_deref())?;
    fs::create_dir_all(out)?;
    let name = format!("{slide_id}_overlay.png");
    overlay.save(out.join(&name))?;
    let report = HeatmapReport {
        heatmap,
        prediction,
        z_cap: settings.z_cap,
        overlay: name,
    };
    write_json(&out.join(format!("{slide_id}_heatmap.json")), &report)?;
    Ok(report)
}

/// Slide ids of one split from a labels file.
pub fn split_ids(labels: &Path, split: Split) -> Result<BTreeSet<String>> {
    Ok(read_labels(labels)?
        .into_iter()
        .filter(|r| r.split == split)
        .map(|r| r.slide_id)
        .collect())
}
