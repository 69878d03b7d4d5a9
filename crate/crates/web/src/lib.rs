//! Browser demo: synthesise and tile a slide, stain-normalise it, and compute
//! a ROC curve from pasted scores. The pure functions in [`demo`] carry the
//! logic; the `wasm_bindgen` exports below only adapt types for JavaScript.

use wasm_bindgen::prelude::*;

pub mod demo {
    use std::collections::BTreeSet;

    use image::{imageops, Rgba, RgbaImage};
    use serde_json::json;
    use vitmil::eval::{render_overlay, roc_auc, Heatmap};
    use vitmil::preprocess::{
        choose_planted_cells, filter_tiles, macenko_normalize, synth_slide, MacenkoParams, StainProfile, SynthConfig,
        SyntheticSlide,
    };
    use vitmil::{Error, Result};

    pub const MIN_FOREGROUND: f64 = 0.25;
    pub const MAX_GRID: u32 = 16;
    const PLANTED: usize = 4;

    /// An RGBA raster plus a JSON summary.
    #[derive(Debug, Clone, PartialEq)]
    pub struct Frame {
        pub width: u32,
        pub height: u32,
        pub rgba: Vec<u8>,
        pub summary: String,
    }

    impl Frame {
        fn from_image(img: RgbaImage, summary: serde_json::Value) -> Self {
            Self {
                width: img.width(),
                height: img.height(),
                rgba: img.into_raw(),
                summary: summary.to_string(),
            }
        }
    }

    fn slide(seed: u64, positive: bool, grid: u32) -> Result<SyntheticSlide> {
        if grid == 0 || grid > MAX_GRID {
            return Err(Error::Parameter(format!("grid must be in 1..={MAX_GRID}")));
        }
        let planted = if positive {
            choose_planted_cells(seed, grid, grid, PLANTED)
        } else {
            BTreeSet::new()
        };
        synth_slide(seed, (grid, grid), !planted.is_empty(), &planted, &SynthConfig::default())
    }

    /// The slide with background tiles darkened and planted tumour cells outlined.
    pub fn tiled_slide(seed: u64, positive: bool, grid: u32) -> Result<Frame> {
        let s = slide(seed, positive, grid)?;
        let p = s.cell_size;
        let tiles = filter_tiles(&s.slide, p, MIN_FOREGROUND)?;
        let zeros = vec![0.0; tiles.coords.len()];
        let heat = Heatmap::from_tiles(s.slide.slide_id.clone(), (grid, grid), p, &tiles.coords, &zeros)?;
        let truth: Vec<bool> = s.instance_labels.iter().map(|&l| l == 1).collect();
        let mut img = render_overlay(&s.slide.pixels, &heat, Some(&truth))?;
        let kept: BTreeSet<_> = tiles.coords.iter().copied().collect();
        for (x, y, px) in img.enumerate_pixels_mut() {
            if !kept.contains(&(y / p, x / p)) && !truth[((y / p) * grid + x / p) as usize] {
                let Rgba([r, g, b, a]) = *px;
                *px = Rgba([r / 3, g / 3, b / 3, a]);
            }
        }
        let summary = json!({
            "slide_id": s.slide.slide_id,
            "label": s.bag_label(),
            "grid": grid,
            "otsu_threshold": tiles.threshold,
            "kept_tiles": tiles.len(),
            "total_tiles": grid * grid,
            "planted_cells": truth.iter().filter(|&&t| t).count(),
        });
        Ok(Frame::from_image(img, summary))
    }

    /// Every kept tile mapped onto the standard H&E stain basis.
    pub fn normalized_slide(seed: u64, positive: bool, grid: u32) -> Result<Frame> {
        let s = slide(seed, positive, grid)?;
        let p = s.cell_size;
        let tiles = filter_tiles(&s.slide, p, MIN_FOREGROUND)?;
        let reference = StainProfile::standard_he();
        let params = MacenkoParams::default();
        let mut out = s.slide.pixels.clone();
        let mut degenerate = 0;
        for (tile, &(r, c)) in tiles.tiles.iter().zip(&tiles.coords) {
            let n = macenko_normalize(tile, &reference, &params);
            degenerate += usize::from(n.degenerate);
            imageops::replace(&mut out, &n.image, i64::from(c * p), i64::from(r * p));
        }
        let rgba = image::DynamicImage::ImageRgb8(out).to_rgba8();
        let summary = json!({
            "slide_id": s.slide.slide_id,
            "normalized_tiles": tiles.len() - degenerate,
            "degenerate_tiles": degenerate,
        });
        Ok(Frame::from_image(rgba, summary))
    }

    fn numbers(text: &str) -> Result<Vec<f64>> {
        text.split(|c: char| c.is_whitespace() || c == ',' || c == ';')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|_| Error::Validation(format!("not a number: {t:?}"))))
            .collect()
    }

    /// `{"auc": .., "points": [[fpr, tpr], ..]}` for whitespace or comma separated input.
    pub fn roc_json(scores: &str, labels: &str) -> Result<String> {
        let scores = numbers(scores)?;
        let labels = numbers(labels)?
            .into_iter()
            .map(|l| match l {
                0.0 => Ok(0u8),
                1.0 => Ok(1u8),
                _ => Err(Error::Validation(format!("labels must be 0 or 1, got {l}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let curve = roc_auc(&scores, &labels)?;
        Ok(json!({"auc": curve.auc, "points": curve.points}).to_string())
    }
}

#[wasm_bindgen]
pub struct WasmFrame(demo::Frame);

#[wasm_bindgen]
impl WasmFrame {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.0.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.0.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.0.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn summary(&self) -> String {
        self.0.summary.clone()
    }
}

fn js(e: vitmil::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn synth_tiles(seed: u32, positive: bool, grid: u32) -> Result<WasmFrame, JsError> {
    demo::tiled_slide(u64::from(seed), positive, grid).map(WasmFrame).map_err(js)
}

#[wasm_bindgen]
pub fn stain_normalize(seed: u32, positive: bool, grid: u32) -> Result<WasmFrame, JsError> {
    demo::normalized_slide(u64::from(seed), positive, grid).map(WasmFrame).map_err(js)
}

#[wasm_bindgen]
pub fn roc(scores: &str, labels: &str) -> Result<String, JsError> {
    demo::roc_json(scores, labels).map_err(js)
}
