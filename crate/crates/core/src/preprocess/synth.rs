//! Synthetic H&E-like slides with planted positive textures.
//!
//! A slide is a `rows x cols` grid of square cells. Cells inside a jittered
//! ellipse carry tissue, the rest stay white. Negative tissue is rendered from
//! smooth low-frequency stain fields; planted cells carry a dense
//! high-frequency hematoxylin checker pattern. Stain vectors and overall
//! density are jittered per slide. Everything is a pure function of the seed.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use image::RgbImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::stain::StainProfile;
use super::tiling::{Coord, SlideImage};
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Cell edge in pixels; tiling with this patch size aligns tiles with cells.
    pub cell_size: u32,
    /// Standard deviation of the per-slide stain-vector perturbation.
    pub stain_jitter: f64,
    /// Per-slide density scale is drawn from `1 +- density_jitter`.
    pub density_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cell_size: 32,
            stain_jitter: 0.03,
            density_jitter: 0.15,
        }
    }
}

/// A generated slide and its per-cell ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub slide: SlideImage,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub cell_size: u32,
    /// Row-major instance labels; evaluation only.
    pub instance_labels: Vec<u8>,
    /// Row-major tissue mask.
    pub tissue: Vec<bool>,
}

impl SyntheticSlide {
    pub fn bag_label(&self) -> u8 {
        self.slide.label.unwrap_or(0)
    }

    pub fn instance_label(&self, coord: Coord) -> u8 {
        self.instance_labels[(coord.0 * self.grid_cols + coord.1) as usize]
    }
}

/// Cells whose centres fall inside the slide's tissue ellipse, row-major.
pub fn tissue_cells(seed: u64, rows: u32, cols: u32) -> Vec<Coord> {
    let mask = tissue_mask(seed, rows, cols);
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| mask[(r * cols + c) as usize])
        .collect()
}

fn tissue_mask(seed: u64, rows: u32, cols: u32) -> Vec<bool> {
    let mut rng = seeded(seed, 1);
    let cy = 0.5 + rng.random_range(-0.05..0.05);
    let cx = 0.5 + rng.random_range(-0.05..0.05);
    let ry = rng.random_range(0.46..0.56);
    let rx = rng.random_range(0.46..0.56);
    let mut mask = Vec::with_capacity((rows * cols) as usize);
    for r in 0..rows {
        for c in 0..cols {
            let y = (f64::from(r) + 0.5) / f64::from(rows) - cy;
            let x = (f64::from(c) + 0.5) / f64::from(cols) - cx;
            mask.push((y / ry).powi(2) + (x / rx).powi(2) <= 1.0);
        }
    }
    mask
}

/// Sum of a few random plane waves, scaled into `[-1, 1]`.
struct SmoothField {
    waves: Vec<(f64, f64, f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, min_wavelength: f64, max_wavelength: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                let k = 2.0 * PI / rng.random_range(min_wavelength..max_wavelength);
                (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self.waves.iter().map(|(kx, ky, ph)| (kx * x + ky * y + ph).sin()).sum();
        s / self.waves.len() as f64
    }
}

/// Renders a slide. `positive` must agree with `planted` being non-empty.
pub fn synth_slide(
    seed: u64,
    grid: (u32, u32),
    positive: bool,
    planted: &BTreeSet<Coord>,
    config: &SynthConfig,
) -> Result<SyntheticSlide> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 || config.cell_size == 0 {
        return Err(Error::Parameter(format!("empty synthetic grid {rows}x{cols}")));
    }
    if positive == planted.is_empty() {
        return Err(Error::Parameter(
            "a slide is positive exactly when it has planted positive cells".into(),
        ));
    }
    if let Some(&(r, c)) = planted.iter().find(|&&(r, c)| r >= rows || c >= cols) {
        return Err(Error::Parameter(format!("planted cell ({r}, {c}) is outside the grid")));
    }

    let mut rng = seeded(seed, 0);
    let base = StainProfile::standard_he();
    let jitter = Normal::new(0.0, config.stain_jitter.max(0.0)).expect("finite std");
    let mut perturb = |v: nalgebra::Vector3<f64>| {
        let mut out = [0.0; 3];
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o = (x + jitter.sample(&mut rng)).max(0.02);
        }
        out
    };
    let h = perturb(base.hematoxylin());
    let e = perturb(base.eosin());
    let stains = StainProfile::new(h, e, [1.0, 1.0])?;
    let density = 1.0 + rng.random_range(-config.density_jitter..=config.density_jitter);

    let h_field = SmoothField::new(&mut rng, 20.0, 64.0);
    let e_field = SmoothField::new(&mut rng, 20.0, 64.0);
    let tissue = tissue_mask(seed, rows, cols);
    let cell = config.cell_size;

    // per-cell checker period and phase for planted cells
    let checker: Vec<(u32, u32, u32)> = (0..rows * cols)
        .map(|_| (rng.random_range(2..=3), rng.random_range(0..6), rng.random_range(0..6)))
        .collect();

    let mut instance_labels = vec![0u8; (rows * cols) as usize];
    for &(r, c) in planted {
        instance_labels[(r * cols + c) as usize] = 1;
    }

    let noise = Normal::new(0.0, 0.04).expect("finite std");
    let pixels = RgbImage::from_fn(cols * cell, rows * cell, |x, y| {
        let (r, c) = (y / cell, x / cell);
        let idx = (r * cols + c) as usize;
        let (fx, fy) = (f64::from(x), f64::from(y));
        let conc = if instance_labels[idx] == 1 {
            let (half, ox, oy) = checker[idx];
            let on = ((x + ox) / half + (y + oy) / half) % 2 == 0;
            let hc = if on { 1.35 } else { 0.75 };
            [hc + noise.sample(&mut rng), 0.45 + 0.1 * e_field.at(fx, fy) + noise.sample(&mut rng)]
        } else if tissue[idx] {
            [
                0.35 + 0.22 * h_field.at(fx, fy) + noise.sample(&mut rng),
                0.95 + 0.3 * e_field.at(fx, fy) + noise.sample(&mut rng),
            ]
        } else {
            let bg = 0.01 * rng.random::<f64>();
            [bg, bg]
        };
        stains.render([conc[0].max(0.0) * density, conc[1].max(0.0) * density])
    });

    Ok(SyntheticSlide {
        slide: SlideImage {
            pixels,
            slide_id: format!("slide_{seed:06}"),
            label: Some(u8::from(positive)),
        },
        grid_rows: rows,
        grid_cols: cols,
        cell_size: cell,
        instance_labels,
        tissue,
    })
}

/// Picks a connected cluster of `count` tissue cells for planting, seeded.
pub fn choose_planted_cells(seed: u64, rows: u32, cols: u32, count: usize) -> BTreeSet<Coord> {
    let cells = tissue_cells(seed, rows, cols);
    let mut planted = BTreeSet::new();
    if cells.is_empty() || count == 0 {
        return planted;
    }
    let mut rng = seeded(seed, 2);
    let tissue: BTreeSet<Coord> = cells.iter().copied().collect();
    planted.insert(cells[rng.random_range(0..cells.len())]);
    while planted.len() < count.min(cells.len()) {
        let frontier: Vec<Coord> = planted
            .iter()
            .flat_map(|&(r, c)| {
                [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)]
            })
            .filter(|p| tissue.contains(p) && !planted.contains(p))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if frontier.is_empty() {
            break;
        }
        planted.insert(frontier[rng.random_range(0..frontier.len())]);
    }
    planted
}
