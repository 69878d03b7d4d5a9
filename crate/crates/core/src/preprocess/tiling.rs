use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::otsu::{histogram, otsu_threshold};
use crate::error::{Error, Result};

/// Luminance weights for the grayscale image fed to Otsu.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// A slide: RGB pixels, an identifier and, when known, the bag label.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideImage {
    pub pixels: RgbImage,
    pub slide_id: String,
    pub label: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileStatus {
    Ok,
    /// The slide is smaller than one patch; no tiles were produced.
    SlideTooSmall,
}

/// Grid cell `(row, col)` of a tile.
pub type Coord = (u32, u32);

/// Non-overlapping patches that passed the tissue filter, in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSet {
    pub slide_id: String,
    pub patch_size: u32,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub tiles: Vec<RgbImage>,
    pub coords: Vec<Coord>,
    pub threshold: u8,
    pub status: TileStatus,
}

impl TileSet {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

pub fn grayscale(img: &RgbImage) -> Vec<u8> {
    img.pixels()
        .map(|p| {
            let l = LUMA_WEIGHTS[0] * f64::from(p[0])
                + LUMA_WEIGHTS[1] * f64::from(p[1])
                + LUMA_WEIGHTS[2] * f64::from(p[2]);
            l.round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Fraction of pixels in grid cell `(row, col)` at or below `threshold`.
pub fn foreground_fraction(gray: &[u8], width: u32, patch: u32, coord: Coord, threshold: u8) -> f64 {
    let (row, col) = coord;
    let mut count = 0usize;
    for y in row * patch..(row + 1) * patch {
        let start = (y * width + col * patch) as usize;
        count += gray[start..start + patch as usize]
            .iter()
            .filter(|&&g| g <= threshold)
            .count();
    }
    count as f64 / f64::from(patch * patch)
}

/// Cuts the slide into `patch_size` squares and keeps those whose foreground
/// fraction under the slide-wide Otsu threshold is at least `min_foreground`.
pub fn filter_tiles(slide: &SlideImage, patch_size: u32, min_foreground: f64) -> Result<TileSet> {
    if !(0.0..=1.0).contains(&min_foreground) {
        return Err(Error::Parameter(format!(
            "min_foreground_fraction must be in [0, 1], got {min_foreground}"
        )));
    }
    if patch_size == 0 {
        return Err(Error::Parameter("patch_size must be positive".into()));
    }
    let (width, height) = slide.pixels.dimensions();
    let grid_rows = height / patch_size;
    let grid_cols = width / patch_size;
    let mut set = TileSet {
        slide_id: slide.slide_id.clone(),
        patch_size,
        grid_rows,
        grid_cols,
        tiles: Vec::new(),
        coords: Vec::new(),
        threshold: 0,
        status: TileStatus::Ok,
    };
    if grid_rows == 0 || grid_cols == 0 {
        log::warn!(
            "slide {} ({width}x{height}) is smaller than one {patch_size}px patch",
            slide.slide_id
        );
        set.status = TileStatus::SlideTooSmall;
        return Ok(set);
    }

    let gray = grayscale(&slide.pixels);
    let threshold = otsu_threshold(&histogram(gray.iter().copied()))?;
    set.threshold = threshold;

    let cells: Vec<Coord> = (0..grid_rows)
        .flat_map(|r| (0..grid_cols).map(move |c| (r, c)))
        .collect();
    let keep = |&coord: &Coord| {
        foreground_fraction(&gray, width, patch_size, coord, threshold) >= min_foreground
    };
    #[cfg(feature = "parallel")]
    let kept: Vec<Coord> = {
        use rayon::prelude::*;
        cells.into_par_iter().filter(keep).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let kept: Vec<Coord> = cells.into_iter().filter(keep).collect();

    for (r, c) in kept {
        let tile = image::imageops::crop_imm(&slide.pixels, c * patch_size, r * patch_size, patch_size, patch_size)
            .to_image();
        set.tiles.push(tile);
        set.coords.push((r, c));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use image::Rgb;

    use super::*;

    fn slide(img: RgbImage) -> SlideImage {
        SlideImage {
            pixels: img,
            slide_id: "s".into(),
            label: None,
        }
    }

    #[test]
    fn all_foreground_slide_keeps_full_grid() {
        // two dark shades so Otsu has something to split, both below the threshold
        let img = RgbImage::from_fn(448, 448, |x, _| if x % 2 == 0 { Rgb([40, 20, 60]) } else { Rgb([60, 30, 80]) });
        let set = filter_tiles(&slide(img.clone()), 224, 0.25).unwrap();
        assert_eq!(set.coords, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(set.tiles[3], image::imageops::crop_imm(&img, 224, 224, 224, 224).to_image());
    }

    #[test]
    fn uniform_white_slide_keeps_nothing() {
        let img = RgbImage::from_pixel(256, 256, Rgb([255, 255, 255]));
        let set = filter_tiles(&slide(img), 32, 0.25).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.status, TileStatus::Ok);
    }

    #[test]
    fn small_slide_reports_status() {
        let img = RgbImage::from_pixel(20, 40, Rgb([0, 0, 0]));
        let set = filter_tiles(&slide(img), 32, 0.25).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.status, TileStatus::SlideTooSmall);
    }

    #[test]
    fn rejects_bad_fraction() {
        let img = RgbImage::from_pixel(64, 64, Rgb([0, 0, 0]));
        assert!(filter_tiles(&slide(img.clone()), 32, 1.5).is_err());
        assert!(filter_tiles(&slide(img), 32, -0.1).is_err());
    }

    #[test]
    fn half_tissue_slide_matches_per_tile_recount() {
        // left half tissue with a soft gradient, right half white with speckle
        let img = RgbImage::from_fn(256, 192, |x, y| {
            if x < 120 {
                let v = (60 + (x + y) % 50) as u8;
                Rgb([v + 40, v, v + 60])
            } else if (x * 7 + y * 13) % 11 == 0 {
                Rgb([200, 200, 200])
            } else {
                Rgb([250, 250, 250])
            }
        });
        let set = filter_tiles(&slide(img.clone()), 32, 0.25).unwrap();

        // oracle: recount each cell's dark pixels directly from RGB
        let t = set.threshold;
        let mut expected = Vec::new();
        for r in 0..6u32 {
            for c in 0..8u32 {
                let mut n = 0;
                for y in r * 32..(r + 1) * 32 {
                    for x in c * 32..(c + 1) * 32 {
                        let p = img.get_pixel(x, y);
                        let l = (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round();
                        if l <= t as f64 {
                            n += 1;
                        }
                    }
                }
                if n as f64 / 1024.0 >= 0.25 {
                    expected.push((r, c));
                }
            }
        }
        assert_eq!(set.coords, expected);
        assert!(!expected.is_empty() && expected.len() < 48);
    }
}
