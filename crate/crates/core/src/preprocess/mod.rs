//! Slide tiling, tissue filtering, stain normalisation and synthetic slides.

pub mod otsu;
pub mod stain;
pub mod synth;
pub mod tiling;

pub use otsu::{histogram, otsu_threshold, Histogram};
pub use stain::{estimate_stain_profile, macenko_normalize, MacenkoParams, Normalized, StainProfile};
pub use synth::{choose_planted_cells, synth_slide, tissue_cells, SynthConfig, SyntheticSlide};
pub use tiling::{filter_tiles, grayscale, Coord, SlideImage, TileSet, TileStatus};
