//! Multi-crop augmentation: two global and several local views per image.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::seeded;
use crate::tensor::Tensor;
use crate::vit::{PIXEL_MEAN, PIXEL_STD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub n_local: usize,
    /// Crop area as a fraction of the image, `(min, max)`.
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub flip_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from `1 +- jitter`.
    pub jitter: f64,
    pub blur_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_local: 4,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            flip_prob: 0.5,
            jitter: 0.2,
            blur_prob: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub kind: ViewKind,
    /// Standardised `3 x S x S` input.
    pub tensor: Tensor,
}

/// Views of one source image: the two global views come first.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub source: usize,
    pub views: Vec<View>,
}

impl ViewSet {
    pub fn globals(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| v.kind == ViewKind::Global)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Channel-major `[0, 1]` image buffer.
struct Planes {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Planes {
    fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * w * h];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * w * h + y as usize * w + x as usize] = f64::from(p[c]) / 255.0;
            }
        }
        Self { w, h, data }
    }

    fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[c * self.w * self.h + y * self.w + x]
    }

    /// Bilinear resample of the box `(x0, y0, cw, ch)` to `size x size`.
    fn crop_resize(&self, x0: f64, y0: f64, cw: f64, ch: f64, size: usize) -> Planes {
        let mut data = vec![0.0; 3 * size * size];
        let max_x = (self.w - 1) as f64;
        let max_y = (self.h - 1) as f64;
        for oy in 0..size {
            let sy = (y0 + (oy as f64 + 0.5) * ch / size as f64 - 0.5).clamp(0.0, max_y);
            let (y_lo, fy) = (sy.floor() as usize, sy - sy.floor());
            let y_hi = (y_lo + 1).min(self.h - 1);
            for ox in 0..size {
                let sx = (x0 + (ox as f64 + 0.5) * cw / size as f64 - 0.5).clamp(0.0, max_x);
                let (x_lo, fx) = (sx.floor() as usize, sx - sx.floor());
                let x_hi = (x_lo + 1).min(self.w - 1);
                for c in 0..3 {
                    let top = self.at(c, x_lo, y_lo) * (1.0 - fx) + self.at(c, x_hi, y_lo) * fx;
                    let bottom = self.at(c, x_lo, y_hi) * (1.0 - fx) + self.at(c, x_hi, y_hi) * fx;
                    data[c * size * size + oy * size + ox] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        Planes {
            w: size,
            h: size,
            data,
        }
    }

    fn flip(&mut self) {
        let (w, h) = (self.w, self.h);
        for c in 0..3 {
            for y in 0..h {
                self.data[c * w * h + y * w..c * w * h + (y + 1) * w].reverse();
            }
        }
    }

    fn gray(&self, i: usize) -> f64 {
        let n = self.w * self.h;
        0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i]
    }

    fn color_jitter(&mut self, brightness: f64, contrast: f64, saturation: f64) {
        let n = self.w * self.h;
        for v in &mut self.data {
            *v = (*v * brightness).clamp(0.0, 1.0);
        }
        let mean_gray = (0..n).map(|i| self.gray(i)).sum::<f64>() / n as f64;
        for v in &mut self.data {
            *v = (mean_gray + contrast * (*v - mean_gray)).clamp(0.0, 1.0);
        }
        for i in 0..n {
            let g = self.gray(i);
            for c in 0..3 {
                let v = &mut self.data[c * n + i];
                *v = (g + saturation * (*v - g)).clamp(0.0, 1.0);
            }
        }
    }

    /// Separable `[1, 2, 1] / 4` blur with edge clamping.
    fn blur(&mut self) {
        let (w, h) = (self.w, self.h);
        let mut tmp = self.data.clone();
        for c in 0..3 {
            let base = c * w * h;
            for y in 0..h {
                for x in 0..w {
                    let l = self.data[base + y * w + x.saturating_sub(1)];
                    let r = self.data[base + y * w + (x + 1).min(w - 1)];
                    tmp[base + y * w + x] = 0.25 * l + 0.5 * self.data[base + y * w + x] + 0.25 * r;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let u = tmp[base + y.saturating_sub(1) * w + x];
                    let d = tmp[base + (y + 1).min(h - 1) * w + x];
                    self.data[base + y * w + x] = 0.25 * u + 0.5 * tmp[base + y * w + x] + 0.25 * d;
                }
            }
        }
    }

    fn standardized(self) -> Tensor {
        let n = self.w * self.h;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i / n;
                (v - PIXEL_MEAN[c]) / PIXEL_STD[c]
            })
            .collect();
        Tensor::new(&[3, self.h, self.w], data).expect("non-empty view")
    }
}

fn random_view<R: Rng>(src: &Planes, scale: (f64, f64), size: usize, aug: &AugmentConfig, rng: &mut R) -> Tensor {
    let area = (src.w * src.h) as f64;
    let s = rng.random_range(scale.0..=scale.1);
    let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let cw = (s * area * ratio).sqrt().clamp(1.0, src.w as f64);
    let ch = (s * area / ratio).sqrt().clamp(1.0, src.h as f64);
    let x0 = rng.random_range(0.0..=src.w as f64 - cw);
    let y0 = rng.random_range(0.0..=src.h as f64 - ch);
    let mut view = src.crop_resize(x0, y0, cw, ch, size);
    if rng.random::<f64>() < aug.flip_prob {
        view.flip();
    }
    let j = aug.jitter.clamp(0.0, 1.0);
    let mut factor = || 1.0 + rng.random_range(-j..=j);
    let (b, c, s) = (factor(), factor(), factor());
    view.color_jitter(b, c, s);
    if rng.random::<f64>() < aug.blur_prob {
        view.blur();
    }
    view.standardized()
}

/// Views of `image`, each resized to `size x size`; a pure function of `seed`.
pub fn make_views(image: &RgbImage, source: usize, seed: u64, size: usize, aug: &AugmentConfig) -> ViewSet {
    let mut rng = seeded(seed, 3);
    let src = Planes::from_rgb(image);
    let mut views = Vec::with_capacity(2 + aug.n_local);
    for _ in 0..2 {
        views.push(View {
            kind: ViewKind::Global,
            tensor: random_view(&src, aug.global_scale, size, aug, &mut rng),
        });
    }
    for _ in 0..aug.n_local {
        views.push(View {
            kind: ViewKind::Local,
            tensor: random_view(&src, aug.local_scale, size, aug, &mut rng),
        });
    }
    ViewSet { source, views }
}

#[cfg(test)]
mod tests {
    use image::Rgb;

    use super::*;

    fn tile() -> RgbImage {
        RgbImage::from_fn(32, 32, |x, y| Rgb([(x * 8) as u8, (y * 8) as u8, ((x + y) * 4) as u8]))
    }

    #[test]
    fn no_local_views_gives_two() {
        let aug = AugmentConfig {
            n_local: 0,
            ..AugmentConfig::default()
        };
        let v = make_views(&tile(), 0, 1, 32, &aug);
        assert_eq!(v.len(), 2);
        assert_eq!(v.globals().count(), 2);
    }

    #[test]
    fn same_seed_same_views() {
        let aug = AugmentConfig::default();
        let a = make_views(&tile(), 0, 7, 32, &aug);
        let b = make_views(&tile(), 0, 7, 32, &aug);
        assert_eq!(a, b);
        let c = make_views(&tile(), 0, 8, 32, &aug);
        assert_ne!(a, c);
    }

    #[test]
    fn all_views_have_input_size() {
        let aug = AugmentConfig::default();
        let v = make_views(&tile(), 0, 3, 32, &aug);
        assert_eq!(v.len(), 6);
        assert!(v.views.iter().all(|x| x.tensor.shape() == [3, 32, 32]));
        assert_eq!(v.views[2].kind, ViewKind::Local);
    }

    #[test]
    fn full_crop_without_augmentation_is_the_standardized_image() {
        let aug = AugmentConfig {
            n_local: 0,
            global_scale: (1.0, 1.0),
            flip_prob: 0.0,
            jitter: 0.0,
            blur_prob: 0.0,
            ..AugmentConfig::default()
        };
        // a square crop of the whole image regardless of the drawn aspect ratio
        let img = tile();
        let src = Planes::from_rgb(&img);
        let same = src.crop_resize(0.0, 0.0, 32.0, 32.0, 32).standardized();
        assert_eq!(same, crate::vit::image_tensor(&img));
        let v = make_views(&img, 0, 2, 32, &aug);
        assert!(v.views[0].tensor.all_finite());
    }

    #[test]
    fn flip_mirrors_columns() {
        let mut p = Planes::from_rgb(&tile());
        let before = p.at(0, 3, 5);
        p.flip();
        assert_eq!(p.at(0, 28, 5), before);
    }
}
