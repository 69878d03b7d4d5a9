//! Slide-level metrics and attention-map localisation.

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::Coord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Threshold that produced each point; `+inf` for the leading `(0, 0)`.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// ROC by sweeping every distinct score as a `score >= t` threshold, AUC by
/// the trapezoid rule. Tied scores move both rates at once, which counts each
/// positive/negative tie as one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Validation("scores must be finite".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(t);
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok(RocCurve {
        points,
        thresholds,
        auc,
    })
}

/// Fraction of positions where prediction and label agree.
pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMode {
    /// Scores with `z > z_cap` are lowered to the value at `z = z_cap`.
    #[default]
    Clamp,
    /// Scores with `z > z_cap` are set to 0 before normalisation.
    Zero,
}

pub const DEFAULT_Z_CAP: f64 = 2.0;

/// Z-test outlier suppression followed by min-max normalisation into `[0, 1]`.
///
/// With zero spread every intensity is 0.
pub fn z_filter(attention: &[f64], z_cap: f64, mode: OutlierMode) -> Result<Vec<f64>> {
    if attention.len() < 2 {
        return Err(Error::Validation("z-filter needs at least two tiles".into()));
    }
    if attention.iter().any(|a| !a.is_finite()) {
        return Err(Error::Validation("attention scores must be finite".into()));
    }
    let n = attention.len() as f64;
    let mean = attention.iter().sum::<f64>() / n;
    let std = (attention.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; attention.len()]);
    }
    let cap = mean + z_cap * std;
    let filtered: Vec<f64> = attention
        .iter()
        .map(|&a| {
            if (a - mean) / std > z_cap {
                match mode {
                    OutlierMode::Clamp => cap,
                    OutlierMode::Zero => 0.0,
                }
            } else {
                a
            }
        })
        .collect();
    let lo = filtered.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = filtered.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.0; attention.len()]);
    }
    Ok(filtered.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}

/// Per-tile intensities on the slide grid; cells without a tile stay `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub slide_id: String,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub patch_size: u32,
    pub cells: Vec<Option<f64>>,
}

impl Heatmap {
    pub fn from_tiles(
        slide_id: impl Into<String>,
        grid: (u32, u32),
        patch_size: u32,
        coords: &[Coord],
        intensities: &[f64],
    ) -> Result<Self> {
        if coords.len() != intensities.len() {
            return Err(Error::dim("heatmap", &[coords.len()], &[intensities.len()]));
        }
        let (rows, cols) = grid;
        let mut cells = vec![None; (rows * cols) as usize];
        for (&(r, c), &v) in coords.iter().zip(intensities) {
            if r >= rows || c >= cols {
                return Err(Error::dim("heatmap", &[r as usize, c as usize], &[rows as usize, cols as usize]));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("heatmap intensity {v} outside [0, 1]")));
            }
            cells[(r * cols + c) as usize] = Some(v);
        }
        Ok(Self {
            slide_id: slide_id.into(),
            grid_rows: rows,
            grid_cols: cols,
            patch_size,
            cells,
        })
    }

    pub fn get(&self, coord: Coord) -> Option<f64> {
        self.cells[(coord.0 * self.grid_cols + coord.1) as usize]
    }
}

/// Largest tint opacity, reached at intensity 1.
pub const OVERLAY_ALPHA: f64 = 0.6;
const TINT: [f64; 3] = [220.0, 20.0, 20.0];
const OUTLINE: Rgba<u8> = Rgba([0, 200, 0, 255]);

/// Tints each tile towards red in proportion to its intensity and, if given,
/// outlines the annotated cells in green. The slide must be exactly the grid size.
pub fn render_overlay(slide: &RgbImage, heatmap: &Heatmap, annotation: Option<&[bool]>) -> Result<RgbaImage> {
    let p = heatmap.patch_size;
    let expected = (heatmap.grid_cols * p, heatmap.grid_rows * p);
    if slide.dimensions() != expected {
        return Err(Error::dim(
            "render_overlay",
            &[slide.height() as usize, slide.width() as usize],
            &[expected.1 as usize, expected.0 as usize],
        ));
    }
    if let Some(mask) = annotation {
        if mask.len() != heatmap.cells.len() {
            return Err(Error::dim("render_overlay", &[mask.len()], &[heatmap.cells.len()]));
        }
    }
    let mut out = RgbaImage::from_fn(slide.width(), slide.height(), |x, y| {
        let Rgb([r, g, b]) = *slide.get_pixel(x, y);
        let a = heatmap.get((y / p, x / p)).unwrap_or(0.0) * OVERLAY_ALPHA;
        let mix = |c: u8, t: f64| ((1.0 - a) * f64::from(c) + a * t).round().clamp(0.0, 255.0) as u8;
        Rgba([mix(r, TINT[0]), mix(g, TINT[1]), mix(b, TINT[2]), 255])
    });
    if let Some(mask) = annotation {
        let cols = heatmap.grid_cols;
        let inside = |r: i64, c: i64| {
            r >= 0 && c >= 0 && r < heatmap.grid_rows as i64 && c < cols as i64 && mask[(r as u32 * cols + c as u32) as usize]
        };
        for (x, y, px) in out.enumerate_pixels_mut() {
            let (r, c) = ((y / p) as i64, (x / p) as i64);
            if !inside(r, c) {
                continue;
            }
            let (lx, ly) = (x % p, y % p);
            let edge = (lx == 0 && !inside(r, c - 1))
                || (lx == p - 1 && !inside(r, c + 1))
                || (ly == 0 && !inside(r - 1, c))
                || (ly == p - 1 && !inside(r + 1, c));
            if edge {
                *px = OUTLINE;
            }
        }
    }
    Ok(out)
}

/// Fraction of positive bags whose highest-attention tile (first index on
/// ties) is a true positive instance.
pub fn localization_hit_rate(bags: &[(u8, &[f64], &[u8])]) -> Result<f64> {
    let mut positives = 0usize;
    let mut hits = 0usize;
    for &(label, attention, truth) in bags {
        if label != 1 {
            continue;
        }
        if attention.len() != truth.len() || attention.is_empty() {
            return Err(Error::dim("localization_hit_rate", &[attention.len()], &[truth.len()]));
        }
        positives += 1;
        if truth[crate::mil::argmax_first(attention)] == 1 {
            hits += 1;
        }
    }
    if positives == 0 {
        return Err(Error::UndefinedMetric("no positive bags to localise".into()));
    }
    Ok(hits as f64 / positives as f64)
}

/// Two whitespace-separated columns, `fpr tpr`, one point per line.
pub fn roc_dat(curve: &RocCurve) -> String {
    curve
        .points
        .iter()
        .map(|(f, t)| format!("{f:.6} {t:.6}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::rng::seeded;

    /// P(score_pos > score_neg) + P(tie) / 2 by brute force.
    fn concordance(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let c = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!(c.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(c.points.last(), Some(&(1.0, 1.0)));
        let c = roc_auc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(c.auc, 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(roc_auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn auc_matches_concordance_on_random_sets() {
        let mut rng = seeded(31, 0);
        for _ in 0..200 {
            let n = rng.random_range(2..=50);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            // coarse scores so ties are common
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) / 8.0).collect();
            let auc = roc_auc(&scores, &labels).unwrap().auc;
            assert!((auc - concordance(&scores, &labels)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auc_properties(seed in 0u64..100_000, n in 2usize..200) {
            let mut rng = seeded(seed, 1);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0f64..3.0)).collect();
            let c = roc_auc(&scores, &labels).unwrap();
            prop_assert!((c.auc - concordance(&scores, &labels)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&c.auc));
            for w in c.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            // strictly increasing transform
            let t: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(roc_auc(&t, &labels).unwrap().auc, c.auc);
        }

        #[test]
        fn z_filter_is_affine_invariant(seed in 0u64..100_000, a in 0.01f64..100.0, b in -50.0f64..50.0) {
            let mut rng = seeded(seed, 2);
            let s: Vec<f64> = (0..30).map(|_| rng.random_range(0.0f64..1.0)).collect();
            let t: Vec<f64> = s.iter().map(|x| a * x + b).collect();
            for mode in [OutlierMode::Clamp, OutlierMode::Zero] {
                let fs = z_filter(&s, DEFAULT_Z_CAP, mode).unwrap();
                let ft = z_filter(&t, DEFAULT_Z_CAP, mode).unwrap();
                if mode == OutlierMode::Clamp {
                    for (x, y) in fs.iter().zip(&ft) {
                        prop_assert!((x - y).abs() < 1e-9);
                    }
                }
                prop_assert!(ft.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        let p = [1, 0, 0, 1, 1];
        let l = [1, 1, 0, 0, 1];
        let flipped: Vec<u8> = l.iter().map(|x| 1 - x).collect();
        let a = accuracy(&p, &l).unwrap();
        assert!((accuracy(&p, &flipped).unwrap() - (1.0 - a)).abs() < 1e-15);
        assert!(accuracy(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn z_filter_examples() {
        assert_eq!(z_filter(&[0.3; 10], 2.0, OutlierMode::Clamp).unwrap(), vec![0.0; 10]);
        assert!(z_filter(&[0.3], 2.0, OutlierMode::Clamp).is_err());

        // 99 near-equal scores and one huge outlier
        let mut s: Vec<f64> = (0..99).map(|i| 0.01 + 1e-4 * (i % 7) as f64).collect();
        s.push(5.0);
        let f = z_filter(&s, 2.0, OutlierMode::Clamp).unwrap();
        assert_eq!(crate::mil::argmax_first(&f), 99);
        assert_eq!(f[99], 1.0);
        // runner-up gap bounded by the clamp: oracle from the clamped raw values
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let std = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let cap = mean + 2.0 * std;
        let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
        let runner = s[..99].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expected_gap = (cap - runner) / (cap - lo);
        let sorted_runner = f[..99].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(((1.0 - sorted_runner) - expected_gap).abs() < 1e-12);

        let z = z_filter(&s, 2.0, OutlierMode::Zero).unwrap();
        assert_eq!(z[99], 0.0);
    }

    #[test]
    fn overlay_examples() {
        let slide = RgbImage::from_fn(64, 32, |x, y| Rgb([(x * 3) as u8, (y * 5) as u8, 100]));
        let zero = Heatmap::from_tiles("s", (1, 2), 32, &[(0, 0), (0, 1)], &[0.0, 0.0]).unwrap();
        let out = render_overlay(&slide, &zero, None).unwrap();
        for (a, b) in out.pixels().zip(slide.pixels()) {
            assert_eq!(&a.0[..3], &b.0[..]);
        }

        let one = Heatmap::from_tiles("s", (1, 2), 32, &[(0, 1)], &[1.0]).unwrap();
        let out = render_overlay(&slide, &one, None).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            let src = slide.get_pixel(x, y);
            if x < 32 {
                assert_eq!(&p.0[..3], &src.0[..]);
            } else {
                assert_ne!(&p.0[..3], &src.0[..]);
                assert!(p.0[0] >= p.0[1]);
            }
        }

        let mask = [true, false];
        let out = render_overlay(&slide, &zero, Some(&mask)).unwrap();
        assert_eq!(*out.get_pixel(0, 10), OUTLINE);
        assert_eq!(*out.get_pixel(31, 10), OUTLINE);
        assert_ne!(*out.get_pixel(40, 10), OUTLINE);

        let wrong = RgbImage::new(60, 32);
        assert!(matches!(render_overlay(&wrong, &zero, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hit_rate_examples() {
        let truth = [0u8, 0, 1, 0];
        let perfect = [0.0, 0.0, 1.0, 0.0];
        assert_eq!(localization_hit_rate(&[(1, &perfect, &truth)]).unwrap(), 1.0);
        let uniform = [0.25; 4];
        assert_eq!(localization_hit_rate(&[(1, &uniform, &truth)]).unwrap(), 0.0);
        assert!(matches!(
            localization_hit_rate(&[(0, &uniform, &truth)]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn roc_dat_has_two_columns() {
        let c = roc_auc(&[0.9, 0.1], &[1, 0]).unwrap();
        let text = roc_dat(&c);
        assert!(text.lines().all(|l| l.split_whitespace().count() == 2));
        assert_eq!(text.lines().next(), Some("0.000000 0.000000"));
    }
}
