//! Macenko stain normalisation.
//!
//! Pixels are mapped to optical density `OD = -ln(I / 255)`. The two stain
//! directions are the angular extremes of the OD cloud projected on its
//! principal plane; every pixel is then decomposed into per-stain
//! concentrations, rescaled to the reference maxima, and re-rendered with the
//! reference stain vectors.

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optical density of an 8-bit channel value. Zero maps like one.
pub fn optical_density(value: u8) -> f64 {
    -(f64::from(value.max(1)) / 255.0).ln()
}

/// Inverse of [`optical_density`], rounded and clamped to `0..=255`.
pub fn od_to_channel(od: f64) -> u8 {
    (255.0 * (-od).exp()).round().clamp(0.0, 255.0) as u8
}

/// Two unit-norm OD stain vectors (hematoxylin, eosin) and the 99th percentile
/// concentration of each stain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainProfile {
    /// `stain_matrix[channel][stain]`, stain 0 = hematoxylin, 1 = eosin.
    pub stain_matrix: [[f64; 2]; 3],
    pub max_concentrations: [f64; 2],
}

impl StainProfile {
    /// Normalises both vectors and rejects colinear or non-positive input.
    pub fn new(hematoxylin: [f64; 3], eosin: [f64; 3], max_concentrations: [f64; 2]) -> Result<Self> {
        let h = Vector3::from(hematoxylin);
        let e = Vector3::from(eosin);
        if h.norm() == 0.0 || e.norm() == 0.0 {
            return Err(Error::Parameter("stain vectors must be non-zero".into()));
        }
        let (h, e) = (h.normalize(), e.normalize());
        if h.cross(&e).norm() < 1e-6 {
            return Err(Error::Parameter("stain vectors are colinear".into()));
        }
        if !(max_concentrations[0] > 0.0 && max_concentrations[1] > 0.0) {
            return Err(Error::Parameter("max concentrations must be positive".into()));
        }
        Ok(Self {
            stain_matrix: [[h[0], e[0]], [h[1], e[1]], [h[2], e[2]]],
            max_concentrations,
        })
    }

    /// Widely used H&E reference vectors and maxima.
    pub fn standard_he() -> Self {
        Self::new([0.5626, 0.7201, 0.4062], [0.2159, 0.8012, 0.5581], [1.9705, 1.0308])
            .expect("reference stains are valid")
    }

    pub fn stain(&self, k: usize) -> Vector3<f64> {
        Vector3::new(self.stain_matrix[0][k], self.stain_matrix[1][k], self.stain_matrix[2][k])
    }

    pub fn hematoxylin(&self) -> Vector3<f64> {
        self.stain(0)
    }

    pub fn eosin(&self) -> Vector3<f64> {
        self.stain(1)
    }

    /// Renders one pixel from stain concentrations.
    pub fn render(&self, concentrations: [f64; 2]) -> Rgb<u8> {
        let od = self.hematoxylin() * concentrations[0] + self.eosin() * concentrations[1];
        Rgb([od_to_channel(od[0]), od_to_channel(od[1]), od_to_channel(od[2])])
    }

    /// Least-squares concentrations of an OD vector in this basis.
    fn concentrations(&self, pinv: &nalgebra::Matrix2x3<f64>, od: &Vector3<f64>) -> [f64; 2] {
        let c = pinv * od;
        [c[0], c[1]]
    }

    fn pseudo_inverse(&self) -> Result<nalgebra::Matrix2x3<f64>> {
        let m = nalgebra::Matrix3x2::from_columns(&[self.hematoxylin(), self.eosin()]);
        let gram = m.transpose() * m;
        let inv = gram
            .try_inverse()
            .ok_or_else(|| Error::Validation("stain basis is singular".into()))?;
        Ok(inv * m.transpose())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacenkoParams {
    /// Pixels with OD below this in any channel are ignored when fitting.
    pub od_floor: f64,
    /// Angular percentile `alpha`; extremes are taken at `alpha` and `100 - alpha`.
    pub angular_percentile: f64,
    /// Fewer surviving pixels than this means no stable basis.
    pub min_pixels: usize,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self {
            od_floor: 0.15,
            angular_percentile: 1.0,
            min_pixels: 16,
        }
    }
}

/// Result of [`macenko_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub image: RgbImage,
    /// Set when the tile had no stable stain basis and was returned unchanged.
    pub degenerate: bool,
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 100]`.
pub(crate) fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn pixel_od(p: &Rgb<u8>) -> Vector3<f64> {
    Vector3::new(optical_density(p[0]), optical_density(p[1]), optical_density(p[2]))
}

/// Estimates a tile's stain profile; `None` when too few pixels carry stain.
pub fn estimate_stain_profile(tile: &RgbImage, params: &MacenkoParams) -> Option<StainProfile> {
    let od: Vec<Vector3<f64>> = tile.pixels().map(pixel_od).collect();
    let tissue: Vec<&Vector3<f64>> = od
        .iter()
        .filter(|v| v.iter().all(|c| *c >= params.od_floor))
        .collect();
    if tissue.len() < params.min_pixels.max(3) {
        return None;
    }

    let n = tissue.len() as f64;
    let mean = tissue.iter().fold(Vector3::zeros(), |acc, v| acc + **v) / n;
    let mut cov = Matrix3::zeros();
    for v in &tissue {
        let d = **v - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut major: Vector3<f64> = eig.eigenvectors.column(order[2]).into();
    let mut minor: Vector3<f64> = eig.eigenvectors.column(order[1]).into();
    if major.sum() < 0.0 {
        major = -major;
    }
    if minor[0] < 0.0 {
        minor = -minor;
    }

    let mut angles: Vec<f64> = tissue
        .iter()
        .map(|v| v.dot(&major).atan2(v.dot(&minor)))
        .collect();
    angles.sort_by(f64::total_cmp);
    let lo = percentile(&angles, params.angular_percentile);
    let hi = percentile(&angles, 100.0 - params.angular_percentile);
    let v_lo = minor * lo.cos() + major * lo.sin();
    let v_hi = minor * hi.cos() + major * hi.sin();
    // hematoxylin carries more red-channel density than eosin
    let (h, e) = if v_lo[0] > v_hi[0] { (v_lo, v_hi) } else { (v_hi, v_lo) };
    if h.cross(&e).norm() < 1e-6 {
        return None;
    }

    let basis = StainProfile {
        stain_matrix: [[h[0], e[0]], [h[1], e[1]], [h[2], e[2]]],
        max_concentrations: [1.0, 1.0],
    };
    let pinv = basis.pseudo_inverse().ok()?;
    let mut ch = Vec::with_capacity(od.len());
    let mut ce = Vec::with_capacity(od.len());
    for v in &od {
        let c = basis.concentrations(&pinv, v);
        ch.push(c[0]);
        ce.push(c[1]);
    }
    ch.sort_by(f64::total_cmp);
    ce.sort_by(f64::total_cmp);
    let max_c = [percentile(&ch, 99.0), percentile(&ce, 99.0)];
    if !(max_c[0] > 0.0 && max_c[1] > 0.0) {
        return None;
    }
    Some(StainProfile {
        max_concentrations: max_c,
        ..basis
    })
}

/// Maps a tile's stains onto `reference`. Tiles without a stable basis come
/// back unchanged with `degenerate` set.
pub fn macenko_normalize(tile: &RgbImage, reference: &StainProfile, params: &MacenkoParams) -> Normalized {
    let Some(source) = estimate_stain_profile(tile, params) else {
        return Normalized {
            image: tile.clone(),
            degenerate: true,
        };
    };
    let pinv = source.pseudo_inverse().expect("estimated basis is non-singular");
    let scale = [
        reference.max_concentrations[0] / source.max_concentrations[0],
        reference.max_concentrations[1] / source.max_concentrations[1],
    ];
    let mut out = RgbImage::new(tile.width(), tile.height());
    for (dst, src) in out.pixels_mut().zip(tile.pixels()) {
        let c = source.concentrations(&pinv, &pixel_od(src));
        *dst = reference.render([c[0] * scale[0], c[1] * scale[1]]);
    }
    Normalized {
        image: out,
        degenerate: false,
    }
}

/// Angle in degrees between two vectors.
pub fn angle_degrees(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Tile with pure-stain columns plus random mixtures, rendered from
    /// `profile`. Pure-stain densities stay above the OD floor in every channel.
    fn two_stain_tile(profile: &StainProfile, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(32, 32, |x, _y| {
            let c = match x % 8 {
                0 => [rng.random_range(0.6..1.5), 0.0],
                1 => [0.0, rng.random_range(0.8..1.5)],
                _ => [rng.random_range(0.1..1.2), rng.random_range(0.1..0.9)],
            };
            profile.render(c)
        })
    }

    fn max_channel_diff(a: &RgbImage, b: &RgbImage) -> u8 {
        a.pixels()
            .zip(b.pixels())
            .flat_map(|(p, q)| (0..3).map(move |k| p[k].abs_diff(q[k])))
            .max()
            .unwrap()
    }

    #[test]
    fn od_round_trip() {
        for v in 1..=255u8 {
            assert_eq!(od_to_channel(optical_density(v)), v);
        }
        assert_eq!(optical_density(255), 0.0);
    }

    #[test]
    fn profile_rejects_colinear_vectors() {
        assert!(StainProfile::new([1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [1.0, 1.0]).is_err());
        let p = StainProfile::standard_he();
        assert!((p.hematoxylin().norm() - 1.0).abs() < 1e-12);
        assert!((p.eosin().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_known_stain_vectors() {
        let truth = StainProfile::new([0.65, 0.70, 0.29], [0.20, 0.85, 0.48], [1.0, 1.0]).unwrap();
        for seed in 0..5 {
            let tile = two_stain_tile(&truth, seed);
            let est = estimate_stain_profile(&tile, &MacenkoParams::default()).unwrap();
            let eh = angle_degrees(&est.hematoxylin(), &truth.hematoxylin());
            let ee = angle_degrees(&est.eosin(), &truth.eosin());
            assert!(eh < 2.0 && ee < 2.0, "seed {seed}: H {eh:.3} deg, E {ee:.3} deg");
        }
    }

    #[test]
    fn white_tile_is_degenerate() {
        let tile = RgbImage::from_pixel(32, 32, Rgb([255, 255, 255]));
        let out = macenko_normalize(&tile, &StainProfile::standard_he(), &MacenkoParams::default());
        assert!(out.degenerate);
        assert_eq!(out.image, tile);
    }

    #[test]
    fn tile_rendered_from_reference_is_a_fixed_point() {
        let params = MacenkoParams::default();
        let truth = StainProfile::standard_he();
        let tile = two_stain_tile(&truth, 3);
        let reference = estimate_stain_profile(&tile, &params).unwrap();
        let out = macenko_normalize(&tile, &reference, &params);
        assert!(!out.degenerate);
        assert!(max_channel_diff(&out.image, &tile) <= 1);
    }

    #[test]
    fn normalisation_is_idempotent() {
        let params = MacenkoParams::default();
        let reference = StainProfile::standard_he();
        let source = StainProfile::new([0.70, 0.66, 0.27], [0.25, 0.90, 0.40], [1.0, 1.0]).unwrap();
        for seed in 0..4 {
            let tile = two_stain_tile(&source, 100 + seed);
            let once = macenko_normalize(&tile, &reference, &params);
            let twice = macenko_normalize(&once.image, &reference, &params);
            let d = max_channel_diff(&once.image, &twice.image);
            assert!(d <= 1, "seed {seed}: max diff {d}");
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert_eq!(percentile(&v, 50.0), 2.0);
        assert!((percentile(&v, 10.0) - 0.4).abs() < 1e-12);
    }
}
