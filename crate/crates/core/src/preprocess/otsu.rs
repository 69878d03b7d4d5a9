//! Otsu threshold over an 8-bit intensity histogram.

use crate::error::{Error, Result};

pub type Histogram = [u64; 256];

/// Builds a 256-bin histogram from 8-bit samples.
pub fn histogram(samples: impl IntoIterator<Item = u8>) -> Histogram {
    let mut h = [0u64; 256];
    for s in samples {
        h[s as usize] += 1;
    }
    h
}

/// Between-class variance `w0 * w1 * (mu0 - mu1)^2` for the split
/// `{0..=t} | {t+1..=255}`, from the class counts and intensity sums.
///
/// Returns 0 when either class is empty.
pub fn between_class_variance(count0: u64, sum0: u64, total: u64, total_sum: u64) -> f64 {
    let count1 = total - count0;
    if count0 == 0 || count1 == 0 {
        return 0.0;
    }
    let n = total as f64;
    let w0 = count0 as f64 / n;
    let w1 = count1 as f64 / n;
    let mu0 = sum0 as f64 / count0 as f64;
    let mu1 = (total_sum - sum0) as f64 / count1 as f64;
    w0 * w1 * (mu0 - mu1) * (mu0 - mu1)
}

/// Threshold `t` maximising the between-class variance; the smallest `t`
/// wins ties. Pixels `<= t` form the lower class.
pub fn otsu_threshold(hist: &Histogram) -> Result<u8> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::Validation("otsu_threshold: empty histogram".into()));
    }
    let total_sum: u64 = hist.iter().enumerate().map(|(i, c)| i as u64 * c).sum();
    let mut best_t = 0u8;
    let mut best = f64::NEG_INFINITY;
    let (mut count0, mut sum0) = (0u64, 0u64);
    for (t, &c) in hist.iter().enumerate() {
        count0 += c;
        sum0 += t as u64 * c;
        let v = between_class_variance(count0, sum0, total, total_sum);
        if v > best {
            best = v;
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Recomputes both class statistics from scratch for every threshold.
    fn exhaustive(hist: &Histogram) -> u8 {
        let total: u64 = hist.iter().sum();
        let total_sum: u64 = hist.iter().enumerate().map(|(i, c)| i as u64 * c).sum();
        let mut best = (f64::NEG_INFINITY, 0u8);
        for t in 0..256usize {
            let count0: u64 = hist[..=t].iter().sum();
            let sum0: u64 = hist[..=t].iter().enumerate().map(|(i, c)| i as u64 * c).sum();
            let v = between_class_variance(count0, sum0, total, total_sum);
            if v > best.0 {
                best = (v, t as u8);
            }
        }
        best.1
    }

    #[test]
    fn two_delta_peaks_pick_lower_peak() {
        let mut h = [0u64; 256];
        h[50] = 1000;
        h[200] = 1000;
        assert_eq!(otsu_threshold(&h).unwrap(), 50);
        assert_eq!(exhaustive(&h), 50);
    }

    #[test]
    fn single_bin_returns_zero() {
        let mut h = [0u64; 256];
        h[137] = 42;
        assert_eq!(otsu_threshold(&h).unwrap(), 0);
    }

    #[test]
    fn empty_histogram_is_an_error() {
        assert!(otsu_threshold(&[0; 256]).is_err());
    }

    #[test]
    fn bimodal_image_separates_modes() {
        let samples = (0..500).map(|i| 40 + (i % 20) as u8).chain((0..500).map(|i| 180 + (i % 30) as u8));
        let t = otsu_threshold(&histogram(samples)).unwrap();
        assert!((59..180).contains(&t), "{t}");
    }

    #[test]
    fn matches_exhaustive_search_on_random_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0751);
        for _ in 0..1000 {
            let sparsity: f64 = rng.random_range(0.0..0.95);
            let mut h = [0u64; 256];
            for c in h.iter_mut() {
                if rng.random::<f64>() >= sparsity {
                    *c = rng.random_range(0..5000);
                }
            }
            if h.iter().sum::<u64>() == 0 {
                h[rng.random_range(0..256)] = 1;
            }
            assert_eq!(otsu_threshold(&h).unwrap(), exhaustive(&h));
        }
    }

    proptest! {
        #[test]
        fn property_matches_exhaustive(counts in prop::collection::vec(0u64..100_000, 256)) {
            let mut h = [0u64; 256];
            h.copy_from_slice(&counts);
            prop_assume!(h.iter().sum::<u64>() > 0);
            prop_assert_eq!(otsu_threshold(&h).unwrap(), exhaustive(&h));
        }
    }
}
