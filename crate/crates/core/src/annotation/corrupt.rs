//! Label corruption for the robustness study.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case", tag = "mode"))]
pub enum CorruptionMode {
    /// Shuffle labels among the selected positions (label multiset preserved).
    #[default]
    Permute,
    /// Replace each selected label with a uniform draw from `0..num_clusters`.
    Resample { num_clusters: usize },
}

/// Picks `⌊fraction·N⌋` positions uniformly without replacement and shuffles
/// the labels found there.
pub fn corrupt_assignments<R: Rng + ?Sized>(labels: &[usize], fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    corrupt_assignments_with(labels, fraction, CorruptionMode::Permute, rng)
}

pub fn corrupt_assignments_with<R: Rng + ?Sized>(
    labels: &[usize],
    fraction: f64,
    mode: CorruptionMode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig("corruption fraction must lie in [0, 1]".into()));
    }
    let n = labels.len();
    let count = libm::floor(fraction * n as f64) as usize;
    let mut out = labels.to_vec();
    if count == 0 {
        return Ok(out);
    }
    let picked = sample(rng, n, count).into_vec();
    match mode {
        CorruptionMode::Permute => {
            let mut vals: Vec<usize> = picked.iter().map(|&i| labels[i]).collect();
            vals.shuffle(rng);
            for (&i, v) in picked.iter().zip(vals) {
                out[i] = v;
            }
        }
        CorruptionMode::Resample { num_clusters } => {
            if num_clusters == 0 {
                return Err(Error::InvalidConfig("resampling needs at least one cluster".into()));
            }
            for &i in &picked {
                out[i] = rng.random_range(0..num_clusters);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort_unstable();
        v
    }

    #[test]
    fn endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<usize> = (0..50).map(|i| i % 7).collect();
        assert_eq!(corrupt_assignments(&labels, 0.0, &mut rng).unwrap(), labels);
        let all = corrupt_assignments(&labels, 1.0, &mut rng).unwrap();
        assert_eq!(sorted(all), sorted(labels.clone()));
        assert!(corrupt_assignments(&labels, 1.5, &mut rng).is_err());
    }

    #[test]
    fn changed_fraction_matches_derangement_rate() {
        // Distinct labels: a selected position keeps its label only if the shuffle
        // fixes it. For a uniform permutation of m items the expected number of
        // fixed points is 1 with variance 1, so changed ≈ m - 1 ± 3.
        let n = 10_000;
        let labels: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut total_changed = 0.0;
        let trials = 20;
        for _ in 0..trials {
            let out = corrupt_assignments(&labels, 0.25, &mut rng).unwrap();
            let changed = out.iter().zip(&labels).filter(|(a, b)| a != b).count();
            assert!(changed <= 2500);
            assert!(2500 - changed <= 8, "fixed points {}", 2500 - changed);
            total_changed += changed as f64;
        }
        let mean_fixed = 2500.0 - total_changed / trials as f64;
        // Mean of 20 Poisson(1)-like counts: sd ≈ 1/sqrt(20).
        assert!((mean_fixed - 1.0).abs() < 3.0 / libm::sqrt(trials as f64), "{mean_fixed}");
    }

    #[test]
    fn resample_mode_stays_in_range() {
        let labels = vec![0usize; 1000];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = corrupt_assignments_with(&labels, 0.5, CorruptionMode::Resample { num_clusters: 4 }, &mut rng).unwrap();
        assert!(out.iter().all(|&l| l < 4));
        let moved = out.iter().filter(|&&l| l != 0).count();
        // 500 resampled, 3/4 of them land elsewhere.
        assert!((moved as f64 - 375.0).abs() < 3.0 * libm::sqrt(500.0 * 0.75 * 0.25));
    }
}
