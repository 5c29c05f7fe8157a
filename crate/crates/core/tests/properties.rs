//! Property tests for the numerical core.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgdm_core::annotation::{
    assign_cluster, corrupt_assignments, kmeans_fit, kmeans_objective, mask_to_multihot, nmi, ClusterModel, FeatureMatrix, Mask,
};
use sgdm_core::denoiser::{GuidanceSignal, Tensor};
use sgdm_core::diffusion::{guided_epsilon, mix_guidance, NoisePredictor, NoiseSchedule};
use sgdm_core::metrics::{frechet_distance, inception_score, FeatureStats};
use sgdm_core::optim::ema_update;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 64, ..ProptestConfig::default() }
}

fn psd(dim: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(dim, dim, &entries[..dim * dim]);
    &a * a.transpose()
}

fn stats(dim: usize, mean: &[f64], cov: &[f64]) -> FeatureStats {
    FeatureStats { mean: DVector::from_column_slice(&mean[..dim]), covariance: psd(dim, cov), count: 100 }
}

/// Random orthogonal matrix from the QR factorisation of a random matrix.
fn rotation(dim: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(dim, dim, &entries[..dim * dim]) + DMatrix::identity(dim, dim) * 3.0;
    a.qr().q()
}

/// Label-dependent affine predictor: ε = 0.5·x + label offset.
struct Affine;

impl NoisePredictor<f64> for Affine {
    fn image_shape(&self) -> [usize; 3] {
        [3, 2, 2]
    }

    fn predict_noise(&self, x: &Tensor<f64>, _t: &[usize], g: &[GuidanceSignal]) -> sgdm_core::Result<Tensor<f64>> {
        let per = x.len() / x.batch();
        let mut out = Vec::with_capacity(x.len());
        for (i, sig) in g.iter().enumerate() {
            let off: f64 = sig.label().iter().enumerate().map(|(j, &v)| (j as f64 + 1.0) * v as f64).sum();
            out.extend(x.item(i).iter().map(|&v| 0.5 * v + off));
        }
        debug_assert_eq!(out.len(), per * x.batch());
        Tensor::new(x.shape(), out)
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn alpha_bar_in_unit_interval(steps in 2usize..400, lo in 1e-5f64..1e-3, span in 1e-4f64..0.05) {
        let s = NoiseSchedule::linear(steps, lo, lo + span).unwrap();
        for w in s.alpha_bars().windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn guidance_is_affine_in_w(w in 0.0f64..4.0, seed in any::<u64>(), cluster in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f64> = sgdm_core::diffusion::standard_normal(&[2, 3, 2, 2], &mut rng);
        let g = vec![GuidanceSignal::one_hot(cluster, 3).unwrap(); 2];
        let t = [5, 7];
        let e0 = guided_epsilon(&Affine, &x, &t, &g, 0.0).unwrap();
        let e1 = guided_epsilon(&Affine, &x, &t, &g, 1.0).unwrap();
        let ew = guided_epsilon(&Affine, &x, &t, &g, w).unwrap();
        let expected = mix_guidance(e0.data(), e1.data(), w);
        prop_assert_eq!(ew.data(), &expected[..]);
        for ((&a, &b), &c) in e0.data().iter().zip(e1.data()).zip(ew.data()) {
            prop_assert!((c - (a + w * (b - a))).abs() <= 1e-12 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn frechet_symmetric_nonnegative_rotation_invariant(
        dim in 1usize..5,
        m1 in prop::collection::vec(-2.0f64..2.0, 4),
        m2 in prop::collection::vec(-2.0f64..2.0, 4),
        c1 in prop::collection::vec(-1.0f64..1.0, 16),
        c2 in prop::collection::vec(-1.0f64..1.0, 16),
        r in prop::collection::vec(-1.0f64..1.0, 16),
    ) {
        let (a, b) = (stats(dim, &m1, &c1), stats(dim, &m2, &c2));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
        let q = rotation(dim, &r);
        let rot = frechet_distance(&a.transformed(&q), &b.transformed(&q)).unwrap();
        prop_assert!((rot - ab).abs() <= 1e-6 * (1.0 + ab), "{} vs {}", rot, ab);
    }

    #[test]
    fn inception_score_bounded(k in 2usize..6, n in 2usize..30, raw in prop::collection::vec(0.0f64..1.0, 180)) {
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let row: Vec<f64> = (0..k).map(|j| raw[i * k + j] + 1e-3).collect();
                let z: f64 = row.iter().sum();
                row.into_iter().map(|v| v / z).collect()
            })
            .collect();
        let (mean, _) = inception_score(&probs, 1).unwrap();
        prop_assert!(mean >= 1.0 - 1e-12 && mean <= k as f64 + 1e-12);
    }

    #[test]
    fn kmeans_objective_monotone(n in 3usize..40, k in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rand::Rng::random::<f64>(&mut rng), rand::Rng::random::<f64>(&mut rng)]).collect();
        let fm = FeatureMatrix::from_rows(&rows).unwrap();
        let fit = kmeans_fit(&fm, k.min(n), 50, &mut rng).unwrap();
        for w in fit.objective_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", fit.objective_history);
        }
        let last = *fit.objective_history.last().unwrap();
        prop_assert!((kmeans_objective(&fm, &fit.model, &fit.assignments) - last).abs() <= 1e-9);
    }

    #[test]
    fn assignment_invariant_under_monotone_distance_transform(
        centroids in prop::collection::vec(-3.0f64..3.0, 6),
        x in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        prop_assume!((0..3).all(|i| (0..i).all(|j| centroids[2 * i..2 * i + 2] != centroids[2 * j..2 * j + 2])));
        let model = ClusterModel::from_centroids(3, 2, centroids.clone()).unwrap();
        let got = assign_cluster(&x, &model).unwrap();
        // Argmin over plain (unsquared) Euclidean distance.
        let dist = |j: usize| ((x[0] - centroids[2 * j]).powi(2) + (x[1] - centroids[2 * j + 1]).powi(2)).sqrt();
        let best = (0..3).fold(0, |b, j| if dist(j) < dist(b) { j } else { b });
        prop_assert!(dist(got) <= dist(best) + 1e-12);
    }

    #[test]
    fn corruption_preserves_multiset(labels in prop::collection::vec(0usize..5, 0..60), fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = corrupt_assignments(&labels, fraction, &mut rng).unwrap();
        let (mut a, mut b) = (labels.clone(), out.clone());
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        let changed = labels.iter().zip(&out).filter(|(x, y)| x != y).count();
        prop_assert!(changed <= (fraction * labels.len() as f64).floor() as usize);
    }

    #[test]
    fn multihot_matches_scan_and_is_monotone(
        channels in 1usize..5, h in 1usize..6, w in 1usize..6,
        bits in prop::collection::vec(any::<bool>(), 150),
        extra in 0usize..150,
    ) {
        let n = channels * h * w;
        let data: Vec<u8> = bits[..n].iter().map(|&b| b as u8).collect();
        let m = Mask::new(channels, h, w, data.clone()).unwrap();
        let hot = mask_to_multihot(&m);
        for c in 0..channels {
            let any = (0..h * w).any(|p| data[c * h * w + p] == 1);
            prop_assert_eq!(hot[c], any as u8);
        }
        let mut more = data;
        more[extra % n] = 1;
        let hot2 = mask_to_multihot(&Mask::new(channels, h, w, more).unwrap());
        prop_assert!(hot.iter().zip(&hot2).all(|(a, b)| a <= b));
    }

    #[test]
    fn nmi_symmetric_bounded_relabel_invariant(
        pairs in prop::collection::vec((0usize..4, 0usize..5), 1..80),
        perm_seed in any::<u64>(),
    ) {
        let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let ab = nmi(&a, &b).unwrap();
        prop_assert!((ab - nmi(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ab));
        let mut perm: Vec<usize> = (0..4).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let relabeled: Vec<usize> = a.iter().map(|&x| perm[x]).collect();
        prop_assert!((nmi(&relabeled, &b).unwrap() - ab).abs() <= 1e-12);
    }

    #[test]
    fn ema_stays_in_hull(values in prop::collection::vec(-5.0f64..5.0, 1..30), decay in 0.0f64..1.0, start in -5.0f64..5.0) {
        let mut shadow = [Tensor::new(&[1], vec![start]).unwrap()];
        let (mut lo, mut hi) = (start, start);
        for v in values {
            ema_update(&mut shadow, &[Tensor::new(&[1], vec![v]).unwrap()], decay).unwrap();
            lo = lo.min(v);
            hi = hi.max(v);
            let s = shadow[0].data()[0];
            prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        }
    }
}
