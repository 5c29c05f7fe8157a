//! k-means with k-means++ seeding.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::features::FeatureMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClusterModel {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
}

impl ClusterModel {
    /// Builds a model from a flat `k × dim` centroid matrix. Centroids must be distinct.
    pub fn from_centroids(k: usize, dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::InvalidConfig("cluster model needs k >= 1 and dim >= 1".into()));
        }
        if centroids.len() != k * dim {
            return Err(Error::DimensionMismatch { expected: k * dim, actual: centroids.len() });
        }
        let m = Self { k, dim, centroids };
        for i in 0..k {
            for j in 0..i {
                if m.centroid(i) == m.centroid(j) {
                    return Err(Error::InvalidConfig("duplicate centroids".into()));
                }
            }
        }
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub assignments: Vec<usize>,
    /// Objective after seeding and after every Lloyd iteration.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Nearest centroid by Euclidean distance; ties go to the lowest index.
pub fn assign_cluster(feature: &[f64], model: &ClusterModel) -> Result<usize> {
    if feature.len() != model.dim {
        return Err(Error::DimensionMismatch { expected: model.dim, actual: feature.len() });
    }
    Ok(nearest(feature, &model.centroids, model.dim).0)
}

pub fn assign_all(features: &FeatureMatrix, model: &ClusterModel) -> Result<Vec<usize>> {
    if features.dim() != model.dim {
        return Err(Error::DimensionMismatch { expected: model.dim, actual: features.dim() });
    }
    Ok(assign_rows(features, &model.centroids).into_iter().map(|(j, _)| j).collect())
}

#[cfg(feature = "parallel")]
fn assign_rows(features: &FeatureMatrix, centroids: &[f64]) -> Vec<(usize, f64)> {
    use rayon::prelude::*;
    let dim = features.dim();
    features.data().par_chunks(dim).map(|x| nearest(x, centroids, dim)).collect()
}

#[cfg(not(feature = "parallel"))]
fn assign_rows(features: &FeatureMatrix, centroids: &[f64]) -> Vec<(usize, f64)> {
    let dim = features.dim();
    features.iter().map(|x| nearest(x, centroids, dim)).collect()
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn kmeans_objective(features: &FeatureMatrix, model: &ClusterModel, assignments: &[usize]) -> f64 {
    features.iter().zip(assignments).map(|(x, &j)| sq_dist(x, model.centroid(j))).sum()
}

fn plusplus_init<R: Rng + ?Sized>(features: &FeatureMatrix, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let n = features.rows();
    let dim = features.dim();
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(features.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = features.iter().map(|x| sq_dist(x, &centroids[..dim])).collect();
    let mut distinct = 1;
    while distinct < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::NotEnoughPoints { needed: k, got: distinct });
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
        }
        let i = pick.expect("total > 0 implies a positive weight");
        let start = centroids.len();
        centroids.extend_from_slice(features.row(i));
        for (x, d) in features.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(x, &centroids[start..]));
        }
        distinct += 1;
    }
    Ok(centroids)
}

/// Fits `k` clusters with k-means++ seeding followed by at most `max_iters`
/// Lloyd iterations, stopping early once assignments stop changing.
pub fn kmeans_fit<R: Rng + ?Sized>(
    features: &FeatureMatrix,
    k: usize,
    max_iters: usize,
    rng: &mut R,
) -> Result<KMeansFit> {
    let n = features.rows();
    let dim = features.dim();
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::NotEnoughPoints { needed: k, got: n });
    }
    let mut centroids = plusplus_init(features, k, rng)?;
    let mut assign: Vec<usize> = assign_rows(features, &centroids).into_iter().map(|p| p.0).collect();
    let objective = |c: &[f64], a: &[usize]| -> f64 {
        features.iter().zip(a).map(|(x, &j)| sq_dist(x, &c[j * dim..(j + 1) * dim])).sum()
    };
    let mut history = vec![objective(&centroids, &assign)];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        // Update step, summed in index order so results do not depend on threading.
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (x, &j) in features.iter().zip(&assign) {
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(x) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..]) {
                    *c = s * inv;
                }
            }
        }
        // Re-seed empty clusters at the point farthest from its own centroid.
        let mut taken = vec![false; n];
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let mut far = (usize::MAX, -1.0);
            for (i, x) in features.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let d = sq_dist(x, &centroids[assign[i] * dim..(assign[i] + 1) * dim]);
                if d > far.1 {
                    far = (i, d);
                }
            }
            if far.0 == usize::MAX {
                break;
            }
            taken[far.0] = true;
            centroids[j * dim..(j + 1) * dim].copy_from_slice(features.row(far.0));
            assign[far.0] = j;
        }
        let next: Vec<usize> = assign_rows(features, &centroids).into_iter().map(|p| p.0).collect();
        history.push(objective(&centroids, &next));
        let stable = next == assign;
        assign = next;
        if stable {
            break;
        }
    }
    // Guard the distinct-centroid invariant; coincident means only arise from
    // degenerate data and are nudged apart by reusing the seeding rule.
    let model = match ClusterModel::from_centroids(k, dim, centroids.clone()) {
        Ok(m) => m,
        Err(_) => {
            dedup_centroids(features, &mut centroids, k, dim);
            ClusterModel::from_centroids(k, dim, centroids)?
        }
    };
    let assignments = assign_all(features, &model)?;
    Ok(KMeansFit { model, assignments, objective_history: history, iterations })
}

/// Best of `restarts` independent [`kmeans_fit`] runs by final objective
/// (earliest run on ties). Runs draw from `rng` in sequence.
pub fn kmeans_fit_best<R: Rng + ?Sized>(
    features: &FeatureMatrix,
    k: usize,
    max_iters: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<KMeansFit> {
    let mut best = kmeans_fit(features, k, max_iters, rng)?;
    let mut best_obj = kmeans_objective(features, &best.model, &best.assignments);
    for _ in 1..restarts {
        let fit = kmeans_fit(features, k, max_iters, rng)?;
        let obj = kmeans_objective(features, &fit.model, &fit.assignments);
        if obj < best_obj {
            best = fit;
            best_obj = obj;
        }
    }
    Ok(best)
}

fn dedup_centroids(features: &FeatureMatrix, centroids: &mut [f64], k: usize, dim: usize) {
    for j in 1..k {
        let dup = (0..j).any(|i| centroids[i * dim..(i + 1) * dim] == centroids[j * dim..(j + 1) * dim]);
        if !dup {
            continue;
        }
        // Farthest point from every existing centroid.
        let mut far = (0, -1.0);
        for (i, x) in features.iter().enumerate() {
            let d = nearest(x, centroids, dim).1;
            if d > far.1 {
                far = (i, d);
            }
        }
        centroids[j * dim..(j + 1) * dim].copy_from_slice(features.row(far.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(rows: &[[f64; 2]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn single_cluster_is_mean() {
        let f = pts(&[[0.0, 0.0], [2.0, 4.0], [4.0, 2.0]]);
        let fit = kmeans_fit(&f, 1, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(fit.model.centroid(0), &[2.0, 2.0]);
    }

    #[test]
    fn two_points_two_clusters() {
        let f = pts(&[[-5.0, 1.0], [7.0, 3.0]]);
        let fit = kmeans_fit(&f, 2, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut cs = [fit.model.centroid(0).to_vec(), fit.model.centroid(1).to_vec()];
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(cs, [vec![-5.0, 1.0], vec![7.0, 3.0]]);
    }

    #[test]
    fn objective_matches_exhaustive_partition() {
        let raw = [[0.0, 0.0], [0.5, 0.2], [0.1, 0.9], [5.0, 5.0], [5.5, 4.2], [4.8, 5.9]];
        let f = pts(&raw);
        // Brute force over all 2-partitions with both sides non-empty.
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << 6) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<&[f64; 2]> = raw.iter().enumerate().filter(|(i, _)| ((mask >> i) & 1 == 1) == side).map(|(_, p)| p).collect();
                let m = members.len() as f64;
                let mean = [members.iter().map(|p| p[0]).sum::<f64>() / m, members.iter().map(|p| p[1]).sum::<f64>() / m];
                cost += members.iter().map(|p| sq_dist(*p, &mean)).sum::<f64>();
            }
            best = best.min(cost);
        }
        for seed in 0..5 {
            let fit = kmeans_fit(&f, 2, 50, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let obj = kmeans_objective(&f, &fit.model, &fit.assignments);
            assert!((obj - best).abs() < 1e-9, "seed {seed}: {obj} vs {best}");
        }
    }

    #[test]
    fn too_few_points() {
        let f = pts(&[[0.0, 0.0]]);
        assert!(matches!(kmeans_fit(&f, 2, 5, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::NotEnoughPoints { .. })));
        let dup = pts(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]);
        assert!(kmeans_fit(&dup, 2, 5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(kmeans_fit_best(&dup, 2, 5, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn assignment_rules() {
        let m = ClusterModel::from_centroids(4, 1, vec![10.0, 0.0, 20.0, 2.0]).unwrap();
        assert_eq!(assign_cluster(&[20.0], &m).unwrap(), 2);
        // Equidistant to centroids 1 and 3.
        assert_eq!(assign_cluster(&[1.0], &m).unwrap(), 1);
        assert!(assign_cluster(&[1.0, 2.0], &m).is_err());
        assert!(ClusterModel::from_centroids(2, 1, vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn assignment_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cents: Vec<f64> = (0..5 * 3).map(|_| rng.random::<f64>()).collect();
        let m = ClusterModel::from_centroids(5, 3, cents.clone()).unwrap();
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let dists: Vec<f64> = cents.chunks(3).map(|c| libm::sqrt(sq_dist(&x, c))).collect();
            let oracle = (0..5).fold(0, |b, j| if dists[j] < dists[b] { j } else { b });
            assert_eq!(assign_cluster(&x, &m).unwrap(), oracle);
        }
    }

    #[test]
    fn restarts_never_lose_to_the_first_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..50 {
            let rows: Vec<[f64; 2]> = (0..7).map(|_| [rng.random(), rng.random()]).collect();
            let f = pts(&rows);
            let one = kmeans_fit(&f, 2, 50, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let best = kmeans_fit_best(&f, 2, 50, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let obj = |fit: &KMeansFit| kmeans_objective(&f, &fit.model, &fit.assignments);
            assert!(obj(&best) <= obj(&one));
        }
    }
}
