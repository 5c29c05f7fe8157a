//! Box and segmentation proposals from patch features.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use super::features::{FeatureMatrix, PatchFeatureExtractor};
use super::kmeans::{assign_cluster, ClusterModel};
use super::mask::{Mask, Rect};
use crate::error::{Error, Result};
use crate::image::Image;

/// Similarity threshold applied to zero-centred patch correlations.
pub const BOX_THRESHOLD: f64 = 0.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Single-object box proposal.
///
/// Patch features are centred on their mean. The seed is the patch with the
/// fewest positively correlated patches; the region is the 4-connected
/// component around it whose similarity to the seed exceeds the threshold. A
/// uniform image (all centred features zero) yields the full-image box.
pub fn propose_box<E: PatchFeatureExtractor + ?Sized>(image: &Image, extractor: &E) -> Mask {
    let (h, w) = (image.height, image.width);
    let grid = extractor.extract_patches(image);
    let ps = extractor.patch_size();
    let n = grid.rows * grid.cols;
    let full = Mask::from_rect(h, w, Rect { y0: 0, y1: h, x0: 0, x1: w });
    if n == 0 {
        return full;
    }
    let centred = centre(&grid.features);
    let norms: Vec<f64> = centred.iter().map(|r| dot(r, r)).collect();
    let scale = norms.iter().copied().fold(0.0, f64::max);
    if scale <= 1e-12 {
        return full;
    }
    // Patches sitting exactly at the mean carry no signal and cannot seed.
    let live = |i: usize| norms[i] > 1e-9 * scale;
    let sim = |i: usize, j: usize| dot(centred.row(i), centred.row(j));
    let mut seed = None;
    let mut fewest = usize::MAX;
    for i in (0..n).filter(|&i| live(i)) {
        let degree = (0..n).filter(|&j| sim(i, j) > BOX_THRESHOLD).count();
        if degree < fewest {
            fewest = degree;
            seed = Some(i);
        }
    }
    let Some(seed) = seed else { return full };

    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([seed]);
    seen[seed] = true;
    let (mut r0, mut r1, mut c0, mut c1) = (seed / grid.cols, seed / grid.cols, seed % grid.cols, seed % grid.cols);
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / grid.cols, i % grid.cols);
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
        let mut visit = |rr: usize, cc: usize| {
            let j = rr * grid.cols + cc;
            if !seen[j] && sim(seed, j) > BOX_THRESHOLD {
                seen[j] = true;
                queue.push_back(j);
            }
        };
        if r > 0 {
            visit(r - 1, c);
        }
        if r + 1 < grid.rows {
            visit(r + 1, c);
        }
        if c > 0 {
            visit(r, c - 1);
        }
        if c + 1 < grid.cols {
            visit(r, c + 1);
        }
    }
    // Patches on the last row/column absorb any leftover pixels.
    let y1 = if r1 + 1 == grid.rows { h } else { (r1 + 1) * ps };
    let x1 = if c1 + 1 == grid.cols { w } else { (c1 + 1) * ps };
    Mask::from_rect(h, w, Rect { y0: r0 * ps, y1, x0: c0 * ps, x1 })
}

fn centre(f: &FeatureMatrix) -> FeatureMatrix {
    let (n, d) = (f.rows(), f.dim());
    let mut mean = vec![0.0; d];
    for r in f.iter() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let data = f.iter().flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m)).collect();
    FeatureMatrix::new(d, data).expect("same shape")
}

/// Patch-wise nearest-centroid segmentation, upsampled to pixels.
pub fn propose_segmentation<E: PatchFeatureExtractor + ?Sized>(
    image: &Image,
    extractor: &E,
    k: usize,
    model: &ClusterModel,
) -> Result<Mask> {
    if model.k() != k {
        return Err(Error::DimensionMismatch { expected: k, actual: model.k() });
    }
    let (h, w) = (image.height, image.width);
    let mut mask = Mask::zeros(k, h, w);
    if k == 1 {
        mask.data.fill(1);
        return Ok(mask);
    }
    let grid = extractor.extract_patches(image);
    if grid.rows == 0 || grid.cols == 0 {
        return Err(Error::InvalidConfig("image smaller than one patch".into()));
    }
    let labels = grid.features.iter().map(|f| assign_cluster(f, model)).collect::<Result<Vec<_>>>()?;
    let ps = extractor.patch_size();
    for y in 0..h {
        for x in 0..w {
            let (r, c) = ((y / ps).min(grid.rows - 1), (x / ps).min(grid.cols - 1));
            mask.set(labels[r * grid.cols + c], y, x, 1);
        }
    }
    Ok(mask)
}

/// Stacks the patch features of every image into one matrix (for fitting a
/// pixel-level cluster model).
pub fn collect_patch_features<E: PatchFeatureExtractor + ?Sized>(images: &[Image], extractor: &E) -> FeatureMatrix {
    let mut all = FeatureMatrix::empty(extractor.dim());
    for img in images {
        for row in extractor.extract_patches(img).features.iter() {
            all.push(row).expect("fixed dim");
        }
    }
    all
}
