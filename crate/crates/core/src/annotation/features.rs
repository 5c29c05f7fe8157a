//! Feature extraction interfaces and the built-in toy extractors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::Image;

/// Row-major `N × C` matrix of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch { expected: dim, actual: data.len() });
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().ok_or(Error::EmptyInput)?.as_ref().len();
        let mut m = Self::empty(dim);
        for r in rows {
            m.push(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: row.len() });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Scales every row to unit Euclidean norm (zero rows stay zero).
    pub fn l2_normalized(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.dim) {
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Self { dim: self.dim, data }
    }
}

/// Image-level embedding `g: R^{W×H×3} → R^C`.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, image: &Image) -> Vec<f64>;

    fn extract_all(&self, images: &[Image]) -> FeatureMatrix {
        let mut m = FeatureMatrix::empty(self.dim());
        for img in images {
            m.push(&self.extract(img)).expect("extractor dimension is fixed");
        }
        m
    }
}

/// Patch features on a `rows × cols` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub features: FeatureMatrix,
}

impl PatchGrid {
    pub fn at(&self, r: usize, c: usize) -> &[f64] {
        self.features.row(r * self.cols + c)
    }
}

/// Patch-level embedding `g: R^{W×H×3} → R^{W'×H'×C}`.
pub trait PatchFeatureExtractor {
    fn dim(&self) -> usize;
    /// Side length in pixels of one patch.
    fn patch_size(&self) -> usize;
    fn extract_patches(&self, image: &Image) -> PatchGrid;
}

/// Hand-made image descriptor for the synthetic corpus.
///
/// The background colour is the per-channel median of the border pixels;
/// pixels differing from it by more than `threshold` in some channel are
/// foreground. Layout:
///
/// - `3·bins` soft histograms of foreground colour, one per channel, each
///   summing to one (zero when there is no foreground),
/// - background colour (3),
/// - foreground fraction, fill ratio of its bounding box, and the box's
///   relative height and width, scaled by 1/2 (4),
/// - foreground occupancy of a `grid × grid` layout, scaled by 1/4.
///
/// Colour dominates so that images of one colour class stay close whatever
/// the size and position of the shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyExtractor {
    pub bins: usize,
    pub grid: usize,
    pub threshold: f64,
}

impl Default for ToyExtractor {
    /// 16 bins and a 4×4 grid: 48 + 3 + 4 + 16 = 71 features.
    fn default() -> Self {
        Self { bins: 16, grid: 4, threshold: 0.25 }
    }
}

const SHAPE_WEIGHT: f64 = 0.5;
const GRID_WEIGHT: f64 = 0.25;

impl ToyExtractor {
    pub fn histogram_dim(&self) -> usize {
        3 * self.bins
    }

    /// Per-channel median of the border pixels.
    pub fn background(image: &Image) -> [f64; 3] {
        let (h, w) = (image.height, image.width);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate().take(image.channels) {
            let mut border: Vec<f32> = (0..h * w)
                .filter(|p| p / w == 0 || p / w == h - 1 || p % w == 0 || p % w == w - 1)
                .map(|p| image.data[c * h * w + p])
                .collect();
            border.sort_by(f32::total_cmp);
            *o = border.get(border.len() / 2).copied().unwrap_or(0.0) as f64;
        }
        out
    }

    /// Foreground indicator per pixel.
    pub fn foreground(&self, image: &Image) -> Vec<bool> {
        let bg = Self::background(image);
        let hw = image.height * image.width;
        (0..hw)
            .map(|p| (0..image.channels.min(3)).any(|c| (image.data[c * hw + p] as f64 - bg[c]).abs() > self.threshold))
            .collect()
    }
}

impl FeatureExtractor for ToyExtractor {
    fn dim(&self) -> usize {
        3 * self.bins + 3 + 4 + self.grid * self.grid
    }

    fn extract(&self, image: &Image) -> Vec<f64> {
        let (h, w) = (image.height, image.width);
        let hw = h * w;
        let mut out = vec![0.0; self.dim()];
        let fg = self.foreground(image);
        let n_fg = fg.iter().filter(|&&f| f).count();
        let top = (self.bins - 1) as f64;
        if n_fg > 0 {
            for c in 0..image.channels.min(3) {
                let hist = &mut out[c * self.bins..(c + 1) * self.bins];
                for p in (0..hw).filter(|&p| fg[p]) {
                    let pos = ((image.data[c * hw + p] as f64).clamp(-1.0, 1.0) + 1.0) * 0.5 * top;
                    let lo = libm::floor(pos) as usize;
                    let frac = pos - lo as f64;
                    hist[lo] += 1.0 - frac;
                    if lo + 1 < self.bins {
                        hist[lo + 1] += frac;
                    }
                }
                hist.iter_mut().for_each(|v| *v /= n_fg as f64);
            }
        }
        let base = 3 * self.bins;
        out[base..base + 3].copy_from_slice(&Self::background(image));
        if n_fg > 0 {
            let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
            for p in (0..hw).filter(|&p| fg[p]) {
                let (y, x) = (p / w, p % w);
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
            let (bh, bw) = (y1 - y0, x1 - x0);
            let shape = [n_fg as f64 / hw as f64, n_fg as f64 / (bh * bw) as f64, bh as f64 / h as f64, bw as f64 / w as f64];
            for (o, v) in out[base + 3..base + 7].iter_mut().zip(shape) {
                *o = SHAPE_WEIGHT * v;
            }
        }
        let grid = &mut out[base + 7..];
        let mut counts = vec![0usize; self.grid * self.grid];
        for p in 0..hw {
            let cell = (p / w * self.grid / h) * self.grid + (p % w) * self.grid / w;
            counts[cell] += 1;
            if fg[p] {
                grid[cell] += 1.0;
            }
        }
        for (g, &n) in grid.iter_mut().zip(&counts) {
            if n > 0 {
                *g *= GRID_WEIGHT / n as f64;
            }
        }
        out
    }
}

/// Raw pixels of non-overlapping square patches (channel-major per patch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawPatchExtractor {
    pub patch_size: usize,
}

impl Default for RawPatchExtractor {
    fn default() -> Self {
        Self { patch_size: 4 }
    }
}

impl PatchFeatureExtractor for RawPatchExtractor {
    fn dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn extract_patches(&self, image: &Image) -> PatchGrid {
        let ps = self.patch_size;
        let (rows, cols) = (image.height / ps, image.width / ps);
        let mut features = FeatureMatrix::empty(self.dim());
        let mut buf = Vec::with_capacity(self.dim());
        for r in 0..rows {
            for c in 0..cols {
                buf.clear();
                for ch in 0..3 {
                    for y in 0..ps {
                        for x in 0..ps {
                            buf.push(image.at(ch.min(image.channels - 1), r * ps + y, c * ps + x) as f64);
                        }
                    }
                }
                features.push(&buf).expect("fixed dim");
            }
        }
        PatchGrid { rows, cols, features }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(rgb: [f32; 3]) -> Image {
        let mut img = Image::rgb(8, 8);
        for c in 0..3 {
            for p in 0..64 {
                img.data[c * 64 + p] = rgb[c];
            }
        }
        img
    }

    fn square(rgb: [f32; 3], y0: usize, x0: usize, side: usize) -> Image {
        let mut img = solid([-0.6; 3]);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                for (c, &v) in rgb.iter().enumerate() {
                    img.set(c, y, x, v);
                }
            }
        }
        img
    }

    #[test]
    fn identical_images_identical_features() {
        let e = ToyExtractor::default();
        let img = square([0.2, -0.3, 0.9], 2, 2, 3);
        assert_eq!(e.extract(&img), e.extract(&img.clone()));
        assert_eq!(e.dim(), 71);
        assert_eq!(e.extract(&img).len(), 71);
    }

    #[test]
    fn uniform_image_has_no_foreground() {
        let e = ToyExtractor::default();
        let f = e.extract(&solid([0.5, 0.0, -0.5]));
        assert!(f[..48].iter().all(|&v| v == 0.0));
        assert_eq!(&f[48..51], &[0.5, 0.0, -0.5]);
        assert!(f[51..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn colour_histogram_ignores_size_and_position() {
        let e = ToyExtractor::default();
        let small = e.extract(&square([1.0, -1.0, -1.0], 1, 1, 2));
        let large = e.extract(&square([1.0, -1.0, -1.0], 2, 3, 5));
        assert_eq!(small[..51], large[..51]);
        // Red: all foreground R mass in the top bin, G and B in the bottom bin.
        let mut expected = vec![0.0; 48];
        expected[15] = 1.0;
        expected[16] = 1.0;
        expected[32] = 1.0;
        assert_eq!(small[..48], expected[..]);
        let blue = e.extract(&square([-1.0, -1.0, 1.0], 1, 1, 2));
        assert_ne!(blue[..48], small[..48]);
    }

    #[test]
    fn shape_descriptors() {
        let e = ToyExtractor::default();
        let f = e.extract(&square([1.0, 1.0, 1.0], 0, 4, 4));
        // 16 of 64 pixels, a full box, half the height and width.
        assert_eq!(&f[51..55], &[0.125, 0.5, 0.25, 0.25]);
        // The square fills the top-right 2×2 cells of the 4×4 layout.
        let grid = &f[55..];
        for (i, &g) in grid.iter().enumerate() {
            let inside = i / 4 < 2 && i % 4 >= 2;
            assert_eq!(g, if inside { 0.25 } else { 0.0 }, "cell {i}");
        }
    }

    #[test]
    fn raw_patches_cover_grid() {
        let e = RawPatchExtractor { patch_size: 4 };
        let mut img = Image::rgb(8, 12);
        img.set(0, 5, 9, 1.0);
        let grid = e.extract_patches(&img);
        assert_eq!((grid.rows, grid.cols), (2, 3));
        // Pixel (5, 9) sits in patch (1, 2) at local (1, 1), channel 0.
        assert_eq!(grid.at(1, 2)[4 + 1], 1.0);
        assert_eq!(grid.features.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn l2_normalization() {
        let m = FeatureMatrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap().l2_normalized();
        assert_eq!(m.row(0), &[0.6, 0.8]);
        assert_eq!(m.row(1), &[0.0, 0.0]);
    }
}
