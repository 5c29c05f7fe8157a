//! Synthetic coloured-shapes corpus with exact ground-truth annotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sgdm_core::annotation::{Mask, Rect};
use sgdm_core::Image;

use crate::error::{invalid, Result};

/// Shape colours in [-1, 1] RGB. Class `c` uses `PALETTE[c % 12]`.
pub const PALETTE: [[f32; 3]; 12] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.0, -1.0],
    [0.0, -1.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.5, 0.5, 0.5],
];

pub const MAX_CLASSES: usize = 3 * PALETTE.len();
const BACKGROUND: f32 = -0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

/// Shape and colour of class `c`. Colours repeat every 12 classes, and the
/// shape rotation guarantees every (shape, colour) pair is distinct.
pub fn class_style(c: usize) -> (ShapeKind, [f32; 3]) {
    let shape = match (c + c / PALETTE.len()) % 3 {
        0 => ShapeKind::Circle,
        1 => ShapeKind::Square,
        _ => ShapeKind::Triangle,
    };
    (shape, PALETTE[c % PALETTE.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    #[default]
    Solid,
    NoiseTexture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub background: Background,
    pub count: usize,
    pub seed: u64,
    /// Shape side length as a fraction of the image size.
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            num_classes: 6,
            min_shapes: 1,
            max_shapes: 1,
            background: Background::Solid,
            count: 4000,
            seed: 0,
            min_scale: 0.4,
            max_scale: 0.75,
        }
    }
}

impl ShapesConfig {
    fn side_range(&self) -> (usize, usize) {
        let s = self.image_size as f64;
        ((self.min_scale * s).round().max(2.0) as usize, (self.max_scale * s).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return invalid(format!("num_classes must lie in 1..={MAX_CLASSES}"));
        }
        if self.count == 0 {
            return invalid("count must be at least 1");
        }
        if self.min_shapes == 0 || self.max_shapes < self.min_shapes {
            return invalid("shapes per image must satisfy 1 <= min_shapes <= max_shapes");
        }
        if self.image_size < 4 {
            return invalid("image_size must be at least 4");
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale) {
            return invalid("scales must satisfy 0 < min_scale <= max_scale");
        }
        let (lo, hi) = self.side_range();
        if hi > self.image_size || lo > hi {
            return invalid(format!("shapes of side {lo}..={hi} do not fit a {0}x{0} image", self.image_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub class: usize,
    pub kind: ShapeKind,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: u64,
    pub pixels: Image,
    /// Shapes in drawing order (later ones occlude earlier ones).
    pub shapes: Vec<ShapeInstance>,
    /// `num_classes + 1` channels, background last.
    pub segmentation: Mask,
}

impl AnnotatedImage {
    /// Class of a single-shape image.
    pub fn gt_label(&self) -> Option<usize> {
        match self.shapes.as_slice() {
            [s] => Some(s.class),
            _ => None,
        }
    }

    /// Sorted distinct classes present.
    pub fn gt_classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.shapes.iter().map(|s| s.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Box mask of the first shape.
    pub fn gt_box(&self) -> Option<Mask> {
        self.shapes.first().map(|s| Mask::from_rect(self.pixels.height, self.pixels.width, s.rect))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: ShapesConfig,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pixels(&self) -> Vec<Image> {
        self.images.iter().map(|i| i.pixels.clone()).collect()
    }
}

fn inside(kind: ShapeKind, side: usize, dy: usize, dx: usize) -> bool {
    let (y, x, s) = (dy as f64 + 0.5, dx as f64 + 0.5, side as f64);
    match kind {
        ShapeKind::Square => true,
        ShapeKind::Circle => {
            let r = s / 2.0;
            (y - r).powi(2) + (x - r).powi(2) <= r * r
        }
        // Apex at the top centre, base along the bottom row.
        ShapeKind::Triangle => (x - s / 2.0).abs() <= y / 2.0,
    }
}

/// Per-image generator seeded from the corpus seed and the image id.
pub fn image_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn generate_one(cfg: &ShapesConfig, id: u64) -> AnnotatedImage {
    let mut rng = image_rng(cfg.seed, id);
    let n = cfg.image_size;
    let mut pixels = Image::filled(3, n, n, BACKGROUND);
    if cfg.background == Background::NoiseTexture {
        for v in pixels.data.iter_mut() {
            *v = (BACKGROUND + rng.random_range(-0.15..0.15f32)).clamp(-1.0, 1.0);
        }
    }
    let bg = cfg.num_classes;
    let mut owner = vec![bg; n * n];
    let (lo, hi) = cfg.side_range();
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..cfg.num_classes);
        let (kind, colour) = class_style(class);
        let side = rng.random_range(lo..=hi);
        let y0 = rng.random_range(0..=n - side);
        let x0 = rng.random_range(0..=n - side);
        let mut rect: Option<Rect> = None;
        for dy in 0..side {
            for dx in 0..side {
                if !inside(kind, side, dy, dx) {
                    continue;
                }
                let (y, x) = (y0 + dy, x0 + dx);
                for (c, &v) in colour.iter().enumerate() {
                    pixels.set(c, y, x, v);
                }
                owner[y * n + x] = class;
                let r = rect.get_or_insert(Rect { y0: y, y1: y + 1, x0: x, x1: x + 1 });
                r.y0 = r.y0.min(y);
                r.y1 = r.y1.max(y + 1);
                r.x0 = r.x0.min(x);
                r.x1 = r.x1.max(x + 1);
            }
        }
        shapes.push(ShapeInstance { class, kind, rect: rect.expect("side >= 2 rasterizes at least one pixel") });
    }
    let mut segmentation = Mask::zeros(bg + 1, n, n);
    for (p, &c) in owner.iter().enumerate() {
        segmentation.set(c, p / n, p % n, 1);
    }
    AnnotatedImage { id, pixels, shapes, segmentation }
}

/// Generates `config.count` images with ids `0..count`; the result depends
/// only on the config, never on thread scheduling.
pub fn generate_shapes(config: &ShapesConfig) -> Result<Dataset> {
    config.validate()?;
    let images = (0..config.count as u64).into_par_iter().map(|id| generate_one(config, id)).collect();
    Ok(Dataset { config: config.clone(), images })
}

/// Number of images class `i` keeps in the unbalanced split.
pub fn unbalanced_quota(class: usize, max_per_class: usize, num_classes: usize) -> usize {
    class * max_per_class / num_classes
}

/// Keeps the first `⌊i·max_per_class/num_classes⌋` images (by id) of class `i`.
pub fn make_unbalanced(dataset: &Dataset, max_per_class: usize) -> Result<Dataset> {
    let k = dataset.config.num_classes;
    let mut sorted: Vec<&AnnotatedImage> = dataset.images.iter().collect();
    sorted.sort_by_key(|i| i.id);
    let mut kept = vec![0usize; k];
    let mut images = Vec::new();
    for img in sorted {
        let Some(c) = img.gt_label() else {
            return invalid(format!("image {} has no single ground-truth label", img.id));
        };
        if kept[c] < unbalanced_quota(c, max_per_class, k) {
            kept[c] += 1;
            images.push(img.clone());
        }
    }
    Ok(Dataset { config: dataset.config.clone(), images })
}
