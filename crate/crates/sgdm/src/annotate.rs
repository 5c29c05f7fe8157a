//! Building guidance signals for a corpus: self-annotation (features →
//! clusters / boxes / segments) or ground truth, plus the annotation file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sgdm_core::annotation::{
    assign_all, collect_patch_features, corrupt_assignments_with, kmeans_fit_best, mask_to_multihot, nmi, propose_box,
    propose_segmentation, CorruptionMode, FeatureExtractor, FeatureMatrix, Mask, RawPatchExtractor, ToyExtractor,
};
use sgdm_core::denoiser::{GuidanceKind, GuidanceSignal};

use crate::datasets::Dataset;
use crate::error::{invalid, Error, Result};
use crate::formats::{rle_decode, rle_encode, write_atomic, RleMask, VERSION};

pub const ANNOTATION_FORMAT: &str = "SGDM-ANNOT-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceVariant {
    #[default]
    None,
    SelfLabel,
    GtLabel,
    SelfBox,
    GtBox,
    SelfSegment,
    GtSegment,
}

pub const VARIANT_NAMES: [&str; 7] = ["none", "self-label", "gt-label", "self-box", "gt-box", "self-segment", "gt-segment"];

impl GuidanceVariant {
    pub const ALL: [GuidanceVariant; 7] = [
        GuidanceVariant::None,
        GuidanceVariant::SelfLabel,
        GuidanceVariant::GtLabel,
        GuidanceVariant::SelfBox,
        GuidanceVariant::GtBox,
        GuidanceVariant::SelfSegment,
        GuidanceVariant::GtSegment,
    ];

    pub fn kind(self) -> GuidanceKind {
        match self {
            GuidanceVariant::None => GuidanceKind::None,
            GuidanceVariant::SelfLabel | GuidanceVariant::GtLabel => GuidanceKind::Label,
            GuidanceVariant::SelfBox | GuidanceVariant::GtBox => GuidanceKind::Box,
            GuidanceVariant::SelfSegment | GuidanceVariant::GtSegment => GuidanceKind::Segmentation,
        }
    }

    pub fn name(self) -> &'static str {
        VARIANT_NAMES[Self::ALL.iter().position(|&v| v == self).expect("listed")]
    }

    /// Number of clusters the variant produces on a corpus with
    /// `num_classes` classes when asked for `k` self-annotated clusters.
    pub fn num_clusters(self, k: usize, num_classes: usize) -> usize {
        match self {
            GuidanceVariant::None => 0,
            GuidanceVariant::GtLabel | GuidanceVariant::GtBox => num_classes,
            // Background is its own segment.
            GuidanceVariant::GtSegment => num_classes + 1,
            _ => k,
        }
    }
}

impl FromStr for GuidanceVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        VARIANT_NAMES
            .iter()
            .position(|&n| n == s)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| format!("unknown variant \"{s}\"; expected one of {}", VARIANT_NAMES.join(", ")))
    }
}

impl std::fmt::Display for GuidanceVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub variant: GuidanceVariant,
    /// Cluster count for self-annotated variants.
    pub num_clusters: usize,
    pub kmeans_iters: usize,
    /// Independent k-means++ starts; the lowest objective wins.
    pub kmeans_restarts: usize,
    /// Fraction of cluster ids to corrupt.
    pub corrupt: f64,
    /// Resample corrupted ids uniformly instead of shuffling them.
    pub corrupt_resample: bool,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            variant: GuidanceVariant::SelfLabel,
            num_clusters: 12,
            kmeans_iters: 100,
            kmeans_restarts: 10,
            corrupt: 0.0,
            corrupt_resample: false,
            patch_size: 4,
            seed: 0,
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.corrupt) {
            return invalid("corrupt must lie in [0, 1]");
        }
        if self.num_clusters == 0 {
            return invalid("num_clusters must be at least 1");
        }
        if self.kmeans_restarts == 0 {
            return invalid("kmeans_restarts must be at least 1");
        }
        if self.patch_size == 0 {
            return invalid("patch_size must be positive");
        }
        if self.corrupt > 0.0 && self.variant.kind() == GuidanceKind::Segmentation {
            return invalid("corruption applies to cluster ids and is not defined for segmentation variants");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionInfo {
    pub fraction: f64,
    pub mode: CorruptionMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationHeader {
    pub format: String,
    pub version: String,
    pub variant: GuidanceVariant,
    pub num_clusters: usize,
    pub corruption: Option<CorruptionInfo>,
    /// Agreement with ground truth, when it could be measured.
    pub nmi: Option<f64>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub id: u64,
    pub cluster: Option<usize>,
    pub box_mask: Option<Mask>,
    pub segmentation: Option<Mask>,
    pub multi_hot: Option<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    cluster: Option<usize>,
    #[serde(rename = "box", skip_serializing_if = "Option::is_none", default)]
    box_mask: Option<RleMask>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    segmentation: Option<RleMask>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    multi_hot: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub header: AnnotationHeader,
    pub records: Vec<AnnotationRecord>,
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id) {
                return Err(Error::Format(format!("duplicate annotation for image {}", r.id)));
            }
        }
        Ok(())
    }

    /// Guidance signal for every image of `dataset`, in dataset order.
    pub fn guidance_for(&self, dataset: &Dataset) -> Result<Vec<GuidanceSignal>> {
        let by_id: BTreeMap<u64, &AnnotationRecord> = self.records.iter().map(|r| (r.id, r)).collect();
        dataset
            .images
            .iter()
            .map(|img| {
                let rec = by_id
                    .get(&img.id)
                    .ok_or_else(|| Error::Validation(format!("missing annotation for image {}", img.id)))?;
                let (h, w) = (img.pixels.height, img.pixels.width);
                for m in rec.box_mask.iter().chain(&rec.segmentation) {
                    if (m.height, m.width) != (h, w) {
                        return Err(Error::Validation(format!("annotation mask for image {} is not {h}x{w}", img.id)));
                    }
                }
                record_guidance(rec, self.header.variant, self.header.num_clusters)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut lines = vec![serde_json::to_string(&self.header)?];
        for r in &self.records {
            lines.push(serde_json::to_string(&RecordLine {
                id: r.id,
                cluster: r.cluster,
                box_mask: r.box_mask.as_ref().map(rle_encode),
                segmentation: r.segmentation.as_ref().map(rle_encode),
                multi_hot: r.multi_hot.clone(),
            })?);
        }
        write_atomic(path, |w| lines.iter().try_for_each(|l| writeln!(w, "{l}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: AnnotationHeader = serde_json::from_str(lines.next().ok_or_else(|| Error::Format(format!("{}: empty annotation file", path.display())))?)?;
        if header.format != ANNOTATION_FORMAT {
            return Err(Error::Format(format!("{}: expected format \"{ANNOTATION_FORMAT}\"", path.display())));
        }
        let mut records = Vec::new();
        for l in lines {
            let r: RecordLine = serde_json::from_str(l)?;
            records.push(AnnotationRecord {
                id: r.id,
                cluster: r.cluster,
                box_mask: r.box_mask.as_ref().map(rle_decode).transpose()?,
                segmentation: r.segmentation.as_ref().map(rle_decode).transpose()?,
                multi_hot: r.multi_hot,
            });
        }
        let set = Self { header, records };
        set.validate()?;
        Ok(set)
    }
}

/// Converts one record to the denoiser's guidance signal.
pub fn record_guidance(rec: &AnnotationRecord, variant: GuidanceVariant, k: usize) -> Result<GuidanceSignal> {
    let missing = |what: &str| Error::Validation(format!("image {} lacks a {what} annotation", rec.id));
    let cluster = || rec.cluster.ok_or_else(|| missing("cluster"));
    Ok(match variant.kind() {
        GuidanceKind::None => GuidanceSignal::none(),
        GuidanceKind::Label => GuidanceSignal::one_hot(cluster()?, k)?,
        GuidanceKind::Box => {
            let m = rec.box_mask.as_ref().ok_or_else(|| missing("box"))?;
            GuidanceSignal::one_hot(cluster()?, k)?.with_box(m.height, m.width, m.to_f32())?
        }
        GuidanceKind::Segmentation => {
            let m = rec.segmentation.as_ref().ok_or_else(|| missing("segmentation"))?;
            let hot = mask_to_multihot(m);
            let active: Vec<usize> = (0..hot.len()).filter(|&i| hot[i] == 1).collect();
            GuidanceSignal::multi_hot(&active, k)?.with_segmentation(m.channels, m.height, m.width, m.to_f32())?
        }
    })
}

/// Image-level features: the precomputed map when given, else the toy extractor.
pub fn image_features(dataset: &Dataset, precomputed: Option<&BTreeMap<u64, Vec<f32>>>) -> Result<FeatureMatrix> {
    match precomputed {
        Some(map) => {
            let dim = map.values().next().map_or(0, Vec::len);
            let mut m = FeatureMatrix::empty(dim.max(1));
            for img in &dataset.images {
                let v = map.get(&img.id).ok_or_else(|| Error::Validation(format!("no precomputed feature for image {}", img.id)))?;
                m.push(&v.iter().map(|&x| x as f64).collect::<Vec<_>>())?;
            }
            Ok(m)
        }
        None => {
            let e = ToyExtractor::default();
            let rows: Vec<Vec<f64>> = dataset.images.par_iter().map(|i| e.extract(&i.pixels)).collect();
            Ok(if rows.is_empty() { FeatureMatrix::empty(e.dim()) } else { FeatureMatrix::from_rows(&rows)? })
        }
    }
}

/// Runs the annotation pipeline for `cfg.variant`.
pub fn annotate(dataset: &Dataset, cfg: &AnnotationConfig, precomputed: Option<&BTreeMap<u64, Vec<f32>>>) -> Result<AnnotationSet> {
    cfg.validate()?;
    let n = dataset.len();
    let num_classes = dataset.config.num_classes;
    let k = cfg.variant.num_clusters(cfg.num_clusters, num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records: Vec<AnnotationRecord> = dataset
        .images
        .iter()
        .map(|i| AnnotationRecord { id: i.id, cluster: None, box_mask: None, segmentation: None, multi_hot: None })
        .collect();
    let gt_labels: Option<Vec<usize>> = dataset.images.iter().map(|i| i.gt_label()).collect();
    let mut nmi_score = None;

    // Image-level cluster ids.
    let mut clusters: Option<Vec<usize>> = match cfg.variant {
        GuidanceVariant::SelfLabel | GuidanceVariant::SelfBox => {
            if k > n {
                return invalid(format!("K = {k} exceeds the number of images ({n})"));
            }
            let feats = image_features(dataset, precomputed)?.l2_normalized();
            let fit = kmeans_fit_best(&feats, k, cfg.kmeans_iters, cfg.kmeans_restarts, &mut rng)?;
            Some(assign_all(&feats, &fit.model)?)
        }
        GuidanceVariant::GtLabel | GuidanceVariant::GtBox => Some(
            gt_labels.clone().ok_or_else(|| Error::Validation("ground-truth labels need single-shape images".into()))?,
        ),
        _ => None,
    };
    let mut corruption = None;
    if let Some(ids) = clusters.as_mut() {
        if cfg.corrupt > 0.0 {
            let mode = if cfg.corrupt_resample { CorruptionMode::Resample { num_clusters: k } } else { CorruptionMode::Permute };
            let seed = cfg.seed.wrapping_add(1);
            *ids = corrupt_assignments_with(ids, cfg.corrupt, mode, &mut ChaCha8Rng::seed_from_u64(seed))?;
            corruption = Some(CorruptionInfo { fraction: cfg.corrupt, mode, seed });
        }
        // Measured on the ids actually used for training, after corruption.
        if let Some(gt) = &gt_labels {
            nmi_score = Some(nmi(ids, gt)?);
        }
        for (r, &c) in records.iter_mut().zip(ids.iter()) {
            r.cluster = Some(c);
        }
    }

    match cfg.variant {
        GuidanceVariant::SelfBox => {
            let e = RawPatchExtractor { patch_size: cfg.patch_size };
            let boxes: Vec<Mask> = dataset.images.par_iter().map(|i| propose_box(&i.pixels, &e)).collect();
            for (r, b) in records.iter_mut().zip(boxes) {
                r.box_mask = Some(b);
            }
        }
        GuidanceVariant::GtBox => {
            for (r, img) in records.iter_mut().zip(&dataset.images) {
                r.box_mask = img.gt_box();
            }
        }
        GuidanceVariant::SelfSegment => {
            let e = RawPatchExtractor { patch_size: cfg.patch_size };
            let pixels = dataset.pixels();
            let patches = collect_patch_features(&pixels, &e);
            if patches.rows() < k {
                return invalid(format!("K = {k} exceeds the number of patches ({})", patches.rows()));
            }
            let fit = kmeans_fit_best(&patches, k, cfg.kmeans_iters, cfg.kmeans_restarts, &mut rng)?;
            let masks = pixels
                .par_iter()
                .map(|p| propose_segmentation(p, &e, k, &fit.model))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let (mut pred, mut truth) = (Vec::new(), Vec::new());
            for ((r, m), img) in records.iter_mut().zip(masks).zip(&dataset.images) {
                pred.extend(argmax_channels(&m));
                truth.extend(argmax_channels(&img.segmentation));
                r.multi_hot = Some(mask_to_multihot(&m));
                r.segmentation = Some(m);
            }
            nmi_score = Some(nmi(&pred, &truth)?);
        }
        GuidanceVariant::GtSegment => {
            for (r, img) in records.iter_mut().zip(&dataset.images) {
                r.multi_hot = Some(mask_to_multihot(&img.segmentation));
                r.segmentation = Some(img.segmentation.clone());
            }
        }
        _ => {}
    }

    let header = AnnotationHeader {
        format: ANNOTATION_FORMAT.into(),
        version: VERSION.into(),
        variant: cfg.variant,
        num_clusters: k,
        corruption,
        nmi: nmi_score,
        config: serde_json::to_value(cfg)?,
    };
    Ok(AnnotationSet { header, records })
}

/// Active channel per pixel of a one-hot mask.
pub fn argmax_channels(m: &Mask) -> Vec<usize> {
    let hw = m.height * m.width;
    (0..hw).map(|p| (0..m.channels).find(|&c| m.data[c * hw + p] == 1).unwrap_or(0)).collect()
}
