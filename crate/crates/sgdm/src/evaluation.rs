//! Sampling from checkpoints, FID / Inception-Score wrappers, guidance
//! sweeps, metric reports and a small SVG line plot.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sgdm_core::annotation::{FeatureExtractor, FeatureMatrix};
use sgdm_core::denoiser::{GuidanceKind, GuidanceSignal, Tensor, UNet};
use sgdm_core::diffusion::{ddim_sample_from, standard_normal, NoiseSchedule, SamplerConfig, SigmaMode};
use sgdm_core::metrics::{fid_from_features, inception_score};
use sgdm_core::Image;

use crate::error::{invalid, Error, Result};
use crate::formats::{write_atomic, VERSION};
use crate::training::{DenoiserCheckpoint, ImageSampler};

/// Images per DDIM batch while sampling.
pub const SAMPLE_BATCH: usize = 32;

pub fn features_of<E: FeatureExtractor + Sync>(images: &[Image], extractor: &E) -> FeatureMatrix {
    let rows: Vec<Vec<f64>> = images.par_iter().map(|i| extractor.extract(i)).collect();
    if rows.is_empty() {
        FeatureMatrix::empty(extractor.dim())
    } else {
        FeatureMatrix::from_rows(&rows).expect("extractor returns fixed-size rows")
    }
}

pub fn fid_against(reference: &FeatureMatrix, samples: &FeatureMatrix) -> Result<f64> {
    Ok(fid_from_features(samples, reference)?)
}

pub fn compute_fid<E: FeatureExtractor + Sync>(samples: &[Image], reference: &[Image], extractor: &E) -> Result<f64> {
    if samples.is_empty() || reference.is_empty() {
        return invalid("FID needs non-empty sample and reference sets");
    }
    fid_against(&features_of(reference, extractor), &features_of(samples, extractor))
}

/// Nearest-centroid classifier over extractor features with a softmax over
/// negative squared distances. Stands in for the Inception network.
#[derive(Debug, Clone)]
pub struct CentroidClassifier<E> {
    extractor: E,
    centroids: Vec<Vec<f64>>,
    temperature: f64,
}

impl<E: FeatureExtractor> CentroidClassifier<E> {
    /// Fits one centroid per class; every class in `0..num_classes` needs at
    /// least one example. The temperature is the mean within-class squared
    /// distance, so confident predictions need no tuning.
    pub fn fit(extractor: E, images: &[Image], labels: &[usize], num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return invalid("one label per image required");
        }
        let dim = extractor.dim();
        let feats: Vec<Vec<f64>> = images.iter().map(|i| extractor.extract(i)).collect();
        let mut sums = vec![vec![0.0; dim]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (f, &l) in feats.iter().zip(labels) {
            if l >= num_classes {
                return invalid(format!("label {l} >= {num_classes}"));
            }
            counts[l] += 1;
            sums[l].iter_mut().zip(f).for_each(|(s, v)| *s += v);
        }
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return invalid(format!("class {c} has no examples"));
        }
        let centroids: Vec<Vec<f64>> = sums.into_iter().zip(&counts).map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect()).collect();
        let spread = feats.iter().zip(labels).map(|(f, &l)| sq_dist(f, &centroids[l])).sum::<f64>() / feats.len() as f64;
        Ok(Self { extractor, centroids, temperature: spread.max(1e-12) })
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn probabilities(&self, image: &Image) -> Vec<f64> {
        let f = self.extractor.extract(image);
        let logits: Vec<f64> = self.centroids.iter().map(|c| -sq_dist(&f, c) / self.temperature).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn predict(&self, image: &Image) -> usize {
        let p = self.probabilities(image);
        (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Inception-Score style diversity metric using `classifier`.
pub fn inception_score_of<E: FeatureExtractor + Sync>(samples: &[Image], classifier: &CentroidClassifier<E>, splits: usize) -> Result<(f64, f64)> {
    let probs: Vec<Vec<f64>> = samples.par_iter().map(|i| classifier.probabilities(i)).collect();
    Ok(inception_score(&probs, splits)?)
}

/// Which guidance signals to sample with.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionSpec {
    /// Draw i.i.d. from the checkpoint's training annotations.
    TrainingDistribution,
    /// Label one-hot on this cluster. Spatial variants draw a training mask
    /// whose label contains the cluster.
    Cluster(usize),
    /// The same signal for every sample.
    Fixed(GuidanceSignal),
}

/// Guided DDIM sampling from a checkpoint's EMA parameters.
///
/// Image `i` of a call with seed `s` always gets the same starting noise and
/// condition draw, independent of `w`, of the batch split and of threads.
#[derive(Debug, Clone)]
pub struct CheckpointSampler {
    model: UNet<f32>,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    bank: Vec<GuidanceSignal>,
    condition: ConditionSpec,
}

impl CheckpointSampler {
    pub fn new(ckpt: &DenoiserCheckpoint, sampler: SamplerConfig, condition: ConditionSpec) -> Result<Self> {
        let kind = ckpt.denoiser.guidance;
        let k = ckpt.num_clusters();
        match &condition {
            ConditionSpec::TrainingDistribution => {
                if kind != GuidanceKind::None && ckpt.guidance_bank.is_empty() {
                    return invalid("checkpoint stores no training annotations to sample conditions from");
                }
            }
            ConditionSpec::Cluster(c) => {
                if kind == GuidanceKind::None {
                    return invalid("--cluster needs a guided checkpoint");
                }
                if *c >= k {
                    return invalid(format!("cluster {c} out of range for a model with {k} clusters"));
                }
                if kind != GuidanceKind::Label && !ckpt.guidance_bank.iter().any(|g| g.label()[*c] == 1.0) {
                    return invalid(format!("no training annotation carries cluster {c}"));
                }
            }
            ConditionSpec::Fixed(g) => {
                if g.kind() != kind || g.label().len() != k + 1 {
                    return invalid(format!("{:?} condition does not match a {:?} checkpoint with {k} clusters", g.kind(), kind));
                }
            }
        }
        Ok(Self {
            model: ckpt.sampling_model()?,
            schedule: ckpt.diffusion.schedule()?,
            sampler,
            bank: ckpt.guidance_bank.clone(),
            condition,
        })
    }

    pub fn with_guidance_strength(mut self, w: f64) -> Self {
        self.sampler.guidance_strength = w;
        self
    }

    pub fn model(&self) -> &UNet<f32> {
        &self.model
    }

    fn condition_for(&self, rng: &mut ChaCha8Rng) -> GuidanceSignal {
        let kind = self.model.config().guidance;
        match &self.condition {
            _ if kind == GuidanceKind::None => GuidanceSignal::none(),
            ConditionSpec::TrainingDistribution => self.bank[rng.random_range(0..self.bank.len())].clone(),
            ConditionSpec::Cluster(c) if kind == GuidanceKind::Label => GuidanceSignal::one_hot(*c, self.model.config().num_clusters()).expect("checked"),
            ConditionSpec::Cluster(c) => {
                let pool: Vec<&GuidanceSignal> = self.bank.iter().filter(|g| g.label()[*c] == 1.0).collect();
                pool[rng.random_range(0..pool.len())].clone()
            }
            ConditionSpec::Fixed(g) => g.clone(),
        }
    }

    /// Samples with explicit guidance signals and per-image seeds.
    pub fn sample_with(&self, count: usize, seed: u64) -> Result<(Vec<Image>, Vec<GuidanceSignal>)> {
        let s = self.model.config().image_size;
        let mut conds = Vec::with_capacity(count);
        let mut noise = Vec::with_capacity(count * 3 * s * s);
        // Separate streams keep x_T independent of how conditions are chosen.
        for i in 0..count as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2 * i);
            noise.extend(standard_normal::<f32, _>(&[1, 3, s, s], &mut rng).into_data());
            rng.set_stream(2 * i + 1);
            rng.set_word_pos(0);
            conds.push(self.condition_for(&mut rng));
        }
        let starts: Vec<usize> = (0..count).step_by(SAMPLE_BATCH).collect();
        let parts = starts
            .par_iter()
            .map(|&a| {
                let b = (a + SAMPLE_BATCH).min(count);
                let x = Tensor::new(&[b - a, 3, s, s], noise[a * 3 * s * s..b * 3 * s * s].to_vec())?;
                // Only consumed when σ > 0.
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1d1_u64.wrapping_mul(a as u64 + 1));
                let out = ddim_sample_from(&self.model, x, &conds[a..b], &self.sampler, &self.schedule, &mut rng)?;
                Ok(out.to_images()?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((parts.into_iter().flatten().collect(), conds))
    }
}

impl ImageSampler for CheckpointSampler {
    fn sample_images(&self, count: usize, seed: u64) -> Result<Vec<Image>> {
        Ok(self.sample_with(count, seed)?.0)
    }
}

/// Deterministic DDIM (σ = 0) with the given step count and strength.
pub fn eval_sampler(num_steps: usize, w: f64, clip_denoised: bool) -> SamplerConfig {
    SamplerConfig { num_steps, sigma_mode: SigmaMode::Zero, guidance_strength: w, clip_denoised }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w: f64,
    pub fid: f64,
}

/// FID at each guidance strength, with conditions drawn from the training
/// annotations. Every `w` shares the same starting noise and conditions.
/// The strength in `sampler` is ignored.
pub fn guidance_sweep<E: FeatureExtractor + Sync>(
    ckpt: &DenoiserCheckpoint,
    w_values: &[f64],
    reference: &FeatureMatrix,
    extractor: &E,
    num_samples: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if w_values.is_empty() {
        return invalid("empty list of guidance strengths");
    }
    if let Some(w) = w_values.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return invalid(format!("guidance strength {w} must be finite and non-negative"));
    }
    let base = CheckpointSampler::new(ckpt, sampler.clone(), ConditionSpec::TrainingDistribution)?;
    let mut rows = Vec::with_capacity(w_values.len());
    for &w in w_values {
        let s = base.clone().with_guidance_strength(w);
        let samples = s.sample_images(num_samples, seed)?;
        rows.push(SweepRow { w, fid: fid_against(reference, &features_of(&samples, extractor))? });
    }
    Ok(rows)
}

/// A metric value plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: String,
    pub seed: u64,
    pub entries: Vec<MetricEntry>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub sweep: Vec<SweepRow>,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        Self { version: VERSION.into(), seed, entries: Vec::new(), sweep: Vec::new(), config }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, |w| std::io::Write::write_all(w, text.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Tab-separated two-column table with a header line.
pub fn table_tsv(x_name: &str, y_name: &str, rows: &[(f64, f64)]) -> String {
    let mut s = format!("{x_name}\t{y_name}\n");
    for (x, y) in rows {
        let _ = writeln!(s, "{x}\t{y:.6}");
    }
    s
}

/// A polyline plot with markers and labelled axes as standalone SVG.
pub fn line_plot_svg(title: &str, x_name: &str, y_name: &str, rows: &[(f64, f64)], comment: &str) -> String {
    let (w, h, m) = (480.0, 320.0, 56.0);
    let finite: Vec<(f64, f64)> = rows.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let range = |v: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(&mut finite.iter().map(|p| p.0));
    let (y0, y1) = range(&mut finite.iter().map(|p| p.1));
    let (y0, y1) = (y0 - 0.05 * (y1 - y0), y1 + 0.05 * (y1 - y0));
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 1.5 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 1.6 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, "<!-- {} -->", comment.replace("--", "- -"));
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m / 2.0, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{m}" y2="{}" stroke="black"/>"#, h - m, 0.6 * m);
    for i in 0..=4 {
        let (xv, yv) = (x0 + (x1 - x0) * i as f64 / 4.0, y0 + (y1 - y0) * i as f64 / 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(xv), h - m + 16.0, fmt_tick(xv));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, m - 4.0, py(yv) + 4.0, fmt_tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(x_name));
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#, h / 2.0, h / 2.0, escape(y_name));
    let pts: Vec<String> = finite.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "));
    for &(x, y) in &finite {
        let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="steelblue"/>"#, px(x), py(y));
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_shapes, ShapesConfig};
    use sgdm_core::annotation::ToyExtractor;

    fn corpus(n: usize, seed: u64) -> Vec<Image> {
        generate_shapes(&ShapesConfig { count: n, seed, ..ShapesConfig::default() }).unwrap().pixels()
    }

    fn noise_images(n: usize) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n).map(|_| Image::new(3, 16, 16, (0..768).map(|_| rng.random_range(-1.0..1.0f32)).collect()).unwrap()).collect()
    }

    #[test]
    fn fid_identity_halves_and_noise() {
        let e = ToyExtractor::default();
        let all = corpus(4000, 3);
        assert!(compute_fid(&all[..500], &all[..500], &e).unwrap() < 1e-6);
        let small = compute_fid(&all[..250], &all[250..500], &e).unwrap();
        let large = compute_fid(&all[..2000], &all[2000..], &e).unwrap();
        assert!(small > 0.0 && large < small, "{small} {large}");
        let noise = compute_fid(&noise_images(1000), &all[..1000], &e).unwrap();
        assert!(noise > 10.0 * large, "{noise} vs {large}");
    }

    #[test]
    fn classifier_recovers_shapes() {
        let ds = generate_shapes(&ShapesConfig { count: 600, ..ShapesConfig::default() }).unwrap();
        let labels: Vec<usize> = ds.images.iter().map(|i| i.gt_label().unwrap()).collect();
        let pix = ds.pixels();
        let clf = CentroidClassifier::fit(ToyExtractor::default(), &pix[..300], &labels[..300], 6).unwrap();
        let correct = (300..600).filter(|&i| clf.predict(&pix[i]) == labels[i]).count();
        assert!(correct >= 290, "{correct}");
        let (is, _) = inception_score_of(&pix[300..], &clf, 10).unwrap();
        assert!(is > 4.0 && is <= 6.0 + 1e-9, "{is}");
        // A single class collapses diversity.
        let same: Vec<Image> = (300..600).filter(|&i| labels[i] == 0).map(|i| pix[i].clone()).collect();
        assert!(inception_score_of(&same, &clf, 1).unwrap().0 < 1.5);
    }

    #[test]
    fn svg_plot_is_well_formed() {
        let svg = line_plot_svg("FID vs w", "w", "FID", &[(0.0, 3.0), (1.0, 2.0), (2.0, 2.5)], "seed 1");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 3);
        let tsv = table_tsv("w", "fid", &[(0.0, 1.0)]);
        assert_eq!(tsv.lines().count(), 2);
    }
}
