//! `sgdm`: generate data, annotate, train, sample, evaluate and sweep.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sgdm::annotate::{annotate, AnnotationSet, GuidanceVariant};
use sgdm::config::{check_metrics, init_threads, ExperimentConfig};
use sgdm::datasets::{generate_shapes, make_unbalanced};
use sgdm::error::{invalid, Error, Result};
use sgdm::evaluation::{
    eval_sampler, features_of, fid_against, guidance_sweep, inception_score_of, line_plot_svg, table_tsv, CentroidClassifier,
    CheckpointSampler, ConditionSpec, MetricEntry, MetricReport,
};
use sgdm::formats::{load_dataset, load_features, save_dataset_with_echo, save_png, tile_grid, write_atomic, VERSION};
use sgdm::pipeline::{reference_images, run_training};
use sgdm::training::{load_checkpoint, save_checkpoint, select_checkpoint, ImageSampler};
use sgdm_core::annotation::{nmi, Rect, ToyExtractor};
use sgdm_core::denoiser::GuidanceSignal;

#[derive(Parser)]
#[command(name = "sgdm", version, about = "Self-guided diffusion on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes corpus.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// Keep at most floor(class * N / num_classes) images per class.
        #[arg(long)]
        max_per_class: Option<usize>,
    },
    /// Produce guidance annotations (self-annotated or ground truth).
    Annotate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<GuidanceVariant>,
        /// Number of clusters K.
        #[arg(long, short = 'k')]
        clusters: Option<usize>,
        /// Fraction of cluster ids to corrupt.
        #[arg(long)]
        corrupt: Option<f64>,
        /// Precomputed per-image features instead of the builtin extractor.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Train a denoiser; writes checkpoints and a log into --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<GuidanceVariant>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Pick the lowest-FID checkpoint afterwards and save it as best.bin.
        #[arg(long)]
        select: bool,
    },
    /// Draw samples; writes grid.png and one PNG per sample into --out.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Guidance strength.
        #[arg(long)]
        w: Option<f64>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Condition every sample on this cluster.
        #[arg(long)]
        cluster: Option<usize>,
        /// Box `y0,y1,x0,x1` (half-open) for box-guided checkpoints; needs --cluster.
        #[arg(long, value_name = "Y0,Y1,X0,X1")]
        r#box: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compute metrics for a checkpoint and write a JSON report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated subset of fid, is, nmi.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        /// Annotation file, for nmi.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// FID over guidance strengths, or over cluster counts with --sweep-clusters.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated guidance strengths.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        w: Option<Vec<f64>>,
        /// Comma-separated cluster counts: annotate, train and evaluate per K.
        #[arg(long, value_delimiter = ',')]
        sweep_clusters: Option<Vec<usize>>,
        #[arg(long)]
        variant: Option<GuidanceVariant>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn finish(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    cfg.validate()?;
    Ok(cfg.echo())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| std::io::Write::write_all(w, text.as_bytes()))
}

fn provenance(echo: &serde_json::Value) -> String {
    format!("# sgdm {VERSION}\n# config: {echo}\n")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateData { common, out, count, max_per_class } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            if let Some(c) = count {
                cfg.data.count = c;
            }
            let echo = finish(&cfg)?;
            let mut ds = generate_shapes(&cfg.data)?;
            if let Some(m) = max_per_class {
                ds = make_unbalanced(&ds, m)?;
            }
            save_dataset_with_echo(&ds, &out, &echo)?;
            let mut per_class = BTreeMap::new();
            for img in &ds.images {
                for c in img.gt_classes() {
                    *per_class.entry(c).or_insert(0usize) += 1;
                }
            }
            let s = cfg.data.image_size;
            println!("wrote {} images ({s}x{s}, {} classes) to {}", ds.len(), cfg.data.num_classes, out.display());
            println!("images per class: {per_class:?}");
            Ok(())
        }
        Command::Annotate { common, dataset, out, variant, clusters, corrupt, features } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.set_variant(v);
            }
            if let Some(k) = clusters {
                cfg.annotation.num_clusters = k;
            }
            if let Some(c) = corrupt {
                cfg.annotation.corrupt = c;
            }
            if let Some(s) = common.seed {
                cfg.annotation.seed = s;
            }
            let echo = finish(&cfg)?;
            let ds = load_dataset(&dataset)?;
            let feats = features.as_deref().map(load_features).transpose()?;
            let mut set = annotate(&ds, &cfg.annotation, feats.as_ref())?;
            set.header.config = echo;
            set.save(&out)?;
            println!("annotated {} images with {} (K = {})", set.records.len(), set.header.variant, set.header.num_clusters);
            if let Some(c) = &set.header.corruption {
                println!("corrupted fraction {} ({:?})", c.fraction, c.mode);
            }
            match set.header.nmi {
                Some(v) => println!("NMI vs ground truth: {v:.4}"),
                None => println!("NMI vs ground truth: not available"),
            }
            Ok(())
        }
        Command::Train { common, dataset, annotations, out, variant, resume, select } => {
            let mut cfg = load_config(&common)?;
            let ann = annotations.as_deref().map(AnnotationSet::load).transpose()?;
            match (variant, &ann) {
                (Some(v), _) => cfg.set_variant(v),
                (None, Some(a)) => cfg.set_variant(a.header.variant),
                _ => {}
            }
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            finish(&cfg)?;
            let ds = load_dataset(&dataset)?;
            let resume = resume.as_deref().map(load_checkpoint).transpose()?;
            let outcome = run_training(&cfg, &ds, ann.as_ref(), Some(&out), resume)?;
            let last = outcome.checkpoints.last().expect("at least the initial checkpoint");
            let mut budget = json!({
                "version": VERSION,
                "variant": cfg.train.guidance_variant,
                "steps": last.step,
                "epochs": last.epoch,
                "wall_time_s": outcome.wall_time,
                "config": cfg.echo(),
            });
            if select {
                let reference = reference_images(&cfg, &ds)?;
                let samplers = outcome
                    .checkpoints
                    .iter()
                    .map(|c| CheckpointSampler::new(c, eval_sampler(cfg.evaluation.num_steps, cfg.sampler.guidance_strength, cfg.sampler.clip_denoised), ConditionSpec::TrainingDistribution))
                    .collect::<Result<Vec<_>>>()?;
                let (best, scores) =
                    select_checkpoint(&samplers, &reference, &ToyExtractor::default(), cfg.evaluation.select_samples, cfg.train.seed)?;
                save_checkpoint(&outcome.checkpoints[best], &out.join("best.bin"))?;
                budget["selection"] = json!({
                    "steps": outcome.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(),
                    "fid": scores,
                    "best_step": outcome.checkpoints[best].step,
                });
                println!("selected checkpoint at step {}", outcome.checkpoints[best].step);
            }
            write_text(&out.join("budget.json"), &serde_json::to_string_pretty(&budget)?)?;
            println!("trained {} steps in {:.1}s; checkpoints in {}", last.step, outcome.wall_time, out.display());
            Ok(())
        }
        Command::Sample { common, checkpoint, out, w, count, cluster, r#box, steps } => {
            let mut cfg = load_config(&common)?;
            if let Some(w) = w {
                cfg.sampler.guidance_strength = w;
            }
            if let Some(s) = steps {
                cfg.sampler.num_steps = s;
            }
            let seed = common.seed.unwrap_or(0);
            let ckpt = load_checkpoint(&checkpoint)?;
            cfg.set_variant(ckpt.variant);
            cfg.sampler.validate(&ckpt.diffusion.schedule()?)?;
            if count == 0 {
                return invalid("--count must be positive");
            }
            let condition = match (cluster, r#box) {
                (None, None) => ConditionSpec::TrainingDistribution,
                (Some(c), None) => ConditionSpec::Cluster(c),
                (Some(c), Some(b)) => {
                    let v: Vec<usize> = b.split(',').map(|s| s.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| Error::Validation(format!("bad --box {b}")))?;
                    let [y0, y1, x0, x1] = v[..] else { return invalid("--box takes four integers") };
                    let s = ckpt.denoiser.image_size;
                    if !(y0 < y1 && y1 <= s && x0 < x1 && x1 <= s) {
                        return invalid(format!("--box must be a non-empty rectangle inside {s}x{s}"));
                    }
                    let mask = sgdm_core::annotation::Mask::from_rect(s, s, Rect { y0, y1, x0, x1 });
                    let k = ckpt.num_clusters();
                    let sig = GuidanceSignal::one_hot(c, k).map_err(|e| Error::Validation(e.to_string()))?;
                    ConditionSpec::Fixed(sig.with_box(s, s, mask.to_f32()).map_err(|e| Error::Validation(e.to_string()))?)
                }
                (None, Some(_)) => return invalid("--box needs --cluster"),
            };
            let sampler = CheckpointSampler::new(&ckpt, cfg.sampler.clone(), condition)?;
            let images = sampler.sample_images(count, seed)?;
            let echo = json!({ "config": cfg.echo(), "checkpoint": checkpoint.display().to_string(), "step": ckpt.step, "seed": seed, "cluster": cluster }).to_string();
            let text = [("sgdm-version", VERSION), ("sgdm-config", echo.as_str())];
            let cols = (count as f64).sqrt().ceil() as usize;
            save_png(&tile_grid(&images, cols), &out.join("grid.png"), &text)?;
            for (i, img) in images.iter().enumerate() {
                save_png(img, &out.join(format!("sample-{i:04}.png")), &text)?;
            }
            println!("wrote {count} samples (w = {}) to {}", cfg.sampler.guidance_strength, out.display());
            Ok(())
        }
        Command::Evaluate { common, checkpoint, dataset, metrics, annotations, out, w, count, steps } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = metrics {
                cfg.evaluation.metrics = m;
            }
            check_metrics(&cfg.evaluation.metrics)?;
            if let Some(w) = w {
                cfg.sampler.guidance_strength = w;
            }
            if let Some(c) = count {
                cfg.evaluation.num_samples = c;
            }
            if let Some(s) = steps {
                cfg.evaluation.num_steps = s;
            }
            let seed = common.seed.unwrap_or(0);
            let ds = load_dataset(&dataset)?;
            let ckpt = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            if let Some(c) = &ckpt {
                cfg.set_variant(c.variant);
            }
            let echo = finish(&cfg)?;
            let wants = |m: &str| cfg.evaluation.metrics.iter().any(|x| x == m);
            let mut report = MetricReport::new(seed, echo);
            let n = cfg.evaluation.num_samples;
            let samples = if wants("fid") || wants("is") {
                let c = ckpt.as_ref().ok_or_else(|| Error::Validation("fid and is need --checkpoint".into()))?;
                let s = CheckpointSampler::new(c, eval_sampler(cfg.evaluation.num_steps, cfg.sampler.guidance_strength, cfg.sampler.clip_denoised), ConditionSpec::TrainingDistribution)?;
                s.sample_images(n, seed)?
            } else {
                Vec::new()
            };
            let extractor = ToyExtractor::default();
            if wants("fid") {
                let reference = features_of(&reference_images(&cfg, &ds)?, &extractor);
                let fid = fid_against(&reference, &features_of(&samples, &extractor))?;
                report.entries.push(MetricEntry { metric: "fid".into(), value: fid, std: None, sample_count: n });
            }
            if wants("is") {
                let labelled: Vec<(usize, &sgdm::datasets::AnnotatedImage)> = ds.images.iter().filter_map(|i| i.gt_label().map(|l| (l, i))).collect();
                let pix: Vec<_> = labelled.iter().map(|(_, i)| i.pixels.clone()).collect();
                let labels: Vec<usize> = labelled.iter().map(|(l, _)| *l).collect();
                let clf = CentroidClassifier::fit(ToyExtractor::default(), &pix, &labels, ds.config.num_classes)?;
                let (mean, std) = inception_score_of(&samples, &clf, cfg.evaluation.is_splits)?;
                report.entries.push(MetricEntry { metric: "is".into(), value: mean, std: Some(std), sample_count: n });
            }
            if wants("nmi") {
                let a = annotations.as_deref().map(AnnotationSet::load).transpose()?.ok_or_else(|| Error::Validation("nmi needs --annotations".into()))?;
                let by_id: BTreeMap<u64, usize> = a.records.iter().filter_map(|r| r.cluster.map(|c| (r.id, c))).collect();
                let (mut pred, mut truth) = (Vec::new(), Vec::new());
                for img in &ds.images {
                    if let (Some(&p), Some(t)) = (by_id.get(&img.id), img.gt_label()) {
                        pred.push(p);
                        truth.push(t);
                    }
                }
                if pred.is_empty() {
                    return invalid("no images with both a cluster annotation and a single ground-truth label");
                }
                report.entries.push(MetricEntry { metric: "nmi".into(), value: nmi(&pred, &truth)?, std: None, sample_count: pred.len() });
            }
            report.save(&out)?;
            for e in &report.entries {
                println!("{}: {:.4}", e.metric, e.value);
            }
            Ok(())
        }
        Command::Sweep { common, checkpoint, dataset, out, w, sweep_clusters, variant, count, steps } => {
            let mut cfg = load_config(&common)?;
            if let Some(c) = count {
                cfg.evaluation.num_samples = c;
            }
            if let Some(s) = steps {
                cfg.evaluation.num_steps = s;
            }
            if let Some(w) = w {
                if w.is_empty() {
                    return invalid("--w needs at least one value");
                }
                cfg.evaluation.w_values = w;
            }
            if let Some(v) = variant {
                cfg.set_variant(v);
            }
            let seed = common.seed.unwrap_or(0);
            let ds = load_dataset(&dataset)?;
            let extractor = ToyExtractor::default();
            match sweep_clusters {
                Some(ks) => sweep_clusters_mode(cfg, &ds, &ks, &out, seed, &extractor),
                None => {
                    let path = checkpoint.ok_or_else(|| Error::Validation("sweep needs --checkpoint (or --sweep-clusters)".into()))?;
                    let ckpt = load_checkpoint(&path)?;
                    cfg.set_variant(ckpt.variant);
                    if cfg.evaluation.w_values.is_empty() {
                        return invalid("empty list of guidance strengths");
                    }
                    let echo = finish(&cfg)?;
                    let reference = features_of(&reference_images(&cfg, &ds)?, &extractor);
                    let rows = guidance_sweep(&ckpt, &cfg.evaluation.w_values, &reference, &extractor, cfg.evaluation.num_samples, &eval_sampler(cfg.evaluation.num_steps, 0.0, cfg.sampler.clip_denoised), seed)?;
                    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.w, r.fid)).collect();
                    let head = provenance(&echo);
                    write_text(&out.join("sweep.tsv"), &(head.clone() + &table_tsv("w", "fid", &pairs)))?;
                    write_text(&out.join("sweep.svg"), &line_plot_svg("FID vs guidance strength", "w", "FID", &pairs, &head))?;
                    let mut report = MetricReport::new(seed, echo);
                    report.sweep = rows;
                    report.save(&out.join("report.json"))?;
                    for (w, f) in pairs {
                        println!("w = {w}: FID {f:.4}");
                    }
                    Ok(())
                }
            }
        }
    }
}

/// Annotate, train and evaluate once per cluster count with one shared
/// training budget (the configured epochs and batch size).
fn sweep_clusters_mode(
    mut cfg: ExperimentConfig,
    ds: &sgdm::datasets::Dataset,
    ks: &[usize],
    out: &Path,
    seed: u64,
    extractor: &ToyExtractor,
) -> Result<()> {
    if ks.is_empty() {
        return invalid("--sweep-clusters needs at least one K");
    }
    if !matches!(cfg.train.guidance_variant, GuidanceVariant::SelfLabel | GuidanceVariant::SelfBox | GuidanceVariant::SelfSegment) {
        return invalid("--sweep-clusters needs a self-annotated variant");
    }
    let echo = finish(&cfg)?;
    let reference = features_of(&reference_images(&cfg, ds)?, extractor);
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    for &k in ks {
        cfg.annotation.num_clusters = k;
        cfg.validate()?;
        let dir = out.join(format!("k{k}"));
        let ann = annotate(ds, &cfg.annotation, None)?;
        ann.save(&dir.join("annotations.jsonl"))?;
        let outcome = run_training(&cfg, ds, Some(&ann), Some(&dir), None)?;
        let ckpt = outcome.checkpoints.last().expect("checkpoint");
        let s = CheckpointSampler::new(ckpt, eval_sampler(cfg.evaluation.num_steps, cfg.sampler.guidance_strength, cfg.sampler.clip_denoised), ConditionSpec::TrainingDistribution)?;
        let fid = fid_against(&reference, &features_of(&s.sample_images(cfg.evaluation.num_samples, seed)?, extractor))?;
        println!("K = {k}: FID {fid:.4} (NMI {:?}, {} steps, {:.1}s)", ann.header.nmi, ckpt.step, outcome.wall_time);
        rows.push((k as f64, fid));
        entries.push(MetricEntry { metric: format!("fid@k={k}"), value: fid, std: None, sample_count: cfg.evaluation.num_samples });
    }
    let head = provenance(&echo);
    write_text(&out.join("clusters.tsv"), &(head.clone() + &table_tsv("k", "fid", &rows)))?;
    write_text(&out.join("clusters.svg"), &line_plot_svg("FID vs number of clusters", "K", "FID", &rows, &head))?;
    let mut report = MetricReport::new(seed, echo);
    report.entries = entries;
    report.save(&out.join("report.json"))
}
