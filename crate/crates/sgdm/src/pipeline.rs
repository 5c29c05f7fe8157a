//! Glue shared by the subcommands: building a denoiser for a dataset and
//! annotation set, training runs, and reference corpora.

use std::path::Path;
use std::time::Instant;

use sgdm_core::denoiser::{DenoiserConfig, GuidanceKind, GuidanceSignal};
use sgdm_core::Image;

use crate::annotate::{AnnotationSet, GuidanceVariant};
use crate::config::{ExperimentConfig, ReferenceSet};
use crate::datasets::{generate_shapes, Dataset, ShapesConfig};
use crate::error::{invalid, Result};
use crate::training::{train, DenoiserCheckpoint, DiskObserver, NoObserver, TrainData, TrainObserver};

/// Guidance signals and denoiser architecture for one training run.
pub fn prepare(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    annotations: Option<&AnnotationSet>,
) -> Result<(DenoiserConfig, Vec<GuidanceSignal>)> {
    let variant = cfg.train.guidance_variant;
    let size = dataset.images.first().map_or(cfg.data.image_size, |i| i.pixels.height);
    match (variant, annotations) {
        (GuidanceVariant::None, _) => {
            Ok((cfg.model.denoiser(GuidanceKind::None, 0, size), vec![GuidanceSignal::none(); dataset.len()]))
        }
        (_, None) => invalid(format!("variant {variant} needs an annotation file")),
        (_, Some(a)) => {
            if a.header.variant != variant {
                return invalid(format!("annotations are for variant {}, training asks for {variant}", a.header.variant));
            }
            let guidance = a.guidance_for(dataset)?;
            Ok((cfg.model.denoiser(variant.kind(), a.header.num_clusters, size), guidance))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<DenoiserCheckpoint>,
    pub wall_time: f64,
}

/// Trains per `cfg`, writing checkpoints and the log under `out_dir` if given.
pub fn run_training(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    annotations: Option<&AnnotationSet>,
    out_dir: Option<&Path>,
    resume: Option<DenoiserCheckpoint>,
) -> Result<TrainOutcome> {
    let (denoiser, guidance) = prepare(cfg, dataset, annotations)?;
    let pixels = dataset.pixels();
    let data = TrainData { images: &pixels, guidance: &guidance };
    let mut disk;
    let mut none = NoObserver;
    let observer: &mut dyn TrainObserver = match out_dir {
        Some(d) => {
            disk = DiskObserver::new(d)?;
            &mut disk
        }
        None => &mut none,
    };
    let started = Instant::now();
    let checkpoints = train(data, &denoiser, &cfg.diffusion, &cfg.train, resume, cfg.echo(), observer)?;
    Ok(TrainOutcome { checkpoints, wall_time: started.elapsed().as_secs_f64() })
}

/// Images FID is measured against.
pub fn reference_images(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Vec<Image>> {
    Ok(match cfg.evaluation.reference {
        ReferenceSet::Train => dataset.pixels(),
        ReferenceSet::Fresh => {
            let c = ShapesConfig { seed: cfg.evaluation.reference_seed, ..dataset.config.clone() };
            generate_shapes(&c)?.pixels()
        }
    })
}
