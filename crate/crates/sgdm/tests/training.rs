//! Library-level training and evaluation behaviour on miniature models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgdm::datasets::{generate_shapes, ShapesConfig};
use sgdm::evaluation::{eval_sampler, guidance_sweep, features_of, CheckpointSampler, ConditionSpec};
use sgdm::training::{param_hash, train, DiffusionConfig, LogRecord, TrainConfig, TrainData, TrainObserver, ImageSampler};
use sgdm::annotate::GuidanceVariant;
use sgdm_core::annotation::ToyExtractor;
use sgdm_core::denoiser::{drop_condition, DenoiserConfig, GuidanceKind, GuidanceSignal};

struct Losses(Vec<f32>);

impl TrainObserver for Losses {
    fn on_step(&mut self, r: &LogRecord) -> sgdm::Result<()> {
        self.0.push(r.loss);
        Ok(())
    }
}

fn tiny(kind: GuidanceKind, k: usize) -> DenoiserConfig {
    let mut c = DenoiserConfig::new(kind, k, 8);
    c.base_channels = 8;
    c.channel_multipliers = vec![1, 2];
    c.blocks_per_resolution = 1;
    c.attention_resolutions = vec![4];
    c.num_heads = 2;
    c.cond_embedding_dim = 16;
    c
}

fn corpus(n: usize) -> sgdm::datasets::Dataset {
    generate_shapes(&ShapesConfig { image_size: 8, count: n, num_classes: 4, min_scale: 0.5, max_scale: 0.9, ..ShapesConfig::default() }).unwrap()
}

#[test]
fn miniature_run_reduces_smoothed_loss() {
    let ds = corpus(256);
    let pixels = ds.pixels();
    let guidance: Vec<GuidanceSignal> = ds.images.iter().map(|i| GuidanceSignal::one_hot(i.gt_label().unwrap(), 4).unwrap()).collect();
    let cfg = TrainConfig {
        batch_size: 16,
        epochs: 100,
        max_steps: Some(200),
        learning_rate: 1e-3,
        ema_decay: 0.99,
        guidance_variant: GuidanceVariant::GtLabel,
        ..TrainConfig::default()
    };
    let mut losses = Losses(Vec::new());
    let out = train(
        TrainData { images: &pixels, guidance: &guidance },
        &tiny(GuidanceKind::Label, 4),
        &DiffusionConfig::default(),
        &cfg,
        None,
        serde_json::Value::Null,
        &mut losses,
    )
    .unwrap();
    assert_eq!(out.last().unwrap().step, 200);
    let l = &losses.0;
    assert_eq!(l.len(), 200);
    let first: f32 = l[..100].iter().sum::<f32>() / 100.0;
    let last: f32 = l[100..].iter().sum::<f32>() / 100.0;
    assert!(last < first, "moving average went from {first} to {last}");
}

#[test]
fn dropout_is_per_image() {
    let g = GuidanceSignal::one_hot(1, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch: Vec<GuidanceSignal> = (0..64).map(|_| drop_condition(&g, 0.5, &mut rng).unwrap()).collect();
    let nulls = batch.iter().filter(|s| s.is_null()).count();
    assert!(nulls > 0 && nulls < 64, "{nulls}");
}

#[test]
fn sweep_rows_deterministic_and_w0_is_unconditional() {
    let ds = corpus(64);
    let pixels = ds.pixels();
    let guidance: Vec<GuidanceSignal> = ds.images.iter().map(|i| GuidanceSignal::one_hot(i.gt_label().unwrap(), 4).unwrap()).collect();
    let cfg = TrainConfig { batch_size: 32, epochs: 1, ema_decay: 0.5, guidance_variant: GuidanceVariant::GtLabel, ..TrainConfig::default() };
    let diffusion = DiffusionConfig { timesteps: 50, ..DiffusionConfig::default() };
    let ckpts = train(
        TrainData { images: &pixels, guidance: &guidance },
        &tiny(GuidanceKind::Label, 4),
        &diffusion,
        &cfg,
        None,
        serde_json::Value::Null,
        &mut sgdm::training::NoObserver,
    )
    .unwrap();
    let ck = ckpts.last().unwrap();
    let e = ToyExtractor::default();
    let reference = features_of(&pixels, &e);
    let ws = [0.0, 1.0, 2.0];
    let a = guidance_sweep(ck, &ws, &reference, &e, 24, &eval_sampler(4, 0.0, false), 3).unwrap();
    let b = guidance_sweep(ck, &ws, &reference, &e, 24, &eval_sampler(4, 0.0, false), 3).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);

    // Sampling the unconditional path directly gives the w = 0 row.
    let null = ConditionSpec::Fixed(GuidanceSignal::null_label(4));
    let direct = CheckpointSampler::new(ck, eval_sampler(4, 1.0, false), null).unwrap().sample_images(24, 3).unwrap();
    let fid0 = sgdm::evaluation::fid_against(&reference, &features_of(&direct, &e)).unwrap();
    assert_eq!(fid0, a[0].fid);

    // Evaluation samples come from the EMA shadow.
    let s = CheckpointSampler::new(ck, eval_sampler(4, 1.0, false), ConditionSpec::TrainingDistribution).unwrap();
    assert_eq!(param_hash(s.model().params()), param_hash(&ck.ema));
    assert_ne!(param_hash(&ck.ema), param_hash(&ck.params));
}
