//! Training loop, checkpoints and checkpoint selection.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sgdm_core::annotation::{FeatureExtractor, Mask};
use sgdm_core::denoiser::{drop_condition, DenoiserConfig, Gradients, GuidanceKind, GuidanceSignal, Tensor, UNet};
use sgdm_core::diffusion::{forward_sample, standard_normal, NoiseSchedule};
use sgdm_core::optim::{ema_update, AdamW};
use sgdm_core::Image;

use crate::annotate::GuidanceVariant;
use crate::error::{invalid, Error, Result};
use crate::evaluation::{features_of, fid_against};
use crate::formats::{read_blob, read_f32s, read_magic, rle_decode, rle_encode, truncated, write_atomic, write_blob, write_f32s, RleMask, VERSION};

pub const CKPT_MAGIC: &[u8; 12] = b"SGDM-CKPT-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Ramp the EMA decay as `min(ema_decay, (1 + n) / (10 + n))` after `n`
    /// updates, so short runs are not dominated by the initial weights.
    pub ema_warmup: bool,
    /// Probability of replacing an image's guidance with the null signal.
    pub p_uncond: f64,
    pub checkpoint_every_epochs: usize,
    pub seed: u64,
    pub guidance_variant: GuidanceVariant,
    /// Gradients are computed on fixed-size slices of each batch (in parallel
    /// when threads are available) and summed in order, so results do not
    /// depend on the thread count.
    pub micro_batch: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 64,
            epochs: 30,
            weight_decay: 0.01,
            ema_decay: 0.9999,
            ema_warmup: true,
            p_uncond: 0.1,
            checkpoint_every_epochs: 10,
            seed: 0,
            guidance_variant: GuidanceVariant::None,
            micro_batch: 16,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_decay) {
            return invalid("ema_decay must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return invalid("p_uncond must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.micro_batch == 0 || self.checkpoint_every_epochs == 0 {
            return invalid("batch_size, micro_batch and checkpoint_every_epochs must be positive");
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return invalid("learning_rate must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Network parameters, EMA shadow, configuration and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserCheckpoint {
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub variant: GuidanceVariant,
    pub step: u64,
    pub epoch: usize,
    pub params: Vec<Tensor<f32>>,
    pub ema: Vec<Tensor<f32>>,
    pub optimizer: Option<OptimizerState>,
    /// Guidance signals of the training set, used to draw conditions that
    /// follow the training distribution at sampling time.
    pub guidance_bank: Vec<GuidanceSignal>,
    /// Free-form provenance (the experiment configuration).
    pub echo: serde_json::Value,
}

/// FNV-1a over the bit patterns of a parameter set.
pub fn param_hash(params: &[Tensor<f32>]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for p in params {
        for &v in p.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

impl DenoiserCheckpoint {
    /// The network evaluation and sampling use: EMA weights.
    pub fn sampling_model(&self) -> Result<UNet<f32>> {
        Ok(UNet::from_params(self.denoiser.clone(), self.ema.clone())?)
    }

    pub fn raw_model(&self) -> Result<UNet<f32>> {
        Ok(UNet::from_params(self.denoiser.clone(), self.params.clone())?)
    }

    pub fn num_clusters(&self) -> usize {
        self.denoiser.num_clusters()
    }
}

#[derive(Serialize, Deserialize)]
struct BankEntry {
    active: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    mask: Option<RleMask>,
}

fn bank_entry(g: &GuidanceSignal) -> BankEntry {
    let k = g.label().len() - 1;
    let active = (0..k).filter(|&i| g.label()[i] == 1.0).collect();
    let mask = g.spatial().map(|s| {
        let (h, w) = s.spatial_dims();
        rle_encode(&Mask { channels: s.channels(), height: h, width: w, data: s.mask().iter().map(|&v| v as u8).collect() })
    });
    BankEntry { active, mask }
}

fn bank_signal(e: &BankEntry, kind: GuidanceKind, k: usize) -> Result<GuidanceSignal> {
    let base = if kind == GuidanceKind::None { GuidanceSignal::none() } else { GuidanceSignal::multi_hot(&e.active, k)? };
    Ok(match (kind, &e.mask) {
        (GuidanceKind::Box, Some(m)) => {
            let m = rle_decode(m)?;
            base.with_box(m.height, m.width, m.to_f32())?
        }
        (GuidanceKind::Segmentation, Some(m)) => {
            let m = rle_decode(m)?;
            base.with_segmentation(m.channels, m.height, m.width, m.to_f32())?
        }
        (GuidanceKind::Box | GuidanceKind::Segmentation, None) => {
            return Err(Error::Format("guidance bank entry lacks its mask".into()))
        }
        _ => base,
    })
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: String,
    denoiser: DenoiserConfig,
    diffusion: DiffusionConfig,
    variant: GuidanceVariant,
    step: u64,
    epoch: usize,
    shapes: Vec<Vec<usize>>,
    has_optimizer: bool,
    optimizer_step: u64,
    bank: Vec<BankEntry>,
    echo: serde_json::Value,
}

pub fn save_checkpoint(ckpt: &DenoiserCheckpoint, path: &Path) -> Result<()> {
    let header = CkptHeader {
        version: VERSION.into(),
        denoiser: ckpt.denoiser.clone(),
        diffusion: ckpt.diffusion,
        variant: ckpt.variant,
        step: ckpt.step,
        epoch: ckpt.epoch,
        shapes: ckpt.params.iter().map(|p| p.shape().to_vec()).collect(),
        has_optimizer: ckpt.optimizer.is_some(),
        optimizer_step: ckpt.optimizer.as_ref().map_or(0, |o| o.step),
        bank: ckpt.guidance_bank.iter().map(bank_entry).collect(),
        echo: ckpt.echo.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    write_atomic(path, |w| {
        w.write_all(CKPT_MAGIC)?;
        write_blob(w, &header)?;
        for set in [&ckpt.params, &ckpt.ema] {
            for p in set.iter() {
                write_f32s(w, p.data())?;
            }
        }
        if let Some(o) = &ckpt.optimizer {
            for moments in [&o.m, &o.v] {
                for m in moments.iter() {
                    w.write_u64::<LE>(m.len() as u64)?;
                    for &x in m {
                        w.write_f64::<LE>(x)?;
                    }
                }
            }
        }
        Ok(())
    })
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserCheckpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let limit = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    read_magic(&mut r, CKPT_MAGIC, path)?;
    let t = |e| truncated(path, e);
    let h: CkptHeader = serde_json::from_slice(&read_blob(&mut r, limit).map_err(t)?)?;
    h.denoiser.validate()?;
    let read_set = |r: &mut BufReader<File>| -> Result<Vec<Tensor<f32>>> {
        h.shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                if n as u64 * 4 > limit {
                    return Err(Error::Format(format!("{}: tensor larger than file", path.display())));
                }
                Ok(Tensor::new(s, read_f32s(r, n).map_err(t)?)?)
            })
            .collect()
    };
    let params = read_set(&mut r)?;
    let ema = read_set(&mut r)?;
    let optimizer = if h.has_optimizer {
        let mut read_moments = || -> Result<Vec<Vec<f64>>> {
            let mut out = Vec::new();
            for _ in 0..h.shapes.len() {
                let n = r.read_u64::<LE>().map_err(t)?;
                if n * 8 > limit {
                    return Err(Error::Format(format!("{}: optimizer state larger than file", path.display())));
                }
                let mut m = vec![0f64; n as usize];
                r.read_f64_into::<LE>(&mut m).map_err(t)?;
                out.push(m);
            }
            Ok(out)
        };
        let m = read_moments()?;
        let v = read_moments()?;
        Some(OptimizerState { step: h.optimizer_step, m, v })
    } else {
        None
    };
    let kind = h.denoiser.guidance;
    let k = h.denoiser.num_clusters();
    let guidance_bank = h.bank.iter().map(|e| bank_signal(e, kind, k)).collect::<Result<Vec<_>>>()?;
    // Validate the parameter layout against the architecture.
    UNet::from_params(h.denoiser.clone(), params.clone())?;
    Ok(DenoiserCheckpoint {
        denoiser: h.denoiser,
        diffusion: h.diffusion,
        variant: h.variant,
        step: h.step,
        epoch: h.epoch,
        params,
        ema,
        optimizer,
        guidance_bank,
        echo: h.echo,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f32,
    pub lr: f64,
    pub wall_time: f64,
}

/// Receives progress while training runs.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _ckpt: &DenoiserCheckpoint) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;
impl TrainObserver for NoObserver {}

/// Writes every step to a line-delimited log and every checkpoint to
/// `<dir>/ckpt-<step>.bin` plus `<dir>/latest.bin`.
pub struct DiskObserver {
    pub dir: std::path::PathBuf,
    log: std::io::BufWriter<File>,
}

impl DiskObserver {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train_log.jsonl");
        let file = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { dir: dir.to_path_buf(), log: std::io::BufWriter::new(file) })
    }
}

impl TrainObserver for DiskObserver {
    fn on_step(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.log, "{line}").map_err(|e| Error::io(&self.dir, e))
    }

    fn on_checkpoint(&mut self, ckpt: &DenoiserCheckpoint) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(&self.dir, e))?;
        save_checkpoint(ckpt, &self.dir.join(format!("ckpt-{:08}.bin", ckpt.step)))?;
        save_checkpoint(ckpt, &self.dir.join("latest.bin"))
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    rng.set_stream(step);
    rng
}

/// EMA decay for the update following `step` optimizer steps.
pub fn ema_decay_at(config: &TrainConfig, step: u64) -> f64 {
    if config.ema_warmup {
        config.ema_decay.min((1 + step) as f64 / (10 + step) as f64)
    } else {
        config.ema_decay
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn add_grads(acc: &mut Gradients<f32>, g: Gradients<f32>, weight: f32) {
    for (a, b) in acc.grads.iter_mut().zip(g.grads) {
        let Some(b) = b else { continue };
        match a {
            Some(a) => a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += weight * y),
            None => *a = Some(b.map(|v| v * weight)),
        }
    }
}

/// Everything `train` needs besides the configuration.
pub struct TrainData<'a> {
    pub images: &'a [Image],
    /// One signal per image (all `GuidanceSignal::none()` when unguided).
    pub guidance: &'a [GuidanceSignal],
}

/// Trains a denoiser, returning the initial checkpoint followed by one every
/// `checkpoint_every_epochs` epochs and the final one.
///
/// When `resume` is given, parameters, EMA, optimizer state and counters
/// continue from it and training proceeds to `config.epochs`.
pub fn train(
    data: TrainData<'_>,
    denoiser: &DenoiserConfig,
    diffusion: &DiffusionConfig,
    config: &TrainConfig,
    resume: Option<DenoiserCheckpoint>,
    echo: serde_json::Value,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<DenoiserCheckpoint>> {
    config.validate()?;
    denoiser.validate()?;
    let n = data.images.len();
    if data.guidance.len() != n {
        return invalid(format!("{} guidance signals for {n} images", data.guidance.len()));
    }
    if n == 0 {
        return invalid("empty training set");
    }
    if let Some(g) = data.guidance.iter().find(|g| g.kind() != denoiser.guidance) {
        return invalid(format!("{:?} guidance for a {:?} denoiser", g.kind(), denoiser.guidance));
    }
    let schedule = diffusion.schedule()?;
    let pixels = Tensor::<f32>::from_images(data.images)?;
    let item_len = pixels.len() / n;
    let [c, h, w] = [pixels.shape()[1], pixels.shape()[2], pixels.shape()[3]];

    let (mut net, mut ema, mut opt, mut step, start_epoch) = match resume {
        Some(ck) => {
            if &ck.denoiser != denoiser {
                return invalid("resume checkpoint has a different architecture");
            }
            let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
            if let Some(o) = ck.optimizer {
                opt.restore(o.step, o.m, o.v)?;
            }
            (UNet::from_params(denoiser.clone(), ck.params)?, ck.ema, opt, ck.step, ck.epoch)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let net = UNet::<f32>::new(denoiser.clone(), &mut rng)?;
            let ema = net.params().to_vec();
            (net, ema, AdamW::new(config.learning_rate, config.weight_decay), 0, 0)
        }
    };

    let snapshot = |net: &UNet<f32>, ema: &[Tensor<f32>], opt: &AdamW, step: u64, epoch: usize| {
        let (m, v) = opt.moments();
        DenoiserCheckpoint {
            denoiser: denoiser.clone(),
            diffusion: *diffusion,
            variant: config.guidance_variant,
            step,
            epoch,
            params: net.params().to_vec(),
            ema: ema.to_vec(),
            optimizer: (!m.is_empty()).then(|| OptimizerState { step: opt.steps_taken(), m: m.to_vec(), v: v.to_vec() }),
            guidance_bank: data.guidance.to_vec(),
            echo: echo.clone(),
        }
    };
    let mut checkpoints = vec![snapshot(&net, &ema, &opt, step, start_epoch)];
    if start_epoch == 0 {
        observer.on_checkpoint(&checkpoints[0])?;
    }
    let started = Instant::now();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let skip_in_epoch = (step as usize).saturating_sub(start_epoch * steps_per_epoch);
    let mut stop = false;
    for epoch in start_epoch..config.epochs {
        let order = epoch_order(config.seed, epoch, n);
        for batch in order.chunks(config.batch_size).skip(if epoch == start_epoch { skip_in_epoch } else { 0 }) {
            if config.max_steps.is_some_and(|m| step >= m) {
                stop = true;
                break;
            }
            let mut rng = step_rng(config.seed, step);
            let bn = batch.len();
            let mut x0 = Vec::with_capacity(bn * item_len);
            for &i in batch {
                x0.extend_from_slice(pixels.item(i));
            }
            let x0 = Tensor::new(&[bn, c, h, w], x0)?;
            let t: Vec<usize> = (0..bn).map(|_| rng.random_range(0..schedule.num_timesteps())).collect();
            let eps: Tensor<f32> = standard_normal(x0.shape(), &mut rng);
            let x_t = forward_sample(&x0, &t, &eps, &schedule)?;
            let guidance = batch
                .iter()
                .map(|&i| drop_condition(&data.guidance[i], config.p_uncond, &mut rng))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let seeds: Vec<u64> = (0..bn.div_ceil(config.micro_batch)).map(|_| rng.random()).collect();
            let net_ref = &net;
            let parts = (0..seeds.len())
                .into_par_iter()
                .map(|j| {
                    let (a, b) = (j * config.micro_batch, ((j + 1) * config.micro_batch).min(bn));
                    let mut drng = ChaCha8Rng::seed_from_u64(seeds[j]);
                    let (loss, g) = net_ref.loss_and_grad(
                        &x_t.slice_batch(a, b),
                        &t[a..b],
                        &guidance[a..b],
                        &eps.slice_batch(a, b),
                        Some(&mut drng),
                    )?;
                    Ok(((b - a) as f32 / bn as f32, loss, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Gradients { grads: vec![None; net.params().len()] };
            let mut loss = 0.0f32;
            for (wgt, l, g) in parts {
                loss += wgt * l;
                add_grads(&mut grads, g, wgt);
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, epoch, loss });
            }
            opt.step(net.params_mut(), &grads)?;
            ema_update(&mut ema, net.params(), ema_decay_at(config, step))?;
            step += 1;
            observer.on_step(&LogRecord { step, epoch, loss, lr: config.learning_rate, wall_time: started.elapsed().as_secs_f64() })?;
        }
        if stop {
            break;
        }
        let done = epoch + 1;
        if done % config.checkpoint_every_epochs == 0 || done == config.epochs {
            let ck = snapshot(&net, &ema, &opt, step, done);
            observer.on_checkpoint(&ck)?;
            checkpoints.push(ck);
        }
    }
    if stop && checkpoints.last().is_none_or(|c| c.step != step) {
        let epoch = (step as usize) / steps_per_epoch;
        let ck = snapshot(&net, &ema, &opt, step, epoch);
        observer.on_checkpoint(&ck)?;
        checkpoints.push(ck);
    }
    Ok(checkpoints)
}

/// Anything that can produce images for evaluation.
pub trait ImageSampler: Sync {
    fn sample_images(&self, count: usize, seed: u64) -> Result<Vec<Image>>;
}

/// Picks the candidate whose samples have the lowest FID against
/// `reference`; ties go to the earliest. Returns the index and all scores.
pub fn select_checkpoint<S: ImageSampler, E: FeatureExtractor + Sync>(
    candidates: &[S],
    reference: &[Image],
    extractor: &E,
    num_samples: usize,
    seed: u64,
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return invalid("no checkpoints to select from");
    }
    if candidates.len() == 1 {
        return Ok((0, vec![f64::NAN]));
    }
    let reference = features_of(reference, extractor);
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        let samples = c.sample_images(num_samples, seed)?;
        scores.push(fid_against(&reference, &features_of(&samples, extractor))?);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_shapes, ShapesConfig};
    use sgdm_core::annotation::ToyExtractor;

    pub(crate) fn tiny_model(kind: GuidanceKind, k: usize, size: usize) -> DenoiserConfig {
        let mut c = DenoiserConfig::new(kind, k, size);
        c.base_channels = 8;
        c.channel_multipliers = vec![1, 2];
        c.blocks_per_resolution = 1;
        c.attention_resolutions = vec![];
        c.num_heads = 2;
        c.cond_embedding_dim = 16;
        c
    }

    fn tiny_data(n: usize) -> (Vec<Image>, Vec<GuidanceSignal>) {
        let ds = generate_shapes(&ShapesConfig { image_size: 8, count: n, min_scale: 0.5, max_scale: 0.8, ..ShapesConfig::default() }).unwrap();
        let g = ds.images.iter().map(|i| GuidanceSignal::one_hot(i.gt_label().unwrap(), 6).unwrap()).collect();
        (ds.pixels(), g)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs,
            checkpoint_every_epochs: 2,
            ema_decay: 0.99,
            learning_rate: 1e-3,
            guidance_variant: GuidanceVariant::GtLabel,
            micro_batch: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ema_warmup_ramps_to_the_configured_decay() {
        let c = TrainConfig { ema_decay: 0.999, ..TrainConfig::default() };
        assert_eq!(ema_decay_at(&c, 0), 0.1);
        assert_eq!(ema_decay_at(&c, 90), 0.91);
        assert_eq!(ema_decay_at(&c, 1_000_000), 0.999);
        let flat = TrainConfig { ema_warmup: false, ..c };
        assert_eq!(ema_decay_at(&flat, 0), 0.999);
    }

    #[test]
    fn zero_epochs_gives_init_only() {
        let (imgs, g) = tiny_data(16);
        let model = tiny_model(GuidanceKind::Label, 6, 8);
        let out = train(TrainData { images: &imgs, guidance: &g }, &model, &DiffusionConfig::default(), &cfg(0), None, serde_json::Value::Null, &mut NoObserver).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].step, 0);
        assert_eq!(out[0].params, out[0].ema);
    }

    #[test]
    fn deterministic_and_resumable() {
        let (imgs, g) = tiny_data(32);
        let model = tiny_model(GuidanceKind::Label, 6, 8);
        let run = |c: &TrainConfig, resume| {
            train(TrainData { images: &imgs, guidance: &g }, &model, &DiffusionConfig::default(), c, resume, serde_json::Value::Null, &mut NoObserver).unwrap()
        };
        let a = run(&cfg(4), None);
        let b = run(&cfg(4), None);
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(param_hash(&x.params), param_hash(&y.params));
            assert_eq!(param_hash(&x.ema), param_hash(&y.ema));
        }
        // Resuming from the epoch-2 checkpoint reproduces the uninterrupted run.
        let resumed = run(&cfg(4), Some(a[1].clone()));
        let last = resumed.last().unwrap();
        assert!(last.step > a[1].step);
        assert_eq!(last.step, a[2].step);
        assert_eq!(param_hash(&last.params), param_hash(&a[2].params));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (imgs, _) = tiny_data(8);
        let mut mask = vec![0.0f32; 64];
        mask[10] = 1.0;
        let g: Vec<GuidanceSignal> = (0..8).map(|i| GuidanceSignal::one_hot(i % 3, 3).unwrap().with_box(8, 8, mask.clone()).unwrap()).collect();
        let model = tiny_model(GuidanceKind::Box, 3, 8);
        let c = TrainConfig { guidance_variant: GuidanceVariant::GtBox, ..cfg(1) };
        let out = train(TrainData { images: &imgs, guidance: &g }, &model, &DiffusionConfig::default(), &c, None, serde_json::json!({"k": 1}), &mut NoObserver).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(out.last().unwrap(), &path).unwrap();
        assert_eq!(&load_checkpoint(&path).unwrap(), out.last().unwrap());
        std::fs::write(&path, b"SGDM-DATA-v1....").unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("SGDM-CKPT-v1"));
    }

    #[test]
    fn sampling_model_uses_ema() {
        let (imgs, g) = tiny_data(16);
        let model = tiny_model(GuidanceKind::Label, 6, 8);
        let out = train(TrainData { images: &imgs, guidance: &g }, &model, &DiffusionConfig::default(), &cfg(1), None, serde_json::Value::Null, &mut NoObserver).unwrap();
        let ck = out.last().unwrap();
        assert_ne!(param_hash(&ck.params), param_hash(&ck.ema));
        assert_eq!(param_hash(ck.sampling_model().unwrap().params()), param_hash(&ck.ema));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig { ema_decay: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { p_uncond: 1.5, ..TrainConfig::default() }.validate().is_err());
    }

    struct Fixed(Vec<Image>);
    impl ImageSampler for Fixed {
        fn sample_images(&self, count: usize, _seed: u64) -> Result<Vec<Image>> {
            Ok(self.0.iter().cycle().take(count).cloned().collect())
        }
    }

    struct Noise;
    impl ImageSampler for Noise {
        fn sample_images(&self, count: usize, seed: u64) -> Result<Vec<Image>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..count)
                .map(|_| Image::new(3, 8, 8, (0..192).map(|_| rng.random_range(-1.0..1.0f32)).collect()).unwrap())
                .collect())
        }
    }

    #[test]
    fn selection_prefers_oracle() {
        let (imgs, _) = tiny_data(200);
        let e = ToyExtractor::default();
        let (best, scores) = select_checkpoint(&[Box::new(Noise) as Box<dyn ImageSampler>, Box::new(Fixed(imgs.clone()))], &imgs, &e, 200, 1).unwrap();
        assert_eq!(best, 1, "{scores:?}");
        assert!(scores[1] < 1e-6);
        assert_eq!(select_checkpoint(&[Noise], &imgs, &e, 10, 0).unwrap().0, 0);
        // Identical candidates tie; the earliest wins.
        assert_eq!(select_checkpoint(&[Fixed(imgs.clone()), Fixed(imgs.clone())], &imgs, &e, 200, 0).unwrap().0, 0);
    }

    impl ImageSampler for Box<dyn ImageSampler> {
        fn sample_images(&self, count: usize, seed: u64) -> Result<Vec<Image>> {
            (**self).sample_images(count, seed)
        }
    }
}
