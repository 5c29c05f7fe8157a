//! Conditional UNet noise predictor.
//!
//! The timestep (sinusoid → MLP) and guidance (label → MLP) embeddings are
//! concatenated into one conditioning vector. Every residual block projects
//! that vector with its own affine map and adds the result as a per-channel
//! bias right after its first normalization. Box and segmentation masks are
//! concatenated to the noisy image before the first convolution. The null
//! condition goes through exactly the same parameters as real conditions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::diffusion::NoisePredictor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

use super::graph::{Gradients, Graph, Var};
use super::guidance::{GuidanceKind, GuidanceSignal};
use super::tensor::Tensor;

/// Channels of the predicted noise (RGB).
pub const IMAGE_CHANNELS: usize = 3;
/// Width of the sinusoidal timestep encoding fed to the timestep MLP.
pub const TIME_SINUSOID_DIM: usize = 512;
/// Output width of the timestep MLP.
pub const TIME_EMBED_DIM: usize = 128;
const MAX_NORM_GROUPS: usize = 32;

/// Architecture of the denoiser.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct DenoiserConfig {
    pub image_size: usize,
    /// Image channels plus mask channels (3, 4 for boxes, 3 + K for segmentation).
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_resolution: usize,
    /// Feature-map sizes (in pixels) at which self-attention is applied.
    pub attention_resolutions: Vec<usize>,
    pub num_heads: usize,
    pub cond_embedding_dim: usize,
    pub cond_mlp_layers: usize,
    /// `K + 1`: real clusters plus the null slot.
    pub label_dim: usize,
    pub dropout: f64,
    pub guidance: GuidanceKind,
}

impl DenoiserConfig {
    /// Paper-scale defaults for a `guidance` model with `num_clusters` clusters.
    pub fn new(guidance: GuidanceKind, num_clusters: usize, image_size: usize) -> Self {
        let num_clusters = if guidance == GuidanceKind::None { 0 } else { num_clusters };
        Self {
            image_size,
            in_channels: IMAGE_CHANNELS + guidance.extra_channels(num_clusters),
            base_channels: 128,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_resolution: 2,
            attention_resolutions: vec![8],
            num_heads: 8,
            cond_embedding_dim: 256,
            cond_mlp_layers: 2,
            label_dim: num_clusters + 1,
            dropout: 0.0,
            guidance,
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.label_dim - 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channel_multipliers.is_empty() {
            return bad("channel_multipliers must not be empty".into());
        }
        let factor = 1usize << (self.channel_multipliers.len() - 1);
        if self.image_size == 0 || self.image_size % factor != 0 {
            return bad(format!("image_size {} not divisible by {factor}", self.image_size));
        }
        if self.label_dim == 0 {
            return bad("label_dim must be >= 1".into());
        }
        if self.guidance == GuidanceKind::None && self.label_dim != 1 {
            return bad("unguided models use label_dim = 1".into());
        }
        if self.guidance != GuidanceKind::None && self.label_dim < 2 {
            return bad("guided models need at least one cluster (label_dim >= 2)".into());
        }
        let expected = IMAGE_CHANNELS + self.guidance.extra_channels(self.num_clusters());
        if self.in_channels != expected {
            return bad(format!("in_channels {} inconsistent with {:?} guidance (expected {expected})", self.in_channels, self.guidance));
        }
        if self.base_channels == 0 || self.blocks_per_resolution == 0 || self.num_heads == 0 {
            return bad("base_channels, blocks_per_resolution and num_heads must be positive".into());
        }
        if self.cond_embedding_dim == 0 || self.cond_mlp_layers == 0 {
            return bad("conditioning MLP must have positive width and depth".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for &m in &self.channel_multipliers {
            let ch = m * self.base_channels;
            if m == 0 || ch % self.num_heads != 0 {
                return bad(format!("channel width {ch} must be positive and divisible by num_heads {}", self.num_heads));
            }
        }
        Ok(())
    }
}

/// Number of groups used to normalize `channels` channels.
pub fn norm_groups(channels: usize) -> usize {
    let mut g = channels.min(MAX_NORM_GROUPS);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

/// Interleaved sinusoidal encoding: `[sin(t·f0), cos(t·f0), sin(t·f1), ...]`.
pub fn timestep_sinusoid(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = libm::pow(10_000.0, -(2.0 * i as f64) / dim as f64);
        let arg = t as f64 * freq;
        out[2 * i] = libm::sin(arg);
        out[2 * i + 1] = libm::cos(arg);
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    emb: Lin,
    conv1: Conv,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: Norm,
    qkv: Conv,
    proj: Conv,
    heads: usize,
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

#[derive(Debug, Clone)]
enum DownLayer {
    Block(Stage),
    Downsample(Conv),
}

#[derive(Debug, Clone)]
struct UpLevel {
    blocks: Vec<Stage>,
    upsample: Option<Conv>,
}

#[derive(Debug, Clone)]
struct Layers {
    time_mlp: Vec<Lin>,
    guide_mlp: Vec<Lin>,
    conv_in: Conv,
    down: Vec<DownLayer>,
    mid: (ResBlock, AttnBlock, ResBlock),
    up: Vec<UpLevel>,
    norm_out: Norm,
    conv_out: Conv,
}

struct Builder<'r, F, R: ?Sized> {
    params: Vec<Tensor<F>>,
    names: Vec<String>,
    rng: &'r mut R,
}

impl<F: Scalar, R: Rng + ?Sized> Builder<'_, F, R> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::lit(self.rng.random_range(-bound..=bound))).collect();
        self.add(name, Tensor::new(shape, data).expect("shape"))
    }

    fn add(&mut self, name: String, t: Tensor<F>) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Lin {
        let bound = 1.0 / libm::sqrt(fin as f64);
        Lin { w: self.uniform(format!("{name}.weight"), &[fout, fin], bound), b: self.uniform(format!("{name}.bias"), &[fout], bound) }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, zero: bool) -> Conv {
        let (w, b) = if zero {
            (self.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k])), self.add(format!("{name}.bias"), Tensor::zeros(&[cout])))
        } else {
            let bound = 1.0 / libm::sqrt((cin * k * k) as f64);
            (self.uniform(format!("{name}.weight"), &[cout, cin, k, k], bound), self.uniform(format!("{name}.bias"), &[cout], bound))
        };
        Conv { w, b, stride, pad }
    }

    fn norm(&mut self, name: &str, ch: usize) -> Norm {
        let gamma = self.add(format!("{name}.gamma"), Tensor::full(&[ch], F::one()));
        let beta = self.add(format!("{name}.beta"), Tensor::zeros(&[ch]));
        Norm { gamma, beta, groups: norm_groups(ch) }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, cond_dim: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            emb: self.linear(&format!("{name}.cond_proj"), cond_dim, cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, 1, false),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, 1, true),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, 0, false)),
        }
    }

    fn attn_block(&mut self, name: &str, ch: usize, heads: usize) -> AttnBlock {
        AttnBlock {
            norm: self.norm(&format!("{name}.norm"), ch),
            qkv: self.conv(&format!("{name}.qkv"), ch, 3 * ch, 1, 1, 0, false),
            proj: self.conv(&format!("{name}.proj"), ch, ch, 1, 1, 0, true),
            heads,
        }
    }
}

/// Placeholder randomness for networks whose parameters are overwritten.
struct ZeroRng;

impl RngCore for ZeroRng {
    fn next_u32(&mut self) -> u32 {
        0
    }

    fn next_u64(&mut self) -> u64 {
        0
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(0);
    }
}

/// The noise-prediction network ε_θ.
#[derive(Debug, Clone)]
pub struct UNet<F: Scalar = f32> {
    config: DenoiserConfig,
    params: Vec<Tensor<F>>,
    names: Vec<String>,
    layers: Layers,
}

impl<F: Scalar> UNet<F> {
    /// Builds a freshly initialized network.
    ///
    /// Weights are uniform in `±1/sqrt(fan_in)`; the last convolution of
    /// every residual/attention branch and the output convolution start at
    /// zero so that each block is initially the identity.
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { params: Vec::new(), names: Vec::new(), rng };
        let cond_dim = TIME_EMBED_DIM + config.cond_embedding_dim;
        let time_mlp = vec![b.linear("time_mlp.0", TIME_SINUSOID_DIM, TIME_EMBED_DIM), b.linear("time_mlp.1", TIME_EMBED_DIM, TIME_EMBED_DIM)];
        let mut guide_mlp = vec![b.linear("guide_mlp.0", config.label_dim, config.cond_embedding_dim)];
        for i in 1..config.cond_mlp_layers {
            guide_mlp.push(b.linear(&format!("guide_mlp.{i}"), config.cond_embedding_dim, config.cond_embedding_dim));
        }
        let base = config.base_channels;
        let conv_in = b.conv("conv_in", config.in_channels, base, 3, 1, 1, false);
        let levels = config.channel_multipliers.len();
        let mut skip_chans = vec![base];
        let mut ch = base;
        let mut res = config.image_size;
        let mut down = Vec::new();
        for (level, &mult) in config.channel_multipliers.iter().enumerate() {
            for i in 0..config.blocks_per_resolution {
                let name = format!("down.{level}.{i}");
                let block = b.res_block(&name, ch, mult * base, cond_dim);
                ch = mult * base;
                let attn = config.attention_resolutions.contains(&res).then(|| b.attn_block(&format!("{name}.attn"), ch, config.num_heads));
                down.push(DownLayer::Block(Stage { res: block, attn }));
                skip_chans.push(ch);
            }
            if level + 1 < levels {
                down.push(DownLayer::Downsample(b.conv(&format!("down.{level}.downsample"), ch, ch, 3, 2, 1, false)));
                res /= 2;
                skip_chans.push(ch);
            }
        }
        let mid = (
            b.res_block("mid.0", ch, ch, cond_dim),
            b.attn_block("mid.attn", ch, config.num_heads),
            b.res_block("mid.1", ch, ch, cond_dim),
        );
        let mut up = Vec::new();
        for (level, &mult) in config.channel_multipliers.iter().enumerate().rev() {
            let mut blocks = Vec::new();
            for i in 0..=config.blocks_per_resolution {
                let name = format!("up.{level}.{i}");
                let skip = skip_chans.pop().expect("skip channel bookkeeping");
                let block = b.res_block(&name, ch + skip, mult * base, cond_dim);
                ch = mult * base;
                let attn = config.attention_resolutions.contains(&res).then(|| b.attn_block(&format!("{name}.attn"), ch, config.num_heads));
                blocks.push(Stage { res: block, attn });
            }
            let upsample = (level > 0).then(|| b.conv(&format!("up.{level}.upsample"), ch, ch, 3, 1, 1, false));
            if level > 0 {
                res *= 2;
            }
            up.push(UpLevel { blocks, upsample });
        }
        let norm_out = b.norm("norm_out", ch);
        let conv_out = b.conv("conv_out", ch, IMAGE_CHANNELS, 3, 1, 1, true);
        let layers = Layers { time_mlp, guide_mlp, conv_in, down, mid, up, norm_out, conv_out };
        Ok(Self { config, params: b.params, names: b.names, layers })
    }

    /// Rebuilds the network around existing parameter tensors.
    pub fn from_params(config: DenoiserConfig, params: Vec<Tensor<F>>) -> Result<Self> {
        let mut net = Self::new(config, &mut ZeroRng)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces all parameters; shapes must match the architecture.
    pub fn set_params(&mut self, params: Vec<Tensor<F>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), actual: params.len() });
        }
        for (old, new) in self.params.iter().zip(&params) {
            if old.shape() != new.shape() {
                return Err(shape_err(old.shape(), new.shape()));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Timestep embedding: sinusoid(512) → FC → SiLU → FC (128).
    pub fn embed_timestep(&self, t: usize, num_timesteps: usize) -> Result<Vec<F>> {
        if t >= num_timesteps {
            return Err(Error::TimestepOutOfRange { t, steps: num_timesteps });
        }
        let sin: Vec<F> = timestep_sinusoid(t, TIME_SINUSOID_DIM).into_iter().map(F::lit).collect();
        let mut g = Graph::inference(&self.params);
        let x = g.input(Tensor::new(&[1, TIME_SINUSOID_DIM], sin)?);
        let y = self.mlp(&mut g, &self.layers.time_mlp, x);
        Ok(g.value(y).data().to_vec())
    }

    /// Guidance embedding: label (K+1) → FC → SiLU → FC (cond_embedding_dim).
    pub fn embed_guidance(&self, label: &[F]) -> Result<Vec<F>> {
        if label.len() != self.config.label_dim {
            return Err(Error::DimensionMismatch { expected: self.config.label_dim, actual: label.len() });
        }
        let mut g = Graph::inference(&self.params);
        let x = g.input(Tensor::new(&[1, label.len()], label.to_vec())?);
        let y = self.mlp(&mut g, &self.layers.guide_mlp, x);
        Ok(g.value(y).data().to_vec())
    }

    fn mlp(&self, g: &mut Graph<'_, F>, layers: &[Lin], x: Var) -> Var {
        let mut h = x;
        for (i, l) in layers.iter().enumerate() {
            if i > 0 {
                h = g.silu(h);
            }
            let (w, b) = (g.param(l.w), g.param(l.b));
            h = g.linear(h, w, Some(b));
        }
        h
    }

    fn check_guidance(&self, x_t: &Tensor<F>, guidance: &[GuidanceSignal]) -> Result<(usize, usize)> {
        let (n, c, h, w) = x_t.dims4()?;
        if c != IMAGE_CHANNELS || h != self.config.image_size || w != self.config.image_size {
            return Err(shape_err(&[n, IMAGE_CHANNELS, self.config.image_size, self.config.image_size], x_t.shape()));
        }
        if guidance.len() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: guidance.len() });
        }
        for g in guidance {
            if g.kind() != self.config.guidance {
                return Err(Error::GuidanceMismatch(format!("{:?} signal for a {:?} denoiser", g.kind(), self.config.guidance)));
            }
            if g.label().len() != self.config.label_dim {
                return Err(Error::GuidanceMismatch(format!("label dim {} != {}", g.label().len(), self.config.label_dim)));
            }
            if let Some(s) = g.spatial() {
                let expected = self.config.in_channels - IMAGE_CHANNELS;
                if s.spatial_dims() != (h, w) || s.channels() != expected {
                    return Err(Error::GuidanceMismatch(format!(
                        "mask {}x{:?} does not match image {h}x{w} with {expected} mask channels",
                        s.channels(),
                        s.spatial_dims()
                    )));
                }
            }
        }
        Ok((h, w))
    }

    /// Records the forward pass on `g` and returns the predicted-noise node.
    pub fn forward(
        &self,
        g: &mut Graph<'_, F>,
        x_t: &Tensor<F>,
        t: &[usize],
        guidance: &[GuidanceSignal],
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let (h, w) = self.check_guidance(x_t, guidance)?;
        let n = x_t.batch();
        if t.len() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: t.len() });
        }
        let extra = self.config.in_channels - IMAGE_CHANNELS;
        let x_in = if extra == 0 {
            x_t.clone()
        } else {
            let hw = h * w;
            let mut data = Vec::with_capacity(n * self.config.in_channels * hw);
            for (i, sig) in guidance.iter().enumerate() {
                data.extend_from_slice(x_t.item(i));
                let mask = sig.spatial().expect("checked").mask();
                data.extend(mask.iter().map(|&v| F::lit(v as f64)));
            }
            Tensor::new(&[n, self.config.in_channels, h, w], data)?
        };
        let mut sin = Vec::with_capacity(n * TIME_SINUSOID_DIM);
        for &ti in t {
            sin.extend(timestep_sinusoid(ti, TIME_SINUSOID_DIM).into_iter().map(F::lit));
        }
        let labels: Vec<F> = guidance.iter().flat_map(|s| s.label().iter().map(|&v| F::lit(v as f64))).collect();

        let l = &self.layers;
        let sin = g.input(Tensor::new(&[n, TIME_SINUSOID_DIM], sin)?);
        let temb = self.mlp(g, &l.time_mlp, sin);
        let lab = g.input(Tensor::new(&[n, self.config.label_dim], labels)?);
        let gemb = self.mlp(g, &l.guide_mlp, lab);
        let cond = g.concat(temb, gemb);

        let x = g.input(x_in);
        let mut hcur = self.conv(g, l.conv_in, x);
        let mut skips = vec![hcur];
        for layer in &l.down {
            hcur = match layer {
                DownLayer::Block(stage) => self.stage(g, stage, hcur, cond, &mut dropout_rng),
                DownLayer::Downsample(c) => self.conv(g, *c, hcur),
            };
            skips.push(hcur);
        }
        hcur = self.res_block(g, &l.mid.0, hcur, cond, &mut dropout_rng);
        hcur = self.attn(g, &l.mid.1, hcur);
        hcur = self.res_block(g, &l.mid.2, hcur, cond, &mut dropout_rng);
        for level in &l.up {
            for stage in &level.blocks {
                let skip = skips.pop().expect("skip bookkeeping");
                let joined = g.concat(hcur, skip);
                hcur = self.stage(g, stage, joined, cond, &mut dropout_rng);
            }
            if let Some(c) = level.upsample {
                let u = g.upsample2x(hcur);
                hcur = self.conv(g, c, u);
            }
        }
        let hn = self.norm(g, l.norm_out, hcur);
        let ha = g.silu(hn);
        Ok(self.conv(g, l.conv_out, ha))
    }

    fn conv(&self, g: &mut Graph<'_, F>, c: Conv, x: Var) -> Var {
        let (w, b) = (g.param(c.w), g.param(c.b));
        g.conv2d(x, w, Some(b), c.stride, c.pad)
    }

    fn norm(&self, g: &mut Graph<'_, F>, nrm: Norm, x: Var) -> Var {
        let (ga, be) = (g.param(nrm.gamma), g.param(nrm.beta));
        g.group_norm(x, ga, be, nrm.groups)
    }

    fn stage(&self, g: &mut Graph<'_, F>, s: &Stage, x: Var, cond: Var, rng: &mut Option<&mut dyn RngCore>) -> Var {
        let h = self.res_block(g, &s.res, x, cond, rng);
        match &s.attn {
            Some(a) => self.attn(g, a, h),
            None => h,
        }
    }

    fn res_block(&self, g: &mut Graph<'_, F>, r: &ResBlock, x: Var, cond: Var, rng: &mut Option<&mut dyn RngCore>) -> Var {
        let h = self.norm(g, r.norm1, x);
        let (ew, eb) = (g.param(r.emb.w), g.param(r.emb.b));
        let bias = g.linear(cond, ew, Some(eb));
        let h = g.add_channel_bias(h, bias);
        let h = g.silu(h);
        let h = self.conv(g, r.conv1, h);
        let h = self.norm(g, r.norm2, h);
        let mut h = g.silu(h);
        if self.config.dropout > 0.0 {
            if let Some(rng) = rng.as_deref_mut() {
                let keep = 1.0 - self.config.dropout;
                let scale = F::lit(1.0 / keep);
                let mask = (0..g.value(h).len()).map(|_| if rng.random::<f64>() < keep { scale } else { F::zero() }).collect();
                h = g.mul_const(h, mask);
            }
        }
        let h = self.conv(g, r.conv2, h);
        let skip = match r.skip {
            Some(c) => self.conv(g, c, x),
            None => x,
        };
        g.add(h, skip)
    }

    fn attn(&self, g: &mut Graph<'_, F>, a: &AttnBlock, x: Var) -> Var {
        let h = self.norm(g, a.norm, x);
        let qkv = self.conv(g, a.qkv, h);
        let o = g.attention(qkv, a.heads);
        let o = self.conv(g, a.proj, o);
        g.add(o, x)
    }

    /// Mean-squared noise-prediction loss and its parameter gradients.
    pub fn loss_and_grad(
        &self,
        x_t: &Tensor<F>,
        t: &[usize],
        guidance: &[GuidanceSignal],
        eps: &Tensor<F>,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(F, Gradients<F>)> {
        if eps.shape() != x_t.shape() {
            return Err(shape_err(x_t.shape(), eps.shape()));
        }
        let mut g = Graph::new(&self.params);
        let pred = self.forward(&mut g, x_t, t, guidance, dropout_rng)?;
        let loss = g.mse(pred, eps);
        let value = g.value(loss).data()[0];
        Ok((value, g.backward(loss)))
    }

    /// Parameter ids read by one forward pass (used to check that the
    /// conditional and null paths share a single parameter set).
    pub fn touched_params(&self, x_t: &Tensor<F>, t: &[usize], guidance: &[GuidanceSignal]) -> Result<Vec<usize>> {
        let mut g = Graph::inference(&self.params);
        self.forward(&mut g, x_t, t, guidance, None)?;
        Ok(g.touched_params())
    }
}

impl<F: Scalar> NoisePredictor<F> for UNet<F> {
    fn image_shape(&self) -> [usize; 3] {
        [IMAGE_CHANNELS, self.config.image_size, self.config.image_size]
    }

    fn predict_noise(&self, x_t: &Tensor<F>, t: &[usize], guidance: &[GuidanceSignal]) -> Result<Tensor<F>> {
        let mut g = Graph::inference(&self.params);
        let out = self.forward(&mut g, x_t, t, guidance, None)?;
        Ok(g.value(out).clone())
    }
}
