//! Image discriminator (per-frame realism and text match, conditioned on the
//! story context) and story discriminator (sequence-level text–image
//! agreement in a shared feature space).

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{check_finite, collect_spectral, leaky_relu, SpectralNorm};
use crate::nn::{Conv2d, Forward, Linear, Scope};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimConfig {
    pub n_down_blocks: usize,
    /// Output channels of the first down block; doubled by each later block.
    pub base_channels: usize,
    pub dropout_rate: f64,
    pub d_model: usize,
    pub d_embed: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl DimConfig {
    pub fn desk(d_model: usize, d_embed: usize) -> Self {
        Self {
            n_down_blocks: 4,
            base_channels: 32,
            dropout_rate: 0.3,
            d_model,
            d_embed,
            image_h: 64,
            image_w: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_stack(self.image_h, self.image_w, self.n_down_blocks)?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0,1)", self.dropout_rate)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.base_channels << (self.n_down_blocks - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DstConfig {
    pub d_shared: usize,
    pub n_down_blocks: usize,
    pub base_channels: usize,
    pub d_embed: usize,
    pub frames: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl DstConfig {
    pub fn desk(d_embed: usize, frames: usize) -> Self {
        Self {
            d_shared: 128,
            n_down_blocks: 4,
            base_channels: 16,
            d_embed,
            frames,
            image_h: 64,
            image_w: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_stack(self.image_h, self.image_w, self.n_down_blocks)?;
        if self.d_shared == 0 || self.frames == 0 || self.base_channels == 0 {
            return Err(Error::Config("story discriminator widths must be positive".into()));
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.base_channels << (self.n_down_blocks - 1)
    }
}

fn check_stack(h: usize, w: usize, blocks: usize) -> Result<()> {
    if blocks == 0 {
        return Err(Error::Config("need at least one down block".into()));
    }
    let ok = |s: usize| s % (1 << blocks) == 0 && (s >> blocks) >= 4;
    if !ok(h) || !ok(w) {
        return Err(Error::Config(format!(
            "{blocks} down blocks on {h}x{w} must leave a final size of at least 4"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    ImageReal,
    ImageFake,
    ImageMismatch,
    StoryReal,
    StoryFake,
}

/// Discriminator probabilities tagged with what was scored.
#[derive(Debug, Clone)]
pub struct ScoreBatch {
    pub scores: Vec<f64>,
    pub kind: ScoreKind,
}

impl ScoreBatch {
    pub fn from_tensor(scores: &Tensor, kind: ScoreKind) -> Result<Self> {
        let scores = scores.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::NonFinite(format!("{kind:?} score {bad} outside [0,1]")));
        }
        Ok(Self { scores, kind })
    }

    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len().max(1) as f64
    }
}

/// LeakyReLU → conv3 (C→C') → LeakyReLU → stride-2 conv3, plus a stride-2
/// 1×1 skip, with dropout on the sum. Downsampling is by strided
/// convolution only.
pub struct ResDownBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Conv2d,
    dropout: f64,
    c_out: usize,
}

impl ResDownBlock {
    pub fn new(scope: &mut Scope<'_>, c_in: usize, c_out: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut scope.pp("conv1"), c_in, c_out, 3, 1, true)?,
            conv2: Conv2d::new(&mut scope.pp("conv2"), c_out, c_out, 3, 2, true)?,
            skip: Conv2d::new(&mut scope.pp("skip"), c_in, c_out, 1, 2, true)?,
            dropout,
            c_out,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    pub fn convs(&self) -> [&Conv2d; 3] {
        [&self.conv1, &self.conv2, &self.skip]
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Forward<'_>) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("down block needs even spatial dims, got {h}x{w}")));
        }
        let y = self.conv1.forward(&leaky_relu(x, LEAKY_SLOPE)?, ctx)?;
        let y = self.conv2.forward(&leaky_relu(&y, LEAKY_SLOPE)?, ctx)?;
        let out = (y + self.skip.forward(x, ctx)?)?;
        ctx.dropout(&out, self.dropout)
    }
}

fn down_stack(scope: &mut Scope<'_>, blocks: usize, base: usize, dropout: f64) -> Result<Vec<ResDownBlock>> {
    let mut c_in = 3;
    let mut out = Vec::with_capacity(blocks);
    for k in 0..blocks {
        let c_out = base << k;
        out.push(ResDownBlock::new(&mut scope.pp(format!("down{k}")), c_in, c_out, dropout)?);
        c_in = c_out;
    }
    Ok(out)
}

fn run_stack(blocks: &[ResDownBlock], x: &Tensor, ctx: &mut Forward<'_>) -> Result<Tensor> {
    let mut x = x.clone();
    for block in blocks {
        x = block.forward(&x, ctx)?;
    }
    Ok(x)
}

fn block_spectral(blocks: &[ResDownBlock]) -> Result<Vec<(String, Tensor, &SpectralNorm)>> {
    let mut out = Vec::new();
    for (k, b) in blocks.iter().enumerate() {
        for (name, conv) in ["conv1", "conv2", "skip"].iter().zip(b.convs()) {
            collect_spectral(&mut out, format!("down{k}.{name}"), conv.spectral_parts()?);
        }
    }
    Ok(out)
}

pub struct ImageDiscriminator {
    config: DimConfig,
    blocks: Vec<ResDownBlock>,
    text: Linear,
    fusion: ResFusion,
    head: Linear,
}

/// Residual block at constant resolution that mixes image and text channels.
struct ResFusion {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Conv2d,
    dropout: f64,
}

impl ResFusion {
    fn forward(&self, x: &Tensor, ctx: &mut Forward<'_>) -> Result<Tensor> {
        let y = self.conv1.forward(&leaky_relu(x, LEAKY_SLOPE)?, ctx)?;
        let y = self.conv2.forward(&leaky_relu(&y, LEAKY_SLOPE)?, ctx)?;
        let out = (y + self.skip.forward(x, ctx)?)?;
        ctx.dropout(&out, self.dropout)
    }
}

impl ImageDiscriminator {
    pub fn new(scope: &mut Scope<'_>, config: DimConfig) -> Result<Self> {
        config.validate()?;
        let blocks = down_stack(scope, config.n_down_blocks, config.base_channels, config.dropout_rate)?;
        let c_img = config.final_channels();
        let text = Linear::spectral(&mut scope.pp("text"), config.d_embed + config.d_model, config.d_model)?;
        let c_cat = c_img + config.d_model;
        let mut fs = scope.pp("fusion");
        let fusion = ResFusion {
            conv1: Conv2d::new(&mut fs.pp("conv1"), c_cat, c_img, 3, 1, true)?,
            conv2: Conv2d::new(&mut fs.pp("conv2"), c_img, c_img, 3, 1, true)?,
            skip: Conv2d::new(&mut fs.pp("skip"), c_cat, c_img, 1, 1, true)?,
            dropout: config.dropout_rate,
        };
        let (h, w) = (config.image_h >> config.n_down_blocks, config.image_w >> config.n_down_blocks);
        let head = Linear::spectral(&mut scope.pp("head"), c_img * h * w, 1)?;
        Ok(Self {
            config,
            blocks,
            text,
            fusion,
            head,
        })
    }

    pub fn config(&self) -> &DimConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[ResDownBlock] {
        &self.blocks
    }

    /// Every spectrally normalized weight matrix with its normalizer.
    pub fn spectral_layers(&self) -> Result<Vec<(String, Tensor, &SpectralNorm)>> {
        let mut out = block_spectral(&self.blocks)?;
        collect_spectral(&mut out, "text".into(), self.text.spectral_parts()?);
        let f = &self.fusion;
        for (name, conv) in [("fusion.conv1", &f.conv1), ("fusion.conv2", &f.conv2), ("fusion.skip", &f.skip)] {
            collect_spectral(&mut out, name.into(), conv.spectral_parts()?);
        }
        collect_spectral(&mut out, "head".into(), self.head.spectral_parts()?);
        Ok(out)
    }

    /// Image features after the down stack, `(N, C, H/2^n, W/2^n)`.
    pub fn image_features(&self, images: &Tensor, ctx: &mut Forward<'_>) -> Result<Tensor> {
        run_stack(&self.blocks, images, ctx)
    }

    /// `[φ ; h0]` mapped to `d_model` and replicated over an `h × w` grid.
    pub fn replicate_text(&self, phi: &Tensor, h0: &Tensor, h: usize, w: usize, ctx: &Forward<'_>) -> Result<Tensor> {
        let joint = self.text.forward(&Tensor::cat(&[phi, h0], D::Minus1)?, ctx)?;
        let (n, d) = joint.dims2()?;
        Ok(joint.reshape((n, d, 1, 1))?.broadcast_as((n, d, h, w))?.contiguous()?)
    }

    /// Probability that each `(image, φ_t, h0)` triple is a real, matching
    /// frame. `images` is `(N, 3, H, W)`, `phi` `(N, d_embed)`, `h0`
    /// `(N, d_model)`; returns `(N,)`.
    pub fn score(&self, images: &Tensor, phi: &Tensor, h0: &Tensor, ctx: &mut Forward<'_>) -> Result<Tensor> {
        let n = images.dim(0)?;
        if phi.dims() != [n, self.config.d_embed] || h0.dims() != [n, self.config.d_model] {
            return Err(Error::Shape(format!(
                "image discriminator got images {:?}, phi {:?}, h0 {:?}",
                images.dims(),
                phi.dims(),
                h0.dims()
            )));
        }
        let feats = self.image_features(images, ctx)?;
        let (_, _, h, w) = feats.dims4()?;
        let text = self.replicate_text(phi, h0, h, w, ctx)?;
        let fused = self.fusion.forward(&Tensor::cat(&[&feats, &text], 1)?, ctx)?;
        let logit = self.head.forward(&fused.flatten_from(1)?, ctx)?;
        let p = sigmoid(&logit.squeeze(1)?)?;
        check_finite(&p, || "image discriminator output".into())?;
        Ok(p)
    }
}

pub struct StoryDiscriminator {
    config: DstConfig,
    blocks: Vec<ResDownBlock>,
    image_proj: Linear,
    text_proj: Linear,
    head: Linear,
}

impl StoryDiscriminator {
    pub fn new(scope: &mut Scope<'_>, config: DstConfig) -> Result<Self> {
        config.validate()?;
        let blocks = down_stack(scope, config.n_down_blocks, config.base_channels, 0.0)?;
        let (h, w) = (config.image_h >> config.n_down_blocks, config.image_w >> config.n_down_blocks);
        let flat = config.final_channels() * h * w;
        let image_proj = Linear::spectral(&mut scope.pp("image_proj"), flat, config.d_shared)?;
        // Bias-free, so that zero text features annihilate the product.
        let text_proj = Linear::build(&mut scope.pp("text_proj"), config.d_embed, config.d_shared, false, true)?;
        let head = Linear::spectral(&mut scope.pp("head"), config.frames * config.d_shared, 1)?;
        Ok(Self {
            config,
            blocks,
            image_proj,
            text_proj,
            head,
        })
    }

    pub fn config(&self) -> &DstConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[ResDownBlock] {
        &self.blocks
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Every spectrally normalized weight matrix with its normalizer.
    pub fn spectral_layers(&self) -> Result<Vec<(String, Tensor, &SpectralNorm)>> {
        let mut out = block_spectral(&self.blocks)?;
        collect_spectral(&mut out, "image_proj".into(), self.image_proj.spectral_parts()?);
        collect_spectral(&mut out, "text_proj".into(), self.text_proj.spectral_parts()?);
        collect_spectral(&mut out, "head".into(), self.head.spectral_parts()?);
        Ok(out)
    }

    /// Probability that each story's frame sequence matches its text.
    /// `images` is `(B, T, 3, H, W)` and `phi` `(B, T, d_embed)`; returns `(B,)`.
    pub fn score(&self, images: &Tensor, phi: &Tensor, ctx: &mut Forward<'_>) -> Result<Tensor> {
        let (b, t, c, h, w) = images.dims5()?;
        let (pb, pt, _) = phi.dims3()?;
        if t != pt || t != self.config.frames {
            return Err(Error::FrameMismatch {
                expected: self.config.frames,
                found: if t != self.config.frames { t } else { pt },
            });
        }
        if pb != b {
            return Err(Error::Shape(format!("{b} image stories vs {pb} text stories")));
        }
        let feats = run_stack(&self.blocks, &images.reshape((b * t, c, h, w))?, ctx)?;
        let img = self.image_proj.forward(&feats.flatten_from(1)?, ctx)?.reshape((b, t * self.config.d_shared))?;
        let txt = self.text_proj.forward(phi, ctx)?.reshape((b, t * self.config.d_shared))?;
        let logit = self.head.forward(&(img * txt)?, ctx)?;
        let p = sigmoid(&logit.squeeze(1)?)?;
        check_finite(&p, || "story discriminator output".into())?;
        Ok(p)
    }
}

/// `1 / (1 + e^{-x})`, built from differentiable primitives.
fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}
