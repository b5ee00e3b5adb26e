//! Frame generator: FC seed projection followed by residual nearest-neighbour
//! upsampling blocks and a tanh RGB head. All frames of a batch are produced
//! in one pass.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{check_finite, relu, upsample2x};
use crate::nn::layers::{collect_spectral, SpectralNorm};
use crate::nn::{BatchNorm2d, Conv2d, Forward, Linear, Scope};
use crate::story::Image;

/// Channels never drop below this when halving.
pub const CHANNEL_FLOOR: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed_c: usize,
    pub seed_h: usize,
    pub seed_w: usize,
    pub n_up_blocks: usize,
    pub z_dim: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Width of the context vectors fed to the seed projection.
    pub d_model: usize,
}

impl GenConfig {
    pub fn desk(d_model: usize) -> Self {
        Self::for_output(128, 64, 64, 64, d_model)
    }

    /// Seed of `seed_c × 4 × 4` upsampled to `out_h × out_w`.
    pub fn for_output(seed_c: usize, z_dim: usize, out_h: usize, out_w: usize, d_model: usize) -> Self {
        let n_up_blocks = (out_h / 4).trailing_zeros() as usize;
        Self {
            seed_c,
            seed_h: 4,
            seed_w: 4,
            n_up_blocks,
            z_dim,
            out_h,
            out_w,
            d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed_h << self.n_up_blocks != self.out_h || self.seed_w << self.n_up_blocks != self.out_w {
            return Err(Error::Config(format!(
                "seed {}x{} with {} up blocks cannot reach {}x{}",
                self.seed_h, self.seed_w, self.n_up_blocks, self.out_h, self.out_w
            )));
        }
        if self.seed_c == 0 || self.z_dim == 0 || self.d_model == 0 {
            return Err(Error::Config("generator widths must be positive".into()));
        }
        Ok(())
    }

    /// Channel count after `k` up blocks.
    pub fn channels_after(&self, k: usize) -> usize {
        let mut c = self.seed_c;
        for _ in 0..k {
            c = halve(c);
        }
        c
    }

    /// `(C, H, W)` after `k` up blocks.
    pub fn shape_after(&self, k: usize) -> (usize, usize, usize) {
        (self.channels_after(k), self.seed_h << k, self.seed_w << k)
    }
}

fn halve(c: usize) -> usize {
    (c / 2).max(CHANNEL_FLOOR).min(c)
}

/// Generated frames, `(stories, frames, 3, H, W)` in `(-1, 1)`.
#[derive(Debug, Clone)]
pub struct GeneratedStory {
    pub images: Tensor,
}

impl GeneratedStory {
    pub fn stories(&self) -> usize {
        self.images.dim(0).unwrap_or(0)
    }

    pub fn frames(&self) -> usize {
        self.images.dim(1).unwrap_or(0)
    }

    /// Frames of story `i` as host images.
    pub fn story_images(&self, i: usize) -> Result<Vec<Image>> {
        let story = self.images.get(i)?;
        let (t, _, h, w) = story.dims4()?;
        (0..t)
            .map(|f| {
                let data = story.get(f)?.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
                Image::from_data(h, w, data)
            })
            .collect()
    }
}

pub struct ResUpBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    skip: Conv2d,
    c_out: usize,
}

impl ResUpBlock {
    pub fn new(scope: &mut Scope<'_>, c_in: usize) -> Result<Self> {
        let c_out = halve(c_in);
        Ok(Self {
            bn1: BatchNorm2d::new(&mut scope.pp("bn1"), c_in)?,
            conv1: Conv2d::new(&mut scope.pp("conv1"), c_in, c_out, 3, 1, true)?,
            bn2: BatchNorm2d::new(&mut scope.pp("bn2"), c_out)?,
            conv2: Conv2d::new(&mut scope.pp("conv2"), c_out, c_out, 3, 1, true)?,
            skip: Conv2d::new(&mut scope.pp("skip"), c_in, c_out, 1, 1, true)?,
            c_out,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    pub fn convs(&self) -> [&Conv2d; 3] {
        [&self.conv1, &self.conv2, &self.skip]
    }

    pub fn forward(&self, x: &Tensor, ctx: &Forward<'_>) -> Result<Tensor> {
        let h = relu(&self.bn1.forward(x, ctx)?)?;
        let h = self.conv1.forward(&upsample2x(&h)?, ctx)?;
        let h = relu(&self.bn2.forward(&h, ctx)?)?;
        let h = self.conv2.forward(&h, ctx)?;
        let skip = self.skip.forward(&upsample2x(x)?, ctx)?;
        Ok((h + skip)?)
    }
}

pub struct Generator {
    config: GenConfig,
    seed: Linear,
    blocks: Vec<ResUpBlock>,
    head: Conv2d,
}

impl Generator {
    pub fn new(scope: &mut Scope<'_>, config: GenConfig) -> Result<Self> {
        config.validate()?;
        let seed_len = config.seed_c * config.seed_h * config.seed_w;
        let seed = Linear::spectral(&mut scope.pp("seed"), config.d_model + config.z_dim, seed_len)?;
        let mut blocks = Vec::with_capacity(config.n_up_blocks);
        let mut c = config.seed_c;
        for k in 0..config.n_up_blocks {
            let block = ResUpBlock::new(&mut scope.pp(format!("up{k}")), c)?;
            c = block.out_channels();
            blocks.push(block);
        }
        let head = Conv2d::new(&mut scope.pp("head"), c, 3, 3, 1, true)?;
        Ok(Self {
            config,
            seed,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    pub fn seed_layer(&self) -> &Linear {
        &self.seed
    }

    pub fn blocks(&self) -> &[ResUpBlock] {
        &self.blocks
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    /// Every spectrally normalized weight matrix with its normalizer.
    pub fn spectral_layers(&self) -> Result<Vec<(String, Tensor, &SpectralNorm)>> {
        let mut out = Vec::new();
        collect_spectral(&mut out, "seed".into(), self.seed.spectral_parts()?);
        for (k, b) in self.blocks.iter().enumerate() {
            for (name, conv) in ["conv1", "conv2", "skip"].iter().zip(b.convs()) {
                collect_spectral(&mut out, format!("up{k}.{name}"), conv.spectral_parts()?);
            }
        }
        collect_spectral(&mut out, "head".into(), self.head.spectral_parts()?);
        Ok(out)
    }

    /// `[c_bar ; z]` per frame through the FC layer, reshaped to
    /// `(stories·frames, seed_c, seed_h, seed_w)`.
    pub fn seed_projection(&self, c_bar: &Tensor, z: &Tensor, ctx: &Forward<'_>) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, t, d) = c_bar.dims3()?;
        let (zb, zt, zd) = z.dims3()?;
        if d != cfg.d_model || zd != cfg.z_dim || (zb, zt) != (b, t) {
            return Err(Error::Shape(format!(
                "seed projection expects c_bar (B,T,{}) and z (B,T,{}); got {:?} and {:?}",
                cfg.d_model,
                cfg.z_dim,
                c_bar.dims(),
                z.dims()
            )));
        }
        let input = Tensor::cat(&[c_bar, z], D::Minus1)?;
        let seed = self.seed.forward(&input, ctx)?;
        Ok(seed.reshape((b * t, cfg.seed_c, cfg.seed_h, cfg.seed_w))?)
    }

    pub fn generate(&self, c_bar: &Tensor, z: &Tensor, ctx: &Forward<'_>) -> Result<GeneratedStory> {
        let (b, t, _) = c_bar.dims3()?;
        let mut x = self.seed_projection(c_bar, z, ctx)?;
        check_finite(&x, || "generator seed projection (layer 0)".into())?;
        for (k, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, ctx)?;
            check_finite(&x, || format!("generator up block {k} (layer {})", k + 1))?;
        }
        let out = self.head.forward(&x, ctx)?.tanh()?;
        check_finite(&out, || format!("generator head (layer {})", self.blocks.len() + 1))?;
        let (_, c, h, w) = out.dims4()?;
        Ok(GeneratedStory {
            images: out.reshape((b, t, c, h, w))?,
        })
    }
}
