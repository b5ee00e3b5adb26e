use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use super::losses::{loss_generator, loss_image, loss_story, make_mismatch};
use crate::discriminators::{ImageDiscriminator, StoryDiscriminator};
use crate::encoder::{kl_loss, route_gradients, ContextEncoder, EncoderOutput, Network, RoutingMode, RoutingPolicy, TokenBatch};
use crate::error::{Error, Result};
use crate::generator::{GeneratedStory, Generator};
use crate::nn::{Forward, ParamStore};
use crate::rng::substream;
use crate::story::{tokenize, RenderedStory};

pub const GEN_PREFIX: &str = "gen";
pub const DIM_PREFIX: &str = "dim";
pub const DST_PREFIX: &str = "dst";

/// Real frames and their text for a minibatch of stories.
#[derive(Debug, Clone)]
pub struct StoryBatch {
    /// `(stories, frames, 3, H, W)` in `[-1, 1]`.
    pub images: Tensor,
    pub tokens: TokenBatch,
    pub story_ids: Vec<u64>,
}

impl StoryBatch {
    pub fn new(stories: &[&RenderedStory], dtype: DType) -> Result<Self> {
        let first = stories.first().ok_or_else(|| Error::Config("empty batch".into()))?;
        let (t, h, w) = (first.images.len(), first.images[0].height, first.images[0].width);
        let mut data = Vec::with_capacity(stories.len() * t * 3 * h * w);
        let mut text = Vec::with_capacity(stories.len());
        for s in stories {
            if s.images.len() != t {
                return Err(Error::FrameMismatch {
                    expected: t,
                    found: s.images.len(),
                });
            }
            for img in &s.images {
                if (img.height, img.width) != (h, w) {
                    return Err(Error::Shape("images of unequal size in batch".into()));
                }
                data.extend_from_slice(&img.data);
            }
            text.push(tokenize(&s.spec)?);
        }
        let images = Tensor::from_vec(data, (stories.len(), t, 3, h, w), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self {
            images,
            tokens: TokenBatch::new(&text)?,
            story_ids: stories.iter().map(|s| s.spec.story_id).collect(),
        })
    }

    pub fn stories(&self) -> usize {
        self.story_ids.len()
    }

    pub fn frames(&self) -> usize {
        self.tokens.frames
    }
}

/// Standard-normal inputs for one forward: conditioning-augmentation noise
/// and generator noise, both `(stories, frames, ·)`.
#[derive(Debug, Clone)]
pub struct Noise {
    pub ca: Tensor,
    pub gen: Tensor,
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), dtype: DType) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2;
    let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

impl Noise {
    pub fn draw(rng: &mut ChaCha8Rng, cfg: &ModelConfig, stories: usize, frames: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            ca: normal_tensor(rng, (stories, frames, cfg.encoder.d_ca), dtype)?,
            gen: normal_tensor(rng, (stories, frames, cfg.generator.z_dim), dtype)?,
        })
    }

    /// Fixed noise for evaluating `story_id` under `seed`.
    pub fn for_story(seed: u64, story_id: u64, cfg: &ModelConfig, frames: usize, dtype: DType) -> Result<Self> {
        let mut rng = substream(seed, &format!("eval/{story_id}"));
        Self::draw(&mut rng, cfg, 1, frames, dtype)
    }

    pub fn cat(parts: &[Noise]) -> Result<Self> {
        let ca: Vec<&Tensor> = parts.iter().map(|n| &n.ca).collect();
        let gen: Vec<&Tensor> = parts.iter().map(|n| &n.gen).collect();
        Ok(Self {
            ca: Tensor::cat(&ca, 0)?,
            gen: Tensor::cat(&gen, 0)?,
        })
    }
}

/// Encoders, generator and both discriminators over one parameter store.
pub struct StoryGan {
    pub config: ModelConfig,
    pub routing: RoutingPolicy,
    pub store: ParamStore,
    encoders: Vec<(&'static str, ContextEncoder)>,
    pub generator: Generator,
    pub dim: ImageDiscriminator,
    pub dst: StoryDiscriminator,
}

impl StoryGan {
    pub fn new(config: ModelConfig, mode: RoutingMode, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let routing = route_gradients(mode);
        let mut store = ParamStore::new(dtype, substream(seed, "init"));
        let mut encoders = Vec::new();
        for prefix in routing.encoder_prefixes() {
            encoders.push((prefix, ContextEncoder::new(&mut store.root().pp(prefix), config.encoder)?));
        }
        let generator = Generator::new(&mut store.root().pp(GEN_PREFIX), config.generator)?;
        let dim = ImageDiscriminator::new(&mut store.root().pp(DIM_PREFIX), config.dim)?;
        let dst = StoryDiscriminator::new(&mut store.root().pp(DST_PREFIX), config.dst)?;
        Ok(Self {
            config,
            routing,
            store,
            encoders,
            generator,
            dim,
            dst,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encoder(&self, net: Network) -> &ContextEncoder {
        let prefix = self.routing.encoder_prefix(net);
        &self.encoders.iter().find(|(p, _)| *p == prefix).expect("encoder built for every prefix").1
    }

    pub fn network_prefix(net: Network) -> &'static str {
        match net {
            Network::Generator => GEN_PREFIX,
            Network::ImageDisc => DIM_PREFIX,
            Network::StoryDisc => DST_PREFIX,
        }
    }

    /// Parameters of the encoder that `net` reads.
    pub fn encoder_params(&self, net: Network) -> Vec<(String, Var)> {
        self.store.group(self.routing.encoder_prefix(net))
    }

    /// Parameters stepped by `net`'s optimizer.
    pub fn optimizer_params(&self, net: Network) -> Vec<(String, Var)> {
        let mut params = self.store.group(Self::network_prefix(net));
        if self.routing.updates_encoder(net) {
            params.extend(self.encoder_params(net));
        }
        params
    }

    /// Frames for `tokens` with BN running statistics and no dropout.
    pub fn sample(&self, tokens: &TokenBatch, noise: &Noise) -> Result<GeneratedStory> {
        let ctx = Forward::eval();
        let enc = self.encoder(Network::Generator).forward(tokens, &noise.ca, &ctx)?;
        self.generator.generate(&enc.c_bar, &noise.gen, &ctx)
    }

    pub fn encode(&self, net: Network, tokens: &TokenBatch, ca_noise: &Tensor, ctx: &Forward<'_>) -> Result<EncoderOutput> {
        self.encoder(net).forward(tokens, ca_noise, ctx)
    }
}

/// Repeats per-story `h0` across frames and flattens `(B, T, ·)` text to
/// `(B·T, ·)` for frame-level scoring.
fn frame_text(phi: &Tensor, h0: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, t, e) = phi.dims3()?;
    let d = h0.dim(D::Minus1)?;
    let phi = phi.reshape((b * t, e))?;
    let h0 = h0.unsqueeze(1)?.broadcast_as((b, t, d))?.contiguous()?.reshape((b * t, d))?;
    Ok((phi, h0))
}

/// The three objectives, built as graphs over the live parameters. Which
/// encoder each one reads, and whether that read is detached, follows the
/// routing policy.
impl StoryGan {
    fn shares_image_encoder(&self) -> bool {
        self.routing.encoder_prefix(Network::ImageDisc) == self.routing.encoder_prefix(Network::Generator)
    }

    fn story_text(&self, tokens: &TokenBatch, updating: Network) -> Result<Tensor> {
        let phi = self.encoder(Network::StoryDisc).embed(tokens)?;
        Ok(if self.routing.detach_for(Network::StoryDisc, updating) {
            phi.detach()
        } else {
            phi
        })
    }

    /// `L_im` on real, fake and (for two or more stories) mismatched pairs.
    /// Also returns the detached fakes, `(B, T, C, H, W)`.
    pub fn image_disc_loss(&self, batch: &StoryBatch, noise: &Noise, smooth: f64, ctx: &mut Forward<'_>) -> Result<(Tensor, Tensor)> {
        let enc_g = self.encode(Network::Generator, &batch.tokens, &noise.ca, ctx)?;
        let fake = self.generator.generate(&enc_g.c_bar, &noise.gen, ctx)?.images.detach();
        let enc = if self.shares_image_encoder() {
            enc_g
        } else {
            self.encode(Network::ImageDisc, &batch.tokens, &noise.ca, ctx)?
        };
        Ok((self.image_disc_terms(batch, &enc, &fake, smooth, ctx)?, fake))
    }

    /// `L_im` against given `fake` frames, which are treated as constants.
    pub fn image_disc_loss_on(&self, batch: &StoryBatch, ca_noise: &Tensor, fake: &Tensor, smooth: f64, ctx: &mut Forward<'_>) -> Result<Tensor> {
        let enc = self.encode(Network::ImageDisc, &batch.tokens, ca_noise, ctx)?;
        self.image_disc_terms(batch, &enc, &fake.detach(), smooth, ctx)
    }

    fn image_disc_terms(&self, batch: &StoryBatch, enc: &EncoderOutput, fake: &Tensor, smooth: f64, ctx: &mut Forward<'_>) -> Result<Tensor> {
        let (b, t, c, h, w) = batch.images.dims5()?;
        let n = b * t;
        let real = batch.images.reshape((n, c, h, w))?;
        let (phi_f, h0_f) = frame_text(&enc.phi, &enc.h0)?;
        let mut images = vec![real.clone(), fake.reshape((n, c, h, w))?];
        let mut phis = vec![phi_f.clone(), phi_f];
        let mut h0s = vec![h0_f.clone(), h0_f];
        let mismatch = make_mismatch(b);
        if let Some(idx) = &mismatch {
            let idx = Tensor::new(idx.as_slice(), enc.phi.device())?;
            let (phi_m, h0_m) = frame_text(&enc.phi.index_select(&idx, 0)?, &enc.h0.index_select(&idx, 0)?)?;
            images.push(real);
            phis.push(phi_m);
            h0s.push(h0_m);
        }
        let scores = self
            .dim
            .score(&Tensor::cat(&images, 0)?, &Tensor::cat(&phis, 0)?, &Tensor::cat(&h0s, 0)?, ctx)?;
        let real_s = scores.narrow(0, 0, n)?.reshape((b, t))?;
        let fake_s = scores.narrow(0, n, n)?.reshape((b, t))?;
        let mis_s = match mismatch {
            Some(_) => Some(scores.narrow(0, 2 * n, n)?.reshape((b, t))?),
            None => None,
        };
        loss_image(&real_s, &fake_s, mis_s.as_ref(), smooth)
    }

    /// `L_st` on the real stories against `fake` frames `(B, T, C, H, W)`.
    pub fn story_disc_loss(&self, batch: &StoryBatch, fake: &Tensor, smooth: f64, ctx: &mut Forward<'_>) -> Result<Tensor> {
        let b = batch.stories();
        let phi = self.story_text(&batch.tokens, Network::StoryDisc)?;
        let scores = self
            .dst
            .score(&Tensor::cat(&[&batch.images, fake], 0)?, &Tensor::cat(&[&phi, &phi], 0)?, ctx)?;
        loss_story(&scores.narrow(0, 0, b)?, &scores.narrow(0, b, b)?, smooth)
    }

    /// `L_G` (non-saturating) and its KL term.
    pub fn generator_loss(&self, batch: &StoryBatch, noise: &Noise, kl_weight: f64, ctx: &mut Forward<'_>) -> Result<(Tensor, Tensor)> {
        let (b, t, c, h, w) = batch.images.dims5()?;
        let enc_g = self.encode(Network::Generator, &batch.tokens, &noise.ca, ctx)?;
        let fake = self.generator.generate(&enc_g.c_bar, &noise.gen, ctx)?.images;
        let (phi, h0) = if self.shares_image_encoder() {
            (enc_g.phi.clone(), enc_g.h0.clone())
        } else {
            let enc = self.encode(Network::ImageDisc, &batch.tokens, &noise.ca, ctx)?;
            (enc.phi.detach(), enc.h0.detach())
        };
        let (phi_f, h0_f) = frame_text(&phi, &h0)?;
        let fake_im = self.dim.score(&fake.reshape((b * t, c, h, w))?, &phi_f, &h0_f, ctx)?.reshape((b, t))?;
        let phi_st = self.story_text(&batch.tokens, Network::Generator)?;
        let fake_st = self.dst.score(&fake, &phi_st, ctx)?;
        let kl = kl_loss(&enc_g.ca)?;
        Ok((loss_generator(&fake_im, &fake_st, &kl, kl_weight)?, kl))
    }
}
