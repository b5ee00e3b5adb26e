//! The shared context encoder: token embedding, conditioning augmentation,
//! positional encoding and a bidirectional transformer stack.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::softmax_last;
use crate::nn::{Forward, Init, LayerNorm, Linear, Scope};
use crate::story::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ca: usize,
    pub d_embed: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            d_ca: 64,
            d_embed: 64,
            vocab_size,
        }
    }

    pub fn paper(vocab_size: usize) -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            n_layers: 6,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for sinusoidal encodings".into()));
        }
        if self.d_ca == 0 || self.d_embed == 0 || self.vocab_size == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }

    /// Width of the position-wise feed-forward layer.
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

/// Token ids for a batch, shaped `(stories, frames, tokens per frame)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub stories: usize,
    pub frames: usize,
    pub per_frame: usize,
}

impl TokenBatch {
    pub fn new(stories: &[Vec<TokenSequence>]) -> Result<Self> {
        let frames = stories.first().map(|s| s.len()).unwrap_or(0);
        let per_frame = stories.first().and_then(|s| s.first()).map(|t| t.tokens.len()).unwrap_or(0);
        let mut ids = Vec::with_capacity(stories.len() * frames * per_frame);
        for story in stories {
            if story.len() != frames {
                return Err(Error::FrameMismatch {
                    expected: frames,
                    found: story.len(),
                });
            }
            for seq in story {
                if seq.tokens.len() != per_frame {
                    return Err(Error::Shape("token sequences of unequal length".into()));
                }
                ids.extend_from_slice(&seq.tokens);
            }
        }
        Ok(Self {
            ids,
            stories: stories.len(),
            frames,
            per_frame,
        })
    }

    /// Batch with story order rotated by one (story `i` takes story `i+1`'s text).
    pub fn rotated(&self) -> Self {
        let stride = self.frames * self.per_frame;
        let mut ids = Vec::with_capacity(self.ids.len());
        for i in 0..self.stories {
            let j = (i + 1) % self.stories;
            ids.extend_from_slice(&self.ids[j * stride..(j + 1) * stride]);
        }
        Self { ids, ..self.clone() }
    }
}

/// Diagonal Gaussian parameters from conditioning augmentation,
/// each `(stories, frames, d_ca)`.
#[derive(Debug, Clone)]
pub struct CAStats {
    pub mu: Tensor,
    pub sigma: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Per-frame embeddings `(stories, frames, d_embed)`.
    pub phi: Tensor,
    pub ca: CAStats,
    /// Sampled conditioning `(stories, frames, d_ca)`.
    pub c_hat: Tensor,
    /// Context-aware conditioning `(stories, frames, d_model)`.
    pub c_bar: Tensor,
    /// Story embedding `(stories, d_model)`.
    pub h0: Tensor,
}

/// `mu + z * sigma`, elementwise.
pub fn reparameterize(mu: &Tensor, sigma: &Tensor, z: &Tensor) -> Result<Tensor> {
    Ok((mu + (z * sigma)?)?)
}

/// KL divergence of `N(mu, diag(sigma^2))` from `N(0, I)`, summed over
/// frames and dimensions and averaged over stories.
pub fn kl_loss(ca: &CAStats) -> Result<Tensor> {
    let stories = if ca.mu.rank() >= 3 { ca.mu.dim(0)? } else { 1 };
    let terms = ((ca.mu.sqr()? + ca.sigma.sqr()?)? - 1.0)?;
    let terms = (terms - (ca.sigma.log()? * 2.0)?)?;
    let kl = (terms.sum_all()? * (0.5 / stories as f64))?;
    let value = kl.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("kl_loss".into()));
    }
    Ok(kl)
}

/// Sinusoidal encodings, row-major `(frames, d_model)`.
pub fn positional_encoding(frames: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs even d_model, got {d_model}")));
    }
    let mut pe = vec![0.0; frames * d_model];
    for pos in 0..frames {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe[pos * d_model + 2 * i] = angle.sin();
            pe[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

pub fn positional_encoding_tensor(frames: usize, d_model: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let pe = positional_encoding(frames, d_model)?;
    Ok(Tensor::from_vec(pe, (frames, d_model), device)?.to_dtype(dtype)?)
}

struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    n_heads: usize,
}

impl EncoderLayer {
    fn new(scope: &mut Scope<'_>, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            q: Linear::new(&mut scope.pp("q"), d, d)?,
            k: Linear::new(&mut scope.pp("k"), d, d)?,
            v: Linear::new(&mut scope.pp("v"), d, d)?,
            o: Linear::new(&mut scope.pp("o"), d, d)?,
            ln1: LayerNorm::new(&mut scope.pp("ln1"), d)?,
            ff1: Linear::new(&mut scope.pp("ff1"), d, cfg.d_ff())?,
            ff2: Linear::new(&mut scope.pp("ff2"), cfg.d_ff(), d)?,
            ln2: LayerNorm::new(&mut scope.pp("ln2"), d)?,
            n_heads: cfg.n_heads,
        })
    }

    fn heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let h = self.n_heads;
        Ok(x.reshape((b, t, h, d / h))?.transpose(1, 2)?.contiguous()?.reshape((b * h, t, d / h))?)
    }

    fn attention(&self, x: &Tensor, ctx: &Forward<'_>) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.n_heads;
        let q = self.heads(&self.q.forward(x, ctx)?)?;
        let k = self.heads(&self.k.forward(x, ctx)?)?;
        let v = self.heads(&self.v.forward(x, ctx)?)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
        let mixed = softmax_last(&scores)?.matmul(&v)?;
        let merged = mixed
            .reshape((b, self.n_heads, t, dh))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        self.o.forward(&merged, ctx)
    }

    fn forward(&self, x: &Tensor, ctx: &Forward<'_>) -> Result<Tensor> {
        let x = self.ln1.forward(&(x + self.attention(x, ctx)?)?)?;
        let ff = self.ff2.forward(&self.ff1.forward(&x, ctx)?.relu()?, ctx)?;
        self.ln2.forward(&(x + ff)?)
    }
}

pub struct ContextEncoder {
    config: EncoderConfig,
    pub embedding: Var,
    ca: Linear,
    proj: Linear,
    layers: Vec<EncoderLayer>,
}

impl ContextEncoder {
    pub fn new(scope: &mut Scope<'_>, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let embedding = scope.param("embedding", &[config.vocab_size, config.d_embed], Init::Normal(1.0))?;
        let ca = Linear::new(&mut scope.pp("ca"), config.d_embed, 2 * config.d_ca)?;
        let proj = Linear::new(&mut scope.pp("proj"), config.d_ca, config.d_model)?;
        let layers = (0..config.n_layers)
            .map(|i| EncoderLayer::new(&mut scope.pp(format!("layer{i}")), &config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            embedding,
            ca,
            proj,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Mean of the token embeddings of each frame: `(stories, frames, d_embed)`.
    pub fn embed(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let vocab = self.config.vocab_size as u32;
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::OutOfVocab {
                token: bad,
                vocab_size: vocab,
            });
        }
        let ids = Tensor::from_vec(tokens.ids.clone(), tokens.ids.len(), self.embedding.device())?;
        let rows = self.embedding.as_tensor().index_select(&ids, 0)?;
        let rows = rows.reshape((tokens.stories, tokens.frames, tokens.per_frame, self.config.d_embed))?;
        Ok(rows.mean(2)?)
    }

    /// Gaussian parameters from `phi` and the sample `mu + z * sigma`.
    pub fn condition_augment(&self, phi: &Tensor, z: &Tensor, ctx: &Forward<'_>) -> Result<(CAStats, Tensor)> {
        let stats = self.ca.forward(phi, ctx)?;
        let d = self.config.d_ca;
        let mu = stats.narrow(D::Minus1, 0, d)?;
        let sigma = stats.narrow(D::Minus1, d, d)?.exp()?;
        if z.dims() != mu.dims() {
            return Err(Error::Shape(format!("noise {:?} vs conditioning {:?}", z.dims(), mu.dims())));
        }
        let c_hat = reparameterize(&mu, &sigma, z)?;
        Ok((CAStats { mu, sigma }, c_hat))
    }

    /// Transformer context over frames; returns `(c_bar, h0)`.
    pub fn encode_context(&self, c_hat: &Tensor, ctx: &Forward<'_>) -> Result<(Tensor, Tensor)> {
        let (_, frames, _) = c_hat.dims3()?;
        let pe = positional_encoding_tensor(frames, self.config.d_model, c_hat.dtype(), c_hat.device())?;
        let mut x = self.proj.forward(c_hat, ctx)?.broadcast_add(&pe)?;
        for layer in &self.layers {
            x = layer.forward(&x, ctx)?;
        }
        let h0 = x.mean(1)?;
        Ok((x, h0))
    }

    pub fn forward(&self, tokens: &TokenBatch, z: &Tensor, ctx: &Forward<'_>) -> Result<EncoderOutput> {
        let phi = self.embed(tokens)?;
        let (ca, c_hat) = self.condition_augment(&phi, z, ctx)?;
        let (c_bar, h0) = self.encode_context(&c_hat, ctx)?;
        Ok(EncoderOutput {
            phi,
            ca,
            c_hat,
            c_bar,
            h0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// One encoder, updated by the generator and image-discriminator losses.
    Impartial,
    /// One encoder per network.
    Separate,
    /// One encoder that also receives the story-discriminator gradients.
    AllGrads,
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMode::Impartial => "impartial",
            RoutingMode::Separate => "separate",
            RoutingMode::AllGrads => "all_grads",
        })
    }
}

impl FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "impartial" => Ok(RoutingMode::Impartial),
            "separate" => Ok(RoutingMode::Separate),
            "all_grads" | "all-grads" => Ok(RoutingMode::AllGrads),
            other => Err(Error::Config(format!("unknown routing mode {other:?}"))),
        }
    }
}

/// The three adversaries that consume encoder outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Network {
    Generator,
    ImageDisc,
    StoryDisc,
}

impl Network {
    pub const ALL: [Network; 3] = [Network::Generator, Network::ImageDisc, Network::StoryDisc];
}

/// Which encoder each network reads and whether its gradients reach it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingPolicy {
    pub mode: RoutingMode,
}

pub fn route_gradients(mode: RoutingMode) -> RoutingPolicy {
    RoutingPolicy { mode }
}

impl RoutingPolicy {
    /// Parameter prefix of the encoder that `net` consumes.
    pub fn encoder_prefix(&self, net: Network) -> &'static str {
        match (self.mode, net) {
            (RoutingMode::Separate, Network::Generator) => "enc_g",
            (RoutingMode::Separate, Network::ImageDisc) => "enc_dim",
            (RoutingMode::Separate, Network::StoryDisc) => "enc_dst",
            _ => "enc",
        }
    }

    /// Distinct encoder prefixes in construction order.
    pub fn encoder_prefixes(&self) -> Vec<&'static str> {
        match self.mode {
            RoutingMode::Separate => vec!["enc_g", "enc_dim", "enc_dst"],
            _ => vec!["enc"],
        }
    }

    /// Whether `net`'s optimizer steps the encoder it consumes.
    pub fn updates_encoder(&self, net: Network) -> bool {
        !(self.mode == RoutingMode::Impartial && net == Network::StoryDisc)
    }

    /// Whether encoder outputs must be detached before `net` sees them
    /// during the update of `updating`.
    pub fn detach_for(&self, net: Network, updating: Network) -> bool {
        if !self.updates_encoder(net) {
            return true;
        }
        // A network's own encoder is only trained by its own step.
        self.mode == RoutingMode::Separate && net != updating
    }
}
