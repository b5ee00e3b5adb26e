use std::collections::VecDeque;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use super::model::{Noise, StoryBatch, StoryGan};
use super::schedule::LrTriple;
use crate::encoder::Network;
use crate::error::{Error, Result};
use crate::nn::{Adam, Forward};
use crate::rng::{substream, RngState};
use crate::story::Dataset;

pub const LOSS_CSV_HEADER: &str = "step,epoch,loss_g,loss_dim,loss_dst,kl,lr_g,lr_dim,lr_dst";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss_g: f64,
    pub loss_dim: f64,
    pub loss_dst: f64,
    pub kl: f64,
    pub lr_g: f64,
    pub lr_dim: f64,
    pub lr_dst: f64,
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.loss_g, self.loss_dim, self.loss_dst, self.kl, self.lr_g, self.lr_dim, self.lr_dst
        )
    }
}

/// Optimizer step counts per network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounts {
    pub g: u64,
    pub dim: u64,
    pub dst: u64,
}

/// Everything besides parameters and moments needed to resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    /// Current epoch (0-based).
    pub epoch: usize,
    /// Story order of the current epoch; empty between epochs.
    pub order: Vec<usize>,
    /// Position of the next batch within `order`.
    pub cursor: usize,
    pub lrs: LrTriple,
    pub rng: RngState,
    pub history: VecDeque<LossRecord>,
    pub updates: UpdateCounts,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: StoryGan,
    pub opt_g: Adam,
    pub opt_dim: Adam,
    pub opt_dst: Adam,
    pub state: TrainState,
    rng: ChaCha8Rng,
    warned_mismatch: bool,
}

pub struct FitOptions {
    /// Directory for checkpoints and `losses.csv`; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many total steps even if epochs remain.
    pub max_steps: Option<u64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model_config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let model = StoryGan::new(model_config, config.routing_mode, config.precision.dtype(), config.seed)?;
        let rng = substream(config.seed, "train");
        let lrs = config.rates_at(0, 1, model_config.encoder.d_model);
        let (b1, b2) = (config.beta1, config.beta2);
        let opt_g = Adam::new(model.optimizer_params(Network::Generator), lrs.g, b1, b2)?;
        let opt_dim = Adam::new(model.optimizer_params(Network::ImageDisc), lrs.dim, b1, b2)?;
        let opt_dst = Adam::new(model.optimizer_params(Network::StoryDisc), lrs.dst, b1, b2)?;
        let state = TrainState {
            step: 0,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            lrs,
            rng: RngState::capture(&rng),
            history: VecDeque::new(),
            updates: UpdateCounts::default(),
        };
        Ok(Self {
            config,
            model,
            opt_g,
            opt_dim,
            opt_dst,
            state,
            rng,
            warned_mismatch: false,
        })
    }

    pub(crate) fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    fn set_rates(&mut self, lrs: LrTriple) {
        self.opt_g.lr = lrs.g;
        self.opt_dim.lr = lrs.dim;
        self.opt_dst.lr = lrs.dst;
        self.state.lrs = lrs;
    }

    /// One update of each network, in the order D_im, D_st, G.
    pub fn train_step(&mut self, batch: &StoryBatch) -> Result<LossRecord> {
        let cfg = self.model.config;
        let dtype = self.model.dtype();
        let (b, t) = (batch.stories(), batch.frames());
        if t != cfg.frames {
            return Err(Error::FrameMismatch {
                expected: cfg.frames,
                found: t,
            });
        }
        let step = self.state.step + 1;
        let lrs = self.config.rates_at(self.state.epoch, step, cfg.encoder.d_model);
        self.set_rates(lrs);
        let smooth = self.config.label_smooth;
        if b < 2 && !self.warned_mismatch {
            eprintln!("warning: batch of one story, mismatched-text term skipped");
            self.warned_mismatch = true;
        }

        let noise = Noise::draw(&mut self.rng, &cfg, b, t, dtype)?;
        let (loss_dim, fake) = {
            let mut ctx = Forward::train(&mut self.rng);
            let (loss, fake) = self.model.image_disc_loss(batch, &noise, smooth, &mut ctx)?;
            let grads = loss.backward()?;
            self.opt_dim.step(&grads)?;
            self.state.updates.dim += 1;
            (scalar(&loss)?, fake)
        };

        // The story discriminator reuses the image discriminator's fakes.
        let loss_dst = {
            let mut ctx = Forward::train(&mut self.rng);
            let loss = self.model.story_disc_loss(batch, &fake, smooth, &mut ctx)?;
            let grads = loss.backward()?;
            self.opt_dst.step(&grads)?;
            self.state.updates.dst += 1;
            scalar(&loss)?
        };

        // Generator, with fresh noise and the discriminators still in train mode.
        let noise = Noise::draw(&mut self.rng, &cfg, b, t, dtype)?;
        let (loss_g, kl) = {
            let mut ctx = Forward::train(&mut self.rng);
            let (loss, kl) = self.model.generator_loss(batch, &noise, self.config.kl_weight, &mut ctx)?;
            let grads = loss.backward()?;
            self.opt_g.step(&grads)?;
            self.state.updates.g += 1;
            (scalar(&loss)?, scalar(&kl)?)
        };

        self.state.step = step;
        self.state.rng = RngState::capture(&self.rng);
        let record = LossRecord {
            step,
            epoch: self.state.epoch,
            loss_g,
            loss_dim,
            loss_dst,
            kl,
            lr_g: lrs.g,
            lr_dim: lrs.dim,
            lr_dst: lrs.dst,
        };
        if self.config.history_len > 0 {
            if self.state.history.len() == self.config.history_len {
                self.state.history.pop_front();
            }
            self.state.history.push_back(record.clone());
        }
        Ok(record)
    }

    /// Trains until `config.epochs` epochs (or `max_steps` steps) are done,
    /// resuming mid-epoch if the state says so. Calls `on_step` after every
    /// step. A non-finite loss aborts the run after dumping `nonfinite.ckpt`.
    pub fn fit(&mut self, dataset: &Dataset, opts: &FitOptions, mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Config("cannot train on an empty dataset".into()));
        }
        if dataset.frames() != self.model.config.frames {
            return Err(Error::FrameMismatch {
                expected: self.model.config.frames,
                found: dataset.frames(),
            });
        }
        let mut log = match &opts.out_dir {
            Some(dir) => Some(open_loss_log(dir)?),
            None => None,
        };
        let n = dataset.len();
        let dtype = self.model.dtype();
        while self.state.epoch < self.config.epochs {
            if self.state.order.is_empty() {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut self.rng);
                self.state.order = order;
                self.state.cursor = 0;
            }
            while self.state.cursor < self.state.order.len() {
                if opts.max_steps.is_some_and(|m| self.state.step >= m) {
                    return self.finish(opts);
                }
                let end = (self.state.cursor + self.config.batch_size).min(self.state.order.len());
                let stories: Vec<_> = self.state.order[self.state.cursor..end].iter().map(|&i| &dataset.stories[i]).collect();
                let batch = StoryBatch::new(&stories, dtype)?;
                let record = match self.train_step(&batch) {
                    Ok(r) => r,
                    Err(e @ Error::NonFinite(_)) => {
                        if let Some(dir) = &opts.out_dir {
                            self.save(&dir.join("nonfinite.ckpt"))?;
                        }
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                self.state.cursor = end;
                if let Some((path, file)) = log.as_mut() {
                    writeln!(file, "{}", record.csv_row()).map_err(|e| Error::io(path.clone(), e))?;
                }
                on_step(&record);
            }
            self.state.epoch += 1;
            self.state.order.clear();
            self.state.cursor = 0;
            self.state.rng = RngState::capture(&self.rng);
            let every = self.config.checkpoint_every;
            if let Some(dir) = &opts.out_dir {
                if every > 0 && self.state.epoch % every == 0 && self.state.epoch < self.config.epochs {
                    self.save(&dir.join(format!("epoch_{:04}.ckpt", self.state.epoch)))?;
                }
            }
        }
        self.finish(opts)
    }

    fn finish(&mut self, opts: &FitOptions) -> Result<()> {
        self.state.rng = RngState::capture(&self.rng);
        if let Some(dir) = &opts.out_dir {
            self.save(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }
}

fn open_loss_log(dir: &Path) -> Result<(PathBuf, std::fs::File)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("losses.csv");
    let fresh = !path.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    if fresh {
        writeln!(file, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&path, e))?;
    }
    Ok((path, file))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
