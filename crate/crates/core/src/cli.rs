//! Command-line front end: dataset creation, training, sampling and evaluation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::encoder::RoutingMode;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, sample_story, EvalOptions, Plugin, Source};
use crate::story::dataset::{encode_png, SCHEMA_VERSION};
use crate::story::{generate, largest_remainder, read_dataset, write_dataset, Dataset, StorySpec, TierCounts};
use crate::training::checkpoint::CHECKPOINT_VERSION;
use crate::training::config::{parse_override, parse_table};
use crate::training::{Checkpoint, FitOptions, ModelConfig, Profile, Scheduler, TrainConfig, Trainer, LOSS_CSV_HEADER};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "storyvis", version, about = "Story visualization GAN with an impartial context encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and render a synthetic story dataset.
    MakeDataset(MakeDatasetArgs),
    /// Train on a dataset directory.
    Train(TrainArgs),
    /// Render the frames of one story from a checkpoint.
    Generate(GenerateArgs),
    /// Score a checkpoint (or the ground truth) on a dataset.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct MakeDatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub num_stories: usize,
    /// Easy/medium/hard weights, e.g. 40/30/30.
    #[arg(long, default_value = "40/30/30")]
    pub tier_mix: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frame side in pixels (power of two, at least 16).
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file of `key = value` training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub routing: Option<RoutingMode>,
    #[arg(long)]
    pub scheduler: Option<Scheduler>,
    #[arg(long)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many total steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from a checkpoint; only --epochs and --max-steps may change.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print losses every this many steps.
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Story spec JSON file.
    #[arg(long, conflicts_with_all = ["dataset", "story_id"])]
    pub spec: Option<PathBuf>,
    #[arg(long, requires = "story_id")]
    pub dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset")]
    pub story_id: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Defaults to the whole dataset.
    #[arg(long)]
    pub n_stories: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score the ground truth against itself instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle: bool,
    /// Feature-distance command; repeatable.
    #[arg(long)]
    pub plugin: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Written to every output directory before any heavy work starts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub crate_version: String,
    pub dataset_schema: u32,
    pub checkpoint_version: u32,
    pub seed: u64,
    pub started_unix: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, argv: &[String], config: serde_json::Value, seed: u64, outputs: &[&Path]) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_schema: SCHEMA_VERSION,
            checkpoint_version: CHECKPOINT_VERSION,
            seed,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::malformed("manifest", e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

fn to_json(value: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(value).expect("config serializes to JSON")
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_tier_mix(s: &str) -> Result<[u32; 3]> {
    let parts: Vec<&str> = s.split('/').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("tier mix {s:?} is not e/m/h")));
    }
    let mut w = [0u32; 3];
    for (slot, p) in w.iter_mut().zip(parts) {
        *slot = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("tier mix weight {p:?} is not a non-negative integer")))?;
    }
    Ok(w)
}

pub fn make_dataset(args: &MakeDatasetArgs, argv: &[String]) -> Result<()> {
    let weights = parse_tier_mix(&args.tier_mix)?;
    if args.num_stories == 0 {
        return Err(Error::Config("--num-stories must be positive".into()));
    }
    let counts = TierCounts::from_array(largest_remainder(args.num_stories, weights)?);
    prepare_out(&args.out, args.force)?;
    if args.force {
        let stories = args.out.join("stories");
        if stories.exists() {
            fs::remove_dir_all(&stories).map_err(|e| Error::io(&stories, e))?;
        }
    }
    let config = serde_json::json!({
        "num_stories": args.num_stories,
        "tier_counts": to_json(&counts),
        "size": args.size,
        "frames": args.frames,
    });
    RunManifest::new("make-dataset", argv, config, args.seed, &[&args.out]).write(&args.out)?;
    eprintln!("generating {} stories ({counts:?})", args.num_stories);
    let stories = generate(counts, args.seed, args.size, args.size, args.frames)?;
    write_dataset(&args.out, &stories)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

/// Defaults < config file < named flags < `--set` items.
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut table = match &args.config {
        Some(path) => parse_table(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => toml::Table::new(),
    };
    fn value<T: Serialize>(v: &Option<T>) -> Option<toml::Value> {
        v.as_ref().map(|v| toml::Value::try_from(v).expect("flag value serializes"))
    }
    let flags = [
        ("routing_mode", value(&args.routing)),
        ("scheduler", value(&args.scheduler)),
        ("profile", value(&args.profile)),
        ("epochs", value(&args.epochs)),
        ("batch_size", value(&args.batch_size)),
        ("seed", value(&args.seed)),
    ];
    for (key, v) in flags {
        if let Some(v) = v {
            table.insert(key.to_string(), v);
        }
    }
    for item in &args.set {
        let (k, v) = parse_override(item)?;
        table.insert(k, v);
    }
    TrainConfig::from_table(table)
}

/// Drops loss-log rows past `step` so a resumed run continues the numbering.
fn trim_loss_log(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    if out.is_empty() {
        out = format!("{LOSS_CSV_HEADER}\n");
    }
    write_file(path, out.as_bytes())
}

pub fn train(args: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(path) => {
            let changes_config = args.config.is_some()
                || !args.set.is_empty()
                || args.routing.is_some()
                || args.scheduler.is_some()
                || args.profile.is_some()
                || args.batch_size.is_some()
                || args.seed.is_some();
            if changes_config {
                return Err(Error::Config("--resume keeps the checkpoint's configuration; only --epochs may change".into()));
            }
            let mut t = Trainer::load(path)?;
            if let Some(e) = args.epochs {
                t.config.epochs = e;
            }
            fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
            trim_loss_log(&args.out.join("losses.csv"), t.state.step)?;
            t
        }
        None => {
            let config = resolve_train_config(args)?;
            prepare_out(&args.out, args.force)?;
            let _ = fs::remove_file(args.out.join("losses.csv"));
            let meta = crate::story::dataset::read_meta(&args.dataset)?;
            let model = ModelConfig::for_profile(config.profile, meta.frames, meta.height, meta.width, meta.vocab.len())?;
            Trainer::new(config, model)?
        }
    };
    let config = serde_json::json!({
        "train": to_json(&trainer.config),
        "model": to_json(&trainer.model.config),
        "dataset": args.dataset.display().to_string(),
        "max_steps": args.max_steps,
        "resumed_at_step": args.resume.as_ref().map(|_| trainer.state.step),
    });
    RunManifest::new("train", argv, config, trainer.config.seed, &[&args.out]).write(&args.out)?;
    let dataset = read_dataset(&args.dataset)?;
    if dataset.vocab().size() as usize != trainer.model.config.encoder.vocab_size {
        return Err(Error::Config("dataset vocabulary does not match the model".into()));
    }
    let opts = FitOptions {
        out_dir: Some(args.out.clone()),
        max_steps: args.max_steps,
    };
    let every = args.log_every.max(1);
    eprintln!(
        "training {} stories, {} epochs, routing {}, from step {}",
        dataset.len(),
        trainer.config.epochs,
        trainer.config.routing_mode,
        trainer.state.step
    );
    trainer.fit(&dataset, &opts, |r| {
        if r.step % every == 0 {
            eprintln!(
                "step {:>6} epoch {:>3}  L_G {:.4}  L_im {:.4}  L_st {:.4}  KL {:.4}",
                r.step, r.epoch, r.loss_g, r.loss_dim, r.loss_dst, r.kl
            );
        }
    })?;
    eprintln!("finished at step {}", trainer.state.step);
    Ok(())
}

fn checkpoint_id(path: &Path, ckpt: &Checkpoint) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{name}@{}#{:016x}", ckpt.meta.state.step, ckpt.config_hash)
}

pub fn generate_frames(args: &GenerateArgs, argv: &[String]) -> Result<()> {
    let spec: StorySpec = match (&args.spec, &args.dataset, args.story_id) {
        (Some(path), _, _) => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let spec: StorySpec = serde_json::from_slice(&bytes).map_err(|e| Error::malformed("story spec", e))?;
            spec.validate()?;
            spec
        }
        (None, Some(dir), Some(id)) => read_dataset(dir)?
            .story(id)
            .map(|s| s.spec.clone())
            .ok_or_else(|| Error::Config(format!("story {id} not in {}", dir.display())))?,
        _ => return Err(Error::Config("give --spec or --dataset with --story-id".into())),
    };
    prepare_out(&args.out, args.force)?;
    let config = serde_json::json!({ "checkpoint": args.checkpoint.display().to_string(), "story_id": spec.story_id });
    RunManifest::new("generate", argv, config, args.seed, &[&args.out]).write(&args.out)?;
    let ckpt = Checkpoint::read(&args.checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    let frames = sample_story(&trainer.model, &spec, args.seed)?;
    for (t, img) in frames.iter().enumerate() {
        write_file(&args.out.join(format!("frame_{}.png", t + 1)), &encode_png(img)?)?;
    }
    let json = serde_json::to_vec_pretty(&spec).map_err(|e| Error::malformed("story spec", e))?;
    write_file(&args.out.join("spec.json"), &json)?;
    eprintln!("wrote {} frames to {}", frames.len(), args.out.display());
    Ok(())
}

pub fn evaluate_cmd(args: &EvaluateArgs, argv: &[String]) -> Result<()> {
    let plugins = args.plugin.iter().map(|p| Plugin::parse(p)).collect::<Result<Vec<_>>>()?;
    prepare_out(&args.out, args.force)?;
    let config = serde_json::json!({
        "checkpoint": args.checkpoint.as_ref().map(|p| p.display().to_string()),
        "dataset": args.dataset.display().to_string(),
        "n_stories": args.n_stories,
        "oracle": args.oracle,
        "plugins": args.plugin,
    });
    RunManifest::new("evaluate", argv, config, args.seed, &[&args.out]).write(&args.out)?;
    let dataset: Dataset = read_dataset(&args.dataset)?;
    let loaded = match &args.checkpoint {
        Some(path) if !args.oracle => {
            let ckpt = Checkpoint::read(path)?;
            Some((Trainer::from_checkpoint(&ckpt)?, checkpoint_id(path, &ckpt)))
        }
        _ => None,
    };
    let source = match &loaded {
        Some((trainer, id)) => Source::Model {
            gan: &trainer.model,
            checkpoint_id: id.clone(),
        },
        None => Source::Oracle,
    };
    let work = args.out.join("plugin_frames");
    let opts = EvalOptions {
        n_stories: args.n_stories.unwrap_or(dataset.len()),
        seed: args.seed,
        plugins: &plugins,
        work_dir: Some(&work),
    };
    let report = evaluate(&source, &dataset, &opts)?;
    write_file(&args.out.join("metrics.csv"), report.to_csv().as_bytes())?;
    let json = serde_json::to_vec_pretty(&report).map_err(|e| Error::malformed("report", e))?;
    write_file(&args.out.join("metrics.json"), &json)?;
    print!("{}", report.table());
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite(_) | Error::Tensor(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match &cli.command {
        Command::MakeDataset(a) => make_dataset(a, &argv),
        Command::Train(a) => train(a, &argv),
        Command::Generate(a) => generate_frames(a, &argv),
        Command::Evaluate(a) => evaluate_cmd(a, &argv),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
