//! Per-frame image metrics, story consistency and a collapse proxy.

pub mod plugin;
pub mod ssim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::TokenBatch;
use crate::error::{Error, Result};
use crate::story::dataset::encode_png;
use crate::story::{tokenize, Dataset, Image, StorySpec};
use crate::training::{Noise, StoryGan};

pub use plugin::Plugin;
pub use ssim::{masked_ssim, ssim};

/// Frames for `spec` under the fixed per-story noise of `seed`.
pub fn sample_story(gan: &StoryGan, spec: &StorySpec, seed: u64) -> Result<Vec<Image>> {
    let frames = spec.num_frames();
    if frames != gan.config.frames {
        return Err(Error::FrameMismatch {
            expected: gan.config.frames,
            found: frames,
        });
    }
    let tokens = TokenBatch::new(&[tokenize(spec)?])?;
    let noise = Noise::for_story(seed, spec.story_id, &gan.config, frames, gan.dtype())?;
    gan.sample(&tokens, &noise)?.story_images(0)
}

/// Copy of `img` with every pixel outside `keep` set to mid-grey.
fn masked(img: &Image, keep: &impl Fn(usize, usize) -> bool) -> Image {
    let mut out = img.clone();
    let plane = img.height * img.width;
    for y in 0..img.height {
        for x in 0..img.width {
            if !keep(x, y) {
                for c in 0..3 {
                    out.data[c * plane + y * img.width + x] = 0.0;
                }
            }
        }
    }
    out
}

/// Mean over consecutive pairs of the SSIM between frames `t` and `t − 1`
/// restricted to frame `t − 1`'s object boxes: pixels outside the boxes are
/// blanked in both frames and only windows centred inside a box count.
/// Each pair is clamped to `[0, 1]`; pairs without a qualifying window are
/// skipped, and `None` means every pair was.
pub fn consistency(images: &[Image], spec: &StorySpec) -> Result<Option<f64>> {
    if images.len() != spec.num_frames() {
        return Err(Error::FrameMismatch {
            expected: spec.num_frames(),
            found: images.len(),
        });
    }
    let mut scores = Vec::new();
    for t in 1..images.len() {
        let boxes: Vec<_> = spec.frames[t - 1].objects.iter().map(|o| o.bbox()).collect();
        if boxes.is_empty() {
            continue;
        }
        let (w, h) = (images[t].width as f64, images[t].height as f64);
        let inside = |x: usize, y: usize| {
            let (u, v) = ((x as f64 + 0.5) / w, (y as f64 + 0.5) / h);
            boxes.iter().any(|b| u >= b.x0 && u <= b.x1 && v >= b.y0 && v <= b.y1)
        };
        let (a, b) = (masked(&images[t], &inside), masked(&images[t - 1], &inside));
        if let Some(s) = masked_ssim(&a, &b, inside)? {
            scores.push(s.clamp(0.0, 1.0));
        }
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

/// Mean pairwise SSIM between same-index frames of different stories. High
/// values mean the generator ignores its conditioning.
pub fn collapse_score(stories: &[Vec<Image>]) -> Result<Option<f64>> {
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..stories.len() {
        for j in i + 1..stories.len() {
            for (a, b) in stories[i].iter().zip(&stories[j]) {
                sum += ssim(a, b)?;
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    /// 1-based frame index; `None` for the aggregate row.
    pub frame: Option<usize>,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub plugin: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub checkpoint_id: String,
    pub n_stories: usize,
    pub seed: u64,
    pub plugin_columns: Vec<String>,
    pub per_frame: Vec<FrameRow>,
    pub aggregate: FrameRow,
    pub consistency: Option<f64>,
    pub collapse: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

impl MetricReport {
    /// Builds the table from `ssim[story][frame]` and
    /// `plugin[column][story][frame]`.
    pub fn from_scores(
        checkpoint_id: &str,
        seed: u64,
        ssim: &[Vec<f64>],
        plugin_columns: Vec<String>,
        plugin: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        let frames = ssim.first().map(Vec::len).unwrap_or(0);
        if frames == 0 || ssim.iter().any(|s| s.len() != frames) {
            return Err(Error::Shape("ragged or empty score table".into()));
        }
        let column = |table: &[Vec<f64>], t: usize| -> Vec<f64> { table.iter().map(|s| s[t]).collect() };
        let per_frame: Vec<FrameRow> = (0..frames)
            .map(|t| {
                let s = column(ssim, t);
                FrameRow {
                    frame: Some(t + 1),
                    ssim_mean: mean(&s),
                    ssim_std: std(&s),
                    plugin: plugin.iter().map(|p| mean(&column(p, t))).collect(),
                }
            })
            .collect();
        let all: Vec<f64> = ssim.iter().flatten().copied().collect();
        let aggregate = FrameRow {
            frame: None,
            ssim_mean: per_frame.iter().map(|r| r.ssim_mean).sum::<f64>() / frames as f64,
            ssim_std: std(&all),
            plugin: (0..plugin.len())
                .map(|k| per_frame.iter().map(|r| r.plugin[k]).sum::<f64>() / frames as f64)
                .collect(),
        };
        Ok(Self {
            checkpoint_id: checkpoint_id.to_string(),
            n_stories: ssim.len(),
            seed,
            plugin_columns,
            per_frame,
            aggregate,
            consistency: None,
            collapse: None,
        })
    }

    fn rows(&self) -> impl Iterator<Item = &FrameRow> {
        self.per_frame.iter().chain(std::iter::once(&self.aggregate))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,ssim_mean,ssim_std");
        for c in &self.plugin_columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for row in self.rows() {
            match row.frame {
                Some(t) => write!(out, "{t}").unwrap(),
                None => out.push_str("all"),
            }
            write!(out, ",{},{}", row.ssim_mean, row.ssim_std).unwrap();
            for v in &row.plugin {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!("checkpoint {}  stories {}  seed {}\n", self.checkpoint_id, self.n_stories, self.seed);
        write!(out, "{:>6}  {:>9}  {:>9}", "frame", "SSIM", "std").unwrap();
        for c in &self.plugin_columns {
            write!(out, "  {c:>12}").unwrap();
        }
        out.push('\n');
        for row in self.rows() {
            let label = row.frame.map_or("all".to_string(), |t| t.to_string());
            write!(out, "{label:>6}  {:>9.4}  {:>9.4}", row.ssim_mean, row.ssim_std).unwrap();
            for v in &row.plugin {
                write!(out, "  {v:>12.4}").unwrap();
            }
            out.push('\n');
        }
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(out, "consistency {}  collapse {}", opt(self.consistency), opt(self.collapse)).unwrap();
        out
    }
}

/// What produces the frames being scored.
pub enum Source<'a> {
    Model { gan: &'a StoryGan, checkpoint_id: String },
    /// Ground truth scored against itself.
    Oracle,
}

pub struct EvalOptions<'a> {
    pub n_stories: usize,
    pub seed: u64,
    /// Plugins and the directory their PNG inputs are written to.
    pub plugins: &'a [Plugin],
    pub work_dir: Option<&'a Path>,
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

/// Scores the first `n_stories` stories of `dataset`.
pub fn evaluate(source: &Source<'_>, dataset: &Dataset, opts: &EvalOptions<'_>) -> Result<MetricReport> {
    if opts.n_stories == 0 || opts.n_stories > dataset.len() {
        return Err(Error::Config(format!(
            "n_stories {} outside 1..={} available",
            opts.n_stories,
            dataset.len()
        )));
    }
    let checkpoint_id = match source {
        Source::Model { gan, checkpoint_id } => {
            if gan.config.frames != dataset.frames() {
                return Err(Error::FrameMismatch {
                    expected: gan.config.frames,
                    found: dataset.frames(),
                });
            }
            if (gan.config.image_h, gan.config.image_w) != (dataset.meta.height, dataset.meta.width) {
                return Err(Error::Config(format!(
                    "model renders {}x{}, dataset holds {}x{}",
                    gan.config.image_h, gan.config.image_w, dataset.meta.height, dataset.meta.width
                )));
            }
            checkpoint_id.clone()
        }
        Source::Oracle => "oracle".to_string(),
    };
    let stories = &dataset.stories[..opts.n_stories];
    let mut generated = Vec::with_capacity(stories.len());
    for story in stories {
        generated.push(match source {
            Source::Model { gan, .. } => sample_story(gan, &story.spec, opts.seed)?,
            Source::Oracle => story.images.clone(),
        });
    }

    let mut scores = Vec::with_capacity(stories.len());
    let mut consistencies = Vec::new();
    for (story, frames) in stories.iter().zip(&generated) {
        scores.push(
            frames
                .iter()
                .zip(&story.images)
                .map(|(g, r)| ssim(g, r))
                .collect::<Result<Vec<_>>>()?,
        );
        if let Some(c) = consistency(frames, &story.spec)? {
            consistencies.push(c);
        }
    }

    let mut plugin_scores = Vec::new();
    if !opts.plugins.is_empty() {
        let dir = opts
            .work_dir
            .ok_or_else(|| Error::Config("plugins need a working directory".into()))?;
        let mut pairs: Vec<(PathBuf, PathBuf)> = Vec::new();
        for (story, frames) in stories.iter().zip(&generated) {
            let sdir = dir.join(format!("story_{:06}", story.spec.story_id));
            std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
            for (t, (g, r)) in frames.iter().zip(&story.images).enumerate() {
                let gp = sdir.join(format!("gen_{}.png", t + 1));
                let rp = sdir.join(format!("ref_{}.png", t + 1));
                write_png(&gp, g)?;
                write_png(&rp, r)?;
                pairs.push((gp, rp));
            }
        }
        let frames = dataset.frames();
        for p in opts.plugins {
            let flat = p.run(&pairs)?;
            plugin_scores.push(flat.chunks(frames).map(<[f64]>::to_vec).collect::<Vec<_>>());
        }
    }

    let names = opts.plugins.iter().map(|p| p.name.clone()).collect();
    let mut report = MetricReport::from_scores(&checkpoint_id, opts.seed, &scores, names, &plugin_scores)?;
    report.consistency = (!consistencies.is_empty()).then(|| mean(&consistencies));
    report.collapse = collapse_score(&generated)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::story::{generate, render, TierCounts};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_frames_are_fully_consistent() -> Result<()> {
        let story = &generate(TierCounts::from_array([1, 0, 0]), 2, 32, 32, 4)?[0];
        let same = vec![story.images[1].clone(); 4];
        assert_eq!(consistency(&same, &story.spec)?, Some(1.0));
        Ok(())
    }

    #[test]
    fn ground_truth_stories_are_consistent() -> Result<()> {
        let stories = generate(TierCounts::from_array([34, 33, 33]), 5, 64, 64, 4)?;
        let scores: Vec<f64> = stories
            .iter()
            .filter_map(|s| consistency(&s.images, &s.spec).unwrap())
            .collect();
        assert_eq!(scores.len(), 100);
        let m = mean(&scores);
        assert!(m > 0.95, "mean ground-truth consistency {m}");
        Ok(())
    }

    #[test]
    fn noise_frames_are_inconsistent() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = generate(TierCounts::from_array([1, 0, 0]), 3, 32, 32, 2)?.remove(0).spec;
        let mut scores = Vec::new();
        for _ in 0..100 {
            let frames: Vec<Image> = (0..2)
                .map(|_| Image::from_data(32, 32, (0..3 * 32 * 32).map(|_| rng.random_range(-1.0f32..=1.0)).collect()).unwrap())
                .collect();
            scores.push(consistency(&frames, &spec)?.unwrap());
        }
        assert!(mean(&scores) < 0.5, "noise consistency {}", mean(&scores));
        Ok(())
    }

    #[test]
    fn aggregate_is_mean_of_frame_rows() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table: Vec<Vec<f64>> = (0..7).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let r = MetricReport::from_scores("x", 0, &table, vec![], &[])?;
        let recomputed = r.per_frame.iter().map(|f| f.ssim_mean).sum::<f64>() / 4.0;
        assert_eq!(r.aggregate.ssim_mean, recomputed);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().last().unwrap().starts_with("all,"));
        Ok(())
    }

    #[test]
    fn collapse_is_one_for_identical_stories() -> Result<()> {
        let spec = generate(TierCounts::from_array([1, 0, 0]), 4, 32, 32, 3)?.remove(0).spec;
        let r = render(&spec, 32, 32, 0)?.images;
        assert_eq!(collapse_score(&[r.clone(), r.clone(), r])?, Some(1.0));
        assert_eq!(collapse_score(&[vec![]])?, None);
        Ok(())
    }
}
