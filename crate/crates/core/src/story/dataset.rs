//! On-disk dataset layout:
//!
//! ```text
//! <root>/meta.json
//! <root>/stories/<id>/spec.json
//! <root>/stories/<id>/frame_<t>.png   (t = 1..T, 8-bit RGB)
//! ```
//!
//! `meta.json` carries a CRC32 per story over `spec.json` followed by the
//! frame PNGs in order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::render::{check_render_size, render, Image, RenderedStory};
use super::scene::{make_story, StorySpec, Tier};
use super::tokens::Vocab;
use crate::error::{Error, Result};
use crate::rng::substream;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCounts {
    pub easy: usize,
    pub medium: usize,
    pub hard: usize,
}

impl TierCounts {
    pub fn from_array(a: [usize; 3]) -> Self {
        Self {
            easy: a[0],
            medium: a[1],
            hard: a[2],
        }
    }

    pub fn get(&self, tier: Tier) -> usize {
        match tier {
            Tier::Easy => self.easy,
            Tier::Medium => self.medium,
            Tier::Hard => self.hard,
        }
    }

    pub fn total(&self) -> usize {
        self.easy + self.medium + self.hard
    }

    pub fn count(stories: &[RenderedStory]) -> Self {
        let mut c = Self::default();
        for s in stories {
            match s.spec.tier {
                Tier::Easy => c.easy += 1,
                Tier::Medium => c.medium += 1,
                Tier::Hard => c.hard += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub vocab: Vec<String>,
    pub tier_counts: TierCounts,
    pub records: Vec<RecordMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub stories: Vec<RenderedStory>,
}

impl Dataset {
    pub fn frames(&self) -> usize {
        self.meta.frames
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.meta.frames)
    }

    pub fn len(&self) -> usize {
        self.stories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stories.is_empty()
    }

    pub fn story(&self, id: u64) -> Option<&RenderedStory> {
        self.stories.iter().find(|s| s.spec.story_id == id)
    }
}

/// Largest-remainder apportionment of `total` items over `weights`; ties go
/// to the earlier entry.
pub fn largest_remainder(total: usize, weights: [u32; 3]) -> Result<[usize; 3]> {
    let sum: u64 = weights.iter().map(|&w| w as u64).sum();
    if sum == 0 {
        return Err(Error::Config("tier mix weights sum to zero".into()));
    }
    let mut counts = [0usize; 3];
    let mut rema = [0u64; 3];
    for i in 0..3 {
        let q = total as u64 * weights[i] as u64;
        counts[i] = (q / sum) as usize;
        rema[i] = q % sum;
    }
    let mut left = total - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rema[b].cmp(&rema[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Samples and renders a dataset with exactly `counts` stories per tier.
///
/// Tier assignment is shuffled so any prefix mixes tiers; story `i` gets id
/// `i` and seeds derived from `(seed, i)`.
pub fn generate(counts: TierCounts, seed: u64, height: usize, width: usize, frames: usize) -> Result<Vec<RenderedStory>> {
    check_render_size(height, width)?;
    let mut tiers: Vec<Tier> = Tier::ALL
        .iter()
        .flat_map(|&t| std::iter::repeat_n(t, counts.get(t)))
        .collect();
    tiers.shuffle(&mut substream(seed, "dataset.tiers"));
    tiers
        .iter()
        .enumerate()
        .map(|(i, &tier)| {
            let story_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut spec = make_story(story_seed, tier, frames)?;
            spec.story_id = i as u64;
            render(&spec, height, width, story_seed)
        })
        .collect()
}

fn story_dir(root: &Path, id: u64) -> PathBuf {
    root.join("stories").join(format!("{id:05}"))
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(&img.to_rgb8(), img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::malformed("png", e))?;
    Ok(buf)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let rgb = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::malformed("png", e))?
        .to_rgb8();
    Image::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn record_bytes(story: &RenderedStory) -> Result<(Vec<u8>, Vec<Vec<u8>>)> {
    let spec = serde_json::to_vec_pretty(&story.spec).map_err(|e| Error::malformed("spec", e))?;
    let pngs = story.images.iter().map(encode_png).collect::<Result<Vec<_>>>()?;
    Ok((spec, pngs))
}

fn checksum(spec: &[u8], pngs: &[Vec<u8>]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(spec);
    for p in pngs {
        h.update(p);
    }
    h.finalize()
}

/// Writes `stories` under `root`, creating directories as needed.
pub fn write_dataset(root: &Path, stories: &[RenderedStory]) -> Result<DatasetMeta> {
    let first = stories
        .first()
        .ok_or_else(|| Error::Config("refusing to write an empty dataset".into()))?;
    let frames = first.spec.num_frames();
    let (height, width) = first
        .images
        .first()
        .map(|i| (i.height, i.width))
        .ok_or_else(|| Error::malformed("story", "no images"))?;
    let mut records = Vec::with_capacity(stories.len());
    for story in stories {
        story.spec.validate()?;
        if story.images.len() != frames || story.spec.num_frames() != frames {
            return Err(Error::FrameMismatch {
                expected: frames,
                found: story.images.len(),
            });
        }
        if story.images.iter().any(|i| (i.height, i.width) != (height, width)) {
            return Err(Error::Shape(format!("story {} has inconsistent image size", story.spec.story_id)));
        }
        let dir = story_dir(root, story.spec.story_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (spec, pngs) = record_bytes(story)?;
        write(&dir.join("spec.json"), &spec)?;
        for (t, png) in pngs.iter().enumerate() {
            write(&dir.join(format!("frame_{}.png", t + 1)), png)?;
        }
        records.push(RecordMeta {
            id: story.spec.story_id,
            crc32: checksum(&spec, &pngs),
        });
    }
    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        frames,
        height,
        width,
        vocab: Vocab::new(frames).table(),
        tier_counts: TierCounts::count(stories),
        records,
    };
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::malformed("meta", e))?;
    write(&root.join("meta.json"), &json)?;
    Ok(meta)
}

pub fn read_meta(root: &Path) -> Result<DatasetMeta> {
    let bytes = read(&root.join("meta.json"))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::malformed("meta.json", e))?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::malformed("meta.json", "missing schema_version"))? as u32;
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::malformed("meta.json", e))
}

/// Loads and verifies a dataset written by [`write_dataset`].
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    if !root.exists() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let meta = read_meta(root)?;
    let mut stories = Vec::with_capacity(meta.records.len());
    for rec in &meta.records {
        let dir = story_dir(root, rec.id);
        let spec_bytes = read(&dir.join("spec.json"))?;
        let pngs = (1..=meta.frames)
            .map(|t| read(&dir.join(format!("frame_{t}.png"))))
            .collect::<Result<Vec<_>>>()?;
        if checksum(&spec_bytes, &pngs) != rec.crc32 {
            return Err(Error::Checksum(format!("story {}", rec.id)));
        }
        let spec: StorySpec = serde_json::from_slice(&spec_bytes).map_err(|e| Error::malformed("spec.json", e))?;
        spec.validate()?;
        let images = pngs.iter().map(|p| decode_png(p)).collect::<Result<Vec<_>>>()?;
        if images.iter().any(|i| (i.height, i.width) != (meta.height, meta.width)) {
            return Err(Error::Shape(format!("story {} frames differ from meta size", rec.id)));
        }
        stories.push(RenderedStory { images, spec });
    }
    Ok(Dataset { meta, stories })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_cases() -> Result<()> {
        assert_eq!(largest_remainder(10, [33, 33, 33])?, [4, 3, 3]);
        assert_eq!(largest_remainder(10, [100, 0, 0])?, [10, 0, 0]);
        assert_eq!(largest_remainder(10, [40, 30, 30])?, [4, 3, 3]);
        assert_eq!(largest_remainder(7, [1, 1, 1])?, [3, 2, 2]);
        assert_eq!(largest_remainder(500, [40, 30, 30])?, [200, 150, 150]);
        assert!(largest_remainder(3, [0, 0, 0]).is_err());
        Ok(())
    }

    #[test]
    fn round_trip_is_exact() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let stories = generate(TierCounts::from_array([4, 3, 3]), 5, 32, 32, 4)?;
        write_dataset(dir.path(), &stories)?;
        let back = read_dataset(dir.path())?;
        assert_eq!(back.stories, stories);
        assert_eq!(back.meta.tier_counts, TierCounts::from_array([4, 3, 3]));
        assert_eq!(back.meta.vocab.len(), Vocab::new(4).size() as usize);
        Ok(())
    }

    #[test]
    fn missing_dataset_is_not_found() {
        let err = read_dataset(Path::new("/definitely/not/here")).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }

    #[test]
    fn corrupted_record_fails_checksum() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let stories = generate(TierCounts::from_array([2, 0, 0]), 1, 16, 16, 2)?;
        write_dataset(dir.path(), &stories)?;
        let spec = story_dir(dir.path(), 1).join("spec.json");
        let mut bytes = fs::read(&spec).unwrap();
        let i = bytes.iter().position(|&b| b == b'"').unwrap();
        bytes.insert(i, b' ');
        fs::write(&spec, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Checksum(_))));
        Ok(())
    }

    #[test]
    fn schema_mismatch_is_reported() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let stories = generate(TierCounts::from_array([1, 0, 0]), 1, 16, 16, 2)?;
        write_dataset(dir.path(), &stories)?;
        let path = dir.path().join("meta.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 99");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::SchemaVersion { found: 99, expected: 1 })
        ));
        Ok(())
    }

    #[test]
    fn tier_histogram_is_exact() -> Result<()> {
        let counts = largest_remainder(500, [40, 30, 30])?;
        let stories = generate(TierCounts::from_array(counts), 3, 16, 16, 4)?;
        let mut seen = [0usize; 3];
        for s in &stories {
            seen[Tier::ALL.iter().position(|&t| t == s.spec.tier).unwrap()] += 1;
        }
        assert_eq!(seen, counts);
        Ok(())
    }
}
