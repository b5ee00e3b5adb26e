use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

/// Upper bound on rejection-sampling draws in [`make_story`].
pub const MAX_ATTEMPTS: usize = 20_000;

/// IoU at or above which a scene counts as hard.
pub const HARD_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube,
    Sphere,
    Cylinder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Gray,
    Red,
    Blue,
    Green,
    Brown,
    Purple,
    Cyan,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Cube, Shape::Sphere, Shape::Cylinder];
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Gray,
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Brown,
        Color::Purple,
        Color::Cyan,
        Color::Yellow,
    ];

    /// Flat sRGB fill.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Gray => [87, 87, 87],
            Color::Red => [173, 35, 35],
            Color::Blue => [42, 75, 215],
            Color::Green => [29, 105, 20],
            Color::Brown => [129, 74, 25],
            Color::Purple => [129, 38, 192],
            Color::Cyan => [41, 208, 208],
            Color::Yellow => [255, 238, 51],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    /// Side of the bounding square in normalized scene units.
    pub fn extent(self) -> f64 {
        match self {
            Size::Small => 0.15,
            Size::Large => 0.25,
        }
    }
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    pub fn from_iou(iou: f64) -> Tier {
        if iou <= 0.0 {
            Tier::Easy
        } else if iou < HARD_IOU {
            Tier::Medium
        } else {
            Tier::Hard
        }
    }
}

macro_rules! display_lowercase {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = serde_json::to_value(self).map_err(|_| fmt::Error)?;
                f.write_str(s.as_str().unwrap_or_default())
            }
        }
    )*};
}
display_lowercase!(Shape, Color, Size, Tier);

impl std::str::FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
            .map_err(|_| Error::Config(format!("unknown tier {s:?}")))
    }
}

/// Axis-aligned box `[x0, x1] x [y0, y1]` in scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Centre in `[0, 1]^2`, `y` growing downwards.
    pub position: [f64; 2],
}

impl ObjectSpec {
    pub fn bbox(&self) -> BBox {
        let h = self.size.extent() / 2.0;
        let [x, y] = self.position;
        BBox {
            x0: x - h,
            y0: y - h,
            x1: x + h,
            y1: y + h,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.position.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p));
        if ok {
            Ok(())
        } else {
            Err(Error::malformed("object", format!("position {:?} outside [0,1]^2", self.position)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub objects: Vec<ObjectSpec>,
}

/// A T-frame story: frame `t` (1-based) shows objects `1..=t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorySpec {
    pub story_id: u64,
    pub frames: Vec<FrameSpec>,
    pub tier: Tier,
}

impl StorySpec {
    /// Builds the cumulative frames from the ordered object list.
    pub fn from_objects(story_id: u64, objects: &[ObjectSpec]) -> Self {
        let frames = (1..=objects.len())
            .map(|t| FrameSpec {
                objects: objects[..t].to_vec(),
            })
            .collect();
        let mut spec = Self {
            story_id,
            frames,
            tier: Tier::Easy,
        };
        spec.tier = tier_of(&spec);
        spec
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// The object introduced in frame `t` (0-based).
    pub fn new_object(&self, t: usize) -> Option<&ObjectSpec> {
        self.frames.get(t).and_then(|f| f.objects.last())
    }

    pub fn final_objects(&self) -> &[ObjectSpec] {
        self.frames.last().map(|f| f.objects.as_slice()).unwrap_or(&[])
    }

    /// Checks the cumulative-scene property, positions, and the tier label.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::malformed("story", "no frames"));
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.objects.len() != t + 1 {
                return Err(Error::malformed(
                    "story",
                    format!("frame {} has {} objects", t + 1, frame.objects.len()),
                ));
            }
            if t > 0 && frame.objects[..t] != self.frames[t - 1].objects[..] {
                return Err(Error::malformed("story", format!("frame {} does not extend frame {t}", t + 1)));
            }
            for obj in &frame.objects {
                obj.validate()?;
            }
        }
        if tier_of(self) != self.tier {
            return Err(Error::malformed(
                "story",
                format!("labelled {} but scene is {}", self.tier, tier_of(self)),
            ));
        }
        Ok(())
    }
}

pub fn max_pairwise_iou(objects: &[ObjectSpec]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..objects.len() {
        for j in i + 1..objects.len() {
            best = best.max(objects[i].bbox().iou(&objects[j].bbox()));
        }
    }
    best
}

/// Difficulty from the largest pairwise box IoU in the final frame.
pub fn tier_of(spec: &StorySpec) -> Tier {
    Tier::from_iou(max_pairwise_iou(spec.final_objects()))
}

fn random_object(rng: &mut impl Rng) -> ObjectSpec {
    let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
    let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
    let size = Size::ALL[rng.random_range(0..Size::ALL.len())];
    let h = size.extent() / 2.0;
    let position = [rng.random_range(h..=1.0 - h), rng.random_range(h..=1.0 - h)];
    ObjectSpec {
        shape,
        color,
        size,
        position,
    }
}

/// Samples a `frames`-frame story of the requested tier by rejection.
pub fn make_story(rng_seed: u64, tier: Tier, frames: usize) -> Result<StorySpec> {
    if frames == 0 {
        return Err(Error::Config("a story needs at least one frame".into()));
    }
    let mut rng = substream(rng_seed, "story");
    for _ in 0..MAX_ATTEMPTS {
        let objects: Vec<ObjectSpec> = (0..frames).map(|_| random_object(&mut rng)).collect();
        if Tier::from_iou(max_pairwise_iou(&objects)) == tier {
            return Ok(StorySpec::from_objects(rng_seed, &objects));
        }
    }
    Err(Error::TierUnachievable {
        tier: tier.to_string(),
        frames,
        attempts: MAX_ATTEMPTS,
    })
}
