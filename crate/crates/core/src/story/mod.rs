//! Synthetic shape-story dataset: scenes, rendering, tokens, and storage.

pub mod dataset;
pub mod render;
pub mod scene;
pub mod tokens;

pub use dataset::{generate, largest_remainder, read_dataset, write_dataset, Dataset, DatasetMeta, TierCounts};
pub use render::{render, Image, RenderedStory};
pub use scene::{make_story, tier_of, Color, ObjectSpec, Shape, Size, StorySpec, Tier};
pub use tokens::{detokenize, tokenize, TokenSequence, Vocab};
