//! Symbolic frame text: one fixed-length token sequence per frame.

use serde::{Deserialize, Serialize};

use super::scene::{Color, ObjectSpec, Shape, Size, StorySpec};
use crate::error::{Error, Result};

/// Side of the position-bucket grid.
pub const GRID: usize = 8;

/// Tokens per frame: frame index, shape, colour, size, position bucket.
pub const TOKENS_PER_FRAME: usize = 5;

/// Token id layout for stories of `frames` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub vocab_size: u32,
}

/// Attributes recoverable from a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameText {
    pub frame_index: usize,
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub bucket: (usize, usize),
}

pub fn position_bucket(position: [f64; 2]) -> (usize, usize) {
    let b = |v: f64| ((v * GRID as f64).floor() as isize).clamp(0, GRID as isize - 1) as usize;
    (b(position[0]), b(position[1]))
}

impl Vocab {
    pub fn new(frames: usize) -> Self {
        Self { frames }
    }

    fn shape_base(&self) -> u32 {
        self.frames as u32
    }

    fn color_base(&self) -> u32 {
        self.shape_base() + Shape::ALL.len() as u32
    }

    fn size_base(&self) -> u32 {
        self.color_base() + Color::ALL.len() as u32
    }

    fn bucket_base(&self) -> u32 {
        self.size_base() + Size::ALL.len() as u32
    }

    pub fn size(&self) -> u32 {
        self.bucket_base() + (GRID * GRID) as u32
    }

    /// Human-readable name of every token id, in id order.
    pub fn table(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.frames).map(|t| format!("frame:{}", t + 1)).collect();
        out.extend(Shape::ALL.iter().map(|s| format!("shape:{s}")));
        out.extend(Color::ALL.iter().map(|c| format!("color:{c}")));
        out.extend(Size::ALL.iter().map(|s| format!("size:{s}")));
        for by in 0..GRID {
            for bx in 0..GRID {
                out.push(format!("pos:{bx},{by}"));
            }
        }
        out
    }

    pub fn encode(&self, frame_index: usize, obj: &ObjectSpec) -> Result<TokenSequence> {
        if frame_index >= self.frames {
            return Err(Error::OutOfVocab {
                token: frame_index as u32,
                vocab_size: self.size(),
            });
        }
        let shape = self.shape_base() + Shape::ALL.iter().position(|s| *s == obj.shape).unwrap() as u32;
        let color = self.color_base() + Color::ALL.iter().position(|c| *c == obj.color).unwrap() as u32;
        let size = self.size_base() + Size::ALL.iter().position(|s| *s == obj.size).unwrap() as u32;
        let (bx, by) = position_bucket(obj.position);
        let bucket = self.bucket_base() + (by * GRID + bx) as u32;
        Ok(TokenSequence {
            tokens: vec![frame_index as u32, shape, color, size, bucket],
            vocab_size: self.size(),
        })
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<FrameText> {
        if seq.tokens.len() != TOKENS_PER_FRAME {
            return Err(Error::malformed("token sequence", format!("length {}", seq.tokens.len())));
        }
        if let Some(&bad) = seq.tokens.iter().find(|&&t| t >= self.size()) {
            return Err(Error::OutOfVocab {
                token: bad,
                vocab_size: self.size(),
            });
        }
        let slot = |t: u32, lo: u32, n: usize| -> Result<usize> {
            if t >= lo && t < lo + n as u32 {
                Ok((t - lo) as usize)
            } else {
                Err(Error::malformed("token sequence", format!("token {t} in wrong slot")))
            }
        };
        let t = &seq.tokens;
        let frame_index = slot(t[0], 0, self.frames)?;
        let shape = Shape::ALL[slot(t[1], self.shape_base(), Shape::ALL.len())?];
        let color = Color::ALL[slot(t[2], self.color_base(), Color::ALL.len())?];
        let size = Size::ALL[slot(t[3], self.size_base(), Size::ALL.len())?];
        let b = slot(t[4], self.bucket_base(), GRID * GRID)?;
        Ok(FrameText {
            frame_index,
            shape,
            color,
            size,
            bucket: (b % GRID, b / GRID),
        })
    }
}

/// One token sequence per frame, describing the object that frame adds.
pub fn tokenize(spec: &StorySpec) -> Result<Vec<TokenSequence>> {
    let vocab = Vocab::new(spec.num_frames());
    (0..spec.num_frames())
        .map(|t| {
            let obj = spec
                .new_object(t)
                .ok_or_else(|| Error::malformed("story", format!("frame {} is empty", t + 1)))?;
            vocab.encode(t, obj)
        })
        .collect()
}

pub fn detokenize(seqs: &[TokenSequence], frames: usize) -> Result<Vec<FrameText>> {
    let vocab = Vocab::new(frames);
    seqs.iter().map(|s| vocab.decode(s)).collect()
}
