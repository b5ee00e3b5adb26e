//! Flat-shaded 2D rasterizer for story frames.

use rand::Rng;

use super::scene::{FrameSpec, ObjectSpec, Shape, StorySpec};
use crate::error::{Error, Result};
use crate::rng::substream;

/// Background fill, identical in every frame.
pub const BACKGROUND: [u8; 3] = [160, 160, 160];

/// Per-object colour jitter (in 8-bit steps) drawn from the render seed.
const JITTER: i32 = 6;

/// A 3xHxW image in `[-1, 1]`, stored channel-major.
///
/// Values always sit on the 8-bit grid `v / 127.5 - 1`, so PNG round-trips
/// are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn to_byte(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(to_unit(c), height * width));
        }
        Self { height, width, data }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image data of {} values for 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let plane = self.height * self.width;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + y * self.width + x] = to_unit(v);
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    /// Interleaved 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push(to_byte(self.data[c * plane + i]));
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        let plane = height * width;
        if rgb.len() != 3 * plane {
            return Err(Error::Shape(format!("{} bytes for {height}x{width} RGB", rgb.len())));
        }
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = to_unit(rgb[3 * i + c]);
            }
        }
        Ok(Self { height, width, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedStory {
    pub images: Vec<Image>,
    pub spec: StorySpec,
}

fn jittered(rgb: [u8; 3], offsets: [i32; 3]) -> [u8; 3] {
    let mut out = rgb;
    for c in 0..3 {
        out[c] = (rgb[c] as i32 + offsets[c]).clamp(0, 255) as u8;
    }
    out
}

fn lighten(rgb: [u8; 3]) -> [u8; 3] {
    rgb.map(|v| (v as u32 + (255 - v as u32) / 3) as u8)
}

/// Paints one object; pixel centres decide coverage.
fn draw(img: &mut Image, obj: &ObjectSpec, fill: [u8; 3]) {
    let (w, h) = (img.width as f64, img.height as f64);
    let ext = obj.size.extent();
    let [cx, cy] = obj.position;
    let half = ext / 2.0;
    let x_lo = (((cx - half) * w).floor().max(0.0)) as usize;
    let x_hi = (((cx + half) * w).ceil().min(w)) as usize;
    let y_lo = (((cy - half) * h).floor().max(0.0)) as usize;
    let y_hi = (((cy + half) * h).ceil().min(h)) as usize;
    let cap = lighten(fill);
    for py in y_lo..y_hi {
        for px in x_lo..x_hi {
            let dx = (px as f64 + 0.5) / w - cx;
            let dy = (py as f64 + 0.5) / h - cy;
            let colour = match obj.shape {
                Shape::Cube => (dx.abs() <= half && dy.abs() <= half).then_some(fill),
                Shape::Sphere => (dx * dx + dy * dy <= half * half).then_some(fill),
                Shape::Cylinder => {
                    let rx = 0.35 * ext;
                    let ry = 0.12 * ext;
                    let top = -half + ry;
                    let ex = dx / rx;
                    let ey = (dy - top) / ry;
                    if ex * ex + ey * ey <= 1.0 {
                        Some(cap)
                    } else if dx.abs() <= rx && dy >= top && dy <= half {
                        Some(fill)
                    } else {
                        None
                    }
                }
            };
            if let Some(c) = colour {
                img.put(px, py, c);
            }
        }
    }
}

fn render_frame(frame: &FrameSpec, fills: &[[u8; 3]], height: usize, width: usize) -> Image {
    let mut img = Image::filled(height, width, BACKGROUND);
    let mut order: Vec<usize> = (0..frame.objects.len()).collect();
    // Painter's order: larger y is nearer the viewer and drawn last.
    order.sort_by(|&a, &b| {
        frame.objects[a].position[1]
            .total_cmp(&frame.objects[b].position[1])
            .then(a.cmp(&b))
    });
    for i in order {
        draw(&mut img, &frame.objects[i], fills[i]);
    }
    img
}

pub fn check_render_size(height: usize, width: usize) -> Result<()> {
    for d in [height, width] {
        if d < 16 || !d.is_power_of_two() {
            return Err(Error::Config(format!("render size {height}x{width}: sides must be powers of two >= 16")));
        }
    }
    Ok(())
}

/// Rasterizes every frame of `spec`. Deterministic in `(spec, render_seed)`.
pub fn render(spec: &StorySpec, height: usize, width: usize, render_seed: u64) -> Result<RenderedStory> {
    check_render_size(height, width)?;
    let mut rng = substream(render_seed, "render");
    let fills: Vec<[u8; 3]> = spec
        .final_objects()
        .iter()
        .map(|o| {
            let offs = [0; 3].map(|_: i32| rng.random_range(-JITTER..=JITTER));
            jittered(o.color.rgb(), offs)
        })
        .collect();
    let images = spec
        .frames
        .iter()
        .map(|f| render_frame(f, &fills, height, width))
        .collect();
    Ok(RenderedStory {
        images,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::story::scene::{make_story, Color, Size, Tier};

    #[test]
    fn empty_frame_is_background() {
        let img = render_frame(&FrameSpec { objects: vec![] }, &[], 32, 32);
        let bg = BACKGROUND.map(to_unit);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(img.pixel(x, y), bg);
            }
        }
    }

    #[test]
    fn centred_large_cube_covers_its_analytic_area() -> Result<()> {
        let cube = ObjectSpec {
            shape: Shape::Cube,
            color: Color::Red,
            size: Size::Large,
            position: [0.5, 0.5],
        };
        let spec = StorySpec::from_objects(0, &[cube]);
        let r = render(&spec, 64, 64, 3)?;
        let img = &r.images[0];
        let bg = BACKGROUND.map(to_unit);
        let painted = (0..64)
            .flat_map(|y| (0..64).map(move |x| (x, y)))
            .filter(|&(x, y)| img.pixel(x, y) != bg)
            .count();
        let analytic = (0.25 * 64.0f64).powi(2);
        assert!((painted as f64 - analytic).abs() <= 0.1 * analytic, "{painted} vs {analytic}");
        let c = img.pixel(32, 32);
        assert!(c[0] > c[1] + 0.5 && c[0] > c[2] + 0.5, "centre pixel {c:?} is not red");
        Ok(())
    }

    #[test]
    fn render_is_bit_deterministic() -> Result<()> {
        let spec = make_story(4, Tier::Hard, 4)?;
        let a = render(&spec, 64, 64, 9)?;
        let b = render(&spec, 64, 64, 9)?;
        assert_eq!(a, b);
        Ok(())
    }

    #[test]
    fn pixels_stay_in_range_and_on_byte_grid() -> Result<()> {
        let spec = make_story(8, Tier::Medium, 4)?;
        let r = render(&spec, 32, 32, 1)?;
        for img in &r.images {
            for &v in &img.data {
                assert!((-1.0..=1.0).contains(&v));
                assert_eq!(to_unit(to_byte(v)), v);
            }
        }
        Ok(())
    }

    #[test]
    fn rejects_bad_sizes() {
        let spec = StorySpec::from_objects(0, &[]);
        assert!(render(&spec, 48, 64, 0).is_err());
        assert!(render(&spec, 8, 8, 0).is_err());
    }
}
