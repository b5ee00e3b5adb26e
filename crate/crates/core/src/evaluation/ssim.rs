//! Structural similarity with an 11-tap Gaussian window (σ = 1.5), evaluated
//! on valid window positions only.

use crate::error::{Error, Result};
use crate::story::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; WINDOW] {
    let mid = (WINDOW / 2) as f64;
    let mut taps = [0.0; WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.map(|t| t / sum)
}

/// Valid-mode separable filtering of one `h × w` plane.
fn filter(plane: &[f64], h: usize, w: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..][..w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let src = &rows[(y + k) * ow..][..ow];
            for (o, v) in out[y * ow..][..ow].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

/// Per-window SSIM of two `h × w` planes with values in `[0, 1]`; the result
/// is `(h − 10) × (w − 10)`, entry `(i, j)` centred on pixel `(i + 5, j + 5)`.
pub fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape(format!("ssim planes of {} and {} values for {h}x{w}", a.len(), b.len())));
    }
    if h < WINDOW || w < WINDOW {
        return Err(Error::Shape(format!("{h}x{w} plane smaller than the {WINDOW}x{WINDOW} window")));
    }
    let taps = gaussian_taps();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter(a, h, w, &taps);
    let mu_b = filter(b, h, w, &taps);
    let aa = filter(&prod(a, a), h, w, &taps);
    let bb = filter(&prod(b, b), h, w, &taps);
    let ab = filter(&prod(a, b), h, w, &taps);
    Ok((0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
        })
        .collect())
}

fn unit_planes(img: &Image) -> Vec<Vec<f64>> {
    let plane = img.height * img.width;
    (0..3)
        .map(|c| img.data[c * plane..(c + 1) * plane].iter().map(|&v| (v as f64 + 1.0) / 2.0).collect())
        .collect()
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!(
            "ssim of {}x{} against {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Per-channel SSIM maps of two images in `[-1, 1]`.
pub fn ssim_maps(a: &Image, b: &Image) -> Result<Vec<Vec<f64>>> {
    check_pair(a, b)?;
    unit_planes(a)
        .iter()
        .zip(&unit_planes(b))
        .map(|(pa, pb)| ssim_map(pa, pb, a.height, a.width))
        .collect()
}

/// Mean SSIM over channels and window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let maps = ssim_maps(a, b)?;
    let n: usize = maps.iter().map(Vec::len).sum();
    Ok(maps.iter().flatten().sum::<f64>() / n as f64)
}

/// Mean SSIM over window positions whose centre pixel satisfies `keep(x, y)`;
/// `None` when no window qualifies.
pub fn masked_ssim(a: &Image, b: &Image, keep: impl Fn(usize, usize) -> bool) -> Result<Option<f64>> {
    let maps = ssim_maps(a, b)?;
    let ow = a.width + 1 - WINDOW;
    let half = WINDOW / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for map in &maps {
        for (i, v) in map.iter().enumerate() {
            if keep(i % ow + half, i / ow + half) {
                sum += v;
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}
