//! Binary cross-entropy objectives on discriminator probabilities.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// Elementwise `-(t ln p + (1 - t) ln(1 - p))` for a constant target `t`.
pub fn bce(p: &Tensor, target: f64) -> Result<Tensor> {
    let p = p.clamp(EPS, 1.0 - EPS)?;
    let pos = (p.log()? * target)?;
    let neg = ((p.affine(-1.0, 1.0)?).log()? * (1.0 - target))?;
    Ok((pos + neg)?.neg()?)
}

fn stories(scores: &Tensor) -> Result<usize> {
    match scores.rank() {
        0 => Ok(1),
        _ => Ok(scores.dim(0)?.max(1)),
    }
}

fn check(loss: &Tensor, what: &str) -> Result<()> {
    let v = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Image-discriminator loss. Scores are `(stories, frames)`; each term is
/// summed over frames and averaged over stories. Real pairs target
/// `smooth`, fakes and mismatched pairs target 0.
pub fn loss_image(real: &Tensor, fake: &Tensor, mismatch: Option<&Tensor>, smooth: f64) -> Result<Tensor> {
    let b = stories(real)? as f64;
    let mut total = (bce(real, smooth)?.sum_all()? + bce(fake, 0.0)?.sum_all()?)?;
    if let Some(m) = mismatch {
        total = (total + bce(m, 0.0)?.sum_all()?)?;
    }
    let loss = (total / b)?;
    check(&loss, "image discriminator loss")?;
    Ok(loss)
}

/// Story-discriminator loss on per-story scores `(stories,)`.
pub fn loss_story(real: &Tensor, fake: &Tensor, smooth: f64) -> Result<Tensor> {
    let b = stories(real)? as f64;
    let loss = ((bce(real, smooth)?.sum_all()? + bce(fake, 0.0)?.sum_all()?)? / b)?;
    check(&loss, "story discriminator loss")?;
    Ok(loss)
}

/// Non-saturating generator loss: `-Σ_t log D_im(fake_t) - log D_st(fake)`
/// averaged over stories, plus `kl_weight · kl`.
pub fn loss_generator(fake_im: &Tensor, fake_st: &Tensor, kl: &Tensor, kl_weight: f64) -> Result<Tensor> {
    let b = stories(fake_im)? as f64;
    let adv = ((bce(fake_im, 1.0)?.sum_all()? + bce(fake_st, 1.0)?.sum_all()?)? / b)?;
    let loss = (adv + (kl * kl_weight)?)?;
    check(&loss, "generator loss")?;
    Ok(loss)
}

/// Index map pairing story `i` with the text of story `i + 1 (mod n)`;
/// `None` when there is no other story to borrow from.
pub fn make_mismatch(n: usize) -> Option<Vec<u32>> {
    (n >= 2).then(|| (0..n).map(|i| ((i + 1) % n) as u32).collect())
}
