//! Flips, quarter-turn rotations and brightness scaling.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

use super::Sample;

pub const BRIGHTNESS_RANGE: (f32, f32) = (0.8, 1.2);

/// One concrete draw of the augmentation; geometric steps apply to image and
/// mask alike, brightness to the image only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, 0..=3.
    pub rot_k: u8,
    pub brightness: f32,
}

impl AugmentPlan {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            rot_k: 0,
            brightness: 1.0,
        }
    }

    /// Draws in a fixed order: hflip, vflip, k, brightness. Non-square
    /// samples only rotate by 0 or 180 degrees so their shape is kept.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, square: bool) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let mut rot_k = rng.random_range(0..4u8);
        if !square {
            rot_k &= 2;
        }
        let brightness = rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1);
        Self {
            hflip,
            vflip,
            rot_k,
            brightness,
        }
    }

    /// Applies the geometric part to a `[C×H×W]` tensor.
    pub fn geometric(&self, t: &Tensor) -> Result<Tensor> {
        let mut t = t.clone();
        if self.hflip {
            t = hflip(&t)?;
        }
        if self.vflip {
            t = vflip(&t)?;
        }
        for _ in 0..self.rot_k {
            t = rot90(&t)?;
        }
        Ok(t)
    }

    pub fn apply(&self, s: &Sample) -> Result<Sample> {
        let image = self.geometric(&s.image)?;
        let b = self.brightness;
        let image = if b == 1.0 { image } else { image.map(|v| (v * b).clamp(0.0, 1.0)) };
        Sample::new(image, self.geometric(&s.mask)?, s.id.clone())
    }
}

/// Draws a plan from `rng` and applies it.
pub fn augment<R: Rng + ?Sized>(s: &Sample, rng: &mut R) -> Result<Sample> {
    let (h, w) = s.size();
    AugmentPlan::sample(rng, h == w).apply(s)
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(shape_err!("expected [C, H, W], got {s:?}")),
    }
}

fn remap(t: &Tensor, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Result<Tensor> {
    let (c, h, w) = chw(t)?;
    let d = t.data();
    Ok(Tensor::from_fn(&[c, out_h, out_w], |i| {
        let (ch, y, x) = (i / (out_h * out_w), (i / out_w) % out_h, i % out_w);
        let (sy, sx) = src(y, x);
        d[(ch * h + sy) * w + sx]
    }))
}

/// Mirrors along the width axis.
pub fn hflip(t: &Tensor) -> Result<Tensor> {
    let (_, h, w) = chw(t)?;
    remap(t, h, w, |y, x| (y, w - 1 - x))
}

/// Mirrors along the height axis.
pub fn vflip(t: &Tensor) -> Result<Tensor> {
    let (_, h, w) = chw(t)?;
    remap(t, h, w, |y, x| (h - 1 - y, x))
}

/// One counter-clockwise quarter turn: `[C×H×W] → [C×W×H]`.
pub fn rot90(t: &Tensor) -> Result<Tensor> {
    let (_, h, w) = chw(t)?;
    remap(t, w, h, |y, x| (x, w - 1 - y))
}
