//! Synthetic polyp-like images: a smooth tinted background with one to three
//! filled ellipses whose union is the mask.

use std::f32::consts::PI;

use rand::Rng;

use crate::error::{contract_err, Result};
use crate::nn::resize_planes;
use crate::rng;
use crate::tensor::Tensor;

use super::pnm::quantize;
use super::Sample;

/// Side of the coarse noise grid that is bilinearly stretched into the
/// background.
const NOISE_GRID: usize = 4;
const BACKGROUND_TINT: [f32; 3] = [0.62, 0.36, 0.30];
const POLYP_TINT: [f32; 3] = [0.86, 0.56, 0.42];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
    /// Rotation of the `rx` axis, radians.
    pub theta: f32,
    pub color: [f32; 3],
}

impl Ellipse {
    /// Whether the centre of pixel `(x, y)` lies inside or on the boundary.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f32 + 0.5 - self.cx, y as f32 + 0.5 - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v <= 1.0
    }
}

pub fn synth_id(i: usize) -> String {
    format!("synth_{i:04}")
}

/// `n` samples of `size × size`, each drawn from its own stream derived
/// from `seed` and its id.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    Ok(synth_dataset_with_shapes(n, size, seed)?.into_iter().map(|(s, _)| s).collect())
}

/// Like [`synth_dataset`], also returning the ellipses behind each mask.
pub fn synth_dataset_with_shapes(n: usize, size: usize, seed: u64) -> Result<Vec<(Sample, Vec<Ellipse>)>> {
    if size == 0 || size % 16 != 0 {
        return Err(contract_err!("synthetic size {size} must be a positive multiple of 16"));
    }
    (0..n)
        .map(|i| {
            let id = synth_id(i);
            let mut r = rng::for_id(seed, &id);
            synth_one(&mut r, size, id)
        })
        .collect()
}

fn synth_one<R: Rng>(r: &mut R, size: usize, id: String) -> Result<(Sample, Vec<Ellipse>)> {
    let hw = size * size;
    let mut image = Vec::with_capacity(3 * hw);
    for tint in BACKGROUND_TINT {
        let grid: Vec<f32> = (0..NOISE_GRID * NOISE_GRID)
            .map(|_| tint * r.random_range(0.75..1.25))
            .collect();
        image.extend(resize_planes(&grid, NOISE_GRID, NOISE_GRID, size, size));
    }
    let s = size as f32;
    let count = r.random_range(1..=3usize);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| Ellipse {
            cx: r.random_range(0.2..0.8) * s,
            cy: r.random_range(0.2..0.8) * s,
            rx: r.random_range(0.08..0.25) * s,
            ry: r.random_range(0.08..0.25) * s,
            theta: r.random_range(0.0..PI),
            color: POLYP_TINT.map(|t| t + r.random_range(-0.08..0.08)),
        })
        .collect();
    let mut mask = vec![0.0f32; hw];
    for y in 0..size {
        for x in 0..size {
            // later ellipses paint over earlier ones
            if let Some(e) = ellipses.iter().rev().find(|e| e.contains(x, y)) {
                mask[y * size + x] = 1.0;
                let shade = 1.0 - 0.15 * ((x as f32 + 0.5 - e.cx).hypot(y as f32 + 0.5 - e.cy) / e.rx.max(e.ry));
                for (c, col) in e.color.iter().enumerate() {
                    image[c * hw + y * size + x] = col * shade;
                }
            }
        }
    }
    // stored at 8-bit precision so saving and reloading is lossless
    let image = image.into_iter().map(|v| quantize(v) as f32 / 255.0).collect();
    let sample = Sample::new(
        Tensor::new(vec![3, size, size], image)?,
        Tensor::new(vec![1, size, size], mask)?,
        id,
    )?;
    Ok((sample, ellipses))
}
