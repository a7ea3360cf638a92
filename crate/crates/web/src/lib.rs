//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three interactive operations, each returning flat buffers the page paints
//! onto canvases: a synthetic polyp sample, a bilinear upsampling of a random
//! grid, and the five segmentation metrics of a shifted mask.

use wasm_bindgen::prelude::*;

use trupnet::data::synth_dataset;
use trupnet::metrics::{binary_counts, metrics_from_counts};
use trupnet::nn::bilinear_upsample;
use trupnet::{rng, Result, Tape, Tensor};

const OVERLAY: [f32; 3] = [0.1, 0.9, 0.3];

fn js(e: trupnet::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGBA bytes of synthetic sample `seed`, optionally with the mask blended
/// in green.
pub fn synth_pixels(size: usize, seed: u64, overlay: bool) -> Result<Vec<u8>> {
    let s = synth_dataset(1, size, seed)?.remove(0);
    let hw = size * size;
    let (img, mask) = (s.image.data(), s.mask.data());
    let mut out = Vec::with_capacity(4 * hw);
    for p in 0..hw {
        let on = overlay && mask[p] == 1.0;
        for (c, tint) in OVERLAY.iter().enumerate() {
            let v = img[c * hw + p];
            out.push(to_byte(if on { 0.5 * v + 0.5 * tint } else { v }));
        }
        out.push(255);
    }
    Ok(out)
}

/// A random `h × w` grid in `[0, 1]`.
pub fn random_grid(h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[1, 1, h, w], 0.0, 1.0, &mut rng::seeded(seed))
}

/// The grid for `seed` resized to `out_h × out_w` by the network's bilinear
/// kernel; values in `[0, 1]`, row-major.
pub fn upsample_values(h: usize, w: usize, out_h: usize, out_w: usize, seed: u64) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let x = tape.constant(random_grid(h, w, seed));
    let y = bilinear_upsample(&mut tape, x, out_h, out_w)?;
    Ok(tape.value(y).data().to_vec())
}

fn gray_rgba(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|&v| {
        let b = to_byte(v);
        [b, b, b, 255]
    }).collect()
}

/// Ground-truth mask of sample `seed` and the same mask shifted by
/// `(dx, dy)` pixels with zero fill.
pub fn shifted_masks(size: usize, seed: u64, dx: i32, dy: i32) -> Result<(Tensor, Tensor)> {
    let gt = synth_dataset(1, size, seed)?.remove(0).mask;
    let d = gt.data();
    let n = size as i64;
    let pred = Tensor::from_fn(gt.shape(), |i| {
        let (y, x) = ((i / size) as i64 - dy as i64, (i % size) as i64 - dx as i64);
        if (0..n).contains(&y) && (0..n).contains(&x) {
            d[(y * n + x) as usize]
        } else {
            0.0
        }
    });
    Ok((gt, pred))
}

/// `[dice, iou, recall, precision, f2, tp, fp, fn]` of the shifted mask.
pub fn shift_report(size: usize, seed: u64, dx: i32, dy: i32) -> Result<Vec<f64>> {
    let (gt, pred) = shifted_masks(size, seed, dx, dy)?;
    let c = binary_counts(&pred, &gt)?;
    let m = metrics_from_counts(c.tp, c.fp, c.fn_);
    let mut out = m.as_array().to_vec();
    out.extend([c.tp as f64, c.fp as f64, c.fn_ as f64]);
    Ok(out)
}

#[wasm_bindgen]
pub fn synth_rgba(size: u32, seed: u32, overlay: bool) -> std::result::Result<Vec<u8>, JsError> {
    synth_pixels(size as usize, seed as u64, overlay).map_err(js)
}

#[wasm_bindgen]
pub fn grid_rgba(h: u32, w: u32, seed: u32) -> Vec<u8> {
    gray_rgba(random_grid(h as usize, w as usize, seed as u64).data())
}

#[wasm_bindgen]
pub fn upsample_rgba(h: u32, w: u32, out_h: u32, out_w: u32, seed: u32) -> std::result::Result<Vec<u8>, JsError> {
    let v = upsample_values(h as usize, w as usize, out_h as usize, out_w as usize, seed as u64).map_err(js)?;
    Ok(gray_rgba(&v))
}

/// RGBA of the shifted-mask comparison: green true positive, red false
/// positive, blue false negative.
#[wasm_bindgen]
pub fn shift_rgba(size: u32, seed: u32, dx: i32, dy: i32) -> std::result::Result<Vec<u8>, JsError> {
    let (gt, pred) = shifted_masks(size as usize, seed as u64, dx, dy).map_err(js)?;
    Ok(gt.data().iter().zip(pred.data()).flat_map(|(&g, &p)| match (p == 1.0, g == 1.0) {
        (true, true) => [40, 200, 90, 255],
        (true, false) => [220, 60, 60, 255],
        (false, true) => [60, 110, 230, 255],
        (false, false) => [24, 24, 28, 255],
    }).collect())
}

#[wasm_bindgen]
pub fn shift_metrics(size: u32, seed: u32, dx: i32, dy: i32) -> std::result::Result<Vec<f64>, JsError> {
    shift_report(size as usize, seed as u64, dx, dy).map_err(js)
}
