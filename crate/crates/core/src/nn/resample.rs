use crate::error::{shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Interpolation taps along one axis: `(lo, hi, weight of hi)`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

/// Half-pixel source coordinate for output index `i`, clamped to `[0, n_in − 1]`.
pub fn source_coord(i: usize, n_in: usize, n_out: usize) -> f32 {
    let s = (i as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5;
    s.clamp(0.0, (n_in - 1) as f32)
}

fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    (0..n_out)
        .map(|i| {
            let s = source_coord(i, n_in, n_out);
            let lo = s.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(n_in - 1),
                frac: s - lo as f32,
            }
        })
        .collect()
}

/// Resizes every `h×w` plane of `data` to `out_h×out_w`. Works in both
/// directions (no antialiasing when shrinking).
pub fn resize_planes(data: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let mut out = Vec::with_capacity(data.len() / (h * w) * out_h * out_w);
    for plane in data.chunks_exact(h * w) {
        for t in &ty {
            let (r0, r1) = (&plane[t.lo * w..(t.lo + 1) * w], &plane[t.hi * w..(t.hi + 1) * w]);
            for u in &tx {
                let top = r0[u.lo] * (1.0 - u.frac) + r0[u.hi] * u.frac;
                let bot = r1[u.lo] * (1.0 - u.frac) + r1[u.hi] * u.frac;
                out.push(top * (1.0 - t.frac) + bot * t.frac);
            }
        }
    }
    out
}

/// Bilinear upsampling of `[B×C×H×W]` to `[B×C×out_h×out_w]`
/// (half-pixel centres, edge clamping).
pub fn bilinear_upsample(tape: &mut Tape, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(shape_err!("bilinear_upsample expects [B,C,H,W], got {xs:?}"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("bilinear_upsample to zero-sized output {out_h}x{out_w}"));
    }
    let (h, w) = (xs[2], xs[3]);
    if out_h < h || out_w < w {
        return Err(shape_err!("bilinear_upsample only enlarges: {h}x{w} -> {out_h}x{out_w}"));
    }
    let out = resize_planes(tape.value(x).data(), h, w, out_h, out_w);
    let out = Tensor::from_parts(vec![xs[0], xs[1], out_h, out_w], out);
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    tape.record("bilinear_upsample", out, &[x], move |ctx| {
        let g = ctx.grad;
        let mut dx = vec![0.0; ctx.inputs[0].numel()];
        for (dplane, gplane) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(out_h * out_w)) {
            for (oy, t) in ty.iter().enumerate() {
                for (ox, u) in tx.iter().enumerate() {
                    let v = gplane[oy * out_w + ox];
                    let (a, b) = ((1.0 - t.frac) * v, t.frac * v);
                    dplane[t.lo * w + u.lo] += a * (1.0 - u.frac);
                    dplane[t.lo * w + u.hi] += a * u.frac;
                    dplane[t.hi * w + u.lo] += b * (1.0 - u.frac);
                    dplane[t.hi * w + u.hi] += b * u.frac;
                }
            }
        }
        vec![Some(dx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn up(x: Tensor, oh: usize, ow: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = bilinear_upsample(&mut tape, v, oh, ow)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn constant_stays_constant() {
        let y = up(Tensor::full(&[1, 2, 3, 5], 0.7), 9, 13).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::randn(&[2, 3, 4, 5], &mut crate::rng::seeded(3));
        assert_eq!(up(x.clone(), 4, 5).unwrap(), x);
    }

    #[test]
    fn rejects_zero_and_shrinking_outputs() {
        assert!(up(Tensor::ones(&[1, 1, 2, 2]), 0, 4).is_err());
        assert!(up(Tensor::ones(&[1, 1, 4, 4]), 2, 4).is_err());
    }

    #[test]
    fn resize_planes_can_shrink() {
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let y = resize_planes(&x, 4, 4, 2, 2);
        // 2x shrink samples the centre of each 2x2 block
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
