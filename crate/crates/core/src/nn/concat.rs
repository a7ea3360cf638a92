use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Concatenates `[B×Cᵢ×H×W]` maps along the channel axis, in argument order.
pub fn concat_channels(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let first = xs.first().ok_or_else(|| contract_err!("concat_channels of nothing"))?;
    let s0 = tape.shape(*first).to_vec();
    if s0.len() != 4 {
        return Err(shape_err!("concat_channels expects [B,C,H,W], got {s0:?}"));
    }
    let (b, plane) = (s0[0], s0[2] * s0[3]);
    let mut chans = Vec::with_capacity(xs.len());
    for &x in xs {
        let s = tape.shape(x);
        if s.len() != 4 || s[0] != b || s[2] != s0[2] || s[3] != s0[3] {
            return Err(shape_err!("concat_channels: {s:?} does not match {s0:?}"));
        }
        chans.push(s[1]);
    }
    let total: usize = chans.iter().sum();
    let mut out = Vec::with_capacity(b * total * plane);
    for n in 0..b {
        for (&x, &c) in xs.iter().zip(&chans) {
            out.extend_from_slice(&tape.value(x).data()[n * c * plane..(n + 1) * c * plane]);
        }
    }
    let out = Tensor::from_parts(vec![b, total, s0[2], s0[3]], out);
    tape.record("concat_channels", out, xs, move |ctx| {
        let g = ctx.grad;
        let mut grads: Vec<Option<Vec<f32>>> = chans
            .iter()
            .zip(ctx.needs)
            .map(|(&c, &need)| need.then(|| Vec::with_capacity(b * c * plane)))
            .collect();
        for n in 0..b {
            let mut off = n * total * plane;
            for (gi, &c) in grads.iter_mut().zip(&chans) {
                if let Some(gi) = gi {
                    gi.extend_from_slice(&g[off..off + c * plane]);
                }
                off += c * plane;
            }
        }
        grads
    })
}

/// Channels `start..start + len` of a `[B×C×H×W]` map.
pub fn slice_channels(tape: &mut Tape, x: Var, start: usize, len: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || len == 0 || start + len > s[1] {
        return Err(shape_err!("slice_channels {start}..{} of {s:?}", start + len));
    }
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let xd = tape.value(x).data();
    let mut out = Vec::with_capacity(b * len * plane);
    for n in 0..b {
        out.extend_from_slice(&xd[(n * c + start) * plane..(n * c + start + len) * plane]);
    }
    let out = Tensor::from_parts(vec![b, len, s[2], s[3]], out);
    tape.record("slice_channels", out, &[x], move |ctx| {
        let mut dx = vec![0.0; b * c * plane];
        for n in 0..b {
            dx[(n * c + start) * plane..(n * c + start + len) * plane]
                .copy_from_slice(&ctx.grad[n * len * plane..(n + 1) * len * plane]);
        }
        vec![Some(dx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_input_is_identity() {
        let mut tape = Tape::new();
        let x = Tensor::randn(&[2, 3, 2, 2], &mut crate::rng::seeded(0));
        let v = tape.constant(x.clone());
        let y = concat_channels(&mut tape, &[v]).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn four_maps_slice_back_exactly() {
        let mut rng = crate::rng::seeded(1);
        let mut tape = Tape::new();
        let parts: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[2, 64, 3, 3], &mut rng)).collect();
        let vars: Vec<Var> = parts.iter().map(|p| tape.constant(p.clone())).collect();
        let two = concat_channels(&mut tape, &vars[..2]).unwrap();
        assert_eq!(tape.shape(two), &[2, 128, 3, 3]);
        let cat = concat_channels(&mut tape, &vars).unwrap();
        assert_eq!(tape.shape(cat), &[2, 256, 3, 3]);
        for (i, p) in parts.iter().enumerate() {
            let s = slice_channels(&mut tape, cat, i * 64, 64).unwrap();
            assert_eq!(tape.value(s), p);
        }
    }

    #[test]
    fn spatial_mismatch_is_shape_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::ones(&[1, 2, 4, 5]));
        assert!(matches!(concat_channels(&mut tape, &[a, b]), Err(crate::Error::Shape(_))));
    }
}
