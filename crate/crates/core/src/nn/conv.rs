use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Tape, Tensor, Var};

/// Static geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output spatial size `floor((n + 2p − k) / s) + 1`.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Unrolls one image into a `[C·k·k × H'·W']` column matrix.
fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let npix = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an image gradient.
fn col2im(cols: &[f32], g: &Geometry, dx: &mut [f32]) {
    let npix = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) with bias.
///
/// `x: [B×C_in×H×W]`, `weight: [C_out×C_in×k×k]`, `bias: [C_out]`.
pub fn conv2d(tape: &mut Tape, x: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
    let (xs, ws, bs) = (tape.shape(x), tape.shape(weight), tape.shape(bias));
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
        return Err(shape_err!("conv2d expects x [B,C,H,W] and square weight, got {xs:?}, {ws:?}"));
    }
    if xs[1] != ws[1] {
        return Err(shape_err!("conv2d channel mismatch: input {} vs weight {}", xs[1], ws[1]));
    }
    if bs != [ws[0]] {
        return Err(shape_err!("conv2d bias {bs:?} for {} output channels", ws[0]));
    }
    if stride == 0 {
        return Err(shape_err!("conv2d stride must be positive"));
    }
    let k = ws[2];
    let (out_h, out_w) = match (
        conv_out_dim(xs[2], k, stride, padding),
        conv_out_dim(xs[3], k, stride, padding),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err!("conv2d kernel {k} larger than padded input {xs:?}")),
    };
    let g = Geometry {
        batch: xs[0],
        c_in: xs[1],
        h: xs[2],
        w: xs[3],
        c_out: ws[0],
        k,
        stride,
        pad: padding,
        out_h,
        out_w,
    };

    let (xv, wv, bv) = (tape.value(x), tape.value(weight), tape.value(bias));
    let npix = g.out_pixels();
    let plen = g.patch_len();
    let in_img = g.c_in * g.h * g.w;
    let out_img = g.c_out * npix;
    let mut out = vec![0.0; g.batch * out_img];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; plen * npix] };
    for b in 0..g.batch {
        let xb = &xv.data()[b * in_img..(b + 1) * in_img];
        let ob = &mut out[b * out_img..(b + 1) * out_img];
        for (co, row) in ob.chunks_exact_mut(npix).enumerate() {
            row.fill(bv.data()[co]);
        }
        let colm: &[f32] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        gemm(g.c_out, plen, npix, (wv.data(), plen, 1), (colm, npix, 1), 1.0, ob);
    }
    let out = Tensor::from_parts(vec![g.batch, g.c_out, out_h, out_w], out);

    tape.record("conv2d", out, &[x, weight, bias], move |ctx| {
        let (xd, wd, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let mut dx = ctx.needs[0].then(|| vec![0.0; xd.len()]);
        let mut dw = ctx.needs[1].then(|| vec![0.0; wd.len()]);
        let db = ctx.needs[2].then(|| {
            let mut db = vec![0.0; g.c_out];
            for gb in gd.chunks_exact(out_img) {
                for (co, row) in gb.chunks_exact(npix).enumerate() {
                    db[co] += row.iter().sum::<f32>();
                }
            }
            db
        });
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; plen * npix] };
        let mut dcols = if g.is_pointwise() { Vec::new() } else { vec![0.0; plen * npix] };
        for b in 0..g.batch {
            let xb = &xd[b * in_img..(b + 1) * in_img];
            let gb = &gd[b * out_img..(b + 1) * out_img];
            if let Some(dw) = dw.as_mut() {
                // dW += dY · colsᵀ
                let colm: &[f32] = if g.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &g, &mut cols);
                    &cols
                };
                gemm(g.c_out, npix, plen, (gb, npix, 1), (colm, 1, npix), 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = Wᵀ · dY, then fold back onto the image
                let dxb = &mut dx[b * in_img..(b + 1) * in_img];
                if g.is_pointwise() {
                    gemm(plen, g.c_out, npix, (wd, 1, plen), (gb, npix, 1), 0.0, dxb);
                } else {
                    gemm(plen, g.c_out, npix, (wd, 1, plen), (gb, npix, 1), 0.0, &mut dcols);
                    col2im(&dcols, &g, dxb);
                }
            }
        }
        vec![dx, dw, db]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn run(x: Tensor, w: Tensor, b: Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (x, w, b) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let y = conv2d(&mut tape, x, w, b, stride, pad)?;
        Ok(tape.value(y).clone())
    }

    /// Direct sliding-window reference.
    fn naive(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> Vec<f32> {
        let [bn, ci, h, wd] = x.shape().try_into().unwrap();
        let [co, _, k, _] = w.shape().try_into().unwrap();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; bn * co * oh * ow];
        for n in 0..bn {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * s + ky) as isize - p as isize;
                                    let ix = (xx * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((n * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * ci + c) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((n * co + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_unit_kernel_is_identity() {
        let x = Tensor::randn(&[1, 1, 4, 5], &mut crate::rng::seeded(1));
        let y = run(x.clone(), Tensor::ones(&[1, 1, 1, 1]), Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let x = Tensor::randn(&[2, 3, 4, 4], &mut crate::rng::seeded(2));
        let b = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();
        let y = run(x, Tensor::zeros(&[2, 3, 3, 3]), b, 1, 1).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let co = (i / 16) % 2;
            assert_eq!(*v, [0.5, -1.5][co]);
        }
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let oracle = naive(&x, &w, &b, 1, 1);
        assert_eq!(oracle, vec![4., 6., 4., 6., 9., 6., 4., 6., 4.]);
        assert_eq!(run(x, w, b, 1, 1).unwrap().data(), &oracle[..]);
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = crate::rng::seeded(9);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (2, 2, 0), (1, 1, 0), (4, 4, 0), (7, 1, 3)] {
            let x = Tensor::randn(&[2, 3, 9, 8], &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], &mut rng);
            let b = Tensor::randn(&[4], &mut rng);
            let want = naive(&x, &w, &b, s, p);
            let got = run(x, w, b, s, p).unwrap();
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-4, "k={k} s={s} p={p}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn odd_kernel_same_padding_preserves_size() {
        for k in [1usize, 3, 7] {
            let x = Tensor::ones(&[1, 2, 11, 6]);
            let y = run(x, Tensor::ones(&[1, 2, k, k]), Tensor::zeros(&[1]), 1, (k - 1) / 2).unwrap();
            assert_eq!(&y.shape()[2..], &[11, 6]);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let r = run(Tensor::ones(&[1, 2, 4, 4]), Tensor::ones(&[1, 3, 3, 3]), Tensor::zeros(&[1]), 1, 1);
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
