use crate::error::{shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

/// √(2/π), the constant of the tanh GELU approximation.
pub const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative(x: f32) -> f32 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn activation(tape: &mut Tape, kind: Activation, x: Var) -> Result<Var> {
    let out = match kind {
        Activation::Relu => tape.value(x).map(|v| v.max(0.0)),
        Activation::Gelu => tape.value(x).map(gelu_scalar),
        Activation::Sigmoid => tape.value(x).map(sigmoid_scalar),
    };
    tape.record("activation", out, &[x], move |ctx| {
        let (g, xin, y) = (ctx.grad, ctx.inputs[0].data(), ctx.output.data());
        let dx = match kind {
            Activation::Relu => g
                .iter()
                .zip(xin)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
            Activation::Gelu => g.iter().zip(xin).map(|(g, &x)| g * gelu_derivative(x)).collect(),
            Activation::Sigmoid => g.iter().zip(y).map(|(g, &s)| g * s * (1.0 - s)).collect(),
        };
        vec![Some(dx)]
    })
}

pub fn relu(tape: &mut Tape, x: Var) -> Result<Var> {
    activation(tape, Activation::Relu, x)
}

pub fn gelu(tape: &mut Tape, x: Var) -> Result<Var> {
    activation(tape, Activation::Gelu, x)
}

pub fn sigmoid(tape: &mut Tape, x: Var) -> Result<Var> {
    activation(tape, Activation::Sigmoid, x)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(tape: &mut Tape, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    let d = *xv.shape().last().ok_or_else(|| shape_err!("softmax on a scalar"))?;
    let mut out = Vec::with_capacity(xv.numel());
    for row in xv.data().chunks_exact(d) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= z);
    }
    let out = Tensor::from_parts(xv.shape().to_vec(), out);
    tape.record("softmax", out, &[x], move |ctx| {
        let (g, y) = (ctx.grad, ctx.output.data());
        let mut dx = vec![0.0; g.len()];
        for ((dr, gr), yr) in dx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
            let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
            for j in 0..d {
                dr[j] = yr[j] * (gr[j] - dot);
            }
        }
        vec![Some(dx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply(kind: Activation, xs: &[f32]) -> Vec<f32> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![xs.len()], xs.to_vec()).unwrap());
        let y = activation(&mut tape, kind, x).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn scalar_examples() {
        assert_eq!(apply(Activation::Relu, &[-1.0, 2.0]), vec![0.0, 2.0]);
        assert_eq!(apply(Activation::Sigmoid, &[0.0]), vec![0.5]);
        assert_eq!(apply(Activation::Gelu, &[0.0]), vec![0.0]);
        // closed form 1/(1+e^{-ln 3}) = 3/4
        let s = apply(Activation::Sigmoid, &[3.0f32.ln()])[0];
        assert!((s - 0.75).abs() < 1e-7);
    }

    #[test]
    fn sigmoid_stays_in_open_interval() {
        let ys = apply(Activation::Sigmoid, &[-15.0, -3.0, 0.1, 3.0, 15.0]);
        assert!(ys.iter().all(|&y| y > 0.0 && y < 1.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 7], &mut crate::rng::seeded(2)).map(|v| v * 5.0));
        let y = softmax_last(&mut tape, x).unwrap();
        for row in tape.value(y).data().chunks(7) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
