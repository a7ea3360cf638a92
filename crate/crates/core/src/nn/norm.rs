use crate::error::{contract_err, shape_err, Result};
use crate::params::Mode;
use crate::tensor::{Tape, Tensor, Var};

/// Running statistics and hyperparameters of a 2-D batch norm.
#[derive(Clone, Debug)]
pub struct BatchNormState<'a> {
    pub running_mean: &'a Tensor,
    pub running_var: &'a Tensor,
    pub eps: f32,
    pub momentum: f32,
}

/// Updated running statistics produced by a training-mode call.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Per-channel batch normalisation over `[B×C×H×W]`, then `γ·x̂ + β`.
///
/// Training mode normalises with the batch mean and biased variance and
/// returns the momentum-updated running statistics; evaluation mode uses the
/// running statistics and returns `None`.
pub fn batch_norm2d(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &BatchNormState<'_>,
    mode: Mode,
) -> Result<(Var, Option<RunningStats>)> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(shape_err!("batch_norm2d expects [B,C,H,W], got {xs:?}"));
    }
    let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
    for (name, t) in [
        ("gamma", tape.value(gamma)),
        ("beta", tape.value(beta)),
        ("running_mean", state.running_mean),
        ("running_var", state.running_var),
    ] {
        if t.shape() != [c] {
            return Err(shape_err!("batch_norm2d {name} {:?} for {c} channels", t.shape()));
        }
    }
    let count = b * plane;
    if mode == Mode::Train && count < 2 {
        return Err(contract_err!(
            "batch_norm2d in training mode needs at least 2 values per channel, got {count}"
        ));
    }

    let xd = tape.value(x).data();
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            for n in 0..b {
                for ch in 0..c {
                    let s = &xd[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                    mean[ch] += s.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for n in 0..b {
                for ch in 0..c {
                    let s = &xd[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                    sq[ch] += s.iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            let var: Vec<f32> = sq.iter().map(|v| (v / count as f64) as f32).collect();
            (mean.into_iter().map(|m| m as f32).collect::<Vec<_>>(), var)
        }
        Mode::Eval => (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
        ),
    };
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let (gd, bd) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for n in 0..b {
        for ch in 0..c {
            let r = (n * c + ch) * plane..(n * c + ch + 1) * plane;
            for i in r {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = gd[ch] * h + bd[ch];
            }
        }
    }

    let updated = (mode == Mode::Train).then(|| {
        let m = state.momentum;
        RunningStats {
            mean: Tensor::from_fn(&[c], |i| (1.0 - m) * state.running_mean.data()[i] + m * mean[i]),
            var: Tensor::from_fn(&[c], |i| (1.0 - m) * state.running_var.data()[i] + m * var[i]),
        }
    });

    let out = Tensor::from_parts(xs, out);
    let train = mode == Mode::Train;
    let y = tape.record("batch_norm2d", out, &[x, gamma, beta], move |ctx| {
        let g = ctx.grad;
        let gam = ctx.inputs[1].data();
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        // Σ dy and Σ dy·x̂ per channel
        for n in 0..b {
            for ch in 0..c {
                let r = (n * c + ch) * plane..(n * c + ch + 1) * plane;
                for i in r {
                    dbeta[ch] += g[i];
                    dgamma[ch] += g[i] * xhat[i];
                }
            }
        }
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            for n in 0..b {
                for ch in 0..c {
                    let scale = gam[ch] * inv_std[ch];
                    let r = (n * c + ch) * plane..(n * c + ch + 1) * plane;
                    if train {
                        let inv_n = 1.0 / count as f32;
                        for i in r {
                            dx[i] = scale * (g[i] - inv_n * dbeta[ch] - xhat[i] * inv_n * dgamma[ch]);
                        }
                    } else {
                        for i in r {
                            dx[i] = scale * g[i];
                        }
                    }
                }
            }
            dx
        });
        vec![dx, ctx.needs[1].then_some(dgamma), ctx.needs[2].then_some(dbeta)]
    })?;
    Ok((y, updated))
}

/// Normalises over the last axis with biased variance, then `γ·x̂ + β`.
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let d = *xs.last().ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
    if d < 2 {
        return Err(contract_err!("layer_norm needs a last axis of at least 2, got {d}"));
    }
    if tape.shape(gamma) != [d] || tape.shape(beta) != [d] {
        return Err(shape_err!("layer_norm affine params must be [{d}]"));
    }
    let xd = tape.value(x).data();
    let (gd, bd) = (tape.value(gamma).data(), tape.value(beta).data());
    let rows = xd.len() / d;
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; xd.len()];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var as f32 + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean as f32) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = gd[j] * h + bd[j];
        }
    }
    let out = Tensor::from_parts(xs, out);
    tape.record("layer_norm", out, &[x, gamma, beta], move |ctx| {
        let g = ctx.grad;
        let gam = ctx.inputs[1].data();
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut dx = ctx.needs[0].then(|| vec![0.0; g.len()]);
        for r in 0..rows {
            let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
            let mut sum_dh = 0.0;
            let mut sum_dh_h = 0.0;
            for j in 0..d {
                dbeta[j] += gr[j];
                dgamma[j] += gr[j] * hr[j];
                let dh = gr[j] * gam[j];
                sum_dh += dh;
                sum_dh_h += dh * hr[j];
            }
            if let Some(dx) = dx.as_mut() {
                let inv_d = 1.0 / d as f32;
                for j in 0..d {
                    let dh = gr[j] * gam[j];
                    dx[r * d + j] = inv_std[r] * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                }
            }
        }
        vec![dx, ctx.needs[1].then_some(dgamma), ctx.needs[2].then_some(dbeta)]
    })
}
