//! Central finite differences and the per-op gradient suite.
//!
//! Each op is wrapped as a scalar function of its inputs by projecting the
//! output onto fixed pseudo-random weights. The analytic gradient from the
//! tape is compared elementwise against
//! `(f(x + hᵢeᵢ) − f(x − hᵢeᵢ)) / 2hᵢ` with `hᵢ = rel_step·max(1, |xᵢ|)`,
//! and an element passes when `|g_a − g_n| ≤ tol·max(1, |g_a|, |g_n|)`.
//! Inputs of ops with kinks (ReLU, max) are redrawn away from the kink so a
//! step never straddles it.

use rand::Rng;

use crate::error::Result;
use crate::metrics;
use crate::model::{ModelConfig, TransRUPNet};
use crate::nn::{self, BatchNormState};
use crate::params::{Ctx, Mode, ParamInit, ParamStore};
use crate::pvt::SpatialReductionAttention;
use crate::rng::{self, ChaCha8Rng};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_REL_STEP: f32 = 1e-2;
pub const DEFAULT_TOL: f64 = 1e-2;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f32>,
{
    finite_diff_steps(&mut f, x, |_| h)
}

/// Like [`finite_diff_grad`] with the per-element step `rel·max(1, |xᵢ|)`.
pub fn finite_diff_grad_rel<F>(mut f: F, x: &Tensor, rel: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f32>,
{
    finite_diff_steps(&mut f, x, |v| rel * v.abs().max(1.0))
}

fn finite_diff_steps<F>(f: &mut F, x: &Tensor, step: impl Fn(f32) -> f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f32>,
{
    let mut out = vec![0.0f32; x.numel()];
    let mut probe = x.clone();
    for (i, g) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        let h = step(orig);
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)? as f64;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)? as f64;
        probe.data_mut()[i] = orig;
        // the step actually taken after f32 rounding
        let span = ((orig + h) as f64) - ((orig - h) as f64);
        *g = ((up - down) / span) as f32;
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Worst normalised violation `|a − n| / max(1, |a|, |n|)` and worst plain
/// relative error `|a − n| / max(|a|, |n|)` over two gradients.
pub fn compare(analytic: &[f32], numeric: &[f32]) -> (f64, f64) {
    let (mut norm, mut rel) = (0.0f64, 0.0f64);
    for (&a, &n) in analytic.iter().zip(numeric) {
        let (a, n) = (a as f64, n as f64);
        let d = (a - n).abs();
        norm = norm.max(d / 1f64.max(a.abs()).max(n.abs()));
        let scale = a.abs().max(n.abs());
        if scale > 0.0 {
            rel = rel.max(d / scale);
        }
    }
    (norm, rel)
}

/// A scalar function of tensors recorded on a fresh tape: returns the tape,
/// one differentiable leaf per input and the loss.
pub type Build = Box<dyn Fn(&[Tensor]) -> Result<(Tape, Vec<Var>, Var)>>;
pub type Generate = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;

pub struct OpCase {
    pub name: &'static str,
    pub generate: Generate,
    pub build: Build,
}

/// Outcome of one case over several seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub seeds: usize,
    pub checked: usize,
    pub max_violation: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl CheckRow {
    fn fold(name: &str, tol: f64, results: &[(usize, f64, f64)]) -> Self {
        let max_violation = results.iter().map(|r| r.1).fold(0.0, f64::max);
        Self {
            name: name.to_string(),
            seeds: results.len(),
            checked: results.iter().map(|r| r.0).sum(),
            max_violation,
            max_rel_error: results.iter().map(|r| r.2).fold(0.0, f64::max),
            passed: max_violation <= tol,
        }
    }
}

fn loss_value(build: &Build, inputs: &[Tensor]) -> Result<f32> {
    let (tape, _, loss) = build(inputs)?;
    tape.value(loss).item()
}

/// Checks every element of every input for one draw. Returns
/// `(elements, max violation, max relative error)`.
pub fn check_case_once(case: &OpCase, inputs: &[Tensor], rel_step: f32) -> Result<(usize, f64, f64)> {
    let (tape, leaves, loss) = (case.build)(inputs)?;
    let grads = tape.backward(loss)?;
    let (mut n, mut worst, mut rel) = (0, 0.0f64, 0.0f64);
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(*leaf, inputs[k].shape());
        let numeric = finite_diff_grad_rel(
            |x| {
                let mut probe = inputs.to_vec();
                probe[k] = x.clone();
                loss_value(&case.build, &probe)
            },
            &inputs[k],
            rel_step,
        )?;
        let (v, r) = compare(analytic.data(), numeric.data());
        worst = worst.max(v);
        rel = rel.max(r);
        n += inputs[k].numel();
    }
    Ok((n, worst, rel))
}

pub fn check_case(case: &OpCase, seeds: impl IntoIterator<Item = u64>, rel_step: f32, tol: f64) -> Result<CheckRow> {
    let results = seeds
        .into_iter()
        .map(|s| {
            let inputs = (case.generate)(&mut rng::seeded(rng::mix(s, fnv(case.name))));
            check_case_once(case, &inputs, rel_step)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckRow::fold(case.name, tol, &results))
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Fixed projection weights in `[-1, 1)`, so the scalar loss depends on
/// every output element differently.
fn projection(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((rng::mix(0x5eed, i as u64) >> 40) as f32 / (1u64 << 23) as f32) - 1.0)
}

fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    let w = tape.constant(projection(tape.shape(out)));
    let p = tape.mul(out, w)?;
    tape.sum_all(p)
}

fn tape_case(name: &'static str, generate: Generate, op: fn(&mut Tape, &[Var]) -> Result<Var>) -> OpCase {
    OpCase {
        name,
        generate,
        build: Box::new(move |inputs| {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = op(&mut tape, &leaves)?;
            let loss = project(&mut tape, out)?;
            Ok((tape, leaves, loss))
        }),
    }
}

fn normal(shapes: &'static [&'static [usize]]) -> Generate {
    Box::new(move |r| shapes.iter().map(|s| Tensor::randn(s, r)).collect())
}

/// Standard normal draws with every element at least `margin` from `kink`.
fn away_from(r: &mut ChaCha8Rng, shape: &[usize], kink: f32, margin: f32) -> Tensor {
    let mut t = Tensor::randn(shape, r);
    for v in t.data_mut() {
        while (*v - kink).abs() < margin {
            *v = Tensor::randn(&[1], r).data()[0];
        }
    }
    t
}

fn binary(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_bool(0.5) as u8 as f32)
}

fn bn_case(name: &'static str, mode: Mode) -> OpCase {
    OpCase {
        name,
        generate: Box::new(|r| {
            vec![
                Tensor::randn(&[3, 2, 3, 3], r),
                Tensor::uniform(&[2], 0.5, 1.5, r),
                Tensor::randn(&[2], r),
            ]
        }),
        build: Box::new(move |inputs| {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let (rm, rv) = (Tensor::full(&[2], 0.1), Tensor::full(&[2], 0.8));
            let state = BatchNormState {
                running_mean: &rm,
                running_var: &rv,
                eps: nn::BN_EPS,
                momentum: nn::BN_MOMENTUM,
            };
            let (y, _) = nn::batch_norm2d(&mut tape, leaves[0], leaves[1], leaves[2], &state, mode)?;
            let loss = project(&mut tape, y)?;
            Ok((tape, leaves, loss))
        }),
    }
}

fn sra_case(name: &'static str, sr: usize) -> OpCase {
    let mut params = ParamStore::new();
    let mut r = rng::seeded(77 + sr as u64);
    let attn = SpatialReductionAttention::new(
        &mut ParamInit {
            store: &mut params,
            rng: &mut r,
        },
        "attn",
        8,
        2,
        sr,
    );
    OpCase {
        name,
        generate: normal(&[&[1, 16, 8]]),
        build: Box::new(move |inputs| {
            let mut ctx = Ctx::new(&params, Mode::Train, false);
            let x = ctx.tape.leaf(inputs[0].clone());
            let y = attn.forward(&mut ctx, x, 4, 4)?;
            let loss = project(&mut ctx.tape, y)?;
            let tape = std::mem::take(&mut ctx.tape);
            Ok((tape, vec![x], loss))
        }),
    }
}

/// Probabilities stay in [0.2, 0.8]: near 0 or 1 the log terms curve so
/// sharply that a step of 1e-2 biases the central difference itself.
fn loss_case(name: &'static str, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> OpCase {
    OpCase {
        name,
        generate: Box::new(|r| vec![Tensor::uniform(&[2, 1, 3, 3], 0.2, 0.8, r), binary(r, &[2, 1, 3, 3])]),
        build: Box::new(move |inputs| {
            let mut tape = Tape::new();
            let p = tape.leaf(inputs[0].clone());
            let y = tape.constant(inputs[1].clone());
            let loss = f(&mut tape, p, y)?;
            Ok((tape, vec![p], loss))
        }),
    }
}

/// Every differentiable op, each as a small case.
pub fn op_suite() -> Vec<OpCase> {
    vec![
        tape_case("matmul", normal(&[&[2, 3, 4], &[4, 5]]), |t, v| t.matmul(v[0], v[1])),
        tape_case("add", normal(&[&[2, 3, 4], &[3, 4]]), |t, v| t.add(v[0], v[1])),
        tape_case("sub", normal(&[&[3, 4], &[3, 4]]), |t, v| t.sub(v[0], v[1])),
        tape_case("mul", normal(&[&[2, 3, 4], &[4]]), |t, v| t.mul(v[0], v[1])),
        tape_case("add_scalar", normal(&[&[5]]), |t, v| t.add_scalar(v[0], 1.5)),
        tape_case("mul_scalar", normal(&[&[5]]), |t, v| t.mul_scalar(v[0], -1.7)),
        tape_case(
            "max_scalar",
            Box::new(|r| vec![away_from(r, &[12], 0.3, 0.1)]),
            |t, v| t.max_scalar(v[0], 0.3),
        ),
        tape_case("sum", normal(&[&[2, 3, 4]]), |t, v| t.sum(v[0], &[1])),
        tape_case("mean", normal(&[&[2, 3, 4]]), |t, v| t.mean(v[0], &[0, 2])),
        tape_case("reshape", normal(&[&[2, 6]]), |t, v| t.reshape(v[0], &[3, 4])),
        tape_case("permute", normal(&[&[2, 3, 4]]), |t, v| t.permute(v[0], &[2, 0, 1])),
        tape_case("transpose", normal(&[&[2, 3, 4]]), |t, v| t.transpose(v[0])),
        tape_case("conv2d_3x3", normal(&[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]]), |t, v| {
            nn::conv2d(t, v[0], v[1], v[2], 1, 1)
        }),
        tape_case("conv2d_strided", normal(&[&[1, 2, 4, 6], &[3, 2, 2, 2], &[3]]), |t, v| {
            nn::conv2d(t, v[0], v[1], v[2], 2, 0)
        }),
        tape_case("conv2d_1x1", normal(&[&[2, 3, 3, 3], &[2, 3, 1, 1], &[2]]), |t, v| {
            nn::conv2d(t, v[0], v[1], v[2], 1, 0)
        }),
        OpCase {
            name: "conv2d_relu",
            generate: Box::new(|r| loop {
                // redraw until no conv output sits near the ReLU kink
                let x = Tensor::randn(&[1, 2, 4, 4], r);
                let w = Tensor::randn(&[2, 2, 3, 3], r);
                let b = Tensor::randn(&[2], r);
                let mut tape = Tape::new();
                let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
                let y = nn::conv2d(&mut tape, xv, wv, bv, 1, 1).expect("valid conv");
                if tape.value(y).data().iter().all(|v| v.abs() > 0.25) {
                    return vec![x, w, b];
                }
            }),
            build: Box::new(|inputs| {
                let mut tape = Tape::new();
                let l: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
                let y = nn::conv2d(&mut tape, l[0], l[1], l[2], 1, 1)?;
                let y = nn::relu(&mut tape, y)?;
                let loss = tape.sum_all(y)?;
                Ok((tape, l, loss))
            }),
        },
        bn_case("batch_norm2d_train", Mode::Train),
        bn_case("batch_norm2d_eval", Mode::Eval),
        tape_case("layer_norm", normal(&[&[2, 3, 6], &[6], &[6]]), |t, v| {
            nn::layer_norm(t, v[0], v[1], v[2], nn::LN_EPS)
        }),
        tape_case(
            "relu",
            Box::new(|r| vec![away_from(r, &[3, 4], 0.0, 0.05)]),
            |t, v| nn::relu(t, v[0]),
        ),
        tape_case("gelu", normal(&[&[3, 4]]), |t, v| nn::gelu(t, v[0])),
        tape_case("sigmoid", normal(&[&[3, 4]]), |t, v| nn::sigmoid(t, v[0])),
        tape_case("softmax", normal(&[&[2, 3, 5]]), |t, v| nn::softmax_last(t, v[0])),
        tape_case("bilinear_upsample", normal(&[&[1, 2, 3, 5]]), |t, v| {
            nn::bilinear_upsample(t, v[0], 7, 11)
        }),
        tape_case("concat_channels", normal(&[&[1, 2, 3, 3], &[1, 1, 3, 3]]), |t, v| {
            nn::concat_channels(t, &[v[0], v[1]])
        }),
        tape_case("slice_channels", normal(&[&[1, 4, 2, 2]]), |t, v| nn::slice_channels(t, v[0], 1, 2)),
        tape_case("linear", normal(&[&[2, 3, 4], &[5, 4], &[5]]), |t, v| nn::linear(t, v[0], v[1], v[2])),
        sra_case("sra_attention", 2),
        sra_case("sra_attention_sr1", 1),
        loss_case("bce_loss", metrics::bce_loss),
        loss_case("dice_loss", |t, p, y| metrics::dice_loss(t, p, y, metrics::DICE_SMOOTH)),
        loss_case("combined_loss", metrics::combined_loss),
    ]
}

/// Checks `n_params` randomly chosen parameter scalars of a freshly
/// initialised model against finite differences of the training loss on a
/// random batch of two images.
pub fn check_model_once(config: &ModelConfig, seed: u64, n_params: usize, rel_step: f32) -> Result<(usize, f64, f64)> {
    let model = TransRUPNet::new(config.clone(), seed)?;
    let mut r = rng::seeded(rng::mix(seed, 0x6d6f64656c));
    let (h, w) = config.input_size;
    let x = Tensor::uniform(&[2, config.in_channels, h, w], 0.0, 1.0, &mut r);
    let y = binary(&mut r, &[2, 1, h, w]);
    fn loss_with<'p>(model: &TransRUPNet, params: &'p ParamStore, x: &Tensor, y: &Tensor, track: bool) -> Result<(Ctx<'p>, Var)> {
        let mut ctx = Ctx::new(params, Mode::Train, track);
        let xv = ctx.tape.constant(x.clone());
        let yv = ctx.tape.constant(y.clone());
        let p = model.forward(&mut ctx, xv)?;
        let loss = metrics::combined_loss(&mut ctx.tape, p, yv)?;
        Ok((ctx, loss))
    }
    let (ctx, loss) = loss_with(&model, model.params(), &x, &y, true)?;
    let (grads, _) = ctx.backward(loss)?;

    let total: usize = grads.iter().map(|(_, g)| g.numel()).sum();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..n_params {
        let mut pick = r.random_range(0..total);
        let (id, g) = grads
            .iter()
            .find(|(_, g)| {
                if pick < g.numel() {
                    true
                } else {
                    pick -= g.numel();
                    false
                }
            })
            .expect("pick < total");
        let base = model.params().get(*id).clone();
        let scalar = Tensor::scalar(base.data()[pick]);
        let num = finite_diff_grad_rel(
            |v| {
                let mut params = model.params().clone();
                let mut t = base.clone();
                t.data_mut()[pick] = v.data()[0];
                params.set(*id, t)?;
                let (ctx, loss) = loss_with(&model, &params, &x, &y, false)?;
                ctx.tape.value(loss).item()
            },
            &scalar,
            rel_step,
        )?;
        analytic.push(g.data()[pick]);
        numeric.push(num.data()[0]);
    }
    let (v, rel) = compare(&analytic, &numeric);
    Ok((n_params, v, rel))
}

pub fn check_model(config: &ModelConfig, seeds: impl IntoIterator<Item = u64>, n_params: usize, rel_step: f32, tol: f64) -> Result<CheckRow> {
    let results = seeds
        .into_iter()
        .map(|s| check_model_once(config, s, n_params, rel_step))
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckRow::fold("tiny_model", tol, &results))
}

/// The whole suite: every op over `seeds_per_op` seeds starting at
/// `base_seed`, then the tiny model with `model_params` scalars per seed.
pub fn run_suite(base_seed: u64, seeds_per_op: usize, model_params: usize) -> Result<Vec<CheckRow>> {
    let seeds = || (0..seeds_per_op as u64).map(move |i| base_seed.wrapping_add(i));
    let mut rows = op_suite()
        .iter()
        .map(|case| check_case(case, seeds(), DEFAULT_REL_STEP, DEFAULT_TOL))
        .collect::<Result<Vec<_>>>()?;
    rows.push(check_model(&ModelConfig::tiny(), seeds(), model_params, DEFAULT_REL_STEP, DEFAULT_TOL)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_differences_of_simple_functions() {
        let x = Tensor::new(vec![3], vec![0.5, -2.0, 4.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum() as f32), &x, 1e-2).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-4));
        let g = finite_diff_grad(|_| Ok(3.0), &x, 1e-2).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let three = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &three, 1e-2).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-3);
    }

    #[test]
    fn compare_normalises_small_gradients() {
        let (v, _) = compare(&[0.001], &[0.006]);
        assert!((v - 0.005).abs() < 1e-9);
        let (v, r) = compare(&[100.0], &[101.0]);
        assert!((v - 1.0 / 101.0).abs() < 1e-9 && (r - v).abs() < 1e-9);
    }

    #[test]
    fn suite_passes_one_seed() {
        for case in op_suite() {
            let row = check_case(&case, [3], DEFAULT_REL_STEP, DEFAULT_TOL).unwrap();
            assert!(row.passed, "{row:?}");
        }
    }

    #[test]
    fn tiny_model_one_seed() {
        let row = check_model(&ModelConfig::tiny(), [1], 12, DEFAULT_REL_STEP, DEFAULT_TOL).unwrap();
        assert!(row.passed, "{row:?}");
    }
}
