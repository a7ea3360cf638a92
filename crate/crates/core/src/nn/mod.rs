//! Layer kernels and the parameterised layers built on them.
//!
//! The free functions take tape variables directly; the structs own
//! [`ParamId`]s and bind them through a [`Ctx`].

mod activation;
mod concat;
mod conv;
mod linear;
mod norm;
mod resample;

pub use activation::{activation, gelu, relu, sigmoid, sigmoid_scalar, softmax_last, Activation, GELU_SQRT_2_OVER_PI};
pub use concat::{concat_channels, slice_channels};
pub use conv::{conv2d, conv_out_dim};
pub use linear::linear;
pub use norm::{batch_norm2d, layer_norm, BatchNormState, RunningStats};
pub use resample::{bilinear_upsample, resize_planes, source_coord};

use crate::error::Result;
use crate::params::{Ctx, ParamId, ParamInit};
use crate::tensor::Var;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const LN_EPS: f32 = 1e-6;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(init: &mut ParamInit<'_>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Self {
        let weight = init.fan_in_uniform(format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k);
        let bias = init.constant(format!("{name}.bias"), &[c_out], 0.0, true);
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// Stride 1 with "same" padding for odd `k`.
    pub fn same(init: &mut ParamInit<'_>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        Self::new(init, name, c_in, c_out, k, 1, (k - 1) / 2)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        conv2d(&mut ctx.tape, x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm2d {
    pub fn new(init: &mut ParamInit<'_>, name: &str, c: usize) -> Self {
        Self {
            gamma: init.constant(format!("{name}.gamma"), &[c], 1.0, true),
            beta: init.constant(format!("{name}.beta"), &[c], 0.0, true),
            running_mean: init.constant(format!("{name}.running_mean"), &[c], 0.0, false),
            running_var: init.constant(format!("{name}.running_var"), &[c], 1.0, false),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Normalises in the context's mode; training-mode statistics updates
    /// are queued on the context.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        let state = BatchNormState {
            running_mean: ctx.buffer(self.running_mean),
            running_var: ctx.buffer(self.running_var),
            eps: self.eps,
            momentum: self.momentum,
        };
        let mode = ctx.mode();
        let (y, stats) = batch_norm2d(&mut ctx.tape, x, g, b, &state, mode)?;
        if let Some(s) = stats {
            ctx.push_stat_update(self.running_mean, s.mean);
            ctx.push_stat_update(self.running_var, s.var);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(init: &mut ParamInit<'_>, name: &str, d: usize) -> Self {
        Self {
            gamma: init.constant(format!("{name}.gamma"), &[d], 1.0, true),
            beta: init.constant(format!("{name}.beta"), &[d], 0.0, true),
            eps: LN_EPS,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        layer_norm(&mut ctx.tape, x, g, b, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut ParamInit<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: init.fan_in_uniform(format!("{name}.weight"), &[d_out, d_in], d_in),
            bias: init.constant(format!("{name}.bias"), &[d_out], 0.0, true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        linear(&mut ctx.tape, x, w, b)
    }
}
