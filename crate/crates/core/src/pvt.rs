//! Three-stage pyramid vision transformer encoder with spatial-reduction
//! attention.
//!
//! Each stage embeds non-overlapping patches with a strided convolution,
//! runs `depth` pre-norm transformer blocks and reshapes the tokens back into
//! a feature map, which is both returned and fed to the next stage. Stage
//! output strides are 4, 8 and 16. There is no positional encoding; tokens
//! only carry position through the patch embedding.

use std::path::Path;

use crate::checkpoint;
use crate::error::{shape_err, Result};
use crate::nn::{self, Conv2d, LayerNorm, Linear};
use crate::params::{Ctx, ParamInit, ParamStore};
use crate::tensor::Var;

/// Prefix shared by every encoder parameter name.
pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub sr_ratio: usize,
    pub patch_stride: usize,
    pub mlp_ratio: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(shape_err!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim,
                self.num_heads
            ));
        }
        if self.sr_ratio == 0 || self.patch_stride == 0 || self.mlp_ratio == 0 {
            return Err(shape_err!("sr_ratio, patch_stride and mlp_ratio must be ≥ 1"));
        }
        Ok(())
    }
}

/// The three stage feature maps.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub e1: Var,
    pub e2: Var,
    pub e3: Var,
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub norm: LayerNorm,
    pub stride: usize,
}

impl PatchEmbed {
    pub fn new(init: &mut ParamInit<'_>, name: &str, c_in: usize, dim: usize, stride: usize) -> Self {
        Self {
            proj: Conv2d::new(init, &format!("{name}.proj"), c_in, dim, stride, stride, 0),
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim),
            stride,
        }
    }

    /// `[B×C×H×W] → ([B×N×D], h, w)` with `N = h·w`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<(Var, usize, usize)> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 || s[2] % self.stride != 0 || s[3] % self.stride != 0 {
            return Err(shape_err!(
                "patch embedding with stride {} needs H, W divisible by it, got {s:?}",
                self.stride
            ));
        }
        let y = self.proj.forward(ctx, x)?;
        let ys = ctx.tape.shape(y).to_vec();
        let (b, d, h, w) = (ys[0], ys[1], ys[2], ys[3]);
        let y = ctx.tape.reshape(y, &[b, d, h * w])?;
        let tokens = ctx.tape.permute(y, &[0, 2, 1])?;
        Ok((self.norm.forward(ctx, tokens)?, h, w))
    }
}

/// Tokens `[B×N×D]` back to a map `[B×D×h×w]`.
pub fn tokens_to_map(ctx: &mut Ctx<'_>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let s = ctx.tape.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(shape_err!("{s:?} is not {h}x{w} tokens"));
    }
    let t = ctx.tape.permute(tokens, &[0, 2, 1])?;
    ctx.tape.reshape(t, &[s[0], s[2], h, w])
}

/// Multi-head attention whose keys and values come from a spatially
/// reduced copy of the tokens.
#[derive(Clone, Debug)]
pub struct SpatialReductionAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    /// Strided reduction conv and its norm; absent when `sr_ratio == 1`.
    pub reduce: Option<(Conv2d, LayerNorm)>,
    pub num_heads: usize,
    pub sr_ratio: usize,
}

impl SpatialReductionAttention {
    pub fn new(init: &mut ParamInit<'_>, name: &str, dim: usize, num_heads: usize, sr_ratio: usize) -> Self {
        let reduce = (sr_ratio > 1).then(|| {
            (
                Conv2d::new(init, &format!("{name}.sr"), dim, dim, sr_ratio, sr_ratio, 0),
                LayerNorm::new(init, &format!("{name}.sr_norm"), dim),
            )
        });
        Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            proj: Linear::new(init, &format!("{name}.proj"), dim, dim),
            reduce,
            num_heads,
            sr_ratio,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, x, h, w)?.0)
    }

    /// Also returns the softmax attention matrix `[B×heads×N×M]`.
    pub fn forward_with_weights(&self, ctx: &mut Ctx<'_>, x: Var, h: usize, w: usize) -> Result<(Var, Var)> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(shape_err!("attention input {s:?} is not {h}x{w} tokens"));
        }
        if h % self.sr_ratio != 0 || w % self.sr_ratio != 0 {
            return Err(shape_err!(
                "token grid {h}x{w} not divisible by sr_ratio {}",
                self.sr_ratio
            ));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let heads = self.num_heads;
        if d % heads != 0 {
            return Err(shape_err!("dim {d} not divisible by {heads} heads"));
        }
        let dh = d / heads;

        let q = self.q.forward(ctx, x)?;
        let q = ctx.tape.reshape(q, &[b, n, heads, dh])?;
        let q = ctx.tape.permute(q, &[0, 2, 1, 3])?;

        let kv_src = match &self.reduce {
            Some((conv, norm)) => {
                let map = tokens_to_map(ctx, x, h, w)?;
                let r = conv.forward(ctx, map)?;
                let rs = ctx.tape.shape(r).to_vec();
                let r = ctx.tape.reshape(r, &[b, d, rs[2] * rs[3]])?;
                let r = ctx.tape.permute(r, &[0, 2, 1])?;
                norm.forward(ctx, r)?
            }
            None => x,
        };
        let m = ctx.tape.shape(kv_src)[1];
        let k = self.k.forward(ctx, kv_src)?;
        let k = ctx.tape.reshape(k, &[b, m, heads, dh])?;
        let kt = ctx.tape.permute(k, &[0, 2, 3, 1])?;
        let v = self.v.forward(ctx, kv_src)?;
        let v = ctx.tape.reshape(v, &[b, m, heads, dh])?;
        let v = ctx.tape.permute(v, &[0, 2, 1, 3])?;

        let scores = ctx.tape.matmul(q, kt)?;
        let scores = ctx.tape.mul_scalar(scores, 1.0 / (dh as f32).sqrt())?;
        let attn = nn::softmax_last(&mut ctx.tape, scores)?;
        let o = ctx.tape.matmul(attn, v)?;
        let o = ctx.tape.permute(o, &[0, 2, 1, 3])?;
        let o = ctx.tape.reshape(o, &[b, n, d])?;
        Ok((self.proj.forward(ctx, o)?, attn))
    }
}

/// Pre-norm block: `x + attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SpatialReductionAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(init: &mut ParamInit<'_>, name: &str, cfg: &StageConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), d),
            attn: SpatialReductionAttention::new(init, &format!("{name}.attn"), d, cfg.num_heads, cfg.sr_ratio),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), d),
            fc1: Linear::new(init, &format!("{name}.mlp.fc1"), d, d * cfg.mlp_ratio),
            fc2: Linear::new(init, &format!("{name}.mlp.fc2"), d * cfg.mlp_ratio, d),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
        let n1 = self.norm1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, n1, h, w)?;
        let x = ctx.tape.add(x, a)?;
        let n2 = self.norm2.forward(ctx, x)?;
        let m = self.fc1.forward(ctx, n2)?;
        let m = nn::gelu(&mut ctx.tape, m)?;
        let m = self.fc2.forward(ctx, m)?;
        ctx.tape.add(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub patch_embed: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
}

impl Stage {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (mut t, h, w) = self.patch_embed.forward(ctx, x)?;
        for block in &self.blocks {
            t = block.forward(ctx, t, h, w)?;
        }
        tokens_to_map(ctx, t, h, w)
    }
}

#[derive(Clone, Debug)]
pub struct PvtEncoder {
    pub stages: Vec<Stage>,
}

impl PvtEncoder {
    pub fn new(init: &mut ParamInit<'_>, in_channels: usize, cfgs: &[StageConfig; 3]) -> Result<Self> {
        let mut stages = Vec::with_capacity(3);
        let mut c_in = in_channels;
        for (i, cfg) in cfgs.iter().enumerate() {
            cfg.validate()?;
            let name = format!("{ENCODER_PREFIX}stage{}", i + 1);
            let patch_embed = PatchEmbed::new(init, &format!("{name}.patch_embed"), c_in, cfg.embed_dim, cfg.patch_stride);
            let blocks = (0..cfg.depth)
                .map(|j| TransformerBlock::new(init, &format!("{name}.block{j}"), cfg))
                .collect();
            stages.push(Stage { patch_embed, blocks });
            c_in = cfg.embed_dim;
        }
        Ok(Self { stages })
    }

    /// Total downsampling factor of the last stage.
    pub fn stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch_embed.stride).product()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<EncoderOutput> {
        let s = ctx.tape.shape(x).to_vec();
        let total = self.stride();
        if s.len() != 4 || s[2] % total != 0 || s[3] % total != 0 {
            return Err(shape_err!("encoder input {s:?} needs H, W divisible by {total}"));
        }
        let e1 = self.stages[0].forward(ctx, x)?;
        let e2 = self.stages[1].forward(ctx, e1)?;
        let e3 = self.stages[2].forward(ctx, e2)?;
        Ok(EncoderOutput { e1, e2, e3 })
    }
}

/// Replaces every encoder parameter in `params` with the one stored in the
/// checkpoint bundle at `dir`. Returns the number of tensors loaded.
pub fn load_pretrained(params: &mut ParamStore, dir: impl AsRef<Path>) -> Result<usize> {
    checkpoint::load_params_with_prefix(params, dir.as_ref(), ENCODER_PREFIX)
}
