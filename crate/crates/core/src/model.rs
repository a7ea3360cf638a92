//! The TransRUPNet segmentation network.
//!
//! ```text
//! x ─ encoder ─┬ e1 (1/4)  ─ reduce ─ r1 ─┬───────────── up ─ u1 ┐
//!              ├ e2 (1/8)  ─ reduce ─ r2 ─┼──────┬────── up ─ u2 ┤
//!              └ e3 (1/16) ─ reduce ─ r3 ─┼──────┼────── up ─ u3 ┤ concat ─ residual ─ 1×1 conv ─ sigmoid
//!                                         │  d1 = dec(r3, r2)    │
//!                                         └  d2 = dec(d1, r1) ─ up ─ u4 ┘
//! ```
//!
//! Up blocks resize straight to the input resolution; decoder blocks double
//! the resolution and concatenate `(upsampled, skip)` in that order.

use std::fs;
use std::path::Path;

use crate::checkpoint::{self, parse_kv};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{self, BatchNorm2d, Conv2d};
use crate::params::{Ctx, ParamInit, ParamStore};
use crate::pvt::{EncoderOutput, PvtEncoder, StageConfig};
use crate::rng;
use crate::tensor::{Tensor, Var};

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Default `(H, W)` for data loading and benchmarking.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    /// Width of every reduced, up-block and decoder feature map.
    pub reduce_channels: usize,
    pub stages: [StageConfig; 3],
    /// Kernel size of the two main-path convolutions of a residual block.
    pub residual_kernel: usize,
    /// Probability at or above which a pixel is predicted foreground.
    pub threshold: f32,
}

fn stages(dims: [usize; 3], depths: [usize; 3], heads: [usize; 3], srs: [usize; 3], mlp: usize) -> [StageConfig; 3] {
    let strides = [4, 2, 2];
    std::array::from_fn(|i| StageConfig {
        embed_dim: dims[i],
        depth: depths[i],
        num_heads: heads[i],
        sr_ratio: srs[i],
        patch_stride: strides[i],
        mlp_ratio: mlp,
    })
}

impl Default for ModelConfig {
    /// 256×256 input, 64 reduced channels, encoder dims 32/64/160.
    fn default() -> Self {
        Self {
            input_size: (256, 256),
            in_channels: 3,
            reduce_channels: 64,
            stages: stages([32, 64, 160], [2, 2, 2], [1, 2, 5], [8, 4, 2], 4),
            residual_kernel: 3,
            threshold: 0.5,
        }
    }
}

impl ModelConfig {
    /// Desk-scale network: dims 16/32/64, depth 1, 16 reduced channels, 64×64 input.
    pub fn toy() -> Self {
        Self {
            input_size: (64, 64),
            reduce_channels: 16,
            stages: stages([16, 32, 64], [1, 1, 1], [1, 2, 4], [8, 4, 2], 4),
            ..Self::default()
        }
    }

    /// Smallest useful network, for gradient checks: dims 8/16/32, depth 1,
    /// 8 reduced channels, 32×32 input.
    pub fn tiny() -> Self {
        Self {
            input_size: (32, 32),
            reduce_channels: 8,
            stages: stages([8, 16, 32], [1, 1, 1], [1, 2, 4], [4, 2, 1], 2),
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            "tiny" => Ok(Self::tiny()),
            other => Err(contract_err!("unknown model preset {other:?} (default|toy|tiny)")),
        }
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    /// Total encoder downsampling; input sides must be multiples of it.
    pub fn stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch_stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let s = self.stride();
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(shape_err!("input size {h}x{w} must be a positive multiple of {s}"));
        }
        if self.reduce_channels == 0 || self.in_channels == 0 {
            return Err(contract_err!("channel counts must be ≥ 1"));
        }
        if self.residual_kernel % 2 == 0 {
            return Err(contract_err!("residual kernel must be odd"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(contract_err!("threshold must lie in (0, 1)"));
        }
        for st in &self.stages {
            st.validate()?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let list = |f: &dyn Fn(&StageConfig) -> usize| {
            self.stages.iter().map(|s| f(s).to_string()).collect::<Vec<_>>().join(",")
        };
        format!(
            "input_h={}\ninput_w={}\nin_channels={}\nreduce_channels={}\nembed_dims={}\ndepths={}\nnum_heads={}\nsr_ratios={}\npatch_strides={}\nmlp_ratios={}\nresidual_kernel={}\nthreshold={}\n",
            self.input_size.0,
            self.input_size.1,
            self.in_channels,
            self.reduce_channels,
            list(&|s| s.embed_dim),
            list(&|s| s.depth),
            list(&|s| s.num_heads),
            list(&|s| s.sr_ratio),
            list(&|s| s.patch_stride),
            list(&|s| s.mlp_ratio),
            self.residual_kernel,
            self.threshold,
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("config is missing {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format(format!("config {k} is not an integer")))
        };
        let triple = |k: &str| -> Result<[usize; 3]> {
            let v: Vec<usize> = get(k)?
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("config {k} is not a list of integers")))?;
            v.try_into().map_err(|_| Error::Format(format!("config {k} needs three values")))
        };
        let (dims, depths, heads, srs, strides, mlps) = (
            triple("embed_dims")?,
            triple("depths")?,
            triple("num_heads")?,
            triple("sr_ratios")?,
            triple("patch_strides")?,
            triple("mlp_ratios")?,
        );
        let cfg = Self {
            input_size: (num("input_h")?, num("input_w")?),
            in_channels: num("in_channels")?,
            reduce_channels: num("reduce_channels")?,
            stages: std::array::from_fn(|i| StageConfig {
                embed_dim: dims[i],
                depth: depths[i],
                num_heads: heads[i],
                sr_ratio: srs[i],
                patch_stride: strides[i],
                mlp_ratio: mlps[i],
            }),
            residual_kernel: num("residual_kernel")?,
            threshold: get("threshold")?
                .parse()
                .map_err(|_| Error::Format("config threshold is not a number".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `conv k×k → BN → ReLU → conv k×k → BN`, plus an identity or projected
/// (`conv 1×1 → BN`) shortcut, then a final ReLU.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new(init: &mut ParamInit<'_>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let shortcut = (c_in != c_out).then(|| {
            (
                Conv2d::same(init, &format!("{name}.shortcut.conv"), c_in, c_out, 1),
                BatchNorm2d::new(init, &format!("{name}.shortcut.bn"), c_out),
            )
        });
        Self {
            conv1: Conv2d::same(init, &format!("{name}.conv1"), c_in, c_out, k),
            bn1: BatchNorm2d::new(init, &format!("{name}.bn1"), c_out),
            conv2: Conv2d::same(init, &format!("{name}.conv2"), c_out, c_out, k),
            bn2: BatchNorm2d::new(init, &format!("{name}.bn2"), c_out),
            shortcut,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let m = self.conv1.forward(ctx, x)?;
        let m = self.bn1.forward(ctx, m)?;
        let m = nn::relu(&mut ctx.tape, m)?;
        let m = self.conv2.forward(ctx, m)?;
        let m = self.bn2.forward(ctx, m)?;
        let s = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let y = ctx.tape.add(m, s)?;
        nn::relu(&mut ctx.tape, y)
    }
}

/// `conv 1×1 → BN → ReLU` channel reduction.
#[derive(Clone, Debug)]
pub struct ReduceBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ReduceBlock {
    pub fn new(init: &mut ParamInit<'_>, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            conv: Conv2d::same(init, &format!("{name}.conv"), c_in, c_out, 1),
            bn: BatchNorm2d::new(init, &format!("{name}.bn"), c_out),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        nn::relu(&mut ctx.tape, y)
    }
}

/// Bilinear resize to the target resolution, then a residual block.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub res: ResidualBlock,
}

impl UpBlock {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, target: (usize, usize)) -> Result<Var> {
        let u = nn::bilinear_upsample(&mut ctx.tape, x, target.0, target.1)?;
        self.res.forward(ctx, u)
    }
}

/// ×2 bilinear upsampling, concatenation with the skip map, residual block.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub res: ResidualBlock,
}

impl DecoderBlock {
    /// Returns `(output, pre-residual concatenation)`.
    pub fn forward_with_concat(&self, ctx: &mut Ctx<'_>, x: Var, skip: Var) -> Result<(Var, Var)> {
        let (xs, ss) = (ctx.tape.shape(x).to_vec(), ctx.tape.shape(skip).to_vec());
        if xs.len() != 4 || ss.len() != 4 || ss[0] != xs[0] || ss[2] != 2 * xs[2] || ss[3] != 2 * xs[3] {
            return Err(shape_err!("decoder skip {ss:?} must be twice the spatial size of {xs:?}"));
        }
        let u = nn::bilinear_upsample(&mut ctx.tape, x, ss[2], ss[3])?;
        let cat = nn::concat_channels(&mut ctx.tape, &[u, skip])?;
        Ok((self.res.forward(ctx, cat)?, cat))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, skip: Var) -> Result<Var> {
        Ok(self.forward_with_concat(ctx, x, skip)?.0)
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    pub encoder: EncoderOutput,
    pub reduced: [Var; 3],
    pub ups: [Var; 4],
    pub decoded: [Var; 2],
    /// The four up-block outputs concatenated (4 × reduce_channels).
    pub concat: Var,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct TransRUPNet {
    config: ModelConfig,
    params: ParamStore,
    pub encoder: PvtEncoder,
    pub reduce: [ReduceBlock; 3],
    pub up: [UpBlock; 4],
    pub decoder: [DecoderBlock; 2],
    pub head: ResidualBlock,
    pub out: Conv2d,
}

impl TransRUPNet {
    /// Builds the network with deterministic initial weights for `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::seeded(seed);
        let mut init = ParamInit {
            store: &mut params,
            rng: &mut r,
        };
        let rc = config.reduce_channels;
        let k = config.residual_kernel;
        let encoder = PvtEncoder::new(&mut init, config.in_channels, &config.stages)?;
        let reduce = std::array::from_fn(|i| {
            ReduceBlock::new(&mut init, &format!("reduce{}", i + 1), config.stages[i].embed_dim, rc)
        });
        let up = std::array::from_fn(|i| UpBlock {
            res: ResidualBlock::new(&mut init, &format!("up{}", i + 1), rc, rc, k),
        });
        let decoder = std::array::from_fn(|i| DecoderBlock {
            res: ResidualBlock::new(&mut init, &format!("decoder{}", i + 1), 2 * rc, rc, k),
        });
        let head = ResidualBlock::new(&mut init, "head", 4 * rc, 4 * rc, k);
        let out = Conv2d::same(&mut init, "output", 4 * rc, 1, 1);
        Ok(Self {
            config,
            params,
            encoder,
            reduce,
            up,
            decoder,
            head,
            out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Runs the network on `x: [B×C×H×W]` and records every intermediate.
    pub fn trace(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<ForwardTrace> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(shape_err!(
                "model input must be [B,{},H,W], got {s:?}",
                self.config.in_channels
            ));
        }
        let full = (s[2], s[3]);
        let encoder = self.encoder.forward(ctx, x)?;
        let es = [encoder.e1, encoder.e2, encoder.e3];
        let mut reduced = [x; 3];
        for i in 0..3 {
            reduced[i] = self.reduce[i].forward(ctx, es[i])?;
        }
        let d1 = self.decoder[0].forward(ctx, reduced[2], reduced[1])?;
        let d2 = self.decoder[1].forward(ctx, d1, reduced[0])?;
        let sources = [reduced[0], reduced[1], reduced[2], d2];
        let mut ups = [x; 4];
        for i in 0..4 {
            ups[i] = self.up[i].forward(ctx, sources[i], full)?;
        }
        let concat = nn::concat_channels(&mut ctx.tape, &ups)?;
        let h = self.head.forward(ctx, concat)?;
        let logits = self.out.forward(ctx, h)?;
        let probs = nn::sigmoid(&mut ctx.tape, logits)?;
        Ok(ForwardTrace {
            encoder,
            reduced,
            ups,
            decoded: [d1, d2],
            concat,
            logits,
            probs,
        })
    }

    /// Foreground probabilities `[B×1×H×W]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(self.trace(ctx, x)?.probs)
    }

    /// Evaluation-mode probabilities without recording gradients.
    pub fn infer(&self, images: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::inference(&self.params);
        let x = ctx.tape.constant(images.clone());
        let y = self.forward(&mut ctx, x)?;
        Ok(ctx.tape.value(y).clone())
    }

    /// Binary mask: 1 where the evaluation-mode probability is `≥ threshold`.
    pub fn predict_mask(&self, images: &Tensor, threshold: f32) -> Result<Tensor> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(contract_err!("threshold {threshold} outside (0, 1)"));
        }
        Ok(binarize(&self.infer(images)?, threshold))
    }

    /// Writes the parameter bundle and `config.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_kv())?;
        checkpoint::save_params(&self.params, dir)
    }

    /// Rebuilds a model from a directory written by [`TransRUPNet::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(CONFIG_FILE))
            .map_err(|e| Error::Checkpoint(format!("cannot read {CONFIG_FILE}: {e}")))?;
        let mut model = Self::new(ModelConfig::from_kv(&text)?, 0)?;
        checkpoint::load_params(&mut model.params, dir)?;
        Ok(model)
    }
}

/// 1 where `p ≥ threshold`, else 0.
pub fn binarize(probs: &Tensor, threshold: f32) -> Tensor {
    probs.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;

    #[test]
    fn config_kv_round_trip() {
        for cfg in [ModelConfig::default(), ModelConfig::toy(), ModelConfig::tiny()] {
            assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        }
        assert!(ModelConfig::from_kv("input_h=3").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::toy().with_input_size(40, 64).validate().is_err());
        let mut c = ModelConfig::toy();
        c.threshold = 1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.stages[1].num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn binarize_uses_greater_or_equal() {
        let p = Tensor::new(vec![3], vec![0.5, 0.4999, 0.9]).unwrap();
        assert_eq!(binarize(&p, 0.5).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn default_layout_has_expected_pieces() {
        let m = TransRUPNet::new(ModelConfig::tiny(), 0).unwrap();
        let p = m.params();
        assert!(p.find("encoder.stage1.patch_embed.proj.weight").is_some());
        assert!(p.find("head.conv1.weight").is_some());
        assert!(p.find("head.shortcut.conv.weight").is_none());
        assert!(p.find("decoder1.shortcut.conv.weight").is_some());
        assert_eq!(p.get(p.find("output.weight").unwrap()).shape(), &[1, 32, 1, 1]);
        let mut ctx = Ctx::new(p, Mode::Eval, false);
        let x = ctx.tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let tr = m.trace(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(tr.concat), &[1, 32, 32, 32]);
    }
}
