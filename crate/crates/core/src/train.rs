//! Adam, the epoch loop and resumable checkpoint bundles.
//!
//! A checkpoint directory holds the model bundle (`config.txt`,
//! `manifest.txt`, `tensors/`), the optimiser moments under `optim/`, plus
//! `optim.txt`, `trainer.txt` and `rng.txt` as `key=value` text.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::checkpoint::{self, parse_kv};
use crate::data::{augment, stack_batch, Sample};
use crate::error::{contract_err, Error, Result};
use crate::metrics;
use crate::model::TransRUPNet;
use crate::params::{Ctx, Mode, ParamId, ParamStore};
use crate::rng::{self, ChaCha8Rng};
use crate::tensor::Tensor;

pub const OPTIM_DIR: &str = "optim";
pub const OPTIM_FILE: &str = "optim.txt";
pub const TRAIN_FILE: &str = "trainer.txt";
pub const RNG_FILE: &str = "rng.txt";
pub const LOG_HEADER: &str = "epoch,step,loss";

/// Adam with bias correction, no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Steps taken so far.
    pub t: u64,
    /// First and second moments per trainable parameter, indexed by
    /// [`ParamId`]; `None` for buffers.
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: params
                .ids()
                .map(|id| {
                    let s = params.get(id).shape();
                    params.is_trainable(id).then(|| (Tensor::zeros(s), Tensor::zeros(s)))
                })
                .collect(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(id.index())?.as_ref().map(|(m, v)| (m, v))
    }

    /// One update. Every gradient is checked before anything changes, so a
    /// rejected step leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            let Some(Some((m, _))) = self.moments.get(id.index()) else {
                return Err(contract_err!("{} is not a trainable parameter", params.name(*id)));
            };
            if g.shape() != m.shape() {
                return Err(contract_err!("gradient shape {:?} for {}", g.shape(), params.name(*id)));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", params.name(*id))));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - (b1 as f64).powi(self.t as i32);
        let c2 = 1.0 - (b2 as f64).powi(self.t as i32);
        let (lr, eps) = (self.lr as f64, self.eps as f64);
        for (id, g) in grads {
            let (m, v) = self.moments[id.index()].as_mut().expect("checked");
            let (m, v) = (m.data_mut(), v.data_mut());
            let theta = params.get_mut(*id).data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] as f64 / c1;
                let vh = v[i] as f64 / c2;
                theta[i] = (theta[i] as f64 - lr * mh / (vh.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }

    /// Writes moments (as `m.<param>` / `v.<param>`) and `optim.txt`.
    pub fn save(&self, params: &ParamStore, dir: &Path) -> Result<()> {
        let mut named = Vec::new();
        for id in params.ids() {
            if let Some((m, v)) = self.moments(id) {
                named.push((format!("m.{}", params.name(id)), m));
                named.push((format!("v.{}", params.name(id)), v));
            }
        }
        checkpoint::save_tensors(&dir.join(OPTIM_DIR), named.iter().map(|(n, t)| (n.as_str(), *t)))?;
        fs::write(
            dir.join(OPTIM_FILE),
            format!(
                "t={}\nlr={}\nbeta1={}\nbeta2={}\neps={}\n",
                self.t, self.lr, self.beta1, self.beta2, self.eps
            ),
        )?;
        Ok(())
    }

    pub fn load(params: &ParamStore, dir: &Path) -> Result<Self> {
        let kv = parse_kv(&read_text(&dir.join(OPTIM_FILE))?)?;
        let mut adam = Self::new(params, field(&kv, "lr", OPTIM_FILE)?);
        adam.t = field(&kv, "t", OPTIM_FILE)?;
        adam.beta1 = field(&kv, "beta1", OPTIM_FILE)?;
        adam.beta2 = field(&kv, "beta2", OPTIM_FILE)?;
        adam.eps = field(&kv, "eps", OPTIM_FILE)?;
        let mut tensors = checkpoint::load_tensors(&dir.join(OPTIM_DIR))?;
        let expected = adam.moments.iter().flatten().count() * 2;
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "optimiser state has {} tensors, model needs {expected}",
                tensors.len()
            )));
        }
        for id in params.ids() {
            let name = params.name(id);
            if let Some((m, v)) = adam.moments[id.index()].as_mut() {
                for (slot, prefix) in [(m, "m"), (v, "v")] {
                    let key = format!("{prefix}.{name}");
                    let t = tensors
                        .remove(&key)
                        .ok_or_else(|| Error::Checkpoint(format!("optimiser state lacks {key}")))?;
                    if t.shape() != slot.shape() {
                        return Err(Error::Checkpoint(format!("{key} has shape {:?}", t.shape())));
                    }
                    *slot = t;
                }
            }
        }
        Ok(adam)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))
}

fn field<T: std::str::FromStr>(kv: &std::collections::BTreeMap<String, String>, key: &str, file: &str) -> Result<T> {
    kv.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("{file}: missing or invalid {key}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            epochs: 1,
            seed: 0,
            checkpoint_every: 0,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based index of the epoch just finished.
    pub epoch: usize,
    pub mean_loss: f32,
    pub step_losses: Vec<f32>,
}

/// Model, optimiser and the random stream that drives shuffling and
/// augmentation.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: TransRUPNet,
    pub optim: Adam,
    pub config: TrainConfig,
    epochs_done: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: TransRUPNet, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(contract_err!("batch size must be ≥ 1"));
        }
        Ok(Self {
            optim: Adam::new(model.params(), config.lr),
            rng: rng::seeded(config.seed),
            model,
            config,
            epochs_done: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// One forward/backward/update on a batch; returns the loss.
    pub fn train_step(&mut self, images: &Tensor, masks: &Tensor) -> Result<f32> {
        let mut ctx = Ctx::new(self.model.params(), Mode::Train, true);
        let x = ctx.tape.constant(images.clone());
        let y = ctx.tape.constant(masks.clone());
        let p = self.model.forward(&mut ctx, x)?;
        let loss = metrics::combined_loss(&mut ctx.tape, p, y)?;
        let value = ctx.tape.value(loss).item()?;
        let (grads, stats) = ctx.backward(loss)?;
        self.optim.step(self.model.params_mut(), &grads)?;
        for (id, t) in stats {
            self.model.params_mut().set(id, t)?;
        }
        Ok(value)
    }

    /// Shuffles with a fresh epoch seed, augments each sample from a stream
    /// derived from that seed and its id, and steps through the batches (the
    /// last one may be short). Loss lines go to `log` as `epoch,step,loss`.
    pub fn train_epoch(&mut self, data: &[Sample], mut log: Option<&mut dyn Write>) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(contract_err!("cannot train on an empty dataset"));
        }
        let epoch_seed = self.rng.next_u64();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::seeded(epoch_seed));
        let epoch = self.epochs_done + 1;
        let mut step_losses = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    if self.config.augment {
                        augment(s, &mut rng::for_id(epoch_seed, &s.id))
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let (images, masks) = stack_batch(&batch)?;
            let loss = self.train_step(&images, &masks)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{epoch},{},{loss}", self.optim.t)?;
            }
            step_losses.push(loss);
        }
        self.epochs_done = epoch;
        let mean_loss = (step_losses.iter().map(|&l| l as f64).sum::<f64>() / step_losses.len() as f64) as f32;
        Ok(EpochStats {
            epoch,
            mean_loss,
            step_losses,
        })
    }

    /// Mean dice over `data` in evaluation mode.
    pub fn mean_dice(&self, data: &[Sample]) -> Result<f64> {
        let report = metrics::evaluate_dataset(
            &self.model,
            data,
            self.model.config().threshold,
            self.config.batch_size,
        )?;
        Ok(report.aggregate.dice)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        self.optim.save(self.model.params(), dir)?;
        let c = &self.config;
        fs::write(
            dir.join(TRAIN_FILE),
            format!(
                "lr={}\nbatch_size={}\nepochs={}\nseed={}\ncheckpoint_every={}\naugment={}\nepochs_done={}\n",
                c.lr, c.batch_size, c.epochs, c.seed, c.checkpoint_every, c.augment, self.epochs_done
            ),
        )?;
        fs::write(dir.join(RNG_FILE), rng::state_to_text(&self.rng))?;
        Ok(())
    }

    pub fn restore(dir: &Path) -> Result<Self> {
        let model = TransRUPNet::load(dir)?;
        let optim = Adam::load(model.params(), dir)?;
        let kv = parse_kv(&read_text(&dir.join(TRAIN_FILE))?)?;
        let config = TrainConfig {
            lr: field(&kv, "lr", TRAIN_FILE)?,
            batch_size: field(&kv, "batch_size", TRAIN_FILE)?,
            epochs: field(&kv, "epochs", TRAIN_FILE)?,
            seed: field(&kv, "seed", TRAIN_FILE)?,
            checkpoint_every: field(&kv, "checkpoint_every", TRAIN_FILE)?,
            augment: field(&kv, "augment", TRAIN_FILE)?,
        };
        let rng = rng::state_from_text(&read_text(&dir.join(RNG_FILE))?)
            .map_err(|e| Error::Checkpoint(format!("{RNG_FILE}: {e}")))?;
        Ok(Self {
            model,
            optim,
            config,
            epochs_done: field(&kv, "epochs_done", TRAIN_FILE)?,
            rng,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f32) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v), true);
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = one_param(0.3);
        let mut a = Adam::new(&s, 1e-4);
        a.step(&mut s, &[(id, Tensor::scalar(0.0))]).unwrap();
        assert_eq!(a.t, 1);
        assert_eq!(s.get(id).data(), &[0.3]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = one_param(1.0);
        let mut a = Adam::new(&s, 1e-3);
        a.step(&mut s, &[(id, Tensor::scalar(0.5))]).unwrap();
        assert!((s.get(id).data()[0] - (1.0 - 1e-3)).abs() < 1e-7);
    }

    #[test]
    fn matches_scalar_reference_over_two_steps() {
        let (mut s, id) = one_param(0.25);
        let mut a = Adam::new(&s, 1e-2);
        let (mut th, mut m, mut v) = (0.25f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 0.7f64;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= 1e-2 * mh / (vh.sqrt() + 1e-8);
            a.step(&mut s, &[(id, Tensor::scalar(g as f32))]).unwrap();
        }
        assert!((s.get(id).data()[0] as f64 - th).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_change() {
        let (mut s, id) = one_param(2.0);
        let mut a = Adam::new(&s, 1e-2);
        let before = a.clone();
        let r = a.step(&mut s, &[(id, Tensor::scalar(f32::NAN))]);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert_eq!(a, before);
        assert_eq!(s.get(id).data(), &[2.0]);
    }

    #[test]
    fn optimiser_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (mut s, id) = one_param(1.0);
        s.add("buf", Tensor::zeros(&[2]), false);
        let mut a = Adam::new(&s, 3e-4);
        a.step(&mut s, &[(id, Tensor::scalar(0.1))]).unwrap();
        a.save(&s, dir.path()).unwrap();
        assert_eq!(Adam::load(&s, dir.path()).unwrap(), a);
    }
}
