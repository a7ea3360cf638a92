//! Named parameter storage and the forward-pass context that binds it to a tape.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::rng::ChaCha8Rng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Ordered, named tensors: learnable weights plus non-learnable buffers
/// such as batch-norm running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(shape_err!(
                "{}: expected {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            ));
        }
        e.value = value;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Number of scalars in trainable entries.
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// One `name:d1,d2,...` line per entry, in store order.
    pub fn manifest(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}:{}\n", e.name, join_dims(e.value.shape())))
            .collect()
    }
}

pub(crate) fn join_dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Registers freshly initialised parameters.
///
/// Weights are drawn from `U(−1/√fan_in, 1/√fan_in)`; biases and norm
/// shifts start at zero, norm scales at one.
pub struct ParamInit<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamInit<'_> {
    pub fn fan_in_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound));
        self.store.add(name, t, true)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], v: f32, trainable: bool) -> ParamId {
        self.store.add(name, Tensor::full(shape, v), trainable)
    }
}

/// A forward pass in progress: the tape, lazily bound parameters, the mode
/// and any batch-norm statistics updates to apply afterwards.
pub struct Ctx<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    stat_updates: Vec<(ParamId, Tensor)>,
}

impl<'p> Ctx<'p> {
    /// `track_grads` makes trainable parameters differentiable leaves.
    pub fn new(params: &'p ParamStore, mode: Mode, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            mode,
            track_grads,
            stat_updates: Vec::new(),
        }
    }

    /// Inference context: evaluation mode, nothing differentiable.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::new(params, Mode::Eval, false)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// The tape variable for a parameter, binding it on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.track_grads && self.params.is_trainable(id) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Current value of a non-differentiable buffer.
    pub fn buffer(&self, id: ParamId) -> &'p Tensor {
        self.params.get(id)
    }

    pub(crate) fn push_stat_update(&mut self, id: ParamId, value: Tensor) {
        self.stat_updates.push((id, value));
    }

    pub fn stat_updates(&self) -> &[(ParamId, Tensor)] {
        &self.stat_updates
    }

    /// Runs backward from `loss` and returns `(param, grad)` for every
    /// trainable parameter that was bound, plus the pending statistics updates.
    pub fn backward(self, loss: Var) -> Result<(Vec<(ParamId, Tensor)>, Vec<(ParamId, Tensor)>)> {
        let Ctx {
            tape,
            params,
            bound,
            stat_updates,
            ..
        } = self;
        let mut grads: Gradients = tape.backward(loss)?;
        let mut out = Vec::new();
        for (i, v) in bound.iter().enumerate() {
            let id = ParamId(i);
            if let Some(v) = v {
                if params.is_trainable(id) {
                    let g = grads
                        .remove(*v)
                        .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()));
                    out.push((id, g));
                }
            }
        }
        Ok((out, stat_updates))
    }
}
