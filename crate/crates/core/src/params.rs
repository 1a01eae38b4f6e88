//! Named parameter storage and the per-forward context that exposes it to the graph.

use std::cell::RefCell;
use std::collections::BTreeMap;

use weedsense_tensor::init::{kaiming_uniform, xavier_uniform};
use weedsense_tensor::ops::{batch_norm2d, BatchNormState, BatchStats};
use weedsense_tensor::{Mode, Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Kaiming { fan_in: usize },
    Xavier { fan_in: usize, fan_out: usize },
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<T: Scalar>(&self, seed: u64) -> Tensor<T> {
        match self.init {
            Init::Kaiming { fan_in } => kaiming_uniform(&self.shape, fan_in, seed, &self.name),
            Init::Xavier { fan_in, fan_out } => xavier_uniform(&self.shape, fan_in, fan_out, seed, &self.name),
            Init::Const(v) => Tensor::full(self.shape.clone(), T::from_f64_lossy(v)),
        }
    }
}

/// Everything a network declares: learnable tensors and batch-norm buffers.
#[derive(Debug, Clone, Default)]
pub struct Specs {
    pub params: Vec<ParamSpec>,
    /// `(layer name, channels)` of every batch-norm layer.
    pub batch_norms: Vec<(String, usize)>,
}

impl Specs {
    pub fn param(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.params.push(ParamSpec { name, shape, init });
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    pub values: BTreeMap<String, Tensor<T>>,
    pub batch_norms: BTreeMap<String, BatchNormState<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn from_specs(specs: &Specs, seed: u64) -> Result<Self> {
        let mut values = BTreeMap::new();
        for s in &specs.params {
            if values.insert(s.name.clone(), s.materialize(seed)).is_some() {
                return Err(Error::config(format!("duplicate parameter name {}", s.name)));
            }
        }
        let batch_norms = specs
            .batch_norms
            .iter()
            .map(|(n, c)| (n.clone(), BatchNormState::new(*c)))
            .collect();
        Ok(ParamStore { values, batch_norms })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.values
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn total(&self) -> usize {
        self.values.values().map(Tensor::numel).sum()
    }

    /// Folds the batch statistics of one training forward into the running averages.
    pub fn apply_batch_stats(&mut self, stats: Vec<(String, BatchStats<T>)>) {
        for (name, s) in stats {
            if let Some(state) = self.batch_norms.get_mut(&name) {
                state.update(&s);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let cast_bn = |s: &BatchNormState<T>| BatchNormState {
            running_mean: s.running_mean.cast(),
            running_var: s.running_var.cast(),
            eps: s.eps,
            momentum: s.momentum,
        };
        ParamStore {
            values: self.values.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            batch_norms: self.batch_norms.iter().map(|(k, v)| (k.clone(), cast_bn(v))).collect(),
        }
    }
}

/// State of one forward pass: which parameters to read, whether to record gradients,
/// the batch-norm/dropout mode, and the batch statistics gathered in train mode.
pub struct Ctx<'a, T: Scalar = f32> {
    store: &'a ParamStore<T>,
    tape: Option<&'a Tape<T>>,
    pub mode: Mode,
    /// Batch norms use their running statistics even in train mode.
    pub frozen_bn: bool,
    pub dropout_seed: u64,
    stats: RefCell<Vec<(String, BatchStats<T>)>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, tape: Option<&'a Tape<T>>, mode: Mode) -> Self {
        Ctx {
            store,
            tape,
            mode,
            frozen_bn: false,
            dropout_seed: 0,
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_seed = seed;
        self
    }

    pub fn with_frozen_bn(mut self, frozen: bool) -> Self {
        self.frozen_bn = frozen;
        self
    }

    pub fn param(&self, name: &str) -> Result<Var<T>> {
        let value = self.store.get(name)?;
        Ok(match self.tape {
            Some(t) => t.param(name, || value.clone()),
            None => Var::constant(value.clone()),
        })
    }

    pub fn batch_norm(&self, name: &str, x: &Var<T>) -> Result<Var<T>> {
        let state = self
            .store
            .batch_norms
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown batch norm {name}")))?;
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let mode = if self.frozen_bn { Mode::Eval } else { self.mode };
        let (y, stats) = batch_norm2d(x, &gamma, &beta, state, mode)?;
        if let Some(s) = stats {
            self.stats.borrow_mut().push((name.to_string(), s));
        }
        Ok(y)
    }

    pub fn take_stats(&self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }
}
