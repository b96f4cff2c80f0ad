use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Weight initialization descriptor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with variance `2 / (fan_in + fan_out)`.
    GlorotNormal,
    /// Normal with variance `2 / fan_in`.
    HeNormal,
    Zeros,
    Constant(f64),
}

/// `(fan_in, fan_out)` for conv kernels `(kh, kw, cin, cout)` and dense
/// weights `(in, out)`.
fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [kh, kw, cin, cout] => (kh * kw * cin, kh * kw * cout),
        [din, dout] => (din, dout),
        [n] => (n, n),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}

pub fn init_with_rng<T: Real, R: Rng + ?Sized>(
    init: Init,
    shape: &[usize],
    rng: &mut R,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let (fan_in, fan_out) = fans(shape);
    let std = match init {
        Init::Zeros => return Tensor::zeros(shape),
        Init::Constant(v) => return Tensor::full(shape, T::of(v)),
        Init::GlorotNormal => (2.0 / (fan_in + fan_out) as f64).sqrt(),
        Init::HeNormal => (2.0 / fan_in as f64).sqrt(),
    };
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Deterministic draw of a parameter tensor.
pub fn init_params<T: Real>(init: Init, shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_with_rng(init, shape, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Running statistics are stored alongside weights but never optimized.
    pub trainable: bool,
}

/// Named collection of every tensor a model owns.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        for u in updates {
            let keep = u.momentum;
            let blend = T::one() - keep;
            for (r, &b) in self.entries[u.mean.0]
                .value
                .data_mut()
                .iter_mut()
                .zip(&u.batch_mean)
            {
                *r = keep * *r + blend * b;
            }
            for (r, &b) in self.entries[u.var.0]
                .value
                .data_mut()
                .iter_mut()
                .zip(&u.batch_var)
            {
                *r = keep * *r + blend * b;
            }
            let count = &mut self.entries[u.count.0].value.data_mut()[0];
            *count += T::one();
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending exponential-moving-average update of batch-norm statistics.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub count: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub momentum: T,
}

/// One forward (and optionally backward) pass against a frozen store.
///
/// Parameters are bound as graph leaves on first use. Batch-norm running
/// statistics are not written during the pass; they are collected and
/// applied by the caller with [`ParamStore::apply_stat_updates`].
pub struct Session<'s, T: Real> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    track_grads: bool,
    bound: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Session {
            graph: Graph::new(),
            store,
            mode,
            track_grads: mode == Mode::Train,
            bound: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    /// Overrides whether parameter leaves require gradients.
    pub fn with_param_grads(mut self, on: bool) -> Self {
        self.track_grads = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let entry = self.store.entry(id);
        let v = self
            .graph
            .leaf(entry.value.clone(), entry.trainable && self.track_grads)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate<T>) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradients of all bound trainable parameters, in parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.graph.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
