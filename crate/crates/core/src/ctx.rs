//! Named parameter storage and the per-forward recording context.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]. A forward pass borrows the
//! store immutably through a [`Ctx`]; state changes that a forward pass wants
//! to make (batch-norm running statistics, EMA priors) are queued as pending
//! updates and only applied by the trainer, so evaluation never mutates state.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::energy::LayerKind;
use crate::error::{invalid, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimised by gradient descent.
    Trainable,
    /// State carried between steps but not optimised (running stats, priors).
    Buffer,
}

/// Constraint re-imposed on a parameter after every optimiser step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    None,
    /// Elementwise lower bound.
    AtLeast(f64),
    /// Non-negative, positive diagonal, rows summing to one.
    RowStochastic,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub projection: Projection,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor, projection: Projection) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), kind, value, projection });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn trainable(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.add(name, ParamKind::Trainable, value, Projection::None)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.add(name, ParamKind::Buffer, value, Projection::None)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.value.len()).sum()
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(invalid(format!(
                "`{}` has shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn apply_pending(&mut self, pending: Vec<(ParamId, Tensor)>) {
        for (id, v) in pending {
            self.entries[id.0].value = v;
        }
    }

    /// Re-imposes every parameter's [`Projection`].
    pub fn project(&mut self) {
        for e in &mut self.entries {
            match e.projection {
                Projection::None => {}
                Projection::AtLeast(lo) => e.value.data_mut().iter_mut().for_each(|v| *v = v.max(lo)),
                Projection::RowStochastic => project_row_stochastic(&mut e.value),
            }
        }
    }
}

const MIN_DIAGONAL: f64 = 1e-3;
const ROW_SUM_TOL: f64 = 1e-12;

/// Clamps to non-negative entries with a positive diagonal, then rescales rows to sum to one.
/// Rows that already satisfy the constraints are left bit-for-bit unchanged.
pub fn project_row_stochastic(m: &mut Tensor) {
    let n = m.shape()[0];
    let d = m.data_mut();
    for i in 0..n {
        let row = &mut d[i * n..(i + 1) * n];
        let valid = row.iter().all(|&v| v >= 0.0) && row[i] >= MIN_DIAGONAL;
        if valid && (row.iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOL {
            continue;
        }
        row.iter_mut().for_each(|v| *v = v.max(0.0));
        row[i] = row[i].max(MIN_DIAGONAL);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

/// How the bottleneck's XOR masks are produced during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Sampling {
    /// Draw `Γ ~ Bernoulli(σ(W·B))`.
    Bernoulli,
    /// Skip the mask (`B̃ = B`), used for inference.
    Off,
    /// Use these masks in stage order; for gradient checking.
    Fixed(Vec<Tensor>),
}

/// One operation-count record collected during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    /// FLOPs per sample and time step, or per sample over the whole window for
    /// [`LayerKind::FirstLp`].
    pub flops: f64,
    /// Mean of the layer input over the batch.
    pub firing_rate: f64,
}

/// State for one forward pass.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    train: bool,
    bound: Vec<Option<Var>>,
    pending: Vec<(ParamId, Tensor)>,
    rng: ChaCha8Rng,
    sampling: Sampling,
    gammas: Vec<Tensor>,
    dropout: f64,
    spikes: Vec<(String, Var)>,
    records: Vec<LayerRecord>,
    time_steps: usize,
}

impl<'s> Ctx<'s> {
    /// Training-mode context: batch statistics, sampling on, dropout as given.
    pub fn train(store: &'s ParamStore, seed: u64, dropout: f64) -> Self {
        Self::build(store, true, seed, Sampling::Bernoulli, dropout)
    }

    /// Inference-mode context: running statistics, no sampling, no dropout.
    pub fn eval(store: &'s ParamStore) -> Self {
        Self::build(store, false, 0, Sampling::Off, 0.0)
    }

    pub fn build(store: &'s ParamStore, train: bool, seed: u64, sampling: Sampling, dropout: f64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            train,
            bound: vec![None; store.len()],
            pending: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            sampling,
            gammas: Vec::new(),
            dropout,
            spikes: Vec::new(),
            records: Vec::new(),
            time_steps: 1,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn sampling(&self) -> &Sampling {
        &self.sampling
    }

    /// Tape variable for a parameter; trainables become gradient leaves.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = match e.kind {
            ParamKind::Trainable => self.tape.leaf(e.value.clone()),
            ParamKind::Buffer => self.tape.constant(e.value.clone()),
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Queues a buffer update; ignored outside training.
    pub fn queue_update(&mut self, id: ParamId, value: Tensor) {
        if self.train {
            self.pending.push((id, value));
        }
    }

    pub fn take_pending(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.pending)
    }

    pub fn pending(&self) -> &[(ParamId, Tensor)] {
        &self.pending
    }

    pub fn record_gamma(&mut self, g: Tensor) {
        self.gammas.push(g);
    }

    /// Masks drawn so far, in stage order.
    pub fn gammas(&self) -> &[Tensor] {
        &self.gammas
    }

    /// The mask for the next stage under [`Sampling::Fixed`].
    pub fn fixed_gamma(&self, stage: usize) -> Option<&Tensor> {
        match &self.sampling {
            Sampling::Fixed(g) => g.get(stage),
            _ => None,
        }
    }

    pub fn record_spikes(&mut self, name: &str, v: Var) {
        self.spikes.push((name.to_string(), v));
    }

    /// Every spike tensor produced by the forward pass.
    pub fn spikes(&self) -> &[(String, Var)] {
        &self.spikes
    }

    pub fn set_time_steps(&mut self, t: usize) {
        self.time_steps = t.max(1);
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn record_layer(&mut self, name: &str, kind: LayerKind, flops: f64, input: Var) {
        let firing_rate = self.tape.value(input).mean().clamp(0.0, 1.0);
        self.records.push(LayerRecord { name: name.to_string(), kind, flops, firing_rate });
    }

    pub fn records(&self) -> &[LayerRecord] {
        &self.records
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if self.store.entries[i].kind != ParamKind::Trainable {
                    return None;
                }
                self.tape.grad(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }
}
