//! Training and evaluation loops.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctx::{Ctx, ParamId, ParamKind, ParamStore, Sampling};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::{argmax_rows, Model, ModelConfig, Toggles};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            epochs: 60,
            milestones: vec![40, 50],
            lr_decay: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(invalid("learning rate and weight decay must be nonnegative, momentum in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

/// SGD with (optionally Nesterov) momentum and coupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], cfg: &TrainConfig, lr: f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let v = self.velocity[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gi + cfg.weight_decay * *w;
                *vi = cfg.momentum * *vi + d;
                let upd = if cfg.nesterov { d + cfg.momentum * *vi } else { *vi };
                *w -= lr * upd;
            }
        }
    }
}

/// Per-epoch record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub kl1: f64,
    pub kl2: f64,
    pub cos1: f64,
    pub cos2: f64,
    pub total: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Mean firing rate of each bottleneck code.
    pub fr_b1: f64,
    pub fr_b2: f64,
}

impl EpochMetrics {
    /// One `key=value` line.
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "epoch={} lr={:?} ce={:?} kl1={:?} kl2={:?} cos1={:?} cos2={:?} total={:?} train_acc={:?} fr_b1={:?} fr_b2={:?}",
            self.epoch, self.lr, self.ce, self.kl1, self.kl2, self.cos1, self.cos2, self.total, self.train_acc, self.fr_b1, self.fr_b2
        );
        if let Some(v) = self.val_acc {
            let _ = write!(s, " val_acc={v:?}");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub ce: f64,
    pub predictions: Vec<usize>,
    pub fr_b1: f64,
    pub fr_b2: f64,
}

fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    seed ^ ((epoch as u64) << 32 | step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains in place. `on_epoch` sees each epoch's metrics as they complete.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut opt = Sgd::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle);
        let mut m = EpochMetrics { epoch, lr, ..Default::default() };
        let (mut correct, mut seen, mut steps) = (0usize, 0usize, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.batch(chunk)?;
            let (grads, pending, stats) = {
                let mut ctx = Ctx::build(store, true, step_seed(cfg.seed, epoch, step), Sampling::Bernoulli, model.cfg.dropout);
                let out = model.forward(&mut ctx, &batch)?;
                let loss = model.loss(&mut ctx, &out, &batch.labels)?;
                let total = ctx.value(loss).item();
                if !total.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        reason: format!("loss is {total}"),
                        last_finite: history.last().map(EpochMetrics::to_line),
                    });
                }
                ctx.tape.backward(loss)?;
                let preds = argmax_rows(ctx.value(out.logits));
                let hits = preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
                let mut s = StepStats { ce: total, total, hits, n: chunk.len(), ..Default::default() };
                if let Some((a, b)) = out.stages {
                    s.kl1 = ctx.value(a.kl).item();
                    s.kl2 = ctx.value(b.kl).item();
                    s.cos1 = ctx.value(a.cosine).item();
                    s.cos2 = ctx.value(b.cosine).item();
                    s.fr1 = ctx.value(a.code).mean();
                    s.fr2 = ctx.value(b.code).mean();
                    let dib = (s.kl1 - model.cfg.dib.lambda1 * s.cos1) + (s.kl2 - model.cfg.dib.lambda2 * s.cos2);
                    s.ce = total - model.cfg.dib.alpha * dib;
                }
                let grads = ctx.param_grads();
                if grads.iter().any(|(_, g)| !g.all_finite()) {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        reason: "non-finite gradient".into(),
                        last_finite: history.last().map(EpochMetrics::to_line),
                    });
                }
                (grads, ctx.take_pending(), s)
            };
            opt.step(store, &grads, cfg, lr);
            store.apply_pending(pending);
            store.project();
            m.ce += stats.ce;
            m.kl1 += stats.kl1;
            m.kl2 += stats.kl2;
            m.cos1 += stats.cos1;
            m.cos2 += stats.cos2;
            m.total += stats.total;
            m.fr_b1 += stats.fr1;
            m.fr_b2 += stats.fr2;
            correct += stats.hits;
            seen += stats.n;
            steps += 1;
        }
        let k = steps as f64;
        for v in [&mut m.ce, &mut m.kl1, &mut m.kl2, &mut m.cos1, &mut m.cos2, &mut m.total, &mut m.fr_b1, &mut m.fr_b2] {
            *v /= k;
        }
        m.train_acc = correct as f64 / seen as f64;
        if let Some(v) = val {
            m.val_acc = Some(evaluate(model, store, v)?.accuracy);
        }
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

#[derive(Clone, Copy, Debug, Default)]
struct StepStats {
    ce: f64,
    kl1: f64,
    kl2: f64,
    cos1: f64,
    cos2: f64,
    total: f64,
    fr1: f64,
    fr2: f64,
    hits: usize,
    n: usize,
}

/// Deterministic inference (running statistics, no sampling, no dropout).
pub fn evaluate(model: &Model, store: &ParamStore, data: &Dataset) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    const CHUNK: usize = 32;
    let (mut ce, mut fr1, mut fr2) = (0.0, 0.0, 0.0);
    let mut predictions = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let batch = data.batch(chunk)?;
        let mut ctx = Ctx::eval(store);
        let out = model.forward(&mut ctx, &batch)?;
        let loss = ctx.tape.cross_entropy(out.logits, &batch.labels)?;
        let w = chunk.len() as f64;
        ce += ctx.value(loss).item() * w;
        if let Some((a, b)) = out.stages {
            fr1 += ctx.value(a.code).mean() * w;
            fr2 += ctx.value(b.code).mean() * w;
        }
        predictions.extend(argmax_rows(ctx.value(out.logits)));
    }
    let n = data.len() as f64;
    let hits = predictions.iter().zip(&data.samples).filter(|(p, s)| **p == s.label).count();
    Ok(EvalResult { accuracy: hits as f64 / n, ce: ce / n, predictions, fr_b1: fr1 / n, fr_b2: fr2 / n })
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    pub params: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub sops: f64,
    pub energy_mj: f64,
}

impl AblationRow {
    pub fn to_line(&self) -> String {
        let t = self.toggles;
        format!(
            "row={} sgn={} mamba={} sse={} scm={} dib={} params={} train_acc={:?} test_acc={:?} sops={:?} energy_mj={:?}",
            self.name, t.sgn, t.mamba, t.sse, t.scm, t.dib, self.params, self.train_acc, self.test_acc, self.sops, self.energy_mj
        )
    }
}

/// Trains and evaluates one model per toggle row, all from the same seeds.
pub fn ablate(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    grid: &[(String, Toggles)],
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(invalid("ablation grid is empty"));
    }
    grid.iter()
        .map(|(name, toggles)| {
            let cfg = ModelConfig { toggles: *toggles, ..base.clone() };
            let (model, mut store) = Model::new(cfg, train_cfg.seed)?;
            train(&model, &mut store, train_cfg, train_set, None, |_| {})?;
            let train_acc = evaluate(&model, &store, train_set)?.accuracy;
            let test_acc = evaluate(&model, &store, test_set)?.accuracy;
            let probe: Vec<usize> = (0..test_set.len().min(8)).collect();
            let report = model.energy(&store, &test_set.batch(&probe)?)?;
            Ok(AblationRow {
                name: name.clone(),
                toggles: *toggles,
                params: count_parameters(&store),
                train_acc,
                test_acc,
                sops: report.total_sops,
                energy_mj: report.total_mj(),
            })
        })
        .collect()
}

/// Number of trainable scalars.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.entries().iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.value.len()).sum()
}
