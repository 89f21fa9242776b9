//! Two-stage discretised information bottleneck.
//!
//! Each stage encodes its input to a binary code `B`, predicts per-element
//! firing probabilities `P̂`, and pays a Bernoulli KL against a per-channel EMA
//! prior `Q̂`. During training `B` is flipped by a sampled mask
//! `Γ ~ Bernoulli(σ(W·B + b))`, and a projection of the flipped code is pulled
//! towards a modality target through a cosine term.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ctx::{Ctx, ParamId, ParamStore, Sampling};
use crate::energy::LayerKind;
use crate::error::{invalid, numeric, Result};
use crate::neurons::{LpBn, LpBnSn, Linear};
use crate::tensor::{Tensor, Var};

/// Clamp margin for probabilities.
pub const DELTA: f64 = 1e-6;
pub const COSINE_EPS: f64 = 1e-6;
pub const EMA_MOMENTUM: f64 = 0.99;
pub const PRIOR_INIT: f64 = 0.5;
/// Initial sampler bias; keeps early flips rare.
pub const SAMPLER_BIAS_INIT: f64 = -4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DibConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub momentum: f64,
}

impl Default for DibConfig {
    fn default() -> Self {
        Self { lambda1: 0.5, lambda2: 0.6, alpha: 0.05, momentum: EMA_MOMENTUM }
    }
}

impl DibConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("alpha", self.alpha)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(invalid(format!("EMA momentum must lie in (0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(DELTA, 1.0 - DELTA)
}

/// One EMA step of the prior towards a per-channel batch mean.
pub fn ema_update(prior: &[f64], batch_mean: &[f64], momentum: f64) -> Vec<f64> {
    prior
        .iter()
        .zip(batch_mean)
        .map(|(q, p)| clamp_probability(momentum * q + (1.0 - momentum) * p))
        .collect()
}

/// Mean over all elements of the Bernoulli KL `KL(p ‖ q)`, with `q` given per
/// channel (last axis).
pub fn discrete_kl(p: &Tensor, q: &[f64]) -> Result<f64> {
    if q.len() != p.last_dim() {
        return Err(invalid(format!("prior has {} channels, posterior {}", q.len(), p.last_dim())));
    }
    let open = |v: f64| v > 0.0 && v < 1.0;
    if !p.data().iter().chain(q).all(|&v| open(v)) {
        return Err(invalid("probabilities must lie strictly inside (0, 1)"));
    }
    let c = q.len();
    let total: f64 = p
        .data()
        .iter()
        .enumerate()
        .map(|(i, &pi)| {
            let qi = q[i % c];
            pi * (pi / qi).ln() + (1.0 - pi) * ((1.0 - pi) / (1.0 - qi)).ln()
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// Draws `Γ ~ Bernoulli(π)` and returns `(Γ, B ⊕ Γ)`.
pub fn xor_sample(b: &Tensor, pi: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    if b.shape() != pi.shape() {
        return Err(invalid(format!("code {:?} and probabilities {:?} differ in shape", b.shape(), pi.shape())));
    }
    let draws: Vec<f64> = pi.data().iter().map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect();
    let gamma = Tensor::new(pi.shape(), draws)?;
    let flipped = xor(b, &gamma)?;
    Ok((gamma, flipped))
}

pub fn xor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(invalid("xor operands differ in shape"));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| if (x != 0.0) != (y != 0.0) { 1.0 } else { 0.0 }).collect();
    Tensor::new(a.shape(), data)
}

/// Batch mean of `⟨a/(‖a‖+ε), b/(‖b‖+ε)⟩` over samples (axis 0).
pub fn cosine_retention(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("cosine operands {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let batch = a.shape()[0];
    let per = a.len() / batch;
    let total: f64 = (0..batch)
        .map(|s| crate::tensor::cosine_eps(&a.data()[s * per..(s + 1) * per], &b.data()[s * per..(s + 1) * per], COSINE_EPS))
        .sum();
    Ok(total / batch as f64)
}

/// Closed-form minimum of `KL(N(μ, σ²) ‖ N(0, 1))` subject to
/// `P(z > 0) = π`, i.e. `μ/σ = a = Φ⁻¹(π)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKlReference {
    pub pi: f64,
    pub a: f64,
    pub min_kl: f64,
    pub sigma2_star: f64,
    pub mu_star: f64,
}

pub fn probit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(format!("probit needs p in (0, 1), got {p}")));
    }
    Ok(Normal::standard().inverse_cdf(p))
}

pub fn min_gaussian_kl_reference(pi: f64) -> Result<GaussianKlReference> {
    let a = probit(pi)?;
    let s = 1.0 + a * a;
    Ok(GaussianKlReference {
        pi,
        a,
        min_kl: 0.5 * s.ln(),
        sigma2_star: 1.0 / s,
        // μ = a·σ on the constraint set.
        mu_star: a / s.sqrt(),
    })
}

/// Graph handles of one bottleneck stage.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub code: Var,
    pub probs: Var,
    pub logits: Var,
    pub flipped: Var,
    pub kl: Var,
    pub cosine: Var,
    /// `KL − λ·cos`.
    pub loss: Var,
}

#[derive(Clone, Debug)]
pub struct DibStage {
    pub name: String,
    pub index: usize,
    pub encoder: LpBnSn,
    pub head: LpBn,
    pub sampler: Linear,
    pub prior: ParamId,
    pub psi: LpBnSn,
    pub readout: Linear,
    pub lambda: f64,
    pub momentum: f64,
}

impl DibStage {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        index: usize,
        dim: usize,
        lambda: f64,
        momentum: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let sampler = Linear::new(store, &format!("{name}.sampler"), dim, dim, true, LayerKind::SnnFc, rng)?;
        store.set(sampler.b.expect("sampler has a bias"), Tensor::full(&[dim], SAMPLER_BIAS_INIT))?;
        Ok(Self {
            name: name.to_string(),
            index,
            encoder: LpBnSn::new(store, &format!("{name}.enc"), dim, dim, LayerKind::SnnFc, rng)?,
            head: LpBn::new(store, &format!("{name}.head"), dim, dim, LayerKind::SnnFc, rng)?,
            sampler,
            prior: store.buffer(&format!("{name}.prior"), Tensor::full(&[dim], PRIOR_INIT))?,
            psi: LpBnSn::new(store, &format!("{name}.psi"), dim, dim, LayerKind::SnnFc, rng)?,
            readout: Linear::new(store, &format!("{name}.psi.readout"), dim, dim, true, LayerKind::SnnFc, rng)?,
            lambda,
            momentum,
        })
    }

    /// Code and clamped probabilities; queues the prior update in training.
    pub fn encode(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let code = self.encoder.forward(ctx, x)?;
        let h = self.head.forward(ctx, code)?;
        let p = ctx.tape.sigmoid(h);
        let p = ctx.tape.clamp(p, DELTA, 1.0 - DELTA);
        if !ctx.value(p).all_finite() {
            return Err(numeric(format!("non-finite probabilities in `{}`", self.name)));
        }
        let vp = ctx.value(p);
        let c = vp.last_dim();
        let rows = (vp.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for (i, v) in vp.data().iter().enumerate() {
            mean[i % c] += v / rows;
        }
        let prior = ctx.store().get(self.prior).data().to_vec();
        ctx.queue_update(self.prior, Tensor::from_vec(ema_update(&prior, &mean, self.momentum)));
        Ok((code, p))
    }

    /// Mask for this stage, or `None` when sampling is bypassed.
    fn mask(&self, ctx: &mut Ctx, logits: Var) -> Result<Option<Tensor>> {
        if !ctx.is_train() {
            return Ok(None);
        }
        match ctx.sampling().clone() {
            Sampling::Off => Ok(None),
            Sampling::Fixed(_) => {
                let g = ctx
                    .fixed_gamma(self.index)
                    .ok_or_else(|| invalid(format!("no fixed mask for stage {}", self.index)))?
                    .clone();
                if g.shape() != ctx.value(logits).shape() {
                    return Err(invalid(format!("fixed mask for stage {} has the wrong shape", self.index)));
                }
                Ok(Some(g))
            }
            Sampling::Bernoulli => {
                let pi = ctx.value(logits).map(|z| 1.0 / (1.0 + (-z).exp()));
                let rng = ctx.rng();
                let draws = pi.data().iter().map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect();
                Ok(Some(Tensor::new(pi.shape(), draws)?))
            }
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, target: Var) -> Result<StageOutput> {
        let (code, probs) = self.encode(ctx, x)?;
        let prior = ctx.store().get(self.prior).data().to_vec();
        let kl = ctx.tape.discrete_kl(probs, &prior);
        let logits = self.sampler.forward(ctx, code)?;
        let flipped = match self.mask(ctx, logits)? {
            Some(gamma) => {
                ctx.record_gamma(gamma.clone());
                ctx.tape.xor_st(code, logits, &gamma)
            }
            None => code,
        };
        ctx.record_spikes(&format!("{}.flipped", self.name), flipped);
        let h = self.psi.forward(ctx, flipped)?;
        let proj = self.readout.forward(ctx, h)?;
        if ctx.value(proj).shape() != ctx.value(target).shape() {
            return Err(invalid(format!("`{}` target shape does not match the code", self.name)));
        }
        let cosine = ctx.tape.cosine(proj, target, COSINE_EPS);
        let weighted = ctx.tape.scale(cosine, self.lambda);
        let loss = ctx.tape.sub(kl, weighted);
        Ok(StageOutput { code, probs, logits, flipped, kl, cosine, loss })
    }
}

/// Pools a code over every axis but batch and channel, applies dropout in
/// training and projects to class logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub fc: Linear,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self { fc: Linear::new(store, name, dim, classes, true, LayerKind::SnnFc, rng)? })
    }

    pub fn forward(&self, ctx: &mut Ctx, code: Var) -> Result<Var> {
        let pooled = ctx.tape.mean_middle(code);
        let pooled = dropout(ctx, pooled);
        self.fc.forward(ctx, pooled)
    }
}

/// Inverted dropout with the context's rate; identity outside training.
pub fn dropout(ctx: &mut Ctx, x: Var) -> Var {
    let p = ctx.dropout();
    if !ctx.is_train() || p <= 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - p);
    let shape = ctx.value(x).shape().to_vec();
    let n = ctx.value(x).len();
    let mask: Vec<f64> = (0..n).map(|_| if ctx.rng().random::<f64>() < p { 0.0 } else { keep }).collect();
    let m = ctx.constant(Tensor::new(&shape, mask).expect("mask matches input"));
    ctx.tape.mul(x, m)
}

/// `CE + α·(L₁ + L₂)`; the bottleneck terms are optional.
pub fn total_loss(ctx: &mut Ctx, logits: Var, labels: &[usize], dib: Option<(Var, Var)>, alpha: f64) -> Result<Var> {
    if !ctx.value(logits).all_finite() {
        return Err(numeric("non-finite logits"));
    }
    let ce = ctx.tape.cross_entropy(logits, labels)?;
    Ok(match dib {
        Some((l1, l2)) => {
            let s = ctx.tape.add(l1, l2);
            let s = ctx.tape.scale(s, alpha);
            ctx.tape.add(ce, s)
        }
        None => ce,
    })
}
