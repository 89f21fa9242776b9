//! Leaky integrate-and-fire dynamics and the layers built on them.
//!
//! Spike tensors are laid out `[batch, time, ...]`; every spiking layer runs
//! its membrane state along axis 1 and normalises over all other axes but the
//! last (channel) one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ctx::{Ctx, ParamId, ParamStore};
use crate::energy::LayerKind;
use crate::error::{invalid, numeric, Result};
use crate::tensor::{Tensor, Var};

pub const V_THRESHOLD: f64 = 0.5;
pub const V_RESET: f64 = 0.0;
pub const SURROGATE_WIDTH: f64 = 1.0;
pub const TAU_INIT: f64 = 2.0;
/// Logit at which `1/σ(w)` rounds to exactly 1 in f64.
const MEMORYLESS_LOGIT: f64 = 40.0;

/// Logit `w` with `1/σ(w) = τ`; `τ` must be at least 1.
pub fn tau_logit(tau: f64) -> Result<f64> {
    if !(tau >= 1.0) || !tau.is_finite() {
        return Err(invalid(format!("time constant {tau} must be finite and at least 1")));
    }
    if tau == 1.0 {
        return Ok(MEMORYLESS_LOGIT);
    }
    let p = 1.0 / tau;
    Ok((p / (1.0 - p)).ln())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub tau: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self { tau: TAU_INIT, v_threshold: V_THRESHOLD, v_reset: V_RESET }
    }
}

/// One LIF update: `v_mid = v + (input − v)/τ`, spike where `v_mid > v_th`,
/// hard reset of the spiking neurons.
pub fn lif_step(v: &Tensor, input: &Tensor, p: &LifParams) -> Result<(Tensor, Tensor)> {
    if v.shape() != input.shape() {
        return Err(invalid(format!("membrane {:?} vs input {:?}", v.shape(), input.shape())));
    }
    if !input.all_finite() {
        return Err(numeric("non-finite LIF input"));
    }
    let mut next = Vec::with_capacity(v.len());
    let mut spikes = Vec::with_capacity(v.len());
    for (&vi, &xi) in v.data().iter().zip(input.data()) {
        let mid = vi + (xi - vi) / p.tau;
        if mid > p.v_threshold {
            spikes.push(1.0);
            next.push(p.v_reset);
        } else {
            spikes.push(0.0);
            next.push(mid);
        }
    }
    Ok((Tensor::new(v.shape(), next)?, Tensor::new(v.shape(), spikes)?))
}

/// Heaviside spike and its rectangular surrogate derivative at `u`.
pub fn spike_with_surrogate(u: f64, v_threshold: f64) -> (f64, f64) {
    let s = if u > v_threshold { 1.0 } else { 0.0 };
    let g = if (u - v_threshold).abs() <= SURROGATE_WIDTH / 2.0 { 1.0 } else { 0.0 };
    (s, g)
}

pub fn firing_rate(spikes: &Tensor) -> f64 {
    spikes.mean()
}

/// Fails unless every element is exactly 0 or 1.
pub fn check_binary(name: &str, t: &Tensor) -> Result<()> {
    match t.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        None => Ok(()),
        Some(i) => Err(numeric(format!("`{name}` is not binary at element {i}: {}", t.data()[i]))),
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("non-empty shape")
}

/// Dense projection over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kind: LayerKind,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        kind: LayerKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.trainable(&format!("{name}.w"), uniform(rng, &[in_dim, out_dim], bound))?;
        let b = if bias {
            Some(store.trainable(&format!("{name}.b"), uniform(rng, &[out_dim], bound))?)
        } else {
            None
        };
        Ok(Self { name: name.to_string(), w, b, in_dim, out_dim, kind })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.value(x).shape().to_vec();
        if *shape.last().unwrap() != self.in_dim {
            return Err(invalid(format!(
                "`{}` expects {} input channels, got {:?}",
                self.name, self.in_dim, shape
            )));
        }
        let rows = ctx.value(x).len() / self.in_dim;
        let batch = shape[0];
        let per_sample = (rows / batch) as f64;
        let flops = 2.0 * per_sample * (self.in_dim * self.out_dim) as f64;
        let flops = if self.kind == LayerKind::FirstLp { flops } else { flops / ctx.time_steps() as f64 };
        ctx.record_layer(&self.name, self.kind, flops, x);
        let w = ctx.param(self.w);
        let mut y = ctx.tape.linear(x, w);
        if let Some(b) = self.b {
            let b = ctx.param(b);
            y = ctx.tape.add_bias(y, b);
        }
        Ok(y)
    }
}

/// Per-channel batch normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            gamma: store.trainable(&format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.trainable(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]))?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        let store = ctx.store();
        let (rm, rv) = (store.get(self.running_mean), store.get(self.running_var));
        if ctx.value(x).last_dim() != rm.len() {
            return Err(invalid(format!("`{}` expects {} channels", self.name, rm.len())));
        }
        if ctx.is_train() {
            let (y, mean, var) = ctx.tape.batch_norm(x, gamma, beta, self.eps, None);
            let n = (ctx.value(x).len() / rm.len()) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean: Vec<f64> = rm.data().iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            let new_var: Vec<f64> = rv.data().iter().zip(&var).map(|(r, b)| (1.0 - m) * r + m * b * unbias).collect();
            ctx.queue_update(self.running_mean, Tensor::from_vec(new_mean));
            ctx.queue_update(self.running_var, Tensor::from_vec(new_var));
            Ok(y)
        } else {
            let (y, _, _) = ctx.tape.batch_norm(x, gamma, beta, self.eps, Some((rm.data(), rv.data())));
            Ok(y)
        }
    }
}

/// Multi-step LIF spiking layer with a learnable, per-layer time constant
/// `τ = 1/σ(w)`, which keeps `τ > 1`.
#[derive(Clone, Debug)]
pub struct Sn {
    pub name: String,
    pub tau_logit: ParamId,
}

impl Sn {
    pub fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        let w = tau_logit(TAU_INIT)?;
        let tau_logit = store.trainable(&format!("{name}.tau_logit"), Tensor::scalar(w))?;
        Ok(Self { name: name.to_string(), tau_logit })
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        1.0 / crate::tensor::sigmoid(store.get(self.tau_logit).item())
    }

    pub fn set_tau(&self, store: &mut ParamStore, tau: f64) -> Result<()> {
        store.set(self.tau_logit, Tensor::scalar(tau_logit(tau)?))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        if ctx.value(x).ndim() < 2 {
            return Err(invalid(format!("`{}` needs [batch, time, ...] input", self.name)));
        }
        if !ctx.value(x).all_finite() {
            return Err(numeric(format!("non-finite input to `{}`", self.name)));
        }
        let w = ctx.param(self.tau_logit);
        let rate = ctx.tape.sigmoid(w);
        let tau = ctx.tape.recip(rate);
        let s = ctx.tape.lif(x, tau, V_THRESHOLD, V_RESET, SURROGATE_WIDTH);
        ctx.record_spikes(&self.name, s);
        Ok(s)
    }
}

/// Linear projection, optional batch norm, spiking activation. The projection
/// has no bias; batch norm supplies the offset.
#[derive(Clone, Debug)]
pub struct LpBnSn {
    pub lp: Linear,
    pub bn: Option<BatchNorm>,
    pub sn: Sn,
}

impl LpBnSn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kind: LayerKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            lp: Linear::new(store, &format!("{name}.lp"), in_dim, out_dim, false, kind, rng)?,
            bn: Some(BatchNorm::new(store, &format!("{name}.bn"), out_dim)?),
            sn: Sn::new(store, &format!("{name}.sn"))?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut y = self.lp.forward(ctx, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(ctx, y)?;
        }
        self.sn.forward(ctx, y)
    }

    pub fn out_dim(&self) -> usize {
        self.lp.out_dim
    }
}

/// Bias-free linear projection followed by batch norm, real-valued output.
#[derive(Clone, Debug)]
pub struct LpBn {
    pub lp: Linear,
    pub bn: BatchNorm,
}

impl LpBn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kind: LayerKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            lp: Linear::new(store, &format!("{name}.lp"), in_dim, out_dim, false, kind, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_dim)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.lp.forward(ctx, x)?;
        self.bn.forward(ctx, y)
    }
}

/// Elementwise OR of spike tensors: threshold their sum at `V_THRESHOLD`.
pub fn spike_or(ctx: &mut Ctx, name: &str, xs: &[Var]) -> Var {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = ctx.tape.add(acc, x);
    }
    let s = ctx.tape.heaviside(acc, V_THRESHOLD, SURROGATE_WIDTH);
    ctx.record_spikes(name, s);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn silent_neuron_stays_silent() {
        let (v, s) = lif_step(&Tensor::zeros(&[3]), &Tensor::zeros(&[3]), &LifParams::default()).unwrap();
        assert_eq!(v.data(), &[0.0; 3]);
        assert_eq!(s.data(), &[0.0; 3]);
    }

    #[test]
    fn forced_fire_resets() {
        let p = LifParams { tau: 1.0, ..Default::default() };
        let (v, s) = lif_step(&Tensor::zeros(&[1]), &Tensor::ones(&[1]), &p).unwrap();
        assert_eq!(s.data(), &[1.0]);
        assert_eq!(v.data(), &[0.0]);
    }

    #[test]
    fn constant_drive_matches_scalar_recurrence() {
        let p = LifParams::default();
        let mut v = Tensor::zeros(&[1]);
        let mut got = Vec::new();
        for _ in 0..10 {
            let (nv, s) = lif_step(&v, &Tensor::scalar(0.3), &p).unwrap();
            got.push(s.item());
            v = nv;
        }
        // Hand recurrence: v ← v + (0.3 − v)/2, fire above 0.5.
        let mut want = Vec::new();
        let mut u: f64 = 0.0;
        for _ in 0..10 {
            let mid = u + (0.3 - u) / 2.0;
            if mid > 0.5 {
                want.push(1.0);
                u = 0.0;
            } else {
                want.push(0.0);
                u = mid;
            }
        }
        assert_eq!(got, want);
        // v approaches 0.3 from below, so a 0.3 drive never fires.
        assert!(want.iter().all(|&s| s == 0.0));

        let mut v = Tensor::zeros(&[1]);
        let mut times = Vec::new();
        for t in 0..10 {
            let (nv, s) = lif_step(&v, &Tensor::scalar(0.8), &p).unwrap();
            if s.item() == 1.0 {
                times.push(t);
            }
            v = nv;
        }
        // 0.4, 0.6 → fire; the cycle repeats every two steps.
        assert_eq!(times, vec![1, 3, 5, 7, 9]);
    }

    #[test]
    fn lif_step_rejects_bad_input() {
        let p = LifParams::default();
        assert!(lif_step(&Tensor::zeros(&[2]), &Tensor::zeros(&[3]), &p).is_err());
        assert!(lif_step(&Tensor::zeros(&[1]), &Tensor::scalar(f64::NAN), &p).is_err());
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(spike_with_surrogate(0.6, 0.5), (1.0, 1.0));
        assert_eq!(spike_with_surrogate(-2.0, 0.5), (0.0, 0.0));
    }

    #[test]
    fn zero_weights_give_no_spikes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = LpBnSn::new(&mut store, "l", 3, 4, LayerKind::SnnFc, &mut rng).unwrap();
        store.set(layer.lp.w, Tensor::zeros(&[3, 4])).unwrap();
        let mut ctx = Ctx::train(&store, 0, 0.0);
        let x = ctx.constant(Tensor::full(&[2, 5, 3], 0.7));
        let y = layer.forward(&mut ctx, x).unwrap();
        assert!(ctx.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_tau_identity_layer_thresholds_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut layer = LpBnSn::new(&mut store, "l", 2, 2, LayerKind::SnnFc, &mut rng).unwrap();
        layer.bn = None;
        store.set(layer.lp.w, Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        layer.sn.set_tau(&mut store, 1.0).unwrap();
        let pattern: Vec<f64> = (0..12).map(|i| ((i / 2) % 2) as f64).collect();
        let mut ctx = Ctx::eval(&store);
        let x = ctx.constant(Tensor::new(&[1, 6, 2], pattern.clone()).unwrap());
        let y = layer.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.value(y).data(), &pattern[..]);
    }

    #[test]
    fn wrong_width_is_invalid_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = LpBnSn::new(&mut store, "l", 3, 4, LayerKind::SnnFc, &mut rng).unwrap();
        let mut ctx = Ctx::train(&store, 0, 0.0);
        let x = ctx.constant(Tensor::zeros(&[1, 2, 5]));
        assert!(matches!(layer.forward(&mut ctx, x), Err(crate::Error::InvalidInput(_))));
    }
}
