//! Cross-modal alignment and fusion.
//!
//! Both modalities pass through one shared LP-BN-SN layer and are padded with
//! zero tokens to a common count. The cross state-space fusion lets skeleton
//! spikes gate token mixing of a state-space pass over event spikes, with an
//! OR residual to the event stream.

use rand_chacha::ChaCha8Rng;

use crate::ctx::{Ctx, ParamStore};
use crate::energy::LayerKind;
use crate::error::{invalid, Result};
use crate::event::StateSpace;
use crate::neurons::{spike_or, LpBn, LpBnSn, Sn};
use crate::tensor::Var;

/// Shared-weight alignment of the two modalities.
#[derive(Clone, Debug)]
pub struct Align {
    pub mlp: LpBnSn,
}

impl Align {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self { mlp: LpBnSn::new(store, &format!("{name}.mlp"), dim, dim, LayerKind::SnnFc, rng)? })
    }

    /// Aligns one modality and pads its token axis to `tokens`.
    pub fn forward_one(&self, ctx: &mut Ctx, x: Var, tokens: usize) -> Result<Var> {
        let y = self.mlp.forward(ctx, x)?;
        pad_tokens(ctx, y, tokens)
    }

    /// `(skeleton, event)` aligned to `max(V, V_p)` tokens.
    pub fn forward(&self, ctx: &mut Ctx, skeleton: Var, event: Var) -> Result<(Var, Var)> {
        let tokens = ctx.value(skeleton).shape()[2].max(ctx.value(event).shape()[2]);
        let s = self.forward_one(ctx, skeleton, tokens)?;
        let e = self.forward_one(ctx, event, tokens)?;
        Ok((s, e))
    }
}

/// Zero-pads axis 2 of `[batch, time, tokens, channels]` up to `tokens`.
pub fn pad_tokens(ctx: &mut Ctx, x: Var, tokens: usize) -> Result<Var> {
    let sh = ctx.value(x).shape();
    if sh.len() != 4 {
        return Err(invalid(format!("expected [batch, time, tokens, channels], got {sh:?}")));
    }
    if sh[2] > tokens {
        return Err(invalid(format!("cannot pad {} tokens down to {tokens}", sh[2])));
    }
    if sh[2] == tokens {
        return Ok(x);
    }
    Ok(ctx.tape.pad_axis(x, 2, tokens))
}

/// Cross state-space fusion. The skeleton drives the gate
/// `g = SN(BN(LP(x_s)))`, the event stream drives the recurrence
/// `y = ssm(x_e)`, and per time step the tokens are mixed by the gate
/// affinity: `z = g·gᵀ·y / V'`, then LP-BN-SN. Output `OR(x_e, z)`.
#[derive(Clone, Debug)]
pub struct CrossMamba {
    pub name: String,
    pub gate: LpBn,
    pub gate_sn: Sn,
    pub ssm: StateSpace,
    pub out: LpBnSn,
    pub dim: usize,
}

/// Intermediates of a fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct CrossParts {
    pub gate: Var,
    pub state: Var,
    /// Token-mixed features before the output projection.
    pub interaction: Var,
    pub projected: Var,
    pub out: Var,
}

impl CrossMamba {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, state_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            gate: LpBn::new(store, &format!("{name}.gate"), dim, dim, LayerKind::SnnFc, rng)?,
            gate_sn: Sn::new(store, &format!("{name}.gate.sn"))?,
            ssm: StateSpace::new(store, &format!("{name}.ssm"), dim, state_dim, rng)?,
            out: LpBnSn::new(store, &format!("{name}.out"), dim, dim, LayerKind::SnnFc, rng)?,
            dim,
        })
    }

    /// `selective` feeds the gate, `state` feeds the recurrence and the residual.
    pub fn forward_parts(&self, ctx: &mut Ctx, selective: Var, state: Var) -> Result<CrossParts> {
        let (ss, se) = (ctx.value(selective).shape().to_vec(), ctx.value(state).shape().to_vec());
        if ss != se || ss.len() != 4 || ss[3] != self.dim {
            return Err(invalid(format!("fusion inputs must share shape [batch, time, tokens, {}]: {ss:?} vs {se:?}", self.dim)));
        }
        let tokens = ss[2];
        let g = self.gate.forward(ctx, selective)?;
        let g = self.gate_sn.forward(ctx, g)?;
        let y = self.ssm.forward(ctx, state)?;
        let flops = 4.0 * (tokens * tokens * self.dim) as f64;
        ctx.record_layer(&format!("{}.interact", self.name), LayerKind::SnnFc, flops, g);
        let affinity = ctx.tape.bmm(g, g, true);
        let mixed = ctx.tape.bmm(affinity, y, false);
        let interaction = ctx.tape.scale(mixed, 1.0 / tokens as f64);
        let projected = self.out.forward(ctx, interaction)?;
        let out = spike_or(ctx, &format!("{}.residual", self.name), &[state, projected]);
        Ok(CrossParts { gate: g, state: y, interaction, projected, out })
    }

    pub fn forward(&self, ctx: &mut Ctx, skeleton: Var, event: Var) -> Result<Var> {
        Ok(self.forward_parts(ctx, skeleton, event)?.out)
    }
}

/// Baseline fusion: elementwise OR of the aligned modalities.
pub fn direct_addition(ctx: &mut Ctx, skeleton: Var, event: Var) -> Result<Var> {
    if ctx.value(skeleton).shape() != ctx.value(event).shape() {
        return Err(invalid("direct addition needs aligned shapes"));
    }
    Ok(spike_or(ctx, "fusion.add", &[skeleton, event]))
}
