//! Event branch: the event stream and its file format, saturating time
//! binning, spiking patch splitting and the spiking state-space block.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ctx::{Ctx, ParamId, ParamStore};
use crate::energy::LayerKind;
use crate::error::{invalid, Error, Result};
use crate::neurons::{spike_or, uniform, BatchNorm, LpBn, LpBnSn, Sn};
use crate::tensor::{Tensor, Var};

pub const EVENT_MAGIC: &[u8; 8] = b"SPKEVT01";
const RECORD_BYTES: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    /// Frame channel: 0 for positive, 1 for negative.
    pub fn channel(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    /// Microseconds from clip start.
    pub t_us: u32,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn t_seconds(&self) -> f64 {
        self.t_us as f64 * 1e-6
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u16, height: u16) -> Self {
        Self { width, height, events: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.events.windows(2).all(|w| w[0].t_us <= w[1].t_us)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + RECORD_BYTES * self.events.len());
        out.extend_from_slice(EVENT_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&(self.events.len() as u32).to_le_bytes());
        for e in &self.events {
            out.extend_from_slice(&e.t_us.to_le_bytes());
            out.extend_from_slice(&e.x.to_le_bytes());
            out.extend_from_slice(&e.y.to_le_bytes());
            out.push(if e.polarity == Polarity::Positive { 1 } else { 0 });
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != EVENT_MAGIC {
            return Err(Error::Format("not an event file".into()));
        }
        let width = u16::from_le_bytes([bytes[8], bytes[9]]);
        let height = u16::from_le_bytes([bytes[10], bytes[11]]);
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + count * RECORD_BYTES {
            return Err(Error::Format(format!(
                "header declares {count} events, payload has {} bytes",
                bytes.len() - 16
            )));
        }
        let events = bytes[16..]
            .chunks_exact(RECORD_BYTES)
            .map(|r| {
                let polarity = match r[8] {
                    1 => Polarity::Positive,
                    0 => Polarity::Negative,
                    other => return Err(Error::Format(format!("polarity byte {other}"))),
                };
                Ok(Event {
                    t_us: u32::from_le_bytes(r[0..4].try_into().unwrap()),
                    x: u16::from_le_bytes([r[4], r[5]]),
                    y: u16::from_le_bytes([r[6], r[7]]),
                    polarity,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { width, height, events })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Binned frames and the number of events that fell outside the clip or frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BinnedEvents {
    /// `time × 2 × height × width`, values in {0, 1}.
    pub frames: Tensor,
    pub skipped: usize,
}

/// Saturating binning into `bins` equal slices of `[0, duration_us)`.
pub fn bin_events(stream: &EventStream, bins: usize, height: usize, width: usize, duration_us: u32) -> Result<BinnedEvents> {
    if bins == 0 || height == 0 || width == 0 || duration_us == 0 {
        return Err(invalid("binning needs positive bins, frame size and duration"));
    }
    if !stream.is_sorted() {
        return Err(invalid("event timestamps must be nondecreasing"));
    }
    let mut data = vec![0.0; bins * 2 * height * width];
    let mut skipped = 0;
    for e in &stream.events {
        let (x, y) = (e.x as usize, e.y as usize);
        if e.t_us >= duration_us || x >= width || y >= height {
            skipped += 1;
            continue;
        }
        let b = (e.t_us as u64 * bins as u64 / duration_us as u64) as usize;
        data[((b * 2 + e.polarity.channel()) * height + y) * width + x] = 1.0;
    }
    Ok(BinnedEvents { frames: Tensor::new(&[bins, 2, height, width], data)?, skipped })
}

/// `[batch, time, 2, H, W] → [batch, time, (H/p)·(W/p), 2·p·p]`, tokens in
/// row-major patch order, features ordered channel, row, column.
pub fn patchify(frames: &Tensor, patch: usize) -> Result<Tensor> {
    let sh = frames.shape();
    if sh.len() != 5 || sh[2] != 2 {
        return Err(invalid(format!("event frames must be [batch, time, 2, H, W], got {sh:?}")));
    }
    let (b, t, h, w) = (sh[0], sh[1], sh[3], sh[4]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid(format!("{h}×{w} frame not divisible into {patch}-pixel patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let feat = 2 * patch * patch;
    let mut out = vec![0.0; b * t * gh * gw * feat];
    let src = frames.data();
    for bt in 0..b * t {
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let tok = (y / patch) * gw + x / patch;
                    let f = (c * patch + y % patch) * patch + x % patch;
                    out[(bt * gh * gw + tok) * feat + f] = src[((bt * 2 + c) * h + y) * w + x];
                }
            }
        }
    }
    Tensor::new(&[b, t, gh * gw, feat], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub state_dim: usize,
    pub time: usize,
}

impl EventConfig {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }
}

/// Spiking patch splitting: a patch-strided projection and a 1×1 projection,
/// each followed by BN and SN.
#[derive(Clone, Debug)]
pub struct Sps {
    pub patch: usize,
    pub proj: LpBnSn,
    pub mix: LpBnSn,
}

impl Sps {
    pub fn new(store: &mut ParamStore, name: &str, patch: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            patch,
            proj: LpBnSn::new(store, &format!("{name}.proj"), 2 * patch * patch, dim, LayerKind::SnnConv, rng)?,
            mix: LpBnSn::new(store, &format!("{name}.mix"), dim, dim, LayerKind::SnnConv, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, frames: Var) -> Result<Var> {
        let tokens = patchify(ctx.value(frames), self.patch)?;
        let x = ctx.constant(tokens);
        let h = self.proj.forward(ctx, x)?;
        self.mix.forward(ctx, h)
    }
}

/// Diagonal state-space recurrence `h[t] = σ(decay_raw)∘h[t−1] + b·x[t]`,
/// `y[t] = Σ_n c·h[t]` along the time axis, with real-valued state.
#[derive(Clone, Debug)]
pub struct StateSpace {
    pub name: String,
    pub decay_raw: ParamId,
    pub b_in: ParamId,
    pub c_out: ParamId,
    pub dim: usize,
    pub state_dim: usize,
}

impl StateSpace {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, state_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = dim * state_dim;
        // Decays spread over roughly (0.5, 0.9).
        let decay: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.2)).collect();
        Ok(Self {
            name: name.to_string(),
            decay_raw: store.trainable(&format!("{name}.decay_raw"), Tensor::new(&[dim, state_dim], decay)?)?,
            b_in: store.trainable(&format!("{name}.b_in"), uniform(rng, &[dim, state_dim], 1.0))?,
            c_out: store.trainable(
                &format!("{name}.c_out"),
                uniform(rng, &[dim, state_dim], 1.0 / (state_dim as f64).sqrt()),
            )?,
            dim,
            state_dim,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let sh = ctx.value(x).shape().to_vec();
        if sh.len() != 4 || sh[3] != self.dim {
            return Err(invalid(format!("`{}` expects [batch, time, tokens, {}], got {sh:?}", self.name, self.dim)));
        }
        let flops = 5.0 * (self.dim * self.state_dim * sh[2]) as f64;
        ctx.record_layer(&self.name, LayerKind::Ssm, flops, x);
        let (a, b, c) = (ctx.param(self.decay_raw), ctx.param(self.b_in), ctx.param(self.c_out));
        ctx.tape.diag_ssm(x, a, b, c)
    }
}

/// Spiking state-space block: `out = OR(SN(BN(ssm(x) ∘ g)), MLP(·))` with the
/// gate `g = SN(BN(LP(x)))`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub name: String,
    pub gate: LpBn,
    pub gate_sn: Sn,
    pub ssm: StateSpace,
    pub out_bn: BatchNorm,
    pub out_sn: Sn,
    pub mlp: [LpBnSn; 2],
}

impl MambaBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, state_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            gate: LpBn::new(store, &format!("{name}.gate"), dim, dim, LayerKind::SnnFc, rng)?,
            gate_sn: Sn::new(store, &format!("{name}.gate.sn"))?,
            ssm: StateSpace::new(store, &format!("{name}.ssm"), dim, state_dim, rng)?,
            out_bn: BatchNorm::new(store, &format!("{name}.out.bn"), dim)?,
            out_sn: Sn::new(store, &format!("{name}.out.sn"))?,
            mlp: [
                LpBnSn::new(store, &format!("{name}.mlp0"), dim, dim, LayerKind::SnnFc, rng)?,
                LpBnSn::new(store, &format!("{name}.mlp1"), dim, dim, LayerKind::SnnFc, rng)?,
            ],
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = self.gate.forward(ctx, x)?;
        let g = self.gate_sn.forward(ctx, g)?;
        let y = self.ssm.forward(ctx, x)?;
        let gated = ctx.tape.mul(y, g);
        let o = self.out_bn.forward(ctx, gated)?;
        let o = self.out_sn.forward(ctx, o)?;
        let m = self.mlp[0].forward(ctx, o)?;
        let m = self.mlp[1].forward(ctx, m)?;
        Ok(spike_or(ctx, &format!("{}.residual", self.name), &[o, m]))
    }
}

#[derive(Clone, Debug)]
pub struct EventEncoder {
    pub cfg: EventConfig,
    pub sps: Sps,
    pub blocks: Vec<MambaBlock>,
}

impl EventEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EventConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(invalid("event encoder needs at least one block"));
        }
        if cfg.height % cfg.patch != 0 || cfg.width % cfg.patch != 0 {
            return Err(invalid(format!("{}×{} frame not divisible by patch {}", cfg.height, cfg.width, cfg.patch)));
        }
        let sps = Sps::new(store, &format!("{name}.sps"), cfg.patch, cfg.dim, rng)?;
        let blocks = (0..cfg.layers)
            .map(|l| MambaBlock::new(store, &format!("{name}.block{l}"), cfg.dim, cfg.state_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, sps, blocks })
    }

    /// `frames: [batch, time, 2, H, W]` → `[batch, time, tokens, dim]`.
    pub fn forward(&self, ctx: &mut Ctx, frames: Var) -> Result<Var> {
        let sh = ctx.value(frames).shape().to_vec();
        let want = [self.cfg.time, 2, self.cfg.height, self.cfg.width];
        if sh.len() != 5 || sh[1..] != want {
            return Err(invalid(format!("event batch {sh:?} does not match [batch, {want:?}]")));
        }
        let mut h = self.sps.forward(ctx, frames)?;
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t_us: u32, x: u16, y: u16, p: Polarity) -> Event {
        Event { t_us, x, y, polarity: p }
    }

    #[test]
    fn empty_stream_bins_to_zero() {
        let b = bin_events(&EventStream::new(8, 6), 4, 6, 8, 1000).unwrap();
        assert_eq!(b.frames.sum(), 0.0);
        assert_eq!(b.skipped, 0);
    }

    #[test]
    fn single_event_lands_in_its_bin() {
        let mut s = EventStream::new(8, 6);
        s.events.push(ev(500, 3, 4, Polarity::Positive));
        let b = bin_events(&s, 16, 6, 8, 1000).unwrap();
        assert_eq!(b.frames.sum(), 1.0);
        let idx = ((8 * 2) * 6 + 4) * 8 + 3;
        assert_eq!(b.frames.data()[idx], 1.0);
    }

    #[test]
    fn out_of_range_events_are_counted() {
        let mut s = EventStream::new(8, 6);
        s.events.push(ev(10, 9, 0, Polarity::Negative));
        s.events.push(ev(2000, 0, 0, Polarity::Negative));
        let b = bin_events(&s, 4, 6, 8, 1000).unwrap();
        assert_eq!(b.skipped, 2);
        let mut unsorted = EventStream::new(8, 6);
        unsorted.events = vec![ev(5, 0, 0, Polarity::Positive), ev(1, 0, 0, Polarity::Positive)];
        assert!(bin_events(&unsorted, 4, 6, 8, 1000).is_err());
    }

    #[test]
    fn patchify_layout() {
        let mut f = vec![0.0; 2 * 4 * 4];
        f[(1 * 4 + 2) * 4 + 3] = 1.0; // channel 1, y 2, x 3
        let t = Tensor::new(&[1, 1, 2, 4, 4], f).unwrap();
        let p = patchify(&t, 2).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 8]);
        // patch (1, 1) = token 3, feature (c=1, dy=0, dx=1) = 5
        assert_eq!(p.data()[3 * 8 + 5], 1.0);
        assert_eq!(p.sum(), 1.0);
        assert!(patchify(&Tensor::zeros(&[1, 1, 2, 5, 4]), 2).is_err());
    }
}
