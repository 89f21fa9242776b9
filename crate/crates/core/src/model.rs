//! The full network: modality encoders, per-modality extractors, alignment,
//! fusion, bottleneck and classifier, with switches for ablation runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctx::{Ctx, ParamStore};
use crate::data::Batch;
use crate::dib::{total_loss, Classifier, DibConfig, DibStage, StageOutput};
use crate::energy::{model_energy, profiles_from_records, EnergyReport};
use crate::error::{invalid, Result};
use crate::event::{EventConfig, EventEncoder};
use crate::fusion::{direct_addition, Align, CrossMamba};
use crate::skeleton::{SgnConfig, SgnEncoder};
use crate::sse::Sse;
use crate::tensor::Var;

/// Which parts of the network are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    /// Skeleton branch.
    pub sgn: bool,
    /// Event branch.
    pub mamba: bool,
    pub sse: bool,
    /// Cross state-space fusion; direct addition otherwise.
    pub scm: bool,
    pub dib: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles { sgn: true, mamba: true, sse: true, scm: true, dib: true };

    /// Cumulative ablation chain: events only, then adding the skeleton
    /// branch, the extractors, the fusion and the bottleneck.
    pub fn chain() -> Vec<(&'static str, Toggles)> {
        let base = Toggles { sgn: false, mamba: true, sse: false, scm: false, dib: false };
        let sgn = Toggles { sgn: true, ..base };
        let sse = Toggles { sse: true, ..sgn };
        let scm = Toggles { scm: true, ..sse };
        let dib = Toggles { dib: true, ..scm };
        vec![("events", base), ("+skeleton", sgn), ("+sse", sse), ("+fusion", scm), ("+dib", dib)]
    }

    pub fn both_modalities(&self) -> bool {
        self.sgn && self.mamba
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub time: usize,
    pub joints: usize,
    pub skeleton_channels: usize,
    pub dim: usize,
    pub skeleton_layers: usize,
    pub event_layers: usize,
    pub state_dim: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub classes: usize,
    pub k: usize,
    pub groups: usize,
    pub dropout: f64,
    pub dib: DibConfig,
    /// Pull stage 1 towards events and stage 2 towards the skeleton instead.
    pub swap_dib_targets: bool,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            time: 16,
            joints: 25,
            skeleton_channels: 3,
            dim: 256,
            skeleton_layers: 4,
            event_layers: 4,
            state_dim: 16,
            height: 48,
            width: 64,
            patch: 8,
            classes: 60,
            k: 5,
            groups: 4,
            dropout: 0.1,
            dib: DibConfig::default(),
            swap_dib_targets: false,
            toggles: Toggles::FULL,
        }
    }
}

impl ModelConfig {
    /// Small configuration for the synthetic task.
    pub fn toy(classes: usize) -> Self {
        Self {
            joints: 9,
            dim: 64,
            skeleton_layers: 1,
            event_layers: 1,
            state_dim: 4,
            height: 24,
            width: 32,
            classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.toggles;
        if !t.sgn && !t.mamba {
            return Err(invalid("at least one modality branch must be enabled"));
        }
        if self.classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(invalid(format!("dimension {} must be a positive multiple of 4", self.dim)));
        }
        if self.groups == 0 || self.dim % self.groups != 0 {
            return Err(invalid(format!("dimension {} does not split into {} groups", self.dim, self.groups)));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(invalid(format!("{}×{} frames do not split into {}-pixel patches", self.height, self.width, self.patch)));
        }
        if self.time < 4 {
            return Err(invalid("window must hold at least 4 steps"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.dib.validate()
    }

    pub fn event_tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub skeleton: Option<Var>,
    pub event: Option<Var>,
    /// Aligned modalities (when both are present).
    pub aligned: Option<(Var, Var)>,
    pub fused: Var,
    pub stages: Option<(StageOutput, StageOutput)>,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub skeleton: Option<SgnEncoder>,
    pub event: Option<EventEncoder>,
    pub sse_skeleton: Option<Sse>,
    pub sse_event: Option<Sse>,
    pub align: Option<Align>,
    pub fusion: Option<CrossMamba>,
    pub stages: Option<[DibStage; 2]>,
    pub classifier: Classifier,
}

impl Model {
    /// Builds the network and its freshly initialised parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = cfg.toggles;
        let d = cfg.dim;
        let skeleton = if t.sgn {
            let sc = SgnConfig {
                in_channels: cfg.skeleton_channels,
                dim: d,
                layers: cfg.skeleton_layers,
                joints: cfg.joints,
                time: cfg.time,
            };
            Some(SgnEncoder::new(&mut store, "skeleton", sc, &mut rng)?)
        } else {
            None
        };
        let event = if t.mamba {
            let ec = EventConfig {
                height: cfg.height,
                width: cfg.width,
                patch: cfg.patch,
                dim: d,
                layers: cfg.event_layers,
                state_dim: cfg.state_dim,
                time: cfg.time,
            };
            Some(EventEncoder::new(&mut store, "event", ec, &mut rng)?)
        } else {
            None
        };
        let sse_skeleton = match t.sse && t.sgn {
            true => Some(Sse::new(&mut store, "sse.skeleton", d, cfg.k, cfg.groups, &mut rng)?),
            false => None,
        };
        let sse_event = match t.sse && t.mamba {
            true => Some(Sse::new(&mut store, "sse.event", d, cfg.k, cfg.groups, &mut rng)?),
            false => None,
        };
        let align = match t.both_modalities() {
            true => Some(Align::new(&mut store, "align", d, &mut rng)?),
            false => None,
        };
        let fusion = match t.both_modalities() && t.scm {
            true => Some(CrossMamba::new(&mut store, "fusion", d, cfg.state_dim, &mut rng)?),
            false => None,
        };
        let stages = if t.dib {
            let m = cfg.dib.momentum;
            Some([
                DibStage::new(&mut store, "dib1", 0, d, cfg.dib.lambda1, m, &mut rng)?,
                DibStage::new(&mut store, "dib2", 1, d, cfg.dib.lambda2, m, &mut rng)?,
            ])
        } else {
            None
        };
        let classifier = Classifier::new(&mut store, "classifier", d, cfg.classes, &mut rng)?;
        let model = Self { cfg, skeleton, event, sse_skeleton, sse_event, align, fusion, stages, classifier };
        Ok((model, store))
    }

    pub fn forward(&self, ctx: &mut Ctx, batch: &Batch) -> Result<Forward> {
        ctx.set_time_steps(self.cfg.time);
        let skeleton = match &self.skeleton {
            Some(enc) => {
                let x = ctx.constant(batch.skeleton.clone());
                let mut h = enc.forward(ctx, x)?;
                if let Some(sse) = &self.sse_skeleton {
                    h = sse.forward(ctx, h)?;
                }
                Some(h)
            }
            None => None,
        };
        let event = match &self.event {
            Some(enc) => {
                let x = ctx.constant(batch.events.clone());
                let mut h = enc.forward(ctx, x)?;
                if let Some(sse) = &self.sse_event {
                    h = sse.forward(ctx, h)?;
                }
                Some(h)
            }
            None => None,
        };
        let (aligned, fused, targets) = match (skeleton, event) {
            (Some(s), Some(e)) => {
                let align = self.align.as_ref().expect("alignment exists with both branches");
                let (s, e) = align.forward(ctx, s, e)?;
                let fused = match &self.fusion {
                    Some(f) => f.forward(ctx, s, e)?,
                    None => direct_addition(ctx, s, e)?,
                };
                (Some((s, e)), fused, (s, e))
            }
            (Some(x), None) | (None, Some(x)) => (None, x, (x, x)),
            (None, None) => unreachable!("validated configuration has a branch"),
        };
        let (t1, t2) = if self.cfg.swap_dib_targets { (targets.1, targets.0) } else { targets };
        let (stages, code) = match &self.stages {
            Some([s1, s2]) => {
                let o1 = s1.forward(ctx, fused, t1)?;
                let o2 = s2.forward(ctx, o1.flipped, t2)?;
                (Some((o1, o2)), o2.flipped)
            }
            None => (None, fused),
        };
        let logits = self.classifier.forward(ctx, code)?;
        Ok(Forward { skeleton, event, aligned, fused, stages, logits })
    }

    /// Training objective for a forward pass.
    pub fn loss(&self, ctx: &mut Ctx, out: &Forward, labels: &[usize]) -> Result<Var> {
        let dib = out.stages.map(|(a, b)| (a.loss, b.loss));
        total_loss(ctx, out.logits, labels, dib, self.cfg.dib.alpha)
    }

    /// Energy estimate from a deterministic forward pass over `batch`.
    pub fn energy(&self, store: &ParamStore, batch: &Batch) -> Result<EnergyReport> {
        let mut ctx = Ctx::eval(store);
        self.forward(&mut ctx, batch)?;
        model_energy(&profiles_from_records(ctx.records(), self.cfg.time))
    }
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &crate::tensor::Tensor) -> Vec<usize> {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
