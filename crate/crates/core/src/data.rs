//! Data preparation: skeleton-driven region of interest, video-to-event
//! conversion, a synthetic micro-action generator, and pairing of skeleton
//! clips with binned events.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::event::{bin_events, Event, EventStream, Polarity};
use crate::skeleton::{read_skeleton, write_skeleton, SkeletonSequence};
use crate::tensor::Tensor;

/// Expansion factors applied to the joint bounding box.
pub const ROI_WIDTH_SCALE: f64 = 1.2;
pub const ROI_HEIGHT_SCALE: f64 = 1.3;
/// Intensities are floored to this before taking logarithms.
pub const INTENSITY_FLOOR: f64 = 1.0 / 255.0;
const MIN_THRESHOLD: f64 = 0.01;
/// Absorbs rounding in `|ΔL|/θ` so exact multiples of θ count fully.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// `1.2·(x_max − x_min)`.
    pub roi_w: f64,
    /// `1.3·(y_max − y_min)`.
    pub roi_h: f64,
    /// Expanded box about the joint-box centre, at least one pixel per side,
    /// clipped to the frame.
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl RoiBox {
    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }
}

/// Region of interest around `(x, y)` joint positions in a `frame_w × frame_h`
/// frame.
pub fn roi_from_skeleton(joints: &[(f64, f64)], frame_w: f64, frame_h: f64) -> Result<RoiBox> {
    if joints.is_empty() {
        return Err(invalid("region of interest needs at least one joint"));
    }
    if !(frame_w > 0.0 && frame_h > 0.0) {
        return Err(invalid("frame size must be positive"));
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| joints.iter().map(sel).fold(init, f);
    let x_min = fold(f64::min, f64::INFINITY, |p| p.0);
    let x_max = fold(f64::max, f64::NEG_INFINITY, |p| p.0);
    let y_min = fold(f64::min, f64::INFINITY, |p| p.1);
    let y_max = fold(f64::max, f64::NEG_INFINITY, |p| p.1);
    let roi_w = ROI_WIDTH_SCALE * (x_max - x_min);
    let roi_h = ROI_HEIGHT_SCALE * (y_max - y_min);
    let (cx, cy) = ((x_min + x_max) / 2.0, (y_min + y_max) / 2.0);
    let (hw, hh) = (roi_w.max(1.0) / 2.0, roi_h.max(1.0) / 2.0);
    Ok(RoiBox {
        x_min,
        x_max,
        y_min,
        y_max,
        roi_w,
        roi_h,
        left: (cx - hw).clamp(0.0, frame_w),
        right: (cx + hw).clamp(0.0, frame_w),
        top: (cy - hh).clamp(0.0, frame_h),
        bottom: (cy + hh).clamp(0.0, frame_h),
    })
}

/// A grayscale clip, `frames × height × width`, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityClip {
    pub frames: Tensor,
    /// Seconds between consecutive frames.
    pub frame_interval: f64,
}

impl IntensityClip {
    pub fn new(frames: Tensor, frame_interval: f64) -> Result<Self> {
        if frames.ndim() != 3 || frames.shape()[0] < 1 {
            return Err(invalid(format!("clip must be frames × height × width, got {:?}", frames.shape())));
        }
        if !(frame_interval > 0.0) {
            return Err(invalid("frame interval must be positive"));
        }
        Ok(Self { frames, frame_interval })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct V2eConfig {
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    /// Standard deviation of the per-pixel threshold mismatch.
    pub sigma_threshold: f64,
    /// Seconds.
    pub timestamp_resolution: f64,
    pub width: usize,
    pub height: usize,
    /// Low-pass cutoff on log intensity in Hz; `None` disables the filter.
    pub cutoff_hz: Option<f64>,
}

impl Default for V2eConfig {
    fn default() -> Self {
        Self {
            pos_threshold: 0.15,
            neg_threshold: 0.15,
            sigma_threshold: 0.03,
            timestamp_resolution: 0.01,
            width: 64,
            height: 48,
            cutoff_hz: Some(15.0),
        }
    }
}

impl V2eConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_threshold > 0.0 && self.neg_threshold > 0.0) {
            return Err(invalid("event thresholds must be positive"));
        }
        if !(self.sigma_threshold >= 0.0) || !(self.timestamp_resolution > 0.0) {
            return Err(invalid("threshold sigma must be nonnegative and timestamp resolution positive"));
        }
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return Err(invalid(format!("unsupported resolution {}×{}", self.width, self.height)));
        }
        if matches!(self.cutoff_hz, Some(f) if !(f > 0.0)) {
            return Err(invalid("cutoff frequency must be positive"));
        }
        Ok(())
    }
}

/// Converts a clip to events by thresholding log-intensity changes against a
/// per-pixel reference level.
///
/// Thresholds are drawn once per pixel from `N(θ, σ²)` (floored at 0.01) with
/// a generator seeded by `(seed, pixel)`, so output does not depend on the
/// order pixels are visited. A change of `|ΔL|` emits `⌊|ΔL|/θ⌋` events spread
/// over the frame interval, and the reference moves by the emitted amount.
pub fn v2e_convert(clip: &IntensityClip, cfg: &V2eConfig, seed: u64) -> Result<EventStream> {
    cfg.validate()?;
    if clip.width() != cfg.width || clip.height() != cfg.height {
        return Err(invalid(format!(
            "clip is {}×{}, converter configured for {}×{}",
            clip.width(),
            clip.height(),
            cfg.width,
            cfg.height
        )));
    }
    let (f, h, w) = (clip.len(), clip.height(), clip.width());
    let dt = clip.frame_interval;
    let alpha = cfg.cutoff_hz.map_or(1.0, |fc| {
        let rc = 1.0 / (TAU * fc);
        dt / (dt + rc)
    });
    let res_us = (cfg.timestamp_resolution * 1e6).round().max(1.0);
    let data = clip.frames.data();
    let mut events = Vec::new();
    for pix in 0..h * w {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pix as u64);
        let (theta_pos, theta_neg) = if cfg.sigma_threshold > 0.0 {
            let np = Normal::new(cfg.pos_threshold, cfg.sigma_threshold).map_err(|e| invalid(e.to_string()))?;
            let nn = Normal::new(cfg.neg_threshold, cfg.sigma_threshold).map_err(|e| invalid(e.to_string()))?;
            (np.sample(&mut rng).max(MIN_THRESHOLD), nn.sample(&mut rng).max(MIN_THRESHOLD))
        } else {
            (cfg.pos_threshold, cfg.neg_threshold)
        };
        let log_at = |k: usize| data[k * h * w + pix].max(INTENSITY_FLOOR).ln();
        let mut filtered = log_at(0);
        let mut reference = filtered;
        let (x, y) = ((pix % w) as u16, (pix / w) as u16);
        for k in 1..f {
            filtered += alpha * (log_at(k) - filtered);
            let delta = filtered - reference;
            let (theta, polarity) = if delta >= 0.0 { (theta_pos, Polarity::Positive) } else { (theta_neg, Polarity::Negative) };
            let n = (delta.abs() / theta + COUNT_SLACK).floor() as usize;
            if n == 0 {
                continue;
            }
            reference += delta.signum() * n as f64 * theta;
            let t_prev = (k - 1) as f64 * dt;
            for i in 0..n {
                let t = t_prev + dt * (i + 1) as f64 / n as f64;
                let q = ((t * 1e6 / res_us).round() * res_us).max(0.0);
                events.push(Event { t_us: q as u32, x, y, polarity });
            }
        }
    }
    events.sort_by_key(|e| e.t_us);
    Ok(EventStream { width: w as u16, height: h as u16, events })
}

pub const SYNTH_JOINTS: usize = 9;
pub const SYNTH_CHANNELS: usize = 3;
/// Joint indices of the synthetic body.
pub mod joint {
    pub const HEAD: usize = 0;
    pub const NECK: usize = 1;
    pub const PELVIS: usize = 2;
    pub const L_ELBOW: usize = 3;
    pub const L_HAND: usize = 4;
    pub const R_ELBOW: usize = 5;
    pub const R_HAND: usize = 6;
    pub const L_FOOT: usize = 7;
    pub const R_FOOT: usize = 8;
}

const REST_POSE: [[f64; 3]; SYNTH_JOINTS] = [
    [0.0, 1.7, 0.0],
    [0.0, 1.5, 0.0],
    [0.0, 1.0, 0.0],
    [-0.3, 1.3, 0.0],
    [-0.45, 1.1, 0.0],
    [0.3, 1.3, 0.0],
    [0.45, 1.1, 0.0],
    [-0.15, 0.0, 0.0],
    [0.15, 0.0, 0.0],
];

/// Frequency of the left-hand tremor. Sampled at half the skeleton frame
/// rate it aliases to a constant offset.
pub const TREMOR_HZ: f64 = 12.5;

/// Generation settings for one synthetic clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthActionSpec {
    pub class: usize,
    pub classes: usize,
    /// Global motion scale; zero gives a static clip.
    pub amplitude: f64,
    pub skeleton_frames: usize,
    pub skeleton_fps: f64,
    pub render_fps: f64,
    pub width: usize,
    pub height: usize,
    /// Disc radius in output pixels.
    pub disc_radius: f64,
    pub background: f64,
    pub intensity: f64,
    /// Skeleton sensor noise, metres.
    pub noise: f64,
}

impl SynthActionSpec {
    pub fn new(class: usize, classes: usize) -> Self {
        Self {
            class,
            classes,
            amplitude: 1.0,
            skeleton_frames: 32,
            skeleton_fps: 25.0,
            render_fps: 100.0,
            width: 32,
            height: 24,
            disc_radius: 1.5,
            background: 0.1,
            intensity: 0.9,
            noise: 0.01,
        }
    }

    pub fn duration(&self) -> f64 {
        self.skeleton_frames as f64 / self.skeleton_fps
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.class >= self.classes {
            return Err(invalid(format!("class {} of {} (need at least 2 classes)", self.class, self.classes)));
        }
        if self.skeleton_frames < 2 || !(self.skeleton_fps > 0.0) || !(self.render_fps > 0.0) {
            return Err(invalid("clip needs at least two frames and positive frame rates"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("render size must be positive"));
        }
        Ok(())
    }
}

/// One sinusoidal component on a joint coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Oscillation {
    pub joint: usize,
    pub axis: usize,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

/// Joint trajectories: `rest + offset + drift·t + Σ oscillations`.
#[derive(Clone, Debug, PartialEq)]
pub struct Motion {
    pub offsets: [[f64; 3]; SYNTH_JOINTS],
    pub drift: [[f64; 3]; SYNTH_JOINTS],
    pub oscillations: Vec<Oscillation>,
}

impl Motion {
    pub fn position(&self, joint: usize, t: f64) -> [f64; 3] {
        let mut p = REST_POSE[joint];
        for a in 0..3 {
            p[a] += self.offsets[joint][a] + self.drift[joint][a] * t;
        }
        for o in self.oscillations.iter().filter(|o| o.joint == joint) {
            p[o.axis] += o.amplitude * (TAU * o.frequency * t + o.phase).sin();
        }
        p
    }
}

/// Class motion. Classes combine a base movement (`class / 4`), a right-hand
/// depth oscillation (bit 1 of `class`) and a left-hand tremor (bit 0). With
/// `rng = None` the nominal prototype is returned.
pub fn class_motion(class: usize, amplitude: f64, mut rng: Option<&mut ChaCha8Rng>) -> Motion {
    use joint::*;
    let mut u = |lo: f64, hi: f64| match rng.as_deref_mut() {
        Some(r) => r.random_range(lo..hi),
        None => (lo + hi) / 2.0,
    };
    let mut m = Motion { offsets: [[0.0; 3]; SYNTH_JOINTS], drift: [[0.0; 3]; SYNTH_JOINTS], oscillations: Vec::new() };
    for j in 0..SYNTH_JOINTS {
        for a in 0..3 {
            m.offsets[j][a] = u(-0.02, 0.02);
        }
    }
    // Static left-hand offset present in every class, matching the spread of
    // the aliased tremor.
    m.offsets[L_HAND][0] += amplitude * u(-0.05, 0.05);
    let osc = |m: &mut Motion, joint: usize, axis: usize, amp: f64, freq: f64, phase: f64| {
        m.oscillations.push(Oscillation { joint, axis, amplitude: amplitude * amp, frequency: freq, phase });
    };
    match (class / 4) % 3 {
        0 => {
            let (a, f, ph) = (u(0.04, 0.06), u(0.7, 0.9), u(0.0, TAU));
            for j in [HEAD, NECK, PELVIS, L_ELBOW, R_ELBOW, R_HAND] {
                osc(&mut m, j, 0, a, f, ph);
            }
        }
        1 => {
            let v = amplitude * u(0.15, 0.25);
            for d in m.drift.iter_mut() {
                d[0] = v;
            }
        }
        _ => {
            let (a, f, ph) = (u(0.08, 0.12), u(0.9, 1.1), u(0.0, TAU));
            osc(&mut m, L_HAND, 1, a, f, ph);
            osc(&mut m, R_HAND, 1, a, f, ph);
        }
    }
    if (class / 2) % 2 == 1 {
        let (a, f, ph) = (u(0.15, 0.25), u(1.0, 1.4), u(0.0, TAU));
        osc(&mut m, R_HAND, 2, a, f, ph);
        osc(&mut m, R_ELBOW, 2, a / 2.0, f, ph);
    }
    if class % 2 == 1 {
        let (a, ph) = (u(0.04, 0.06), u(0.0, TAU));
        osc(&mut m, L_HAND, 0, a, TREMOR_HZ, ph);
    }
    m
}

/// Scene projection: orthographic onto a 128×96 canvas, depth discarded.
fn project(p: [f64; 3]) -> (f64, f64) {
    (64.0 + 40.0 * p[0], 84.0 - 40.0 * p[1])
}

const SCENE_W: f64 = 128.0;
const SCENE_H: f64 = 96.0;

/// A generated skeleton clip and its rendered intensity clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub skeleton: SkeletonSequence,
    pub frames: IntensityClip,
    pub roi: RoiBox,
}

/// Generates one clip. Skeleton and frames share a clock starting at zero;
/// frames are cropped to the clip-level region of interest and rendered at
/// the output resolution with soft discs at each joint.
pub fn synth_micro_action(spec: &SynthActionSpec, seed: u64) -> Result<SynthClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = class_motion(spec.class, spec.amplitude, Some(&mut rng));

    let sf = spec.skeleton_frames;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let mut skel = vec![0.0; sf * SYNTH_CHANNELS * SYNTH_JOINTS];
    for t in 0..sf {
        let time = t as f64 / spec.skeleton_fps;
        for j in 0..SYNTH_JOINTS {
            let p = motion.position(j, time);
            for c in 0..SYNTH_CHANNELS {
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                skel[(t * SYNTH_CHANNELS + c) * SYNTH_JOINTS + j] = p[c] + n;
            }
        }
    }
    let skeleton = SkeletonSequence::new(Tensor::new(&[sf, SYNTH_CHANNELS, SYNTH_JOINTS], skel)?, 1)?;

    let rf = (spec.duration() * spec.render_fps).round() as usize;
    let positions: Vec<Vec<(f64, f64)>> = (0..rf)
        .map(|k| {
            let time = k as f64 / spec.render_fps;
            (0..SYNTH_JOINTS).map(|j| project(motion.position(j, time))).collect()
        })
        .collect();
    let all: Vec<(f64, f64)> = positions.iter().flatten().copied().collect();
    let roi = roi_from_skeleton(&all, SCENE_W, SCENE_H)?;
    let (w, h) = (spec.width, spec.height);
    let (sx, sy) = (w as f64 / roi.width(), h as f64 / roi.height());
    let mut frames = vec![spec.background; rf * h * w];
    for (k, joints) in positions.iter().enumerate() {
        let frame = &mut frames[k * h * w..(k + 1) * h * w];
        for &(px, py) in joints {
            let (ju, jv) = ((px - roi.left) * sx, (py - roi.top) * sy);
            let r = spec.disc_radius;
            let (u0, u1) = ((ju - r - 1.0).floor().max(0.0) as usize, ((ju + r + 1.0).ceil().max(0.0) as usize).min(w));
            let (v0, v1) = ((jv - r - 1.0).floor().max(0.0) as usize, ((jv + r + 1.0).ceil().max(0.0) as usize).min(h));
            for v in v0..v1 {
                for u in u0..u1 {
                    let d = ((u as f64 + 0.5 - ju).powi(2) + (v as f64 + 0.5 - jv).powi(2)).sqrt();
                    let cover = (r + 0.5 - d).clamp(0.0, 1.0);
                    let val = spec.background + (spec.intensity - spec.background) * cover;
                    let px = &mut frame[v * w + u];
                    *px = px.max(val);
                }
            }
        }
    }
    let frames = IntensityClip::new(Tensor::new(&[rf, h, w], frames)?, 1.0 / spec.render_fps)?;
    Ok(SynthClip { skeleton, frames, roi })
}

/// A training pair: `skeleton: [T, V, C]` token-major, `events: [T, 2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub skeleton: Tensor,
    pub events: Tensor,
    pub label: usize,
    /// Events that fell outside the clip or frame while binning.
    pub skipped_events: usize,
}

/// Resamples a skeleton clip to `window` frames and bins the events over the
/// same span. `frame_interval_us` is the skeleton frame spacing.
pub fn build_pairs(
    skeleton: &SkeletonSequence,
    events: &EventStream,
    frame_interval_us: u32,
    window: usize,
    height: usize,
    width: usize,
    label: usize,
) -> Result<PairedSample> {
    let frames = skeleton.frames();
    if window == 0 || frames < window || frames % window != 0 {
        return Err(invalid(format!("cannot resample {frames} frames to a window of {window}")));
    }
    let duration = frames as u64 * frame_interval_us as u64;
    if duration == 0 || duration > u32::MAX as u64 {
        return Err(invalid(format!("unsupported clip duration {duration} µs")));
    }
    let duration = duration as u32;
    if !events.is_empty() && events.events[0].t_us >= duration {
        return Err(invalid(format!(
            "events start at {} µs, after the skeleton clip ends at {duration} µs",
            events.events[0].t_us
        )));
    }
    let s = skeleton.subsample(frames / window, window)?;
    let binned = bin_events(events, window, height, width, duration)?;
    Ok(PairedSample { skeleton: s.token_major(), events: binned.frames, label, skipped_events: binned.skipped })
}

/// Generation parameters for a whole synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub width: usize,
    pub height: usize,
    pub window: usize,
    pub v2e: V2eConfig,
}

impl SynthConfig {
    pub fn toy(classes: usize, samples_per_class: usize) -> Self {
        Self {
            classes,
            samples_per_class,
            width: 32,
            height: 24,
            window: 16,
            v2e: V2eConfig { width: 32, height: 24, ..V2eConfig::default() },
        }
    }

    pub fn spec(&self, class: usize) -> SynthActionSpec {
        SynthActionSpec { width: self.width, height: self.height, ..SynthActionSpec::new(class, self.classes) }
    }
}

/// A labelled clip before pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub skeleton: SkeletonSequence,
    pub events: EventStream,
    pub label: usize,
    pub frame_interval_us: u32,
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `classes × samples_per_class` clips, class-interleaved.
pub fn generate_raw(cfg: &SynthConfig, seed: u64) -> Result<Vec<RawSample>> {
    let mut out = Vec::with_capacity(cfg.classes * cfg.samples_per_class);
    for i in 0..cfg.samples_per_class {
        for c in 0..cfg.classes {
            let idx = (i * cfg.classes + c) as u64;
            let spec = cfg.spec(c);
            let clip = synth_micro_action(&spec, mix_seed(seed, 2 * idx))?;
            let events = v2e_convert(&clip.frames, &cfg.v2e, mix_seed(seed, 2 * idx + 1))?;
            let frame_interval_us = (1e6 / spec.skeleton_fps).round() as u32;
            out.push(RawSample { skeleton: clip.skeleton, events, label: c, frame_interval_us });
        }
    }
    Ok(out)
}

pub fn pair_all(raw: &[RawSample], cfg: &SynthConfig) -> Result<Vec<PairedSample>> {
    raw.iter()
        .map(|r| build_pairs(&r.skeleton, &r.events, r.frame_interval_us, cfg.window, cfg.height, cfg.width, r.label))
        .collect()
}

pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    Dataset::new(pair_all(&generate_raw(cfg, seed)?, cfg)?, cfg.classes)
}

/// Paired samples sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
    pub classes: usize,
}

/// Stacked inputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[batch, T, V, C]`.
    pub skeleton: Tensor,
    /// `[batch, T, 2, H, W]`.
    pub events: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: Vec<PairedSample>, classes: usize) -> Result<Self> {
        if let Some(first) = samples.first() {
            let bad = samples
                .iter()
                .find(|s| s.skeleton.shape() != first.skeleton.shape() || s.events.shape() != first.events.shape());
            if bad.is_some() {
                return Err(invalid("dataset samples differ in shape"));
            }
            if let Some(s) = samples.iter().find(|s| s.label >= classes) {
                return Err(invalid(format!("label {} out of range for {classes} classes", s.label)));
            }
        }
        Ok(Self { samples, classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(invalid("empty batch"));
        }
        let first = &self.samples[indices[0]];
        let mut skel = Vec::with_capacity(indices.len() * first.skeleton.len());
        let mut ev = Vec::with_capacity(indices.len() * first.events.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| invalid(format!("sample {i} out of range")))?;
            skel.extend_from_slice(s.skeleton.data());
            ev.extend_from_slice(s.events.data());
            labels.push(s.label);
        }
        let mut ss = vec![indices.len()];
        ss.extend_from_slice(first.skeleton.shape());
        let mut es = vec![indices.len()];
        es.extend_from_slice(first.events.shape());
        Ok(Batch { skeleton: Tensor::new(&ss, skel)?, events: Tensor::new(&es, ev)?, labels })
    }
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub skeleton: PathBuf,
    pub events: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub frame_interval_us: u32,
    pub classes: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Header comments then `skeleton<TAB>events<TAB>label` lines with paths
    /// relative to the manifest's directory.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "#frame_interval_us={}", self.frame_interval_us);
        let _ = writeln!(s, "#classes={}", self.classes);
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}", e.skeleton.display(), e.events.display(), e.label);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                if let Some((k, v)) = h.split_once('=') {
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [sk, ev, label] = cols[..] else {
                return Err(Error::Format(format!("manifest line {}: expected 3 tab-separated columns", n + 1)));
            };
            let label = label
                .parse()
                .map_err(|_| Error::Format(format!("manifest line {}: bad label `{label}`", n + 1)))?;
            entries.push(ManifestEntry { skeleton: sk.into(), events: ev.into(), label });
        }
        let num = |k: &str| -> Result<u64> {
            header
                .get(k)
                .ok_or_else(|| Error::Format(format!("manifest is missing `#{k}=`")))?
                .parse()
                .map_err(|_| Error::Format(format!("manifest header `{k}` is not a number")))
        };
        Ok(Self { frame_interval_us: num("frame_interval_us")? as u32, classes: num("classes")? as usize, entries })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_NAME), self.to_text())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Writes samples as skeleton and event files plus a manifest.
pub fn write_samples(dir: &Path, raw: &[RawSample], classes: usize) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let frame_interval_us = raw.first().map_or(40_000, |r| r.frame_interval_us);
    let mut entries = Vec::with_capacity(raw.len());
    for (i, r) in raw.iter().enumerate() {
        if r.frame_interval_us != frame_interval_us {
            return Err(invalid("samples disagree on the skeleton frame interval"));
        }
        let sk = PathBuf::from(format!("sample_{i:05}.skl"));
        let ev = PathBuf::from(format!("sample_{i:05}.evt"));
        write_skeleton(&dir.join(&sk), &r.skeleton)?;
        r.events.write(&dir.join(&ev))?;
        entries.push(ManifestEntry { skeleton: sk, events: ev, label: r.label });
    }
    let m = Manifest { frame_interval_us, classes, entries };
    m.write(dir)?;
    Ok(m)
}

/// Loads a manifest directory and pairs every entry.
pub fn load_dataset(dir: &Path, window: usize, height: usize, width: usize) -> Result<Dataset> {
    let m = Manifest::read(dir)?;
    let samples = m
        .entries
        .iter()
        .map(|e| {
            let s = read_skeleton(&dir.join(&e.skeleton))?;
            let ev = EventStream::read(&dir.join(&e.events))?;
            build_pairs(&s, &ev, m.frame_interval_us, window, height, width, e.label)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, m.classes)
}
