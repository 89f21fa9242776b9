//! Skeleton branch: spiking embedding, graph convolution, spiking
//! self-attention and the multi-branch spectral module.
//!
//! Inside the model a skeleton batch is token-major, `[batch, time, joints,
//! channels]`. Files and [`SkeletonSequence`] use `time × channels × joints`.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::ctx::{Ctx, ParamId, ParamKind, ParamStore, Projection};
use crate::energy::LayerKind;
use crate::error::{invalid, Error, Result};
use crate::neurons::{uniform, BatchNorm, Linear, LpBnSn, Sn, SURROGATE_WIDTH, V_THRESHOLD};
use crate::tensor::{dft_matrices, Tensor, Var};

pub const SKELETON_MAGIC: &[u8; 8] = b"SPKSKL01";
/// Scale applied to the spike attention product.
pub const SSA_SCALE: f64 = 0.125;
pub const DILATIONS: [usize; 4] = [1, 2, 3, 4];
const KERNEL: usize = 3;

/// A skeleton clip, `time × channels × joints`; several persons are folded
/// into consecutive joint blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub data: Tensor,
    pub persons: usize,
}

impl SkeletonSequence {
    pub fn new(data: Tensor, persons: usize) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(invalid(format!("skeleton must be T×C×V, got {:?}", data.shape())));
        }
        if persons == 0 || persons > 2 || data.shape()[2] % persons != 0 {
            return Err(invalid(format!("{persons} persons do not fit {} joints", data.shape()[2])));
        }
        if !data.all_finite() {
            return Err(crate::error::numeric("skeleton has non-finite coordinates"));
        }
        Ok(Self { data, persons })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.data.shape()[2]
    }

    /// Coordinate `c` of joint `v` at frame `t`.
    pub fn at(&self, t: usize, c: usize, v: usize) -> f64 {
        let (cc, vv) = (self.channels(), self.joints());
        self.data.data()[(t * cc + c) * vv + v]
    }

    /// Frames `0, stride, 2·stride, …` (`len` of them).
    pub fn subsample(&self, stride: usize, len: usize) -> Result<Self> {
        if stride == 0 || len == 0 || (len - 1) * stride >= self.frames() {
            return Err(invalid(format!(
                "cannot take {len} frames at stride {stride} from {}",
                self.frames()
            )));
        }
        let per = self.channels() * self.joints();
        let mut out = Vec::with_capacity(len * per);
        for k in 0..len {
            let t = k * stride;
            out.extend_from_slice(&self.data.data()[t * per..(t + 1) * per]);
        }
        Self::new(Tensor::new(&[len, self.channels(), self.joints()], out)?, self.persons)
    }

    /// Reorders to `time × joints × channels`.
    pub fn token_major(&self) -> Tensor {
        let (t, c, v) = (self.frames(), self.channels(), self.joints());
        let mut out = vec![0.0; t * v * c];
        for ti in 0..t {
            for ci in 0..c {
                for vi in 0..v {
                    out[(ti * v + vi) * c + ci] = self.at(ti, ci, vi);
                }
            }
        }
        Tensor::new(&[t, v, c], out).expect("same element count")
    }
}

/// Writes the binary skeleton format: magic, `u32` T, C, V, persons, then
/// `f64` values, all little-endian.
pub fn write_skeleton(path: &Path, s: &SkeletonSequence) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(SKELETON_MAGIC)?;
    for d in [s.frames(), s.channels(), s.joints(), s.persons] {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in s.data.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_skeleton(path: &Path) -> Result<SkeletonSequence> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..8] != SKELETON_MAGIC {
        return Err(Error::Format(format!("{}: not a skeleton file", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (t, c, v, persons) = (dim(0), dim(1), dim(2), dim(3));
    let n = t * c * v;
    if bytes.len() != 24 + 8 * n {
        return Err(Error::Format(format!(
            "{}: header declares {n} values, payload has {} bytes",
            path.display(),
            bytes.len() - 24
        )));
    }
    let data = bytes[24..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    SkeletonSequence::new(Tensor::new(&[t, c, v], data)?, persons)
}

/// Reads a skeleton file and checks it against the expected frame and joint counts.
pub fn load_skeleton(path: &Path, frames: usize, joints: usize) -> Result<SkeletonSequence> {
    let s = read_skeleton(path)?;
    if s.frames() != frames || s.joints() != joints {
        return Err(invalid(format!(
            "{}: expected {frames} frames × {joints} joints, found {} × {}",
            path.display(),
            s.frames(),
            s.joints()
        )));
    }
    Ok(s)
}

/// Bone list of the 25-joint Kinect v2 layout (0-based).
pub const NTU25_BONES: [(usize, usize); 24] = [
    (0, 1), (1, 20), (2, 20), (3, 2), (4, 20), (5, 4), (6, 5), (7, 6),
    (8, 20), (9, 8), (10, 9), (11, 10), (12, 0), (13, 12), (14, 13), (15, 14),
    (16, 0), (17, 16), (18, 17), (19, 18), (21, 22), (22, 7), (23, 24), (24, 11),
];

/// Bone list of the 9-joint synthetic layout: head, neck, pelvis, left elbow,
/// left hand, right elbow, right hand, left foot, right foot.
pub const SYNTH9_BONES: [(usize, usize); 8] = [(0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6), (2, 7), (2, 8)];

/// Bones for `joints` joints: the known layouts repeated per person, else none.
pub fn default_bones(joints: usize) -> Vec<(usize, usize)> {
    for (per, bones) in [(25usize, &NTU25_BONES[..]), (9, &SYNTH9_BONES[..])] {
        if joints % per == 0 && joints / per <= 2 {
            return (0..joints / per)
                .flat_map(|p| bones.iter().map(move |&(a, b)| (a + p * per, b + p * per)))
                .collect();
        }
    }
    Vec::new()
}

/// Row-stochastic joint-mixing matrix with self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: Tensor,
}

impl NormalizedAdjacency {
    /// `D^{-1/2}(A + I)D^{-1/2}`, then rows rescaled to sum to one.
    pub fn from_bones(joints: usize, bones: &[(usize, usize)]) -> Result<Self> {
        let mut a = vec![0.0; joints * joints];
        for i in 0..joints {
            a[i * joints + i] = 1.0;
        }
        for &(i, j) in bones {
            if i >= joints || j >= joints {
                return Err(invalid(format!("bone ({i}, {j}) outside {joints} joints")));
            }
            a[i * joints + j] = 1.0;
            a[j * joints + i] = 1.0;
        }
        let deg: Vec<f64> = (0..joints).map(|i| a[i * joints..(i + 1) * joints].iter().sum()).collect();
        for i in 0..joints {
            for j in 0..joints {
                a[i * joints + j] /= (deg[i] * deg[j]).sqrt();
            }
        }
        for i in 0..joints {
            let s: f64 = a[i * joints..(i + 1) * joints].iter().sum();
            a[i * joints..(i + 1) * joints].iter_mut().for_each(|v| *v /= s);
        }
        Ok(Self { matrix: Tensor::new(&[joints, joints], a)? })
    }

    pub fn identity(joints: usize) -> Self {
        Self::from_bones(joints, &[]).expect("valid")
    }

    pub fn uniform(joints: usize) -> Self {
        Self { matrix: Tensor::full(&[joints, joints], 1.0 / joints as f64) }
    }

    pub fn validate(m: &Tensor) -> Result<()> {
        let n = m.shape()[0];
        if m.shape() != [n, n] {
            return Err(invalid("adjacency must be square"));
        }
        for i in 0..n {
            let row = &m.data()[i * n..(i + 1) * n];
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row[i] <= 0.0 || row.iter().any(|&v| v < 0.0) {
                return Err(invalid(format!("adjacency row {i} is not row-stochastic with a self-loop (sum {s})")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgnConfig {
    pub in_channels: usize,
    pub dim: usize,
    pub layers: usize,
    pub joints: usize,
    pub time: usize,
}

/// Spiking self-attention over joints: `SN(BN(s·Q·Kᵀ·V))` then LP-BN-SN.
#[derive(Clone, Debug)]
pub struct Ssa {
    pub q: LpBnSn,
    pub k: LpBnSn,
    pub v: LpBnSn,
    pub attn_bn: BatchNorm,
    pub attn_sn: Sn,
    pub out: LpBnSn,
}

impl Ssa {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            q: LpBnSn::new(store, &format!("{name}.q"), dim, dim, LayerKind::SnnFc, rng)?,
            k: LpBnSn::new(store, &format!("{name}.k"), dim, dim, LayerKind::SnnFc, rng)?,
            v: LpBnSn::new(store, &format!("{name}.v"), dim, dim, LayerKind::SnnFc, rng)?,
            attn_bn: BatchNorm::new(store, &format!("{name}.attn_bn"), dim)?,
            attn_sn: Sn::new(store, &format!("{name}.attn_sn"))?,
            out: LpBnSn::new(store, &format!("{name}.out"), dim, dim, LayerKind::SnnFc, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, x)?;
        let v = self.v.forward(ctx, x)?;
        let sh = ctx.value(x).shape().to_vec();
        let (tokens, dim) = (sh[2], sh[3]);
        let flops = 4.0 * (tokens * tokens * dim) as f64;
        ctx.record_layer(&format!("{}.product", self.attn_sn.name), LayerKind::Ssa, flops, q);
        let qk = ctx.tape.bmm(q, k, true);
        let qkv = ctx.tape.bmm(qk, v, false);
        let scaled = ctx.tape.scale(qkv, SSA_SCALE);
        let normed = self.attn_bn.forward(ctx, scaled)?;
        let a = self.attn_sn.forward(ctx, normed)?;
        self.out.forward(ctx, a)
    }
}

/// Dilated temporal convolution (kernel 3, zero padding) with BN and SN.
#[derive(Clone, Debug)]
pub struct PdConv {
    pub name: String,
    pub dilation: usize,
    pub taps: Vec<ParamId>,
    pub bias: ParamId,
    pub bn: BatchNorm,
    pub sn: Sn,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl PdConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_dim * KERNEL) as f64).sqrt();
        let taps = (0..KERNEL)
            .map(|j| store.trainable(&format!("{name}.w{j}"), uniform(rng, &[in_dim, out_dim], bound)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            dilation,
            taps,
            bias: store.trainable(&format!("{name}.b"), uniform(rng, &[out_dim], bound))?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_dim)?,
            sn: Sn::new(store, &format!("{name}.sn"))?,
            in_dim,
            out_dim,
        })
    }

    /// Convolution only: `y[t] = Σ_j W_j·x[t + (j − 1)·d] + b`.
    pub fn conv(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let flops = 2.0 * (self.in_dim * self.out_dim * KERNEL) as f64 * ctx.value(x).shape()[2] as f64;
        ctx.record_layer(&self.name, LayerKind::SnnConv, flops, x);
        let mut acc: Option<Var> = None;
        for (j, &w) in self.taps.iter().enumerate() {
            let off = (j as isize - 1) * self.dilation as isize;
            let shifted = ctx.tape.shift(x, 1, off);
            let wv = ctx.param(w);
            let y = ctx.tape.linear(shifted, wv);
            acc = Some(match acc {
                None => y,
                Some(a) => ctx.tape.add(a, y),
            });
        }
        let b = ctx.param(self.bias);
        Ok(ctx.tape.add_bias(acc.unwrap(), b))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        self.sn.forward(ctx, y)
    }
}

/// Which half of the spectrum a branch processes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectrumPart {
    Real,
    Imag,
}

/// DFT along time, four dilated branches per spectrum half, inverse DFT of the
/// concatenated branches, final BN-SN.
#[derive(Clone, Debug)]
pub struct Spectral {
    pub name: String,
    pub real: Vec<PdConv>,
    pub imag: Vec<PdConv>,
    pub out_bn: BatchNorm,
    pub out_sn: Sn,
    pub dim: usize,
}

impl Spectral {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dim % DILATIONS.len() != 0 {
            return Err(invalid(format!("spectral width {dim} not divisible by {}", DILATIONS.len())));
        }
        let branch = |store: &mut ParamStore, part: &str, rng: &mut ChaCha8Rng| {
            DILATIONS
                .iter()
                .map(|&d| PdConv::new(store, &format!("{name}.{part}.d{d}"), dim, dim / DILATIONS.len(), d, rng))
                .collect::<Result<Vec<_>>>()
        };
        let real = branch(store, "real", rng)?;
        let imag = branch(store, "imag", rng)?;
        Ok(Self {
            name: name.to_string(),
            real,
            imag,
            out_bn: BatchNorm::new(store, &format!("{name}.out_bn"), dim)?,
            out_sn: Sn::new(store, &format!("{name}.out_sn"))?,
            dim,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.forward_with(ctx, x, |ctx, part, spec| {
            let branches = match part {
                SpectrumPart::Real => &self.real,
                SpectrumPart::Imag => &self.imag,
            };
            let outs = branches.iter().map(|b| b.forward(ctx, spec)).collect::<Result<Vec<_>>>()?;
            Ok(ctx.tape.concat_last(&outs))
        })
    }

    /// Runs the transform pair around a caller-supplied per-half map. The map
    /// must preserve shape.
    pub fn forward_with<F>(&self, ctx: &mut Ctx, x: Var, mut branch: F) -> Result<Var>
    where
        F: FnMut(&mut Ctx, SpectrumPart, Var) -> Result<Var>,
    {
        let pre = self.pre_activation_with(ctx, x, &mut branch)?;
        let normed = self.out_bn.forward(ctx, pre)?;
        self.out_sn.forward(ctx, normed)
    }

    /// Real part of the inverse transform, before the final SN.
    pub fn pre_activation_with<F>(&self, ctx: &mut Ctx, x: Var, branch: &mut F) -> Result<Var>
    where
        F: FnMut(&mut Ctx, SpectrumPart, Var) -> Result<Var>,
    {
        let sh = ctx.value(x).shape().to_vec();
        if sh.len() != 4 {
            return Err(invalid(format!("spectral input must be [batch, time, joints, channels], got {sh:?}")));
        }
        let t = sh[1];
        let max_d = *DILATIONS.last().unwrap();
        if t < max_d {
            return Err(invalid(format!("time axis {t} shorter than the largest dilation {max_d}")));
        }
        let (c, s) = dft_matrices(t);
        let cv = ctx.constant(c);
        let sv = ctx.constant(s);
        let transform_flops = 8.0 * (t * t) as f64 * (sh[2] * sh[3]) as f64 / t as f64;
        ctx.record_layer(&format!("{}.dft", self.name), LayerKind::FftIfft, transform_flops, x);
        let re = ctx.tape.mix_axis(cv, x, 1);
        let im = ctx.tape.mix_axis(sv, x, 1);
        let re_out = branch(ctx, SpectrumPart::Real, re)?;
        let im_out = branch(ctx, SpectrumPart::Imag, im)?;
        if ctx.value(re_out).shape() != sh.as_slice() || ctx.value(im_out).shape() != sh.as_slice() {
            return Err(invalid("spectral branches must preserve shape"));
        }
        ctx.record_layer(&format!("{}.idft", self.name), LayerKind::FftIfft, transform_flops, re_out);
        // Re(IDFT) = (1/N)(C·R + S·I) with S the negated-sine matrix.
        let a = ctx.tape.mix_axis(cv, re_out, 1);
        let b = ctx.tape.mix_axis(sv, im_out, 1);
        let sum = ctx.tape.add(a, b);
        Ok(ctx.tape.scale(sum, 1.0 / t as f64))
    }
}

/// One SGN layer: graph convolution, then attention and the spectral module.
#[derive(Clone, Debug)]
pub struct SgnLayer {
    pub name: String,
    pub adjacency: ParamId,
    pub gc: Linear,
    pub gc_bn: BatchNorm,
    pub gc_sn: Sn,
    pub ssa: Ssa,
    pub spectral: Spectral,
}

impl SgnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        dim: usize,
        adjacency: &NormalizedAdjacency,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            adjacency: store.add(
                &format!("{name}.adjacency"),
                ParamKind::Trainable,
                adjacency.matrix.clone(),
                Projection::RowStochastic,
            )?,
            gc: Linear::new(store, &format!("{name}.gc"), in_dim, dim, false, LayerKind::SnnConv, rng)?,
            gc_bn: BatchNorm::new(store, &format!("{name}.gc.bn"), dim)?,
            gc_sn: Sn::new(store, &format!("{name}.gc.sn"))?,
            ssa: Ssa::new(store, &format!("{name}.ssa"), dim, rng)?,
            spectral: Spectral::new(store, &format!("{name}.spectral"), dim, rng)?,
        })
    }

    /// `Â·X·W_g` before normalisation.
    pub fn graph_pre_activation(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let adj = ctx.store().get(self.adjacency);
        let sh = ctx.value(x).shape().to_vec();
        if sh.len() != 4 || adj.shape()[0] != sh[2] {
            return Err(invalid(format!(
                "adjacency over {} joints cannot mix input {sh:?}",
                adj.shape()[0]
            )));
        }
        NormalizedAdjacency::validate(adj)?;
        let flops = 2.0 * (sh[2] * sh[2] * sh[3]) as f64;
        ctx.record_layer(&format!("{}.mix", self.name), LayerKind::SnnConv, flops, x);
        let a = ctx.param(self.adjacency);
        let mixed = ctx.tape.mix_axis(a, x, 2);
        self.gc.forward(ctx, mixed)
    }

    pub fn graph_conv(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.graph_pre_activation(ctx, x)?;
        let y = self.gc_bn.forward(ctx, y)?;
        self.gc_sn.forward(ctx, y)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = self.graph_conv(ctx, x)?;
        let a = self.ssa.forward(ctx, g)?;
        self.spectral.forward(ctx, a)
    }
}

/// Full skeleton encoder.
#[derive(Clone, Debug)]
pub struct SgnEncoder {
    pub cfg: SgnConfig,
    pub embed: LpBnSn,
    pub spe: ParamId,
    pub layers: Vec<SgnLayer>,
}

impl SgnEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: SgnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(invalid("skeleton encoder needs at least one layer"));
        }
        let adjacency = NormalizedAdjacency::from_bones(cfg.joints, &default_bones(cfg.joints))?;
        let embed = LpBnSn::new(store, &format!("{name}.embed"), cfg.in_channels, cfg.dim, LayerKind::FirstLp, rng)?;
        let spe = store.trainable(
            &format!("{name}.spe"),
            uniform(rng, &[cfg.time, cfg.joints, cfg.dim], 0.1),
        )?;
        let layers = (0..cfg.layers)
            .map(|l| SgnLayer::new(store, &format!("{name}.layer{l}"), cfg.dim, cfg.dim, &adjacency, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, embed, spe, layers })
    }

    fn check_input(&self, ctx: &Ctx, x: Var) -> Result<()> {
        let sh = ctx.value(x).shape();
        let want = [self.cfg.time, self.cfg.joints, self.cfg.in_channels];
        if sh.len() != 4 || sh[1..] != want {
            return Err(invalid(format!("skeleton batch {sh:?} does not match [batch, {want:?}]")));
        }
        if !ctx.value(x).all_finite() {
            return Err(crate::error::numeric("skeleton batch has non-finite values"));
        }
        Ok(())
    }

    /// `SN(BN(LP(x))) + SPE`, re-binarised by a memoryless threshold.
    pub fn embed(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.check_input(ctx, x)?;
        let s = self.embed.forward(ctx, x)?;
        let spe = ctx.param(self.spe);
        let sum = ctx.tape.add_bias(s, spe);
        let out = ctx.tape.heaviside(sum, V_THRESHOLD, SURROGATE_WIDTH);
        ctx.record_spikes(&format!("{}.resn", self.embed.sn.name), out);
        Ok(out)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = self.embed(ctx, x)?;
        for layer in &self.layers {
            h = layer.forward(ctx, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adjacency_is_row_stochastic_with_self_loops() {
        for v in [9, 25, 50] {
            let a = NormalizedAdjacency::from_bones(v, &default_bones(v)).unwrap();
            NormalizedAdjacency::validate(&a.matrix).unwrap();
        }
        assert!(NormalizedAdjacency::validate(&Tensor::full(&[2, 2], 0.6)).is_err());
    }

    #[test]
    fn skeleton_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.skl");
        let data = Tensor::new(&[2, 3, 4], (0..24).map(|v| v as f64 * 0.25 - 1.0).collect()).unwrap();
        let s = SkeletonSequence::new(data, 2).unwrap();
        write_skeleton(&p, &s).unwrap();
        assert_eq!(read_skeleton(&p).unwrap(), s);
        assert!(load_skeleton(&p, 3, 4).is_err());
        std::fs::write(&p, b"garbage!").unwrap();
        assert!(matches!(read_skeleton(&p), Err(Error::Format(_))));
    }

    #[test]
    fn token_major_transposes() {
        let data = Tensor::new(&[1, 2, 3], vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]).unwrap();
        let s = SkeletonSequence::new(data, 1).unwrap();
        assert_eq!(s.token_major().data(), &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);
    }

    #[test]
    fn embed_output_shape_at_full_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = SgnConfig { in_channels: 3, dim: 256, layers: 1, joints: 25, time: 16 };
        let enc = SgnEncoder::new(&mut store, "sgn", cfg, &mut rng).unwrap();
        let mut ctx = Ctx::train(&store, 0, 0.0);
        let x = ctx.constant(crate::neurons::uniform(&mut rng, &[1, 16, 25, 3], 1.0));
        let y = enc.embed(&mut ctx, x).unwrap();
        assert_eq!(ctx.value(y).shape(), &[1, 16, 25, 256]);
        assert!(ctx.value(y).is_binary());
    }
}
