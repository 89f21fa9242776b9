//! Sparse semantic extraction: kNN hypergraph propagation, global spiking
//! attention and an OR-residual combine.
//!
//! A modality tensor `[batch, time, tokens, channels]` is viewed per sample as
//! `time·tokens` nodes. The hypergraph is rebuilt from the spikes on every
//! forward pass and treated as a constant by the backward pass.

use std::fmt::Write as _;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::ctx::{Ctx, ParamStore};
use crate::energy::LayerKind;
use crate::error::{invalid, Result};
use crate::neurons::{spike_or, BatchNorm, Linear, LpBnSn, Sn};
use crate::tensor::{Csr, Tensor, Var};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_GROUPS: usize = 4;

/// Row-sparse `n × n` adjacency with `k` entries per row,
/// `H[i][j] = 1 / (1 + ‖x_i − x_j‖)` over each node's nearest neighbours.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypergraph {
    pub k: usize,
    pub matrix: Csr,
}

impl Hypergraph {
    /// Neighbour indices of node `i`, nearest first.
    pub fn neighbours(&self, i: usize) -> Vec<usize> {
        self.matrix.rows[i].iter().map(|&(j, _)| j).collect()
    }

    /// Coordinate list, one `i j weight` line per stored entry.
    pub fn to_coo(&self) -> String {
        let mut s = String::new();
        for (i, row) in self.matrix.rows.iter().enumerate() {
            for &(j, w) in row {
                let _ = writeln!(s, "{i} {j} {w:?}");
            }
        }
        s
    }
}

/// Squared Euclidean distances from every row to every other row of
/// `x: [n, c]`. Binary rows use packed popcounts.
fn squared_distances(x: &Tensor) -> Vec<f64> {
    let (n, c) = (x.shape()[0], x.last_dim());
    let rows = x.data();
    let mut d = vec![0.0; n * n];
    if x.is_binary() {
        let words = c.div_ceil(64);
        let mut bits = vec![0u64; n * words];
        for i in 0..n {
            for j in 0..c {
                if rows[i * c + j] != 0.0 {
                    bits[i * words + j / 64] |= 1 << (j % 64);
                }
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let h: u32 = (0..words).map(|w| (bits[i * words + w] ^ bits[j * words + w]).count_ones()).sum();
                d[i * n + j] = h as f64;
                d[j * n + i] = h as f64;
            }
        }
    } else {
        for i in 0..n {
            for j in i + 1..n {
                let s: f64 = (0..c).map(|q| (rows[i * c + q] - rows[j * c + q]).powi(2)).sum();
                d[i * n + j] = s;
                d[j * n + i] = s;
            }
        }
    }
    d
}

/// kNN hypergraph over the rows of `x: [n, c]`. Each node counts as its own
/// nearest neighbour; ties go to the lower index.
pub fn build_hypergraph(x: &Tensor, k: usize) -> Result<Hypergraph> {
    if x.ndim() != 2 {
        return Err(invalid(format!("hypergraph expects [nodes, channels], got {:?}", x.shape())));
    }
    let n = x.shape()[0];
    if k == 0 || k >= n {
        return Err(invalid(format!("k = {k} needs 1 ≤ k < {n} nodes")));
    }
    let d2 = squared_distances(x);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let rows = (0..n)
        .map(|i| {
            let row = &d2[i * n..(i + 1) * n];
            let key = |&a: &usize, &b: &usize| row[a].total_cmp(&row[b]).then(a.cmp(&b));
            order.clear();
            order.extend(0..n);
            order.select_nth_unstable_by(k - 1, key);
            order[..k].sort_unstable_by(key);
            order[..k].iter().map(|&j| (j, 1.0 / (1.0 + row[j].sqrt()))).collect()
        })
        .collect();
    Ok(Hypergraph { k, matrix: Csr { n_cols: n, rows } })
}

/// One hypergraph per sample of `x: [batch, time, tokens, channels]`.
pub fn batch_hypergraphs(x: &Tensor, k: usize) -> Result<Vec<Hypergraph>> {
    let sh = x.shape();
    if sh.len() != 4 {
        return Err(invalid(format!("expected [batch, time, tokens, channels], got {sh:?}")));
    }
    let per = sh[1] * sh[2] * sh[3];
    (0..sh[0])
        .map(|b| {
            let rows = Tensor::new(&[sh[1] * sh[2], sh[3]], x.data()[b * per..(b + 1) * per].to_vec())?;
            build_hypergraph(&rows, k)
        })
        .collect()
}

/// `H·x` followed by LP-BN-SN.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub name: String,
    pub proj: LpBnSn,
}

impl Propagation {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self { name: name.to_string(), proj: LpBnSn::new(store, &format!("{name}.proj"), dim, dim, LayerKind::SnnFc, rng)? })
    }

    /// Hypergraph-mixed features before the projection.
    pub fn mix(&self, ctx: &mut Ctx, graphs: &[Hypergraph], x: Var) -> Result<Var> {
        let sh = ctx.value(x).shape().to_vec();
        if sh.len() != 4 || graphs.len() != sh[0] {
            return Err(invalid(format!("{} hypergraphs for input {sh:?}", graphs.len())));
        }
        let nodes = sh[1] * sh[2];
        if let Some(g) = graphs.iter().find(|g| g.matrix.n_rows() != nodes || g.matrix.n_cols != nodes) {
            return Err(invalid(format!("hypergraph over {} nodes, input has {nodes}", g.matrix.n_rows())));
        }
        let k = graphs.first().map_or(0, |g| g.k);
        ctx.record_layer(&format!("{}.mix", self.name), LayerKind::SnnFc, 2.0 * (sh[2] * k * sh[3]) as f64, x);
        let h = Rc::new(graphs.iter().map(|g| g.matrix.clone()).collect::<Vec<_>>());
        let flat = ctx.tape.reshape(x, &[sh[0], nodes, sh[3]]);
        let y = ctx.tape.sparse_mix(h, flat);
        Ok(ctx.tape.reshape(y, &sh))
    }

    pub fn forward(&self, ctx: &mut Ctx, graphs: &[Hypergraph], x: Var) -> Result<Var> {
        let y = self.mix(ctx, graphs, x)?;
        self.proj.forward(ctx, y)
    }
}

/// Spatial mask then grouped channel attention.
#[derive(Clone, Debug)]
pub struct Gsa {
    pub name: String,
    pub spatial: Linear,
    pub spatial_bn: BatchNorm,
    pub spatial_sn: Sn,
    pub groups: Vec<Linear>,
    pub channel_bn: BatchNorm,
    pub channel_sn: Sn,
    pub dim: usize,
}

impl Gsa {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if groups == 0 || dim % groups != 0 {
            return Err(invalid(format!("{dim} channels do not split into {groups} groups")));
        }
        let g = dim / groups;
        Ok(Self {
            name: name.to_string(),
            spatial: Linear::new(store, &format!("{name}.spatial"), dim, 1, true, LayerKind::SnnConv, rng)?,
            spatial_bn: BatchNorm::new(store, &format!("{name}.spatial.bn"), 1)?,
            spatial_sn: Sn::new(store, &format!("{name}.spatial.sn"))?,
            groups: (0..groups)
                .map(|i| Linear::new(store, &format!("{name}.group{i}"), g, g, true, LayerKind::SnnConv, rng))
                .collect::<Result<_>>()?,
            channel_bn: BatchNorm::new(store, &format!("{name}.channel.bn"), dim)?,
            channel_sn: Sn::new(store, &format!("{name}.channel.sn"))?,
            dim,
        })
    }

    /// Binary `[.., 1]` token mask.
    pub fn spatial_mask(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let m = self.spatial.forward(ctx, x)?;
        let m = self.spatial_bn.forward(ctx, m)?;
        self.spatial_sn.forward(ctx, m)
    }

    /// Per-group projections before concatenation.
    pub fn group_outputs(&self, ctx: &mut Ctx, x: Var) -> Result<Vec<Var>> {
        if ctx.value(x).last_dim() != self.dim {
            return Err(invalid(format!("`{}` expects {} channels", self.name, self.dim)));
        }
        let g = self.dim / self.groups.len();
        self.groups
            .iter()
            .enumerate()
            .map(|(i, lin)| {
                let part = ctx.tape.slice_last(x, i * g, g);
                lin.forward(ctx, part)
            })
            .collect()
    }

    /// Binary channel attention computed from `x`.
    pub fn channel_attention(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let parts = self.group_outputs(ctx, x)?;
        let a = ctx.tape.concat_last(&parts);
        let a = self.channel_bn.forward(ctx, a)?;
        self.channel_sn.forward(ctx, a)
    }

    /// Combines an input with given spatial and channel attentions:
    /// `OR(x∘m, a∘(x∘m))`.
    pub fn combine(&self, ctx: &mut Ctx, x: Var, mask: Var, attention: Var) -> Var {
        let spatial = ctx.tape.mul_last_broadcast(x, mask);
        let channel = ctx.tape.mul(attention, spatial);
        spike_or(ctx, &format!("{}.out", self.name), &[spatial, channel])
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mask = self.spatial_mask(ctx, x)?;
        let spatial = ctx.tape.mul_last_broadcast(x, mask);
        let attention = self.channel_attention(ctx, spatial)?;
        let channel = ctx.tape.mul(attention, spatial);
        Ok(spike_or(ctx, &format!("{}.out", self.name), &[spatial, channel]))
    }
}

/// Intermediate tensors of one extractor pass.
#[derive(Clone, Copy, Debug)]
pub struct SseParts {
    pub first: Var,
    pub gsa: Var,
    pub second: Var,
    /// Integer-valued residual sum before re-binarisation.
    pub raw_sum: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct Sse {
    pub name: String,
    pub k: usize,
    pub first: Propagation,
    pub gsa: Gsa,
    pub second: Propagation,
}

impl Sse {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, k: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            k,
            first: Propagation::new(store, &format!("{name}.hyper1"), dim, rng)?,
            gsa: Gsa::new(store, &format!("{name}.gsa"), dim, groups, rng)?,
            second: Propagation::new(store, &format!("{name}.hyper2"), dim, rng)?,
        })
    }

    pub fn forward_parts(&self, ctx: &mut Ctx, x: Var) -> Result<SseParts> {
        let g1 = batch_hypergraphs(ctx.value(x), self.k)?;
        let first = self.first.forward(ctx, &g1, x)?;
        let gsa = self.gsa.forward(ctx, first)?;
        let g2 = batch_hypergraphs(ctx.value(gsa), self.k)?;
        let second = self.second.forward(ctx, &g2, gsa)?;
        let s = ctx.tape.add(second, gsa);
        let raw_sum = ctx.tape.add(s, x);
        let out = ctx.tape.heaviside(raw_sum, crate::neurons::V_THRESHOLD, crate::neurons::SURROGATE_WIDTH);
        ctx.record_spikes(&format!("{}.out", self.name), out);
        Ok(SseParts { first, gsa, second, raw_sum, out })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_parts(ctx, x)?.out)
    }
}
