//! Operation counting and the 45 nm energy estimate.
//!
//! The first (real-valued) projection of the skeleton branch is charged at the
//! multiply-accumulate cost per FLOP. Every other layer only ever sees spikes,
//! so it is charged at the accumulate cost per synaptic operation, where
//! `SOPs = f_r · T · FLOPs`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::ctx::LayerRecord;
use crate::error::{invalid, Result};

/// Energy per multiply-accumulate, picojoules.
pub const E_MAC_PJ: f64 = 4.6;
/// Energy per accumulate, picojoules.
pub const E_AC_PJ: f64 = 0.9;

const PJ_PER_MJ: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    SnnConv,
    SnnFc,
    Ssa,
    FftIfft,
    Ssm,
    FirstLp,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::SnnConv => "snn_conv",
            LayerKind::SnnFc => "snn_fc",
            LayerKind::Ssa => "ssa",
            LayerKind::FftIfft => "fft_ifft",
            LayerKind::Ssm => "ssm",
            LayerKind::FirstLp => "first_lp",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "snn_conv" => LayerKind::SnnConv,
            "snn_fc" => LayerKind::SnnFc,
            "ssa" => LayerKind::Ssa,
            "fft_ifft" => LayerKind::FftIfft,
            "ssm" => LayerKind::Ssm,
            "first_lp" => LayerKind::FirstLp,
            other => return Err(invalid(format!("unknown layer kind `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerProfile {
    pub name: String,
    pub kind: LayerKind,
    pub flops: f64,
    pub firing_rate: f64,
    pub timesteps: usize,
}

/// `f_r · T · FLOPs`.
pub fn sops(firing_rate: f64, timesteps: usize, flops: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&firing_rate) {
        return Err(invalid(format!("firing rate {firing_rate} outside [0, 1]")));
    }
    if timesteps == 0 {
        return Err(invalid("time steps must be at least 1"));
    }
    Ok(firing_rate * timesteps as f64 * flops)
}

/// Dense energy in picojoules.
pub fn ann_power(flops: f64) -> f64 {
    E_MAC_PJ * flops
}

/// Spiking energy in picojoules.
pub fn snn_power(sops: f64) -> f64 {
    E_AC_PJ * sops
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyRow {
    pub name: String,
    pub kind: LayerKind,
    pub flops: f64,
    pub firing_rate: f64,
    /// Zero for the MAC-charged first projection.
    pub sops: f64,
    pub picojoules: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub rows: Vec<EnergyRow>,
    pub mac_pj: f64,
    pub ac_pj: f64,
    pub total_sops: f64,
    pub total_pj: f64,
}

impl EnergyReport {
    pub fn total_mj(&self) -> f64 {
        self.total_pj / PJ_PER_MJ
    }

    /// Sum of the row energies in row order.
    pub fn row_sum_pj(&self) -> f64 {
        self.rows.iter().map(|r| r.picojoules).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:<9} {:>14} {:>8} {:>14} {:>14}", "layer", "kind", "flops", "f_r", "sops", "pJ");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<28} {:<9} {:>14.6e} {:>8.4} {:>14.6e} {:>14.6e}",
                r.name, r.kind, r.flops, r.firing_rate, r.sops, r.picojoules
            );
        }
        let _ = writeln!(s, "mac_pj={:.6e} ac_pj={:.6e} total_pj={:.6e} total_mj={:.6e}", self.mac_pj, self.ac_pj, self.total_pj, self.total_mj());
        s
    }

    /// `key=value` lines; floats use the shortest exact representation.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(s, "layer.{i}.name={}", r.name);
            let _ = writeln!(s, "layer.{i}.kind={}", r.kind);
            let _ = writeln!(s, "layer.{i}.flops={:?}", r.flops);
            let _ = writeln!(s, "layer.{i}.firing_rate={:?}", r.firing_rate);
            let _ = writeln!(s, "layer.{i}.sops={:?}", r.sops);
            let _ = writeln!(s, "layer.{i}.pj={:?}", r.picojoules);
        }
        let _ = writeln!(s, "total.sops={:?}", self.total_sops);
        let _ = writeln!(s, "total.mac_pj={:?}", self.mac_pj);
        let _ = writeln!(s, "total.ac_pj={:?}", self.ac_pj);
        let _ = writeln!(s, "total.pj={:?}", self.total_pj);
        let _ = writeln!(s, "total.mj={:?}", self.total_mj());
        s
    }
}

pub fn model_energy(profiles: &[LayerProfile]) -> Result<EnergyReport> {
    let first = profiles.iter().filter(|p| p.kind == LayerKind::FirstLp).count();
    if first > 1 {
        return Err(invalid(format!("{first} first-projection layers; at most one is allowed")));
    }
    let mut rows = Vec::with_capacity(profiles.len());
    let (mut mac_pj, mut ac_pj, mut total_sops) = (0.0, 0.0, 0.0);
    for p in profiles {
        if p.flops < 0.0 {
            return Err(invalid(format!("layer `{}` has negative FLOPs", p.name)));
        }
        let (s, pj) = if p.kind == LayerKind::FirstLp {
            (0.0, ann_power(p.flops))
        } else {
            let s = sops(p.firing_rate, p.timesteps, p.flops)?;
            (s, snn_power(s))
        };
        if p.kind == LayerKind::FirstLp {
            mac_pj += pj;
        } else {
            ac_pj += pj;
            total_sops += s;
        }
        rows.push(EnergyRow {
            name: p.name.clone(),
            kind: p.kind,
            flops: p.flops,
            firing_rate: p.firing_rate,
            sops: s,
            picojoules: pj,
        });
    }
    let total_pj = rows.iter().map(|r| r.picojoules).sum();
    Ok(EnergyReport { rows, mac_pj, ac_pj, total_sops, total_pj })
}

/// Converts forward-pass records into profiles over `timesteps` steps.
pub fn profiles_from_records(records: &[LayerRecord], timesteps: usize) -> Vec<LayerProfile> {
    records
        .iter()
        .map(|r| LayerProfile {
            name: r.name.clone(),
            kind: r.kind,
            flops: r.flops,
            firing_rate: r.firing_rate,
            timesteps,
        })
        .collect()
}

/// Shape description of a layer for FLOP counting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerDesc {
    /// `m×k · k×n`.
    Matmul { m: usize, k: usize, n: usize },
    Conv { c_in: usize, c_out: usize, kernel: usize, positions: usize },
    /// One real-input transform of length `n`, counted as `8·n²`.
    Dft { n: usize },
    /// Diagonal state-space recurrence: `5·d·n_state` per step.
    Ssm { d: usize, n_state: usize, steps: usize },
}

pub fn count_flops(desc: LayerDesc) -> f64 {
    match desc {
        LayerDesc::Matmul { m, k, n } => 2.0 * (m * k * n) as f64,
        LayerDesc::Conv { c_in, c_out, kernel, positions } => 2.0 * (c_in * c_out * kernel * positions) as f64,
        LayerDesc::Dft { n } => 8.0 * (n * n) as f64,
        LayerDesc::Ssm { d, n_state, steps } => 5.0 * (d * n_state * steps) as f64,
    }
}

/// Parses `kind` and its dimensions, e.g. `("matmul", [2, 3, 4])`.
pub fn count_flops_named(kind: &str, dims: &[usize]) -> Result<f64> {
    let need = |n: usize| -> Result<()> {
        if dims.len() != n {
            return Err(invalid(format!("`{kind}` needs {n} dimensions, got {}", dims.len())));
        }
        Ok(())
    };
    let desc = match kind {
        "matmul" => {
            need(3)?;
            LayerDesc::Matmul { m: dims[0], k: dims[1], n: dims[2] }
        }
        "conv" => {
            need(4)?;
            LayerDesc::Conv { c_in: dims[0], c_out: dims[1], kernel: dims[2], positions: dims[3] }
        }
        "dft" => {
            need(1)?;
            LayerDesc::Dft { n: dims[0] }
        }
        "ssm" => {
            need(3)?;
            LayerDesc::Ssm { d: dims[0], n_state: dims[1], steps: dims[2] }
        }
        other => return Err(invalid(format!("unknown layer kind `{other}`"))),
    };
    Ok(count_flops(desc))
}
