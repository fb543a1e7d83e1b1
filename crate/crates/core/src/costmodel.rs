//! Analytic latency of one verification call on an accelerator.
//!
//! A call on a `(k, w + 1)` block at context length `l` costs
//!
//! ```text
//! ops     = attn_ops * k (w+1) (l+w) + mlp_ops * k (w+1)
//! bytes   = weight_bytes + kv_bytes_per_token * l + io_bytes * k (w+1)
//! memory  = bytes / bandwidth
//! tiles   = ceil(ops / tile_ops)
//! waves   = ceil(tiles / multiprocessors)
//! compute = waves * tile_ops / (compute / multiprocessors)
//! latency = max(memory, compute)
//! ```
//!
//! Rounding tiles up to whole waves produces the step-shaped slowdown once
//! the call leaves the memory-bound plateau.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceleratorProfile {
    /// Bytes per second.
    pub bandwidth: f64,
    /// Operations per second across the device.
    pub compute: f64,
    pub multiprocessors: f64,
    /// Operations per tile.
    pub tile_ops: f64,
    /// Bytes moved per call independent of context (weights).
    pub weight_bytes: f64,
    /// Cached key/value bytes per context token.
    pub kv_bytes_per_token: f64,
    /// Attention operations per query-key pair.
    pub attn_ops: f64,
    /// Non-attention operations per processed token.
    pub mlp_ops: f64,
    /// Activation bytes per processed token.
    pub io_bytes: f64,
}

impl Default for AcceleratorProfile {
    /// Loosely a 7B model in 16-bit weights on a 108-multiprocessor card,
    /// with effective rates tuned so the memory-bound plateau shrinks
    /// visibly between `l = 25` and `l = 500`.
    fn default() -> Self {
        AcceleratorProfile {
            bandwidth: 1.5e12,
            compute: 2.0e14,
            multiprocessors: 108.0,
            tile_ops: 1.0e9,
            weight_bytes: 14.5e9,
            kv_bytes_per_token: 131_072.0,
            attn_ops: 4.0e7,
            mlp_ops: 1.4e10,
            io_bytes: 262_144.0,
        }
    }
}

const KEYS: [&str; 9] = [
    "bandwidth",
    "compute",
    "multiprocessors",
    "tile_ops",
    "weight_bytes",
    "kv_bytes_per_token",
    "attn_ops",
    "mlp_ops",
    "io_bytes",
];

impl AcceleratorProfile {
    fn fields(&self) -> [f64; 9] {
        [
            self.bandwidth,
            self.compute,
            self.multiprocessors,
            self.tile_ops,
            self.weight_bytes,
            self.kv_bytes_per_token,
            self.attn_ops,
            self.mlp_ops,
            self.io_bytes,
        ]
    }

    fn fields_mut(&mut self) -> [&mut f64; 9] {
        [
            &mut self.bandwidth,
            &mut self.compute,
            &mut self.multiprocessors,
            &mut self.tile_ops,
            &mut self.weight_bytes,
            &mut self.kv_bytes_per_token,
            &mut self.attn_ops,
            &mut self.mlp_ops,
            &mut self.io_bytes,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in KEYS.iter().zip(self.fields()) {
            if !v.is_finite() {
                return Err(Error::invalid(format!("profile {name} must be finite")));
            }
        }
        for (name, v) in [
            ("bandwidth", self.bandwidth),
            ("compute", self.compute),
            ("multiprocessors", self.multiprocessors),
            ("tile_ops", self.tile_ops),
        ] {
            if v <= 0.0 {
                return Err(Error::invalid(format!("profile {name} must be positive")));
            }
        }
        for (name, v) in KEYS.iter().zip(self.fields()).skip(4) {
            if v < 0.0 {
                return Err(Error::invalid(format!(
                    "profile {name} must not be negative"
                )));
            }
        }
        Ok(())
    }

    /// Operations-to-bytes threshold `compute / bandwidth`.
    pub fn threshold(&self) -> f64 {
        self.compute / self.bandwidth
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        fs::read_to_string(path.as_ref())?.parse()
    }

    /// `key = value` lines in a fixed key order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(self.fields()) {
            let _ = writeln!(s, "{k} = {v:e}");
        }
        s
    }

    pub fn ops(&self, l: usize, k: usize, w: usize) -> f64 {
        let tokens = (k * (w + 1)) as f64;
        self.attn_ops * tokens * (l + w) as f64 + self.mlp_ops * tokens
    }

    pub fn bytes(&self, l: usize, k: usize, w: usize) -> f64 {
        self.weight_bytes
            + self.kv_bytes_per_token * l as f64
            + self.io_bytes * (k * (w + 1)) as f64
    }

    pub fn memory_time(&self, l: usize, k: usize, w: usize) -> f64 {
        self.bytes(l, k, w) / self.bandwidth
    }

    pub fn compute_time(&self, l: usize, k: usize, w: usize) -> f64 {
        let tiles = (self.ops(l, k, w) / self.tile_ops).ceil();
        let waves = (tiles / self.multiprocessors).ceil();
        waves * self.tile_ops / (self.compute / self.multiprocessors)
    }
}

/// Empty lines and `#` comments are ignored; unspecified keys keep their
/// defaults.
impl FromStr for AcceleratorProfile {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut p = AcceleratorProfile::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            let value: f64 = value.trim().parse().map_err(|_| {
                Error::Format(format!("line {}: bad number {:?}", n + 1, value.trim()))
            })?;
            let idx = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| Error::Format(format!("line {}: unknown key {key:?}", n + 1)))?;
            *p.fields_mut()[idx] = value;
        }
        p.validate()?;
        Ok(p)
    }
}

/// Seconds for one verification call on a `(k, w + 1)` block.
pub fn call_latency(profile: &AcceleratorProfile, l: usize, k: usize, w: usize) -> Result<f64> {
    profile.validate()?;
    if l < 1 || k < 1 {
        return Err(Error::invalid("l and k must be at least 1"));
    }
    Ok(profile
        .memory_time(l, k, w)
        .max(profile.compute_time(l, k, w)))
}

/// Latency relative to an unspeculated `(1, 1)` call at the same `l`.
pub fn slowdown(profile: &AcceleratorProfile, l: usize, k: usize, w: usize) -> Result<f64> {
    Ok(call_latency(profile, l, k, w)? / call_latency(profile, l, 1, 0)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyGrid {
    pub l: usize,
    pub ks: Vec<usize>,
    pub ws: Vec<usize>,
    /// `values[i][j]` is the slowdown at `(ks[i], ws[j])`.
    pub values: Vec<Vec<f64>>,
}

impl LatencyGrid {
    pub fn get(&self, k: usize, w: usize) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        let j = self.ws.iter().position(|&x| x == w)?;
        Some(self.values[i][j])
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.ks.iter().enumerate().flat_map(move |(i, &k)| {
            self.ws
                .iter()
                .enumerate()
                .map(move |(j, &w)| (k, w, self.values[i][j]))
        })
    }

    /// Header `l,k,w,slowdown`, one row per cell, `k` outer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("l,k,w,slowdown\n");
        for (k, w, v) in self.cells() {
            let _ = writeln!(s, "{},{k},{w},{v}", self.l);
        }
        s
    }
}

pub fn heatmap(
    profile: &AcceleratorProfile,
    l: usize,
    ks: &[usize],
    ws: &[usize],
) -> Result<LatencyGrid> {
    if ks.is_empty() || ws.is_empty() {
        return Err(Error::invalid("heatmap ranges must be non-empty"));
    }
    let values = ks
        .iter()
        .map(|&k| ws.iter().map(|&w| slowdown(profile, l, k, w)).collect())
        .collect::<Result<_>>()?;
    Ok(LatencyGrid {
        l,
        ks: ks.to_vec(),
        ws: ws.to_vec(),
        values,
    })
}

/// Total simulated seconds `(baseline, speculative)` for one generation.
///
/// The baseline makes `token_count` unspeculated calls at context lengths
/// `l_0, l_0 + 1, ...` where `l_0` is the first traced context length.
pub fn simulated_times(
    trace: &[[usize; 3]],
    token_count: usize,
    profile: &AcceleratorProfile,
) -> Result<(f64, f64)> {
    let first = trace.first().ok_or_else(|| Error::invalid("empty trace"))?[0];
    let baseline = (0..token_count)
        .map(|j| call_latency(profile, first + j, 1, 0))
        .sum::<Result<f64>>()?;
    let speculative = trace
        .iter()
        .map(|&[l, k, w]| call_latency(profile, l, k, w))
        .sum::<Result<f64>>()?;
    Ok((baseline, speculative))
}

pub fn simulate_speedup(
    trace: &[[usize; 3]],
    token_count: usize,
    profile: &AcceleratorProfile,
) -> Result<f64> {
    let (baseline, speculative) = simulated_times(trace, token_count, profile)?;
    Ok(baseline / speculative)
}
