//! Parameter sweeps over a base configuration.

use std::fmt;
use std::str::FromStr;

use crate::engine::{simulate_model, Report, Strategy};
use crate::error::{Error, Result};
use crate::workload::{synth_routing, RoutingTrace, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKey {
    BatchSize,
    SeqLen,
    DecodeSteps,
    NumNdpDevices,
    Alpha,
    BwPcie,
    /// Per-device NDP bandwidth; the core clock follows to stay rate-matched.
    NdpMemBw,
    GpuMemBw,
    CpuMemBw,
    Skew,
    GpuLayerOverhead,
}

impl SweepKey {
    pub const ALL: [SweepKey; 11] = [
        SweepKey::BatchSize,
        SweepKey::SeqLen,
        SweepKey::DecodeSteps,
        SweepKey::NumNdpDevices,
        SweepKey::Alpha,
        SweepKey::BwPcie,
        SweepKey::NdpMemBw,
        SweepKey::GpuMemBw,
        SweepKey::CpuMemBw,
        SweepKey::Skew,
        SweepKey::GpuLayerOverhead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepKey::BatchSize => "B",
            SweepKey::SeqLen => "S",
            SweepKey::DecodeSteps => "decode_steps",
            SweepKey::NumNdpDevices => "num_ndp_devices",
            SweepKey::Alpha => "alpha",
            SweepKey::BwPcie => "bw_pcie",
            SweepKey::NdpMemBw => "ndp_mem_bw",
            SweepKey::GpuMemBw => "gpu_mem_bw",
            SweepKey::CpuMemBw => "cpu_mem_bw",
            SweepKey::Skew => "skew",
            SweepKey::GpuLayerOverhead => "gpu_layer_overhead_s",
        }
    }

    fn is_integer(self) -> bool {
        matches!(
            self,
            SweepKey::BatchSize
                | SweepKey::SeqLen
                | SweepKey::DecodeSteps
                | SweepKey::NumNdpDevices
        )
    }

    /// The key's current value in `cfg`.
    pub fn get(self, cfg: &SimConfig) -> f64 {
        let hw = &cfg.hardware;
        match self {
            SweepKey::BatchSize => cfg.batch.batch_size as f64,
            SweepKey::SeqLen => cfg.batch.seq_len as f64,
            SweepKey::DecodeSteps => cfg.batch.decode_steps as f64,
            SweepKey::NumNdpDevices => hw.num_ndp_devices as f64,
            SweepKey::Alpha => hw.alpha,
            SweepKey::BwPcie => hw.bw_pcie,
            SweepKey::NdpMemBw => hw.ndp_mem_bw,
            SweepKey::GpuMemBw => hw.gpu_mem_bw,
            SweepKey::CpuMemBw => hw.cpu_mem_bw,
            SweepKey::Skew => cfg.sim.skew,
            SweepKey::GpuLayerOverhead => hw.gpu_layer_overhead_s,
        }
    }

    /// True if changing the key changes the routing trace shape or content.
    pub fn affects_trace(self) -> bool {
        matches!(
            self,
            SweepKey::BatchSize | SweepKey::SeqLen | SweepKey::DecodeSteps | SweepKey::Skew
        )
    }
}

impl fmt::Display for SweepKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let alias = match s {
            "batch_size" | "b" => "B",
            "seq_len" | "s" => "S",
            "devices" => "num_ndp_devices",
            other => other,
        };
        SweepKey::ALL
            .into_iter()
            .find(|k| k.name() == alias)
            .ok_or_else(|| Error::UnknownSweepKey(s.to_string()))
    }
}

/// A swept value: absolute, or a multiple of the base (`0.5x`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    Absolute(f64),
    Scale(f64),
}

impl SweepValue {
    pub fn resolve(self, key: SweepKey, base: &SimConfig) -> f64 {
        match self {
            SweepValue::Absolute(v) => v,
            SweepValue::Scale(s) => s * key.get(base),
        }
    }
}

impl FromStr for SweepValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let (num, scaled) = match t.strip_suffix(['x', 'X', '×']) {
            Some(n) => (n, true),
            None => (t, false),
        };
        let v: f64 = num
            .trim()
            .parse()
            .map_err(|_| Error::Sweep(format!("`{s}` is not a number")))?;
        if !v.is_finite() {
            return Err(Error::Sweep(format!("`{s}` is not finite")));
        }
        Ok(if scaled {
            SweepValue::Scale(v)
        } else {
            SweepValue::Absolute(v)
        })
    }
}

/// Parses a comma-separated list; an empty list is an error.
pub fn parse_values(list: &str) -> Result<Vec<SweepValue>> {
    let vals = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>>>()?;
    if vals.is_empty() {
        return Err(Error::Sweep("empty value list".into()));
    }
    Ok(vals)
}

/// Copy of `base` with `key` set to `value`.
pub fn apply_sweep(base: &SimConfig, key: SweepKey, value: SweepValue) -> Result<SimConfig> {
    let v = value.resolve(key, base);
    let mut cfg = base.clone();
    let as_int = || -> Result<u64> {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Sweep(format!(
                "{key} needs a non-negative integer, got {v}"
            )));
        }
        Ok(v as u64)
    };
    if key.is_integer() {
        as_int()?;
    }
    let hw = &mut cfg.hardware;
    match key {
        SweepKey::BatchSize => cfg.batch.batch_size = v as u64,
        SweepKey::SeqLen => cfg.batch.seq_len = v as u64,
        SweepKey::DecodeSteps => cfg.batch.decode_steps = v as usize,
        SweepKey::NumNdpDevices => hw.num_ndp_devices = v as usize,
        SweepKey::Alpha => hw.alpha = v,
        SweepKey::BwPcie => hw.bw_pcie = v,
        SweepKey::NdpMemBw => {
            hw.ndp.clock_hz *= v / hw.ndp_mem_bw;
            hw.ndp_mem_bw = v;
        }
        SweepKey::GpuMemBw => hw.gpu_mem_bw = v,
        SweepKey::CpuMemBw => hw.cpu_mem_bw = v,
        SweepKey::Skew => cfg.sim.skew = v,
        SweepKey::GpuLayerOverhead => hw.gpu_layer_overhead_s = v,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Simulates `strategies` at one sweep point. A synthetic trace is drawn
/// from `seed` unless a fixed `trace` is given.
pub fn run_point(
    base: &SimConfig,
    key: SweepKey,
    value: SweepValue,
    strategies: &[Strategy],
    seed: u64,
    trace: Option<&RoutingTrace>,
) -> Result<Vec<Report>> {
    let cfg = apply_sweep(base, key, value)?;
    let owned;
    let trace = match trace {
        Some(t) => t,
        None => {
            owned = synth_routing(&cfg.model, &cfg.batch, cfg.sim.skew, seed)?;
            &owned
        }
    };
    strategies
        .iter()
        .map(|&s| simulate_model(s, trace, &cfg))
        .collect()
}
