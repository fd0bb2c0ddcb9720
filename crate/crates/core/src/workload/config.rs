//! Presets and the TOML config file format.
//!
//! A config file may name a `preset` and then override any field of it:
//!
//! ```toml
//! preset = "nllb-moe"
//!
//! [batch]
//! batch_size = 4
//! mode = "decoder"
//!
//! [hardware]
//! num_ndp_devices = 2
//!
//! [hardware.ndp]
//! clock_hz = 2e9
//! ```
//!
//! Without a preset every `[model]` field is required. Unknown keys are
//! rejected.

use std::path::Path;

use serde::Deserialize;

use super::{BatchConfig, HardwareConfig, Mode, ModelConfig, NdpCoreConfig, SimConfig, SimOptions};
use crate::error::{Error, Result};
use crate::ndp::addr::DramGeometry;

pub const PRESETS: [&str; 2] = ["switch-large-128", "nllb-moe"];

/// 24 encoder + 24 decoder layers, MoE in every other layer.
fn switch_large_128() -> ModelConfig {
    ModelConfig {
        name: "switch-large-128".into(),
        num_experts: 128,
        d_model: 1024,
        d_ff: 4096,
        num_layers: 48,
        moe_layer_indices: (1..48).step_by(2).collect(),
        top_k: 1,
        dtype_bytes: 2,
        nonexpert_bytes_per_layer: 1_100_000_000 / 48,
    }
}

/// 24 encoder + 24 decoder layers, MoE in every fourth layer.
fn nllb_moe() -> ModelConfig {
    ModelConfig {
        name: "nllb-moe".into(),
        num_experts: 128,
        d_model: 2048,
        d_ff: 8192,
        num_layers: 48,
        moe_layer_indices: (3..48).step_by(4).collect(),
        top_k: 2,
        dtype_bytes: 2,
        nonexpert_bytes_per_layer: 5_700_000_000 / 48,
    }
}

/// Model shape of a named preset.
pub fn preset_model(name: &str) -> Result<ModelConfig> {
    match name {
        "switch-large-128" => Ok(switch_large_128()),
        "nllb-moe" => Ok(nllb_moe()),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// Full default configuration for a named preset.
pub fn preset(name: &str) -> Result<SimConfig> {
    let cfg = SimConfig {
        model: preset_model(name)?,
        batch: BatchConfig::default(),
        hardware: HardwareConfig::default(),
        sim: SimOptions::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    batch: RawBatch,
    #[serde(default)]
    hardware: RawHardware,
    #[serde(default)]
    sim: RawSim,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: Option<String>,
    num_experts: Option<usize>,
    d_model: Option<u64>,
    d_ff: Option<u64>,
    num_layers: Option<usize>,
    moe_layer_indices: Option<Vec<usize>>,
    top_k: Option<usize>,
    dtype_bytes: Option<u64>,
    nonexpert_bytes_per_layer: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBatch {
    #[serde(alias = "B")]
    batch_size: Option<u64>,
    #[serde(alias = "S")]
    seq_len: Option<u64>,
    mode: Option<Mode>,
    decode_steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNdp {
    num_arrays: Option<u64>,
    array_rows: Option<u64>,
    array_cols: Option<u64>,
    clock_hz: Option<f64>,
    buffer_bytes: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDram {
    channel_bits: Option<u32>,
    column_bits: Option<u32>,
    rank_bits: Option<u32>,
    bank_group_bits: Option<u32>,
    bank_bits: Option<u32>,
    row_bits: Option<u32>,
    burst_bytes_log2: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHardware {
    bw_pcie: Option<f64>,
    pcie_efficiency: Option<f64>,
    gpu_peak_flops: Option<f64>,
    gpu_mem_bw: Option<f64>,
    cpu_mem_bw: Option<f64>,
    ndp_mem_bw: Option<f64>,
    ndp_mem_capacity: Option<u64>,
    num_ndp_devices: Option<usize>,
    alpha: Option<f64>,
    gpu_op_overhead_s: Option<f64>,
    gpu_layer_overhead_s: Option<f64>,
    gpu_expert_cache: Option<usize>,
    #[serde(default)]
    ndp: RawNdp,
    #[serde(default)]
    dram: RawDram,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSim {
    skew: Option<f64>,
    autotune: Option<bool>,
    autotune_every: Option<usize>,
    autotune_window: Option<usize>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($field:ident),+ $(,)?) => {
        $( if let Some(v) = $src.$field { $dst.$field = v; } )+
    };
}

fn required<T>(v: Option<T>, field: &'static str) -> Result<T> {
    v.ok_or_else(|| Error::field(field, "required when no preset is given"))
}

fn build_model(raw: RawModel, base: Option<ModelConfig>) -> Result<ModelConfig> {
    match base {
        Some(mut m) => {
            overlay!(
                m,
                raw,
                name,
                num_experts,
                d_model,
                d_ff,
                num_layers,
                moe_layer_indices,
                top_k,
                dtype_bytes,
                nonexpert_bytes_per_layer,
            );
            Ok(m)
        }
        None => Ok(ModelConfig {
            name: raw.name.unwrap_or_else(|| "custom".into()),
            num_experts: required(raw.num_experts, "model.num_experts")?,
            d_model: required(raw.d_model, "model.d_model")?,
            d_ff: required(raw.d_ff, "model.d_ff")?,
            num_layers: required(raw.num_layers, "model.num_layers")?,
            moe_layer_indices: required(raw.moe_layer_indices, "model.moe_layer_indices")?,
            top_k: required(raw.top_k, "model.top_k")?,
            dtype_bytes: raw.dtype_bytes.unwrap_or(2),
            nonexpert_bytes_per_layer: raw.nonexpert_bytes_per_layer.unwrap_or(0),
        }),
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before
        .rfind('\n')
        .map_or(before.len(), |nl| before.len() - nl - 1)
        + 1;
    (line, column)
}

/// Parses and validates a config from TOML text.
pub fn parse_config(src: &str) -> Result<SimConfig> {
    let raw: RawConfig = toml::from_str(src).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(src, s.start));
        Error::ConfigParse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;

    let base = raw.preset.as_deref().map(preset_model).transpose()?;
    let model = build_model(raw.model, base)?;

    let mut batch = BatchConfig::default();
    overlay!(batch, raw.batch, batch_size, seq_len, mode, decode_steps);

    let mut hardware = HardwareConfig::default();
    let rh = raw.hardware;
    overlay!(
        hardware,
        rh,
        bw_pcie,
        pcie_efficiency,
        gpu_peak_flops,
        gpu_mem_bw,
        cpu_mem_bw,
        ndp_mem_bw,
        ndp_mem_capacity,
        num_ndp_devices,
        alpha,
        gpu_op_overhead_s,
        gpu_layer_overhead_s,
        gpu_expert_cache,
    );
    let mut ndp = NdpCoreConfig::default();
    overlay!(
        ndp,
        rh.ndp,
        num_arrays,
        array_rows,
        array_cols,
        clock_hz,
        buffer_bytes
    );
    hardware.ndp = ndp;
    let mut dram = DramGeometry::default();
    overlay!(
        dram,
        rh.dram,
        channel_bits,
        column_bits,
        rank_bits,
        bank_group_bits,
        bank_bits,
        row_bits,
        burst_bytes_log2,
    );
    hardware.dram = dram;

    let mut sim = SimOptions::default();
    overlay!(
        sim,
        raw.sim,
        skew,
        autotune,
        autotune_every,
        autotune_window
    );

    let cfg = SimConfig {
        model,
        batch,
        hardware,
        sim,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<SimConfig> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&src)
}
