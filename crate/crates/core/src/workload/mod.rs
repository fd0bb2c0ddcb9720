//! Static configuration of the simulated system and the routing traces that
//! drive it.
//!
//! A [`SimConfig`] bundles the MoE model shape, the batch geometry, the
//! hardware constants, and a few simulation knobs. Configurations are built
//! either from a named preset or from a TOML file (see [`config`]), and are
//! immutable once validated.

pub mod config;
pub mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndp::addr::DramGeometry;

pub use config::{load_config, parse_config, preset, PRESETS};
pub use trace::{export_trace, ingest_trace, read_trace, synth_routing, write_trace, RoutingTrace};

/// Shape of the MoE Transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub num_experts: usize,
    pub d_model: u64,
    pub d_ff: u64,
    pub num_layers: usize,
    /// Indices (into `0..num_layers`) of the layers whose FFN is an MoE layer.
    pub moe_layer_indices: Vec<usize>,
    pub top_k: usize,
    pub dtype_bytes: u64,
    /// Attention plus dense-FFN parameter bytes of one Transformer layer.
    pub nonexpert_bytes_per_layer: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::field("num_experts", "must be at least 1"));
        }
        if self.num_experts > u32::MAX as usize {
            return Err(Error::field("num_experts", "must fit in 32 bits"));
        }
        if self.d_model == 0 {
            return Err(Error::field("d_model", "must be at least 1"));
        }
        if self.d_ff == 0 {
            return Err(Error::field("d_ff", "must be at least 1"));
        }
        if self.top_k != 1 && self.top_k != 2 {
            return Err(Error::field("top_k", "top_k must be 1 or 2"));
        }
        if self.top_k > self.num_experts {
            return Err(Error::field("top_k", "top_k must not exceed num_experts"));
        }
        if !matches!(self.dtype_bytes, 1 | 2 | 4) {
            return Err(Error::field("dtype_bytes", "must be 1, 2 or 4"));
        }
        if let Some(&bad) = self
            .moe_layer_indices
            .iter()
            .find(|&&l| l >= self.num_layers)
        {
            return Err(Error::field(
                "moe_layer_indices",
                format!("layer {bad} is outside 0..{}", self.num_layers),
            ));
        }
        let mut sorted = self.moe_layer_indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.moe_layer_indices.len() || sorted != self.moe_layer_indices {
            return Err(Error::field(
                "moe_layer_indices",
                "must be strictly increasing without duplicates",
            ));
        }
        Ok(())
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.moe_layer_indices.binary_search(&layer).is_ok()
    }

    pub fn num_moe_layers(&self) -> usize {
        self.moe_layer_indices.len()
    }

    /// Bytes of one expert (both FFN matrices).
    pub fn expert_bytes(&self) -> u64 {
        2 * self.d_model * self.d_ff * self.dtype_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Encoder,
    Decoder,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Encoder => "encoder",
            Mode::Decoder => "decoder",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Mode::Encoder),
            "decoder" => Ok(Mode::Decoder),
            other => Err(Error::field(
                "mode",
                format!("`{other}` is not encoder or decoder"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    /// Sequences per batch.
    pub batch_size: u64,
    /// Tokens per sequence.
    pub seq_len: u64,
    pub mode: Mode,
    /// Number of auto-regressive steps simulated in decoder mode.
    pub decode_steps: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 4,
            seq_len: 512,
            mode: Mode::Encoder,
            decode_steps: 8,
        }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::field("batch_size", "must be at least 1"));
        }
        if self.seq_len == 0 {
            return Err(Error::field("seq_len", "must be at least 1"));
        }
        if self.mode == Mode::Decoder && self.decode_steps == 0 {
            return Err(Error::field(
                "decode_steps",
                "must be at least 1 in decoder mode",
            ));
        }
        Ok(())
    }

    /// Tokens routed through one MoE layer in one step.
    pub fn tokens_per_step(&self) -> u64 {
        match self.mode {
            Mode::Encoder => self.batch_size * self.seq_len,
            Mode::Decoder => self.batch_size,
        }
    }

    pub fn num_steps(&self) -> usize {
        match self.mode {
            Mode::Encoder => 1,
            Mode::Decoder => self.decode_steps,
        }
    }

    /// Tokens per sequence seen by one step's activation movement.
    pub fn step_seq_len(&self) -> u64 {
        match self.mode {
            Mode::Encoder => self.seq_len,
            Mode::Decoder => 1,
        }
    }
}

/// Geometry of one near-data compute core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdpCoreConfig {
    pub num_arrays: u64,
    pub array_rows: u64,
    pub array_cols: u64,
    pub clock_hz: f64,
    pub buffer_bytes: u64,
}

impl Default for NdpCoreConfig {
    fn default() -> Self {
        NdpCoreConfig {
            num_arrays: 64,
            array_rows: 4,
            array_cols: 4,
            clock_hz: 1e9,
            buffer_bytes: 264 * 1024,
        }
    }
}

impl NdpCoreConfig {
    /// Output columns produced per tile pass across all arrays.
    pub fn tile_width(&self) -> u64 {
        self.num_arrays * self.array_cols
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("ndp.num_arrays", self.num_arrays),
            ("ndp.array_rows", self.array_rows),
            ("ndp.array_cols", self.array_cols),
            ("ndp.buffer_bytes", self.buffer_bytes),
        ] {
            if v == 0 {
                return Err(Error::field(field, "must be greater than 0"));
            }
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err(Error::field("ndp.clock_hz", "must be a positive frequency"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareConfig {
    /// Nominal GPU link bandwidth, bytes/s.
    pub bw_pcie: f64,
    /// Fraction of `bw_pcie` actually achieved by bulk copies.
    pub pcie_efficiency: f64,
    pub gpu_peak_flops: f64,
    pub gpu_mem_bw: f64,
    pub cpu_mem_bw: f64,
    pub ndp: NdpCoreConfig,
    /// Memory bandwidth of one NDP device, bytes/s.
    pub ndp_mem_bw: f64,
    pub ndp_mem_capacity: u64,
    pub num_ndp_devices: usize,
    pub alpha: f64,
    /// Fixed latency added to every GPU expert GEMM.
    pub gpu_op_overhead_s: f64,
    /// Fixed host-side latency of one Transformer layer's attention and dense
    /// ops (kernel launches, framework dispatch).
    pub gpu_layer_overhead_s: f64,
    /// Expert slots of a cross-layer GPU expert cache; 0 disables it.
    pub gpu_expert_cache: usize,
    pub dram: DramGeometry,
}

/// Default per-layer host overhead. See README "Calibration".
pub const DEFAULT_GPU_LAYER_OVERHEAD_S: f64 = 5.5e-3;

impl Default for HardwareConfig {
    fn default() -> Self {
        HardwareConfig {
            bw_pcie: 32e9,
            pcie_efficiency: 1.0,
            gpu_peak_flops: 312e12,
            gpu_mem_bw: 1.935e12,
            cpu_mem_bw: 187e9,
            ndp: NdpCoreConfig::default(),
            ndp_mem_bw: 512e9,
            ndp_mem_capacity: 512 << 30,
            num_ndp_devices: 1,
            alpha: 1.0,
            gpu_op_overhead_s: 0.0,
            gpu_layer_overhead_s: DEFAULT_GPU_LAYER_OVERHEAD_S,
            gpu_expert_cache: 0,
            dram: DramGeometry::default(),
        }
    }
}

fn check_positive(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::field(
            field,
            format!("must be a positive finite number, got {v}"),
        ))
    }
}

fn check_non_negative(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::field(
            field,
            format!("must be a non-negative finite number, got {v}"),
        ))
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("bw_pcie", self.bw_pcie)?;
        check_positive("pcie_efficiency", self.pcie_efficiency)?;
        if self.pcie_efficiency > 1.0 {
            return Err(Error::field("pcie_efficiency", "must not exceed 1"));
        }
        check_positive("gpu_peak_flops", self.gpu_peak_flops)?;
        check_positive("gpu_mem_bw", self.gpu_mem_bw)?;
        check_positive("cpu_mem_bw", self.cpu_mem_bw)?;
        check_positive("ndp_mem_bw", self.ndp_mem_bw)?;
        check_positive("alpha", self.alpha)?;
        check_non_negative("gpu_op_overhead_s", self.gpu_op_overhead_s)?;
        check_non_negative("gpu_layer_overhead_s", self.gpu_layer_overhead_s)?;
        if self.num_ndp_devices == 0 {
            return Err(Error::field("num_ndp_devices", "must be at least 1"));
        }
        if self.ndp_mem_capacity == 0 {
            return Err(Error::field("ndp_mem_capacity", "must be greater than 0"));
        }
        self.ndp.validate()?;
        self.dram.validate()?;
        if self.ndp_mem_capacity > self.dram.capacity() {
            return Err(Error::field(
                "ndp_mem_capacity",
                format!(
                    "exceeds DRAM geometry capacity of {} bytes",
                    self.dram.capacity()
                ),
            ));
        }
        Ok(())
    }

    /// Achieved GPU link bandwidth.
    pub fn pcie_bw(&self) -> f64 {
        self.bw_pcie * self.pcie_efficiency
    }

    /// Memory bandwidth summed over all NDP devices.
    pub fn aggregate_ndp_bw(&self) -> f64 {
        self.ndp_mem_bw * self.num_ndp_devices as f64
    }
}

/// Simulation knobs that are not hardware or model properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Zipf exponent for synthetic routing.
    pub skew: f64,
    pub autotune: bool,
    /// Retune α after this many MoE-layer invocations.
    pub autotune_every: usize,
    /// Number of most recent histograms replayed by the tuner.
    pub autotune_window: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            skew: 1.2,
            autotune: true,
            autotune_every: 8,
            autotune_window: 4,
        }
    }
}

impl SimOptions {
    pub fn validate(&self) -> Result<()> {
        check_non_negative("skew", self.skew)?;
        if self.autotune_every == 0 {
            return Err(Error::field("autotune_every", "must be at least 1"));
        }
        if self.autotune_window == 0 {
            return Err(Error::field("autotune_window", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub batch: BatchConfig,
    pub hardware: HardwareConfig,
    pub sim: SimOptions,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.batch.validate()?;
        self.hardware.validate()?;
        self.sim.validate()?;
        let need = self
            .model
            .expert_bytes()
            .checked_mul(self.model.num_experts as u64)
            .and_then(|b| b.checked_mul(self.model.num_moe_layers() as u64))
            .ok_or(Error::Overflow("total expert bytes"))?;
        let have = self
            .hardware
            .ndp_mem_capacity
            .saturating_mul(self.hardware.num_ndp_devices as u64);
        if need > have {
            return Err(Error::field(
                "ndp_mem_capacity",
                format!("expert parameters need {need} bytes but devices hold {have}"),
            ));
        }
        Ok(())
    }
}
