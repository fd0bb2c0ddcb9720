//! Closed-form data-movement volumes and roofline compute times.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::ExpertHistogram;
use crate::scheduler::ExpertPartition;
use crate::workload::{BatchConfig, HardwareConfig, ModelConfig};

/// A `T × K` by `K × N` matrix product. `tokens` may be 0 for an expert
/// nobody routed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmShape {
    pub tokens: u64,
    pub k: u64,
    pub n: u64,
}

impl GemmShape {
    pub fn new(tokens: u64, k: u64, n: u64) -> Self {
        GemmShape { tokens, k, n }
    }

    pub fn flops(&self) -> f64 {
        2.0 * self.tokens as f64 * self.k as f64 * self.n as f64
    }

    /// Bytes touched: both operands plus the output.
    pub fn bytes(&self, dtype_bytes: u64) -> f64 {
        let (t, k, n) = (self.tokens as f64, self.k as f64, self.n as f64);
        (t * k + k * n + t * n) * dtype_bytes as f64
    }
}

/// The two GEMMs of one expert FFN for `tokens` routed tokens.
pub fn expert_gemms(tokens: u64, model: &ModelConfig) -> [GemmShape; 2] {
    [
        GemmShape::new(tokens, model.d_model, model.d_ff),
        GemmShape::new(tokens, model.d_ff, model.d_model),
    ]
}

fn checked_product(what: &'static str, factors: &[u64]) -> Result<u64> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or(Error::Overflow(what))
}

/// Bytes moved to fetch `experts` experts' FFN weights.
pub fn pmove_bytes(experts: u64, d_model: u64, d_ff: u64, dtype_bytes: u64) -> Result<u64> {
    checked_product(
        "parameter movement",
        &[2, experts, d_model, d_ff, dtype_bytes],
    )
}

/// Bytes moved to ship input activations out and output activations back.
pub fn amove_bytes(batch: u64, seq: u64, d_model: u64, dtype_bytes: u64) -> Result<u64> {
    checked_product(
        "activation movement",
        &[2, batch, seq, d_model, dtype_bytes],
    )
}

pub fn transfer_time(bytes: u64, link_bw: f64) -> f64 {
    bytes as f64 / link_bw
}

/// Roofline latency of one GEMM on the GPU.
pub fn gpu_gemm_time(shape: GemmShape, hw: &HardwareConfig, dtype_bytes: u64) -> f64 {
    if shape.tokens == 0 {
        return 0.0;
    }
    let compute = shape.flops() / hw.gpu_peak_flops;
    let memory = shape.bytes(dtype_bytes) / hw.gpu_mem_bw;
    compute.max(memory) + hw.gpu_op_overhead_s
}

/// GPU latency of one expert (both GEMMs).
pub fn gpu_expert_time(tokens: u64, model: &ModelConfig, hw: &HardwareConfig) -> f64 {
    expert_gemms(tokens, model)
        .iter()
        .map(|&g| gpu_gemm_time(g, hw, model.dtype_bytes))
        .sum()
}

/// CPU latency of one expert, bound by streaming weights and activations
/// through CPU memory.
pub fn cpu_expert_time(tokens: u64, model: &ModelConfig, hw: &HardwareConfig) -> f64 {
    if tokens == 0 {
        return 0.0;
    }
    expert_gemms(tokens, model)
        .iter()
        .map(|g| g.bytes(model.dtype_bytes))
        .sum::<f64>()
        / hw.cpu_mem_bw
}

/// Attention and dense-FFN latency of one Transformer layer.
pub fn dense_layer_time(model: &ModelConfig, hw: &HardwareConfig) -> f64 {
    model.nonexpert_bytes_per_layer as f64 / hw.gpu_mem_bw + hw.gpu_layer_overhead_s
}

/// The six workflow times of the load-balanced layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkflowTimes {
    pub t_pm: f64,
    pub t_am: f64,
    pub t_gpu: f64,
    pub t_md: f64,
    pub t_gwf: f64,
    pub t_mdwf: f64,
}

impl WorkflowTimes {
    pub fn new(t_pm: f64, t_am: f64, t_gpu: f64, t_md: f64) -> Self {
        let times = WorkflowTimes {
            t_pm,
            t_am,
            t_gpu,
            t_md,
            t_gwf: t_pm + t_gpu,
            t_mdwf: t_am + t_md,
        };
        debug_assert!(times.holds_identity());
        times
    }

    pub fn holds_identity(&self) -> bool {
        self.t_gwf == self.t_pm + self.t_gpu && self.t_mdwf == self.t_am + self.t_md
    }

    pub fn makespan(&self) -> f64 {
        self.t_gwf.max(self.t_mdwf)
    }
}

/// Bandwidth-bound estimate of the two workflows for a partition.
///
/// NDP time is the weight volume of the NDP experts over the aggregate
/// device bandwidth. Activation movement covers only the token slots routed
/// to NDP experts.
pub fn analytic_workflow_times(
    partition: &ExpertPartition,
    hist: &ExpertHistogram,
    model: &ModelConfig,
    batch: &BatchConfig,
    hw: &HardwareConfig,
) -> Result<WorkflowTimes> {
    let link = hw.pcie_bw();
    let n_gpu = partition.gpu_experts.len() as u64;
    let n_md = partition.num_ndp_experts() as u64;
    let t_pm = transfer_time(
        pmove_bytes(n_gpu, model.d_model, model.d_ff, model.dtype_bytes)?,
        link,
    );
    let t_md = pmove_bytes(n_md, model.d_model, model.d_ff, model.dtype_bytes)? as f64
        / hw.aggregate_ndp_bw();
    let t_gpu = partition
        .gpu_experts
        .iter()
        .map(|&e| gpu_expert_time(hist.get(e), model, hw))
        .sum();

    let total = hist.total();
    let ndp_slots: u64 = partition.ndp_experts().map(|e| hist.get(e)).sum();
    let full = amove_bytes(
        batch.batch_size,
        batch.step_seq_len(),
        model.d_model,
        model.dtype_bytes,
    )?;
    let t_am = if total == 0 {
        0.0
    } else {
        transfer_time(full, link) * ndp_slots as f64 / total as f64
    };
    Ok(WorkflowTimes::new(t_pm, t_am, t_gpu, t_md))
}

/// Ratio of PCIe fetch time to GPU compute time for a single-token expert.
pub fn single_token_transfer_ratio(model: &ModelConfig, hw: &HardwareConfig) -> f64 {
    let fetch = transfer_time(model.expert_bytes(), hw.pcie_bw());
    fetch / gpu_expert_time(1, model, hw)
}
