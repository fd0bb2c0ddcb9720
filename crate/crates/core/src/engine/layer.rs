//! Timeline of one MoE layer under each execution strategy.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::timeline::{Stream, Timeline};
use super::Strategy;
use crate::costmodel::{
    amove_bytes, cpu_expert_time, expert_gemms, gpu_expert_time, transfer_time, WorkflowTimes,
};
use crate::error::Result;
use crate::ndp::{encode_instruction, NdpDevice, NdpInstruction, Opcode};
use crate::router::ExpertHistogram;
use crate::scheduler::{compute_h_for, count_activated, partition_experts, ExpertPartition};
use crate::workload::{BatchConfig, HardwareConfig, ModelConfig};

/// LRU set of `(moe_slot, expert)` weights resident in GPU memory.
#[derive(Debug, Clone, Default)]
pub struct ExpertCache {
    capacity: usize,
    resident: VecDeque<(usize, usize)>,
}

impl ExpertCache {
    pub fn new(capacity: usize) -> Self {
        ExpertCache {
            capacity,
            resident: VecDeque::with_capacity(capacity),
        }
    }

    /// Touches `key`; returns true on a hit. Misses are inserted.
    pub fn access(&mut self, key: (usize, usize)) -> bool {
        if self.capacity == 0 {
            return false;
        }
        if let Some(pos) = self.resident.iter().position(|&k| k == key) {
            self.resident.remove(pos);
            self.resident.push_back(key);
            return true;
        }
        if self.resident.len() == self.capacity {
            self.resident.pop_front();
        }
        self.resident.push_back(key);
        false
    }
}

/// Mutable hardware state carried from one layer to the next.
#[derive(Debug, Clone)]
pub struct EngineState {
    pub devices: Vec<NdpDevice>,
    pub cache: ExpertCache,
}

impl EngineState {
    pub fn new(model: &ModelConfig, hw: &HardwareConfig) -> Self {
        EngineState {
            devices: (0..hw.num_ndp_devices)
                .map(|d| NdpDevice::new(d, hw, model.dtype_bytes))
                .collect(),
            cache: ExpertCache::new(hw.gpu_expert_cache),
        }
    }
}

/// Layer being simulated and the knobs that vary between invocations.
#[derive(Debug, Clone, Copy)]
pub struct LayerContext<'a> {
    pub model: &'a ModelConfig,
    pub batch: &'a BatchConfig,
    pub hw: &'a HardwareConfig,
    /// Position of the layer among the MoE layers; selects its weights.
    pub moe_slot: usize,
    pub alpha: f64,
    /// Forces `H` for the load-balanced strategy instead of deriving it from α.
    pub h_override: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOutcome {
    pub timeline: Timeline,
    pub times: WorkflowTimes,
    pub activated: usize,
    /// Hot-expert count; only set for the load-balanced strategy.
    pub h: Option<usize>,
    pub partition: Option<ExpertPartition>,
}

#[derive(Default)]
struct Acc {
    t_pm: f64,
    t_am: f64,
    t_gpu: f64,
}

fn gpu_flops(tokens: u64, model: &ModelConfig) -> f64 {
    expert_gemms(tokens, model).iter().map(|g| g.flops()).sum()
}

/// GPU compute of `experts` with no weight movement.
fn gpu_resident(
    tl: &mut Timeline,
    acc: &mut Acc,
    experts: &[usize],
    hist: &ExpertHistogram,
    ctx: &LayerContext,
) {
    for &e in experts {
        let tokens = hist.get(e);
        let dur = gpu_expert_time(tokens, ctx.model, ctx.hw);
        tl.reserve(
            Stream::GpuCompute,
            0.0,
            dur,
            format!("expert {e}"),
            0,
            gpu_flops(tokens, ctx.model),
        );
        acc.t_gpu += dur;
    }
}

/// Double-buffered weight fetch and GPU compute of `experts`: the fetch of
/// expert `i` may start once expert `i-2` has released its buffer.
fn gpu_pmove(
    tl: &mut Timeline,
    acc: &mut Acc,
    experts: &[usize],
    hist: &ExpertHistogram,
    ctx: &LayerContext,
    cache: &mut ExpertCache,
) {
    let bytes = ctx.model.expert_bytes();
    let fetch = transfer_time(bytes, ctx.hw.pcie_bw());
    let mut compute_end: Vec<f64> = Vec::with_capacity(experts.len());
    for (i, &e) in experts.iter().enumerate() {
        let weights_ready = if cache.access((ctx.moe_slot, e)) {
            0.0
        } else {
            let buffer_free = if i >= 2 { compute_end[i - 2] } else { 0.0 };
            acc.t_pm += fetch;
            tl.reserve(
                Stream::PcieH2d,
                buffer_free,
                fetch,
                format!("pmove expert {e}"),
                bytes,
                0.0,
            )
        };
        let tokens = hist.get(e);
        let dur = gpu_expert_time(tokens, ctx.model, ctx.hw);
        acc.t_gpu += dur;
        compute_end.push(tl.reserve(
            Stream::GpuCompute,
            weights_ready,
            dur,
            format!("expert {e}"),
            0,
            gpu_flops(tokens, ctx.model),
        ));
    }
}

/// Splits `total` bytes over `weights` proportionally with exact sum.
fn split_bytes(total: u64, weights: &[u64]) -> Vec<u64> {
    let sum: u64 = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out = Vec::with_capacity(weights.len());
    let mut cum = 0u128;
    let mut prev = 0u64;
    for &w in weights {
        cum += w as u128;
        let upto = (total as u128 * cum / sum as u128) as u64;
        out.push(upto - prev);
        prev = upto;
    }
    out
}

/// Half of the activation-movement volume: the inputs (or outputs) of the
/// routed token slots in `slots` out of `total_slots`.
fn activation_half(ctx: &LayerContext, slots: u64, total_slots: u64) -> Result<u64> {
    let full = amove_bytes(
        ctx.batch.batch_size,
        ctx.batch.step_seq_len(),
        ctx.model.d_model,
        ctx.model.dtype_bytes,
    )?;
    let half = full / 2;
    Ok(if slots == total_slots {
        half
    } else {
        (half as u128 * slots as u128 / total_slots as u128) as u64
    })
}

/// Sends activations out over D2H, runs the experts on their NDP devices
/// and returns the outputs over H2D. Returns the longest device busy time.
fn ndp_amove(
    tl: &mut Timeline,
    acc: &mut Acc,
    device_experts: &[Vec<usize>],
    hist: &ExpertHistogram,
    ctx: &LayerContext,
    devices: &mut [NdpDevice],
) -> Result<f64> {
    let slots: Vec<u64> = device_experts
        .iter()
        .map(|es| es.iter().map(|&e| hist.get(e)).sum())
        .collect();
    let offloaded: u64 = slots.iter().sum();
    if offloaded == 0 {
        return Ok(0.0);
    }
    let half = activation_half(ctx, offloaded, hist.total())?;
    let per_device = split_bytes(half, &slots);
    let link = ctx.hw.pcie_bw();
    let dt = ctx.model.dtype_bytes;

    let mut done: Vec<(f64, usize)> = Vec::new();
    let mut t_md: f64 = 0.0;
    for (d, experts) in device_experts.iter().enumerate() {
        if experts.is_empty() {
            continue;
        }
        let dur = transfer_time(per_device[d], link);
        acc.t_am += dur;
        let arrived = tl.reserve(
            Stream::PcieD2h,
            0.0,
            dur,
            format!("amove in dev {d}"),
            per_device[d],
            0.0,
        );

        let dev = &mut devices[d];
        dev.reset();
        for &e in experts {
            let tokens = hist.get(e);
            let [w_up, w_down] = dev.expert_weights(ctx.model, ctx.moe_slot, e)?;
            let input = dev.alloc_activation(tokens * ctx.model.d_model * dt)?;
            let hidden = dev.alloc_activation(tokens * ctx.model.d_ff * dt)?;
            let output = dev.alloc_activation(tokens * ctx.model.d_model * dt)?;
            dev.submit(encode_instruction(&NdpInstruction::new(
                Opcode::GEMM_RELU,
                input,
                w_up,
                hidden,
            ))?);
            dev.submit(encode_instruction(&NdpInstruction::new(
                Opcode::GEMM,
                hidden,
                w_down,
                output,
            ))?);
        }
        let (end, records) = dev.run(arrived)?;
        let mut busy = 0.0;
        for (i, r) in records.iter().enumerate() {
            let e = experts[i / 2];
            let part = if i % 2 == 0 { "up" } else { "down" };
            busy += r.end - r.start;
            tl.place(
                Stream::NdpCompute(d),
                r.start,
                r.end,
                format!("expert {e} {part}"),
                r.instruction.weights.size,
                r.shape.flops(),
            );
        }
        t_md = t_md.max(busy);
        done.push((end, d));
    }

    done.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (end, d) in done {
        let dur = transfer_time(per_device[d], link);
        acc.t_am += dur;
        tl.reserve(
            Stream::PcieH2d,
            end,
            dur,
            format!("amove out dev {d}"),
            per_device[d],
            0.0,
        );
    }
    Ok(t_md)
}

fn cpu_amove(
    tl: &mut Timeline,
    acc: &mut Acc,
    experts: &[usize],
    hist: &ExpertHistogram,
    ctx: &LayerContext,
) -> Result<f64> {
    let total = hist.total();
    if total == 0 {
        return Ok(0.0);
    }
    let half = activation_half(ctx, total, total)?;
    let link = ctx.hw.pcie_bw();
    let dur = transfer_time(half, link);
    let mut ready = tl.reserve(Stream::PcieD2h, 0.0, dur, "amove in cpu", half, 0.0);
    acc.t_am += dur;
    let mut busy = 0.0;
    for &e in experts {
        let tokens = hist.get(e);
        let t = cpu_expert_time(tokens, ctx.model, ctx.hw);
        busy += t;
        ready = tl.reserve(
            Stream::CpuCompute,
            ready,
            t,
            format!("expert {e}"),
            ctx.model.expert_bytes(),
            gpu_flops(tokens, ctx.model),
        );
    }
    tl.reserve(Stream::PcieH2d, ready, dur, "amove out cpu", half, 0.0);
    acc.t_am += dur;
    Ok(busy)
}

/// Simulates one MoE layer from t=0. The hardware state in `state` is
/// reused but its clocks are reset.
pub fn run_moe_layer(
    strategy: Strategy,
    hist: &ExpertHistogram,
    ctx: &LayerContext,
    state: &mut EngineState,
) -> Result<LayerOutcome> {
    let activated = count_activated(hist);
    let ranked = partition_experts(hist, activated, 1)?.gpu_experts;
    let mut tl = Timeline::new();
    let mut acc = Acc::default();
    let mut t_md = 0.0;
    let mut h = None;
    let mut partition = None;

    match strategy {
        Strategy::Ideal => gpu_resident(&mut tl, &mut acc, &ranked, hist, ctx),
        Strategy::GpuPm => gpu_pmove(&mut tl, &mut acc, &ranked, hist, ctx, &mut state.cache),
        Strategy::MdAm => {
            let p = partition_experts(hist, 0, state.devices.len())?;
            t_md = ndp_amove(
                &mut tl,
                &mut acc,
                &p.ndp_devices,
                hist,
                ctx,
                &mut state.devices,
            )?;
        }
        Strategy::MdLb => {
            let hot = ctx
                .h_override
                .unwrap_or_else(|| compute_h_for(hist, ctx.hw, ctx.alpha))
                .min(activated);
            let p = partition_experts(hist, hot, state.devices.len())?;
            gpu_pmove(
                &mut tl,
                &mut acc,
                &p.gpu_experts,
                hist,
                ctx,
                &mut state.cache,
            );
            t_md = ndp_amove(
                &mut tl,
                &mut acc,
                &p.ndp_devices,
                hist,
                ctx,
                &mut state.devices,
            )?;
            h = Some(hot);
            partition = Some(p);
        }
        Strategy::CpuAm => t_md = cpu_amove(&mut tl, &mut acc, &ranked, hist, ctx)?,
    }

    Ok(LayerOutcome {
        timeline: tl,
        times: WorkflowTimes::new(acc.t_pm, acc.t_am, acc.t_gpu, t_md),
        activated,
        h,
        partition,
    })
}

/// Timeline of one MoE layer with fresh hardware state and the configured α.
pub fn simulate_moe_layer(
    strategy: Strategy,
    hist: &ExpertHistogram,
    model: &ModelConfig,
    batch: &BatchConfig,
    hw: &HardwareConfig,
) -> Result<Timeline> {
    let ctx = LayerContext {
        model,
        batch,
        hw,
        moe_slot: 0,
        alpha: hw.alpha,
        h_override: None,
    };
    let mut state = EngineState::new(model, hw);
    Ok(run_moe_layer(strategy, hist, &ctx, &mut state)?.timeline)
}

/// Load-balanced layer makespan at a fixed hot-expert count. Infeasible
/// inputs yield infinity so that a tuner never selects them.
pub fn lb_layer_makespan(
    hist: &ExpertHistogram,
    h: usize,
    model: &ModelConfig,
    batch: &BatchConfig,
    hw: &HardwareConfig,
) -> f64 {
    let ctx = LayerContext {
        model,
        batch,
        hw,
        moe_slot: 0,
        alpha: hw.alpha,
        h_override: Some(h),
    };
    let mut state = EngineState {
        devices: (0..hw.num_ndp_devices)
            .map(|d| NdpDevice::new(d, hw, model.dtype_bytes))
            .collect(),
        cache: ExpertCache::new(0),
    };
    match run_moe_layer(Strategy::MdLb, hist, &ctx, &mut state) {
        Ok(out) => out.timeline.makespan,
        Err(_) => f64::INFINITY,
    }
}
