//! Execution state of one NDP device.
//!
//! The host fills the device's instruction buffer with encoded frames and
//! then kicks it; the device decodes each frame, streams the weights over its
//! DRAM channels, runs the tile schedule and finally raises `done`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::addr::{channel_bytes, map_address, DramGeometry, Region};
use super::isa::{decode_instruction, Decoded, NdpInstruction, Operand, FRAME_LEN};
use super::timing::gemm_cycles;
use crate::costmodel::GemmShape;
use crate::error::{Error, Result};
use crate::workload::{HardwareConfig, ModelConfig, NdpCoreConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRecord {
    pub start: f64,
    pub end: f64,
    pub instruction: NdpInstruction,
    pub shape: GemmShape,
    pub compute_bound: bool,
}

#[derive(Debug, Clone)]
pub struct NdpDevice {
    id: usize,
    geom: DramGeometry,
    core: NdpCoreConfig,
    mem_bw: f64,
    dtype_bytes: u64,
    channel_busy_until: Vec<f64>,
    queue: VecDeque<[u8; FRAME_LEN]>,
    done: bool,
    act_cursor: u64,
    passthrough_frames: usize,
}

impl NdpDevice {
    pub fn new(id: usize, hw: &HardwareConfig, dtype_bytes: u64) -> Self {
        NdpDevice {
            id,
            geom: hw.dram.clone(),
            core: hw.ndp.clone(),
            mem_bw: hw.ndp_mem_bw,
            dtype_bytes,
            channel_busy_until: vec![0.0; hw.dram.num_channels()],
            queue: VecDeque::new(),
            done: false,
            act_cursor: 0,
            passthrough_frames: 0,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn done(&self) -> bool {
        self.done
    }

    /// Frames that arrived without the isNDP flag.
    pub fn passthrough_frames(&self) -> usize {
        self.passthrough_frames
    }

    /// Param-region placement of expert `expert` of MoE layer `moe_slot`:
    /// the up-projection followed by the down-projection.
    pub fn expert_weights(
        &self,
        model: &ModelConfig,
        moe_slot: usize,
        expert: usize,
    ) -> Result<[Operand; 2]> {
        let matrix = model.d_model * model.d_ff * model.dtype_bytes;
        let base = (moe_slot as u64 * model.num_experts as u64 + expert as u64) * 2 * matrix;
        map_address(&self.geom, Region::Param, base + 2 * matrix - 1)?;
        Ok([
            Operand::new(base, matrix),
            Operand::new(base + matrix, matrix),
        ])
    }

    /// Bump-allocates `bytes` (at least one burst) in the activation region.
    pub fn alloc_activation(&mut self, bytes: u64) -> Result<Operand> {
        let burst = self.geom.burst_bytes();
        let addr = self.act_cursor;
        let span = bytes.max(1).div_ceil(burst) * burst;
        map_address(&self.geom, Region::Activation, addr + span - 1)?;
        self.act_cursor += span;
        Ok(Operand::new(addr, bytes))
    }

    pub fn reset_activations(&mut self) {
        self.act_cursor = 0;
    }

    /// Idles all channels at t=0 and frees the activation region.
    pub fn reset(&mut self) {
        self.channel_busy_until.iter_mut().for_each(|b| *b = 0.0);
        self.queue.clear();
        self.done = false;
        self.act_cursor = 0;
    }

    pub fn submit(&mut self, frame: [u8; FRAME_LEN]) {
        self.queue.push_back(frame);
        self.done = false;
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    /// Recovers `(T, K, N)` from operand sizes: `T·K`, `K·N` and `T·N`
    /// elements for input, weights and output.
    fn shape_of(&self, inst: &NdpInstruction) -> Result<GemmShape> {
        let d = self.dtype_bytes as u128;
        let (a, w, c) = (
            inst.in_act.size as u128,
            inst.weights.size as u128,
            inst.out_act.size as u128,
        );
        let bad = || Error::Device(format!("operand sizes {a}/{w}/{c} do not form a GEMM"));
        if a % d != 0 || w % d != 0 || c % d != 0 {
            return Err(bad());
        }
        let (a, w, c) = (a / d, w / d, c / d);
        if (a * c) % w != 0 {
            return Err(bad());
        }
        let t2 = a * c / w;
        let t = (t2 as f64).sqrt().round() as u128;
        if t == 0 || t * t != t2 || a % t != 0 || c % t != 0 {
            return Err(bad());
        }
        let (k, n) = (a / t, c / t);
        if k * n != w {
            return Err(bad());
        }
        Ok(GemmShape::new(t as u64, k as u64, n as u64))
    }

    /// Drains the instruction buffer starting no earlier than `ready_at` and
    /// returns the time the done register is raised.
    pub fn run(&mut self, ready_at: f64) -> Result<(f64, Vec<KernelRecord>)> {
        let n_ch = self.channel_busy_until.len() as f64;
        let per_channel_bw = self.mem_bw / n_ch;
        let mut clock = ready_at;
        let mut records = Vec::with_capacity(self.queue.len());
        while let Some(frame) = self.queue.pop_front() {
            let inst = match decode_instruction(&frame)? {
                Decoded::Kernel(inst) => inst,
                Decoded::MemoryTraffic => {
                    self.passthrough_frames += 1;
                    continue;
                }
            };
            let shape = self.shape_of(&inst)?;
            let start = self
                .channel_busy_until
                .iter()
                .copied()
                .fold(clock, f64::max);
            let per_ch = channel_bytes(&self.geom, inst.weights.addr, inst.weights.size);
            let compute_s = gemm_cycles(shape, &self.core) as f64 / self.core.clock_hz;
            let mut memory_s: f64 = 0.0;
            for (busy, &bytes) in self.channel_busy_until.iter_mut().zip(&per_ch) {
                let t = bytes as f64 / per_channel_bw;
                *busy = start + t;
                memory_s = memory_s.max(t);
            }
            let end = start + compute_s.max(memory_s);
            records.push(KernelRecord {
                start,
                end,
                instruction: inst,
                shape,
                compute_bound: compute_s >= memory_s,
            });
            clock = end;
        }
        self.done = true;
        Ok((clock, records))
    }
}
