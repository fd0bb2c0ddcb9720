//! Cycle model of the NDP core.
//!
//! The core is `num_arrays` small systolic arrays of `array_rows ×
//! array_cols` MACs driven in lockstep. One pass produces an
//! `array_rows × (num_arrays · array_cols)` output tile and takes `K` cycles
//! to stream the inner dimension; tiles are processed back to back, output
//! stationary, so only the first tile pays the pipeline fill.

use serde::{Deserialize, Serialize};

use crate::costmodel::{expert_gemms, GemmShape};
use crate::workload::{ModelConfig, NdpCoreConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NdpTimingResult {
    pub cycles: u64,
    pub seconds: f64,
    pub compute_bound: bool,
    pub weight_bytes: u64,
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

pub fn gemm_cycles(shape: GemmShape, core: &NdpCoreConfig) -> u64 {
    if shape.tokens == 0 {
        return 0;
    }
    let row_tiles = ceil_div(shape.tokens, core.array_rows);
    let col_tiles = ceil_div(shape.n, core.tile_width());
    row_tiles * col_tiles * shape.k + core.array_rows + core.array_cols - 2
}

/// Latency of one GEMM: the slower of the tile schedule and streaming the
/// weight matrix once from device memory.
pub fn ndp_gemm_latency(
    shape: GemmShape,
    core: &NdpCoreConfig,
    mem_bw: f64,
    dtype_bytes: u64,
) -> NdpTimingResult {
    if shape.tokens == 0 {
        return NdpTimingResult::default();
    }
    let cycles = gemm_cycles(shape, core);
    let weight_bytes = shape.k * shape.n * dtype_bytes;
    let compute_s = cycles as f64 / core.clock_hz;
    let memory_s = weight_bytes as f64 / mem_bw;
    NdpTimingResult {
        cycles,
        seconds: compute_s.max(memory_s),
        compute_bound: compute_s >= memory_s,
        weight_bytes,
    }
}

/// Both FFN GEMMs of one expert; the activation function is fused into the
/// first GEMM's drain at no extra cost.
pub fn ndp_expert_latency(
    tokens: u64,
    model: &ModelConfig,
    core: &NdpCoreConfig,
    mem_bw: f64,
) -> f64 {
    expert_gemms(tokens, model)
        .iter()
        .map(|&g| ndp_gemm_latency(g, core, mem_bw, model.dtype_bytes).seconds)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::preset;

    #[test]
    fn rate_matched_tile() {
        let core = NdpCoreConfig::default();
        let r = ndp_gemm_latency(GemmShape::new(4, 1024, 4096), &core, 512e9, 2);
        assert_eq!(r.cycles, 16_384 + 6);
        assert_eq!(r.weight_bytes, 8_388_608);
        assert!(r.compute_bound);
        assert!((r.seconds - 16.39e-6).abs() < 0.005e-6);
        let mem = 8_388_608.0 / 512e9;
        assert!((r.seconds - mem) / mem < 0.001);
    }

    #[test]
    fn row_padding() {
        let core = NdpCoreConfig::default();
        let one = ndp_gemm_latency(GemmShape::new(1, 1024, 4096), &core, 512e9, 2);
        let four = ndp_gemm_latency(GemmShape::new(4, 1024, 4096), &core, 512e9, 2);
        assert_eq!(one.cycles, four.cycles);
        let five = ndp_gemm_latency(GemmShape::new(5, 1024, 4096), &core, 512e9, 2);
        assert_eq!(five.cycles, 2 * 16_384 + 6);
    }

    #[test]
    fn zero_tokens() {
        let core = NdpCoreConfig::default();
        let r = ndp_gemm_latency(GemmShape::new(0, 1024, 4096), &core, 512e9, 2);
        assert_eq!(r, NdpTimingResult::default());
        let m = preset("nllb-moe").unwrap().model;
        assert_eq!(ndp_expert_latency(0, &m, &core, 512e9), 0.0);
    }

    #[test]
    fn nllb_expert() {
        let m = preset("nllb-moe").unwrap().model;
        let core = NdpCoreConfig::default();
        let t = ndp_expert_latency(4, &m, &core, 512e9);
        assert!((t - 131.1e-6).abs() < 0.1e-6, "{t}");
        for tokens in 1..=4 {
            let t = ndp_expert_latency(tokens, &m, &core, 512e9);
            let bound = m.expert_bytes() as f64 / 512e9;
            assert!((t - bound).abs() / bound < 0.01);
        }
    }

    #[test]
    fn monotone_in_each_dim() {
        let core = NdpCoreConfig::default();
        let lat = |t, k, n| ndp_gemm_latency(GemmShape::new(t, k, n), &core, 512e9, 2).seconds;
        for t in [0u64, 1, 3, 4, 5, 17, 64] {
            for k in [1u64, 100, 256, 1000] {
                for n in [1u64, 255, 256, 257, 4096] {
                    assert!(lat(t + 1, k, n) >= lat(t, k, n));
                    assert!(lat(t, k + 1, n) >= lat(t, k, n));
                    assert!(lat(t, k, n + 1) >= lat(t, k, n));
                }
            }
        }
    }
}
