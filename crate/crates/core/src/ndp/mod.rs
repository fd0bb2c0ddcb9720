//! The near-data expert device: instruction codec, DRAM address mapping,
//! systolic-array timing, and the per-device execution state.

pub mod addr;
pub mod device;
pub mod isa;
pub mod timing;

pub use addr::{map_address, DramCoord, DramGeometry, Region};
pub use device::{KernelRecord, NdpDevice};
pub use isa::{
    decode_instruction, encode_instruction, CodecError, Decoded, NdpFlags, NdpInstruction, Opcode,
    Operand, FRAME_LEN,
};
pub use timing::{ndp_expert_latency, ndp_gemm_latency, NdpTimingResult};
