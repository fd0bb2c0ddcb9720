//! The 64-byte host-to-device kernel frame.
//!
//! ```text
//! byte  0      opcode in the low nibble, high nibble zero
//! byte  1      flags (bit 0 = isNDP)
//! bytes 2..8   reserved, zero
//! bytes 8..24  input activation  (addr u64 LE, size u64 LE)
//! bytes 24..40 expert weights    (addr u64 LE, size u64 LE)
//! bytes 40..56 output activation (addr u64 LE, size u64 LE)
//! bytes 56..64 reserved, zero
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FRAME_LEN: usize = 64;

const OPERANDS_AT: usize = 8;
const RESERVED_LO: std::ops::Range<usize> = 2..8;
const RESERVED_HI: std::ops::Range<usize> = 56..64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("frame must be {FRAME_LEN} bytes, got {0}")]
    Length(usize),
    #[error("reserved opcode {0:#x}")]
    ReservedOpcode(u8),
    #[error("opcode {0:#x} does not fit in 4 bits")]
    OpcodeWidth(u8),
    #[error("{0} size must be non-zero")]
    ZeroSize(&'static str),
    #[error("nonzero reserved byte at offset {0}")]
    ReservedBits(usize),
    #[error("NDP kernels must carry the isNDP flag")]
    MissingNdpFlag,
}

/// 4-bit kernel opcode. Only [`Opcode::GEMM`] and [`Opcode::GEMM_RELU`] are
/// defined; every other value is reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Opcode(pub u8);

impl Opcode {
    pub const GEMM: Opcode = Opcode(0x1);
    /// GEMM with a fused trailing activation function.
    pub const GEMM_RELU: Opcode = Opcode(0x2);

    pub fn is_defined(self) -> bool {
        self == Self::GEMM || self == Self::GEMM_RELU
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GEMM => "gemm",
            Self::GEMM_RELU => "gemm+relu",
            _ => "reserved",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NdpFlags(pub u8);

impl NdpFlags {
    pub const IS_NDP: u8 = 1 << 0;

    pub fn ndp() -> Self {
        NdpFlags(Self::IS_NDP)
    }

    pub fn is_ndp(self) -> bool {
        self.0 & Self::IS_NDP != 0
    }
}

/// Device address and byte size of one operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Operand {
    pub addr: u64,
    pub size: u64,
}

impl Operand {
    pub fn new(addr: u64, size: u64) -> Self {
        Operand { addr, size }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NdpInstruction {
    pub opcode: Opcode,
    pub flags: NdpFlags,
    pub in_act: Operand,
    pub weights: Operand,
    pub out_act: Operand,
}

impl NdpInstruction {
    pub fn new(opcode: Opcode, in_act: Operand, weights: Operand, out_act: Operand) -> Self {
        NdpInstruction {
            opcode,
            flags: NdpFlags::ndp(),
            in_act,
            weights,
            out_act,
        }
    }

    fn operands(&self) -> [(&'static str, Operand); 3] {
        [
            ("input activation", self.in_act),
            ("weights", self.weights),
            ("output activation", self.out_act),
        ]
    }

    fn check(&self) -> Result<(), CodecError> {
        if self.opcode.0 > 0xF {
            return Err(CodecError::OpcodeWidth(self.opcode.0));
        }
        if !self.opcode.is_defined() {
            return Err(CodecError::ReservedOpcode(self.opcode.0));
        }
        if !self.flags.is_ndp() {
            return Err(CodecError::MissingNdpFlag);
        }
        for (name, op) in self.operands() {
            if op.size == 0 {
                return Err(CodecError::ZeroSize(name));
            }
        }
        Ok(())
    }
}

impl fmt::Display for NdpInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "opcode   {} ({:#x})", self.opcode.name(), self.opcode.0)?;
        writeln!(
            f,
            "flags    {:#04x} (isNDP={})",
            self.flags.0,
            self.flags.is_ndp() as u8
        )?;
        for (name, op) in self.operands() {
            writeln!(f, "{name:<18} addr={:#014x} size={}", op.addr, op.size)?;
        }
        Ok(())
    }
}

pub fn encode_instruction(inst: &NdpInstruction) -> Result<[u8; FRAME_LEN], CodecError> {
    inst.check()?;
    let mut frame = [0u8; FRAME_LEN];
    frame[0] = inst.opcode.0 & 0x0F;
    frame[1] = inst.flags.0;
    for (i, (_, op)) in inst.operands().iter().enumerate() {
        let at = OPERANDS_AT + 16 * i;
        frame[at..at + 8].copy_from_slice(&op.addr.to_le_bytes());
        frame[at + 8..at + 16].copy_from_slice(&op.size.to_le_bytes());
    }
    Ok(frame)
}

/// What a received frame turned out to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoded {
    Kernel(NdpInstruction),
    /// isNDP clear: ordinary memory traffic, passed through untouched.
    MemoryTraffic,
}

fn u64_at(frame: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(frame[at..at + 8].try_into().unwrap())
}

pub fn decode_instruction(frame: &[u8]) -> Result<Decoded, CodecError> {
    if frame.len() != FRAME_LEN {
        return Err(CodecError::Length(frame.len()));
    }
    let flags = NdpFlags(frame[1]);
    if !flags.is_ndp() {
        return Ok(Decoded::MemoryTraffic);
    }
    if frame[0] & 0xF0 != 0 {
        return Err(CodecError::ReservedBits(0));
    }
    if let Some(i) = RESERVED_LO.chain(RESERVED_HI).find(|&i| frame[i] != 0) {
        return Err(CodecError::ReservedBits(i));
    }
    let operand = |i: usize| {
        let at = OPERANDS_AT + 16 * i;
        Operand::new(u64_at(frame, at), u64_at(frame, at + 8))
    };
    let inst = NdpInstruction {
        opcode: Opcode(frame[0]),
        flags,
        in_act: operand(0),
        weights: operand(1),
        out_act: operand(2),
    };
    inst.check()?;
    Ok(Decoded::Kernel(inst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn relu_example() -> NdpInstruction {
        NdpInstruction::new(
            Opcode::GEMM_RELU,
            Operand::new(0x1000, 64),
            Operand::new(0x2000, 128),
            Operand::new(0x3000, 64),
        )
    }

    #[test]
    fn layout() {
        let frame = encode_instruction(&relu_example()).unwrap();
        assert_eq!(frame[0], 0x02);
        assert_eq!(frame[1], 0x01);
        assert!(frame[2..8].iter().all(|&b| b == 0));
        assert_eq!(&frame[8..16], &0x1000u64.to_le_bytes());
        assert_eq!(&frame[16..24], &64u64.to_le_bytes());
        assert_eq!(&frame[24..32], &0x2000u64.to_le_bytes());
        assert_eq!(&frame[32..40], &128u64.to_le_bytes());
        assert_eq!(&frame[40..48], &0x3000u64.to_le_bytes());
        assert_eq!(&frame[48..56], &64u64.to_le_bytes());
        assert!(frame[56..].iter().all(|&b| b == 0));
        assert_eq!(
            decode_instruction(&frame).unwrap(),
            Decoded::Kernel(relu_example())
        );
    }

    #[test]
    fn encode_rejects() {
        let mut bad = relu_example();
        bad.opcode = Opcode(0xF);
        assert_eq!(
            encode_instruction(&bad),
            Err(CodecError::ReservedOpcode(0xF))
        );
        assert!(encode_instruction(&bad)
            .unwrap_err()
            .to_string()
            .contains("reserved opcode"));
        bad.opcode = Opcode(0x12);
        assert_eq!(encode_instruction(&bad), Err(CodecError::OpcodeWidth(0x12)));
        let mut bad = relu_example();
        bad.weights.size = 0;
        assert_eq!(
            encode_instruction(&bad),
            Err(CodecError::ZeroSize("weights"))
        );
        let mut bad = relu_example();
        bad.flags = NdpFlags(0);
        assert_eq!(encode_instruction(&bad), Err(CodecError::MissingNdpFlag));
    }

    #[test]
    fn decode_classifies_and_rejects() {
        assert_eq!(
            decode_instruction(&[0u8; 64]).unwrap(),
            Decoded::MemoryTraffic
        );
        assert_eq!(decode_instruction(&[0u8; 63]), Err(CodecError::Length(63)));
        assert_eq!(decode_instruction(&[0u8; 65]), Err(CodecError::Length(65)));

        let good = encode_instruction(&relu_example()).unwrap();
        let mut f = good;
        f[60] = 1;
        assert_eq!(decode_instruction(&f), Err(CodecError::ReservedBits(60)));
        let mut f = good;
        f[0] = 0x7;
        assert_eq!(decode_instruction(&f), Err(CodecError::ReservedOpcode(0x7)));
        let mut f = good;
        f[0] = 0x42;
        assert_eq!(decode_instruction(&f), Err(CodecError::ReservedBits(0)));
    }

    pub(crate) fn valid_instruction() -> impl Strategy<Value = NdpInstruction> {
        let operand = || (any::<u64>(), 1u64..).prop_map(|(a, s)| Operand::new(a, s));
        (
            prop_oneof![Just(Opcode::GEMM), Just(Opcode::GEMM_RELU)],
            any::<u8>(),
            operand(),
            operand(),
            operand(),
        )
            .prop_map(|(opcode, extra, in_act, weights, out_act)| NdpInstruction {
                opcode,
                flags: NdpFlags(extra | NdpFlags::IS_NDP),
                in_act,
                weights,
                out_act,
            })
    }

    proptest! {
        #[test]
        fn round_trip(inst in valid_instruction()) {
            let frame = encode_instruction(&inst).unwrap();
            prop_assert_eq!(decode_instruction(&frame).unwrap(), Decoded::Kernel(inst));
        }
    }
}
