//! Device address to DRAM coordinate mapping.
//!
//! Offsets are sliced least-significant first as
//! `burst | ch | co | ra | bg | ba | ro`, so consecutive bursts rotate over
//! channels. Parameters live in even banks and activations in odd banks: the
//! bank LSB is overwritten with the region parity and the bit it displaced
//! moves into the row index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramGeometry {
    pub channel_bits: u32,
    pub column_bits: u32,
    pub rank_bits: u32,
    pub bank_group_bits: u32,
    pub bank_bits: u32,
    pub row_bits: u32,
    /// log2 of the channel interleave granularity.
    pub burst_bytes_log2: u32,
}

impl Default for DramGeometry {
    /// 8 channels, 2 ranks, 4 bank groups of 4 banks, 64 B bursts: 512 GiB.
    fn default() -> Self {
        DramGeometry {
            channel_bits: 3,
            column_bits: 6,
            rank_bits: 1,
            bank_group_bits: 2,
            bank_bits: 2,
            row_bits: 19,
            burst_bytes_log2: 6,
        }
    }
}

impl DramGeometry {
    fn total_bits(&self) -> u32 {
        self.burst_bytes_log2
            + self.channel_bits
            + self.column_bits
            + self.rank_bits
            + self.bank_group_bits
            + self.bank_bits
            + self.row_bits
    }

    pub fn validate(&self) -> Result<()> {
        if self.bank_bits == 0 {
            return Err(Error::field(
                "dram.bank_bits",
                "need at least 2 banks for the even/odd split",
            ));
        }
        if self.row_bits == 0 {
            return Err(Error::field("dram.row_bits", "must be at least 1"));
        }
        if self.total_bits() > 62 {
            return Err(Error::field("dram", "address space wider than 62 bits"));
        }
        Ok(())
    }

    pub fn capacity(&self) -> u64 {
        1u64 << self.total_bits()
    }

    /// Bytes addressable within one region (half the banks).
    pub fn region_capacity(&self) -> u64 {
        self.capacity() / 2
    }

    pub fn num_channels(&self) -> usize {
        1 << self.channel_bits
    }

    pub fn burst_bytes(&self) -> u64 {
        1 << self.burst_bytes_log2
    }

    /// Offset distance between consecutive channels.
    pub fn channel_stride(&self) -> u64 {
        self.burst_bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Param,
    Activation,
}

impl Region {
    fn parity(self) -> u64 {
        match self {
            Region::Param => 0,
            Region::Activation => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Param => "param",
            Region::Activation => "activation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DramCoord {
    pub ro: u64,
    pub ba: u64,
    pub bg: u64,
    pub ra: u64,
    pub co: u64,
    pub ch: u64,
    /// Byte within the burst.
    pub byte: u64,
}

pub fn map_address(geom: &DramGeometry, region: Region, offset: u64) -> Result<DramCoord> {
    let capacity = geom.region_capacity();
    if offset >= capacity {
        return Err(Error::AddressOutOfRange {
            region: region.name(),
            offset,
            capacity,
        });
    }
    let mut rest = offset;
    let mut take = |bits: u32| {
        let v = rest & ((1u64 << bits) - 1);
        rest >>= bits;
        v
    };
    let byte = take(geom.burst_bytes_log2);
    let ch = take(geom.channel_bits);
    let co = take(geom.column_bits);
    let ra = take(geom.rank_bits);
    let bg = take(geom.bank_group_bits);
    let ba_sliced = take(geom.bank_bits);
    let ro_sliced = rest;
    Ok(DramCoord {
        ro: (ro_sliced << 1) | (ba_sliced & 1),
        ba: (ba_sliced & !1) | region.parity(),
        bg,
        ra,
        co,
        ch,
        byte,
    })
}

/// Bytes of `[offset, offset + size)` falling on each channel.
pub fn channel_bytes(geom: &DramGeometry, offset: u64, size: u64) -> Vec<u64> {
    let burst = geom.burst_bytes();
    let n = geom.num_channels() as u64;
    let period = burst * n;
    // bytes of channel c below x
    let below =
        |x: u64, c: u64| (x / period) * burst + (x % period).saturating_sub(c * burst).min(burst);
    (0..n)
        .map(|c| below(offset + size, c) - below(offset, c))
        .collect()
}
