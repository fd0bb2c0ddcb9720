//! Per-stream event timelines built by resource reservation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    GpuCompute,
    /// Host/memory-device to GPU.
    PcieH2d,
    /// GPU to host/memory-device.
    PcieD2h,
    NdpCompute(usize),
    CpuCompute,
}

impl Stream {
    pub fn is_pcie(self) -> bool {
        matches!(self, Stream::PcieH2d | Stream::PcieD2h)
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stream::GpuCompute => f.write_str("GPU_COMPUTE"),
            Stream::PcieH2d => f.write_str("PCIE_H2D"),
            Stream::PcieD2h => f.write_str("PCIE_D2H"),
            Stream::NdpCompute(d) => write!(f, "NDP_COMPUTE({d})"),
            Stream::CpuCompute => f.write_str("CPU_COMPUTE"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub stream: Stream,
    pub t_start: f64,
    pub t_end: f64,
    pub label: String,
    pub bytes: u64,
    pub flops: f64,
}

impl Event {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<Event>,
    pub makespan: f64,
    #[serde(skip)]
    free_at: BTreeMap<Stream, f64>,
}

impl Timeline {
    pub fn new() -> Self {
        Self::default()
    }

    /// Time at which `stream` has no more reserved work.
    pub fn free_at(&self, stream: Stream) -> f64 {
        self.free_at.get(&stream).copied().unwrap_or(0.0)
    }

    /// Reserves `duration` on `stream` no earlier than `ready`; returns the end time.
    pub fn reserve(
        &mut self,
        stream: Stream,
        ready: f64,
        duration: f64,
        label: impl Into<String>,
        bytes: u64,
        flops: f64,
    ) -> f64 {
        let start = ready.max(self.free_at(stream));
        self.place(stream, start, start + duration, label, bytes, flops)
    }

    /// Records an event with precomputed bounds, which must not precede the
    /// stream's previous reservation.
    pub fn place(
        &mut self,
        stream: Stream,
        t_start: f64,
        t_end: f64,
        label: impl Into<String>,
        bytes: u64,
        flops: f64,
    ) -> f64 {
        debug_assert!(t_start >= self.free_at(stream) && t_end >= t_start);
        self.free_at.insert(stream, t_end);
        self.makespan = self.makespan.max(t_end);
        self.events.push(Event {
            stream,
            t_start,
            t_end,
            label: label.into(),
            bytes,
            flops,
        });
        t_end
    }

    /// Appends `other` shifted by `offset` seconds.
    pub fn append_shifted(&mut self, other: &Timeline, offset: f64) {
        for e in &other.events {
            let mut e = e.clone();
            e.t_start += offset;
            e.t_end += offset;
            let free = self.free_at.entry(e.stream).or_insert(0.0);
            *free = free.max(e.t_end);
            self.makespan = self.makespan.max(e.t_end);
            self.events.push(e);
        }
        self.makespan = self.makespan.max(offset + other.makespan);
    }

    pub fn bytes_on(&self, stream: Stream) -> u64 {
        self.events
            .iter()
            .filter(|e| e.stream == stream)
            .map(|e| e.bytes)
            .sum()
    }

    pub fn busy_time(&self, stream: Stream) -> f64 {
        self.events
            .iter()
            .filter(|e| e.stream == stream)
            .map(Event::duration)
            .sum()
    }

    pub fn streams(&self) -> Vec<Stream> {
        let mut s: Vec<Stream> = self.events.iter().map(|e| e.stream).collect();
        s.sort();
        s.dedup();
        s
    }

    /// True if no two events on the same stream overlap.
    pub fn streams_exclusive(&self) -> bool {
        let mut by_stream: BTreeMap<Stream, Vec<(f64, f64)>> = BTreeMap::new();
        for e in &self.events {
            by_stream
                .entry(e.stream)
                .or_default()
                .push((e.t_start, e.t_end));
        }
        by_stream.values_mut().all(|spans| {
            spans.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            spans.windows(2).all(|w| w[1].0 >= w[0].1)
        })
    }
}
