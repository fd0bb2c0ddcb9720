//! Discrete-event composition of the execution strategies.

mod layer;
mod model;
mod report;
mod timeline;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use layer::{
    lb_layer_makespan, run_moe_layer, simulate_moe_layer, EngineState, ExpertCache, LayerContext,
    LayerOutcome,
};
pub use model::{compare_strategies, simulate_model, Comparison, LayerReport, Report};
pub use report::{
    layer_rows, summary_row, write_csv, write_json, write_sweep_csv, CsvRow, CSV_COLUMNS,
};
pub use timeline::{Event, Stream, Timeline};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// All experts resident in GPU memory.
    Ideal,
    /// Activated experts fetched over PCIe on demand.
    GpuPm,
    /// All experts computed on the near-data devices.
    MdAm,
    /// Hot experts on the GPU, cold experts near data.
    MdLb,
    /// All experts computed by the host CPU.
    CpuAm,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Ideal,
        Strategy::GpuPm,
        Strategy::MdAm,
        Strategy::MdLb,
        Strategy::CpuAm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ideal => "ideal",
            Strategy::GpuPm => "gpu-pm",
            Strategy::MdAm => "md-am",
            Strategy::MdLb => "md-lb",
            Strategy::CpuAm => "cpu-am",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm || st.name().replace('-', "") == norm)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}
