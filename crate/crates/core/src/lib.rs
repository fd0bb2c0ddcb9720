//! Timing simulator for Mixture-of-Experts inference on a GPU with PCIe
//! attached memory and near-data-processing (NDP) expert devices.
//!
//! The crate is organised bottom-up: [`workload`] describes the model,
//! batch and hardware, [`router`] turns gate scores into per-expert token
//! counts, [`costmodel`] and [`ndp`] price individual transfers and kernels,
//! [`scheduler`] splits experts between GPU and NDP, and [`engine`] composes
//! everything into per-stream timelines and reports.

pub mod costmodel;
pub mod engine;
pub mod error;
pub mod ndp;
pub mod router;
pub mod scheduler;
pub mod sweep;
pub mod workload;

pub use engine::{
    compare_strategies, simulate_model, simulate_moe_layer, Report, Strategy, Timeline,
};
pub use error::{Error, Result};
pub use router::{expert_histogram, route_topk, ExpertHistogram, ScoreMap};
pub use scheduler::{compute_h, partition_experts, AlphaTuner, ExpertPartition};
pub use workload::{
    load_config, preset, synth_routing, BatchConfig, HardwareConfig, Mode, ModelConfig,
    RoutingTrace, SimConfig,
};
