//! Whole-model runs: dense layers, MoE layers and decode steps in sequence.

use serde::{Deserialize, Serialize};

use super::layer::{run_moe_layer, EngineState, LayerContext};
use super::timeline::{Stream, Timeline};
use super::Strategy;
use crate::costmodel::dense_layer_time;
use crate::error::{Error, Result};
use crate::scheduler::AlphaTuner;
use crate::workload::{Mode, RoutingTrace, SimConfig};

/// One MoE-layer invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub step: usize,
    pub layer: usize,
    pub t_pm: f64,
    pub t_am: f64,
    pub t_gpu: f64,
    pub t_md: f64,
    /// Attention/dense time of the same Transformer layer.
    pub t_dense: f64,
    /// MoE-layer makespan, excluding `t_dense`.
    pub makespan: f64,
    pub activated: usize,
    pub h: Option<usize>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub strategy: Strategy,
    pub mode: Mode,
    pub batch_size: u64,
    pub seq_len: u64,
    pub layers: Vec<LayerReport>,
    pub step_makespans: Vec<f64>,
    pub dense_time: f64,
    pub latency: f64,
    pub routed_tokens: u64,
    pub throughput: f64,
    pub alpha_history: Vec<f64>,
    pub timeline: Timeline,
}

impl Report {
    pub fn moe_time(&self) -> f64 {
        self.layers.iter().map(|l| l.makespan).sum()
    }
}

/// Runs every step of `trace` through the Transformer stack.
pub fn simulate_model(strategy: Strategy, trace: &RoutingTrace, cfg: &SimConfig) -> Result<Report> {
    cfg.validate()?;
    trace.check_covers(&cfg.model, &cfg.batch)?;
    let (model, batch, hw) = (&cfg.model, &cfg.batch, &cfg.hardware);

    let mut state = EngineState::new(model, hw);
    let mut tuner = (strategy == Strategy::MdLb && cfg.sim.autotune)
        .then(|| AlphaTuner::new(hw.alpha, cfg.sim.autotune_every, cfg.sim.autotune_window));
    let dense = dense_layer_time(model, hw);

    let mut timeline = Timeline::new();
    let mut layers = Vec::new();
    let mut step_makespans = Vec::with_capacity(batch.num_steps());
    let mut clock = 0.0;
    let mut dense_time = 0.0;

    for step in 0..batch.num_steps() {
        let step_start = clock;
        let mut moe_slot = 0;
        for layer in 0..model.num_layers {
            clock = timeline.reserve(
                Stream::GpuCompute,
                clock,
                dense,
                format!("dense layer {layer}"),
                0,
                0.0,
            );
            dense_time += dense;
            if !model.is_moe_layer(layer) {
                continue;
            }
            let routing = trace.get(layer, step).ok_or_else(|| {
                Error::Routing(format!("no routing for layer {layer} step {step}"))
            })?;
            let hist = trace.histogram(routing);
            let alpha = tuner.as_ref().map_or(hw.alpha, AlphaTuner::alpha);
            let ctx = LayerContext {
                model,
                batch,
                hw,
                moe_slot,
                alpha,
                h_override: None,
            };
            let out = run_moe_layer(strategy, &hist, &ctx, &mut state)?;
            timeline.append_shifted(&out.timeline, clock);
            clock += out.timeline.makespan;
            layers.push(LayerReport {
                step,
                layer,
                t_pm: out.times.t_pm,
                t_am: out.times.t_am,
                t_gpu: out.times.t_gpu,
                t_md: out.times.t_md,
                t_dense: dense,
                makespan: out.timeline.makespan,
                activated: out.activated,
                h: out.h,
                alpha: out.h.map(|_| alpha),
            });
            if let Some(t) = tuner.as_mut() {
                t.observe(&hist, model, batch, hw);
            }
            moe_slot += 1;
        }
        step_makespans.push(clock - step_start);
    }

    let latency: f64 = step_makespans.iter().sum();
    let routed_tokens = batch.tokens_per_step() * batch.num_steps() as u64;
    let alpha_history = match &tuner {
        Some(t) => t.history().to_vec(),
        None if strategy == Strategy::MdLb => vec![hw.alpha],
        None => Vec::new(),
    };
    Ok(Report {
        strategy,
        mode: batch.mode,
        batch_size: batch.batch_size,
        seq_len: batch.seq_len,
        layers,
        step_makespans,
        dense_time,
        latency,
        routed_tokens,
        throughput: routed_tokens as f64 / latency,
        alpha_history,
        timeline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub report: Report,
    /// Throughput relative to the ideal single-GPU run.
    pub normalized_throughput: f64,
}

/// Runs each strategy on the same trace and normalizes to [`Strategy::Ideal`].
pub fn compare_strategies(
    strategies: &[Strategy],
    trace: &RoutingTrace,
    cfg: &SimConfig,
) -> Result<Vec<Comparison>> {
    let reports = strategies
        .iter()
        .map(|&s| simulate_model(s, trace, cfg))
        .collect::<Result<Vec<_>>>()?;
    let ideal = match reports.iter().find(|r| r.strategy == Strategy::Ideal) {
        Some(r) => r.throughput,
        None => simulate_model(Strategy::Ideal, trace, cfg)?.throughput,
    };
    Ok(reports
        .into_iter()
        .map(|report| Comparison {
            normalized_throughput: report.throughput / ideal,
            report,
        })
        .collect())
}
