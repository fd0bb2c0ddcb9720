//! GPU / near-data load balancing.
//!
//! The `H` hottest activated experts go to the GPU (fetched over PCIe), the
//! rest stay in NDP memory and are computed in place. `H` comes from the
//! bandwidth ratio of the two paths, scaled by a runtime-tuned factor α.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::ExpertHistogram;
use crate::workload::{BatchConfig, HardwareConfig, ModelConfig};

/// Bounds α is clamped to by the tuner.
pub const ALPHA_MIN: f64 = 1.0 / 16.0;
pub const ALPHA_MAX: f64 = 16.0;

/// Hot/cold split of the activated experts of one MoE layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertPartition {
    /// Hot experts, hottest first.
    pub gpu_experts: Vec<usize>,
    /// Cold experts per NDP device, each list hottest first.
    pub ndp_devices: Vec<Vec<usize>>,
    pub h: usize,
}

impl ExpertPartition {
    pub fn ndp_experts(&self) -> impl Iterator<Item = usize> + '_ {
        self.ndp_devices.iter().flatten().copied()
    }

    pub fn num_ndp_experts(&self) -> usize {
        self.ndp_devices.iter().map(Vec::len).sum()
    }
}

/// Number of experts with at least one routed token.
pub fn count_activated(hist: &ExpertHistogram) -> usize {
    hist.counts().iter().filter(|&&c| c > 0).count()
}

/// Hot-expert count balancing PCIe fetch time against NDP streaming time.
pub fn compute_h(expert_activ: usize, bw_pcie: f64, bw_md: f64, alpha: f64) -> usize {
    let share = bw_pcie / (bw_md + bw_pcie);
    let h = (alpha * share * expert_activ as f64 + 0.5).floor();
    if h.is_nan() || h <= 0.0 {
        0
    } else {
        (h as usize).min(expert_activ)
    }
}

/// `compute_h` with the link and aggregate NDP bandwidth of `hw`.
pub fn compute_h_for(hist: &ExpertHistogram, hw: &HardwareConfig, alpha: f64) -> usize {
    compute_h(
        count_activated(hist),
        hw.pcie_bw(),
        hw.aggregate_ndp_bw(),
        alpha,
    )
}

/// Activated experts sorted by routed tokens, most first; ties by id.
fn by_intensity(hist: &ExpertHistogram) -> Vec<usize> {
    let mut ids: Vec<usize> = hist.activated().collect();
    ids.sort_by(|&a, &b| hist.get(b).cmp(&hist.get(a)).then(a.cmp(&b)));
    ids
}

pub fn partition_experts(
    hist: &ExpertHistogram,
    h: usize,
    num_devices: usize,
) -> Result<ExpertPartition> {
    if num_devices == 0 {
        return Err(Error::Schedule("need at least one NDP device".into()));
    }
    let ranked = by_intensity(hist);
    if h > ranked.len() {
        return Err(Error::Schedule(format!(
            "H={h} exceeds the {} activated experts",
            ranked.len()
        )));
    }
    let (hot, cold) = ranked.split_at(h);
    let mut ndp_devices = vec![Vec::new(); num_devices];
    for (i, &e) in cold.iter().enumerate() {
        ndp_devices[i % num_devices].push(e);
    }
    Ok(ExpertPartition {
        gpu_experts: hot.to_vec(),
        ndp_devices,
        h,
    })
}

/// Offsets around the current `H` tried by the tuner.
pub const H_CANDIDATE_OFFSETS: [i64; 5] = [-2, -1, 0, 1, 2];

/// Replays `recent` histograms at `H-2..=H+2` and returns the α that
/// reproduces the fastest candidate.
///
/// `layer_makespan(hist, h)` is the simulated MoE-layer time at a fixed `H`.
/// With a single histogram the implied α is `α·H_best/H`; with several, the
/// candidate offsets are applied to each and the summed `H` values are used.
pub fn autotune_alpha_with<F>(
    recent: &[ExpertHistogram],
    current_alpha: f64,
    hw: &HardwareConfig,
    mut layer_makespan: F,
) -> f64
where
    F: FnMut(&ExpertHistogram, usize) -> f64,
{
    let base: Vec<(usize, usize)> = recent
        .iter()
        .map(|h| (compute_h_for(h, hw, current_alpha), count_activated(h)))
        .collect();
    let h_sum: usize = base.iter().map(|b| b.0).sum();
    if h_sum == 0 {
        return current_alpha;
    }

    let mut best: Option<(f64, i64, usize)> = None;
    for off in H_CANDIDATE_OFFSETS {
        let mut total = 0.0;
        let mut cand_sum = 0;
        for (hist, &(h, activ)) in recent.iter().zip(&base) {
            let cand = (h as i64 + off).clamp(0, activ as i64) as usize;
            cand_sum += cand;
            total += layer_makespan(hist, cand);
        }
        let better = match best {
            None => true,
            Some((t, o, _)) => {
                let tol = 1e-12 * t.abs().max(total.abs());
                total < t - tol || ((total - t).abs() <= tol && off.abs() < o.abs())
            }
        };
        if better {
            best = Some((total, off, cand_sum));
        }
    }
    let (_, _, cand_sum) = best.unwrap();
    (current_alpha * cand_sum as f64 / h_sum as f64).clamp(ALPHA_MIN, ALPHA_MAX)
}

/// [`autotune_alpha_with`] using the engine's load-balanced layer model.
pub fn autotune_alpha(
    recent: &[ExpertHistogram],
    current_alpha: f64,
    model: &ModelConfig,
    batch: &BatchConfig,
    hw: &HardwareConfig,
) -> f64 {
    autotune_alpha_with(recent, current_alpha, hw, |hist, h| {
        crate::engine::lb_layer_makespan(hist, h, model, batch, hw)
    })
}

/// α state of one simulation run, retuned every `every` observed layers.
#[derive(Debug, Clone)]
pub struct AlphaTuner {
    alpha: f64,
    every: usize,
    window: usize,
    seen: usize,
    recent: VecDeque<ExpertHistogram>,
    history: Vec<f64>,
}

impl AlphaTuner {
    pub fn new(alpha: f64, every: usize, window: usize) -> Self {
        AlphaTuner {
            alpha,
            every: every.max(1),
            window: window.max(1),
            seen: 0,
            recent: VecDeque::new(),
            history: vec![alpha],
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Values α took over the run, starting with the initial one.
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Records a layer's histogram and retunes when the cadence is due.
    pub fn observe(
        &mut self,
        hist: &ExpertHistogram,
        model: &ModelConfig,
        batch: &BatchConfig,
        hw: &HardwareConfig,
    ) {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(hist.clone());
        self.seen += 1;
        if self.seen.is_multiple_of(self.every) {
            let recent: Vec<ExpertHistogram> = self.recent.iter().cloned().collect();
            let next = autotune_alpha(&recent, self.alpha, model, batch, hw);
            if next != self.alpha {
                self.alpha = next;
                self.history.push(next);
            }
        }
    }
}
