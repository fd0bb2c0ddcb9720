//! Routing traces: which experts every token of every MoE layer visits.
//!
//! On disk a trace is line-delimited JSON, one record per routed token:
//!
//! ```text
//! {"layer":3,"step":0,"token":0,"experts":[17,4]}
//! ```
//!
//! `layer` is the Transformer layer index (it must be an MoE layer of the
//! model), `step` is the decode step (always 0 in encoder mode) and `token`
//! counts up from 0 within each `(layer, step)` group.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BatchConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::router::{expert_histogram, ExpertHistogram};

/// Routing of one MoE layer at one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRouting {
    pub layer: usize,
    pub step: usize,
    /// Row-major `tokens × top_k` expert ids.
    pub assignments: Vec<u32>,
}

impl LayerRouting {
    pub fn num_tokens(&self, top_k: usize) -> usize {
        self.assignments.len() / top_k
    }

    pub fn tokens(&self, top_k: usize) -> impl Iterator<Item = &[u32]> {
        self.assignments.chunks_exact(top_k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub num_experts: usize,
    pub top_k: usize,
    /// Ordered by `(step, layer)`, the order a simulation visits them.
    pub layers: Vec<LayerRouting>,
}

impl RoutingTrace {
    pub fn get(&self, layer: usize, step: usize) -> Option<&LayerRouting> {
        self.layers
            .binary_search_by(|r| (r.step, r.layer).cmp(&(step, layer)))
            .ok()
            .map(|i| &self.layers[i])
    }

    pub fn histogram(&self, routing: &LayerRouting) -> ExpertHistogram {
        expert_histogram(routing.tokens(self.top_k), self.num_experts)
    }

    pub fn num_steps(&self) -> usize {
        self.layers.iter().map(|r| r.step + 1).max().unwrap_or(0)
    }

    /// Checks that every MoE layer is present for `steps` steps with the
    /// expected token count.
    pub fn check_covers(&self, model: &ModelConfig, batch: &BatchConfig) -> Result<()> {
        if self.num_experts != model.num_experts || self.top_k != model.top_k {
            return Err(Error::Trace {
                record: 0,
                message: format!(
                    "trace has E={} top_k={} but model has E={} top_k={}",
                    self.num_experts, self.top_k, model.num_experts, model.top_k
                ),
            });
        }
        let want = batch.tokens_per_step() as usize;
        for step in 0..batch.num_steps() {
            for &layer in &model.moe_layer_indices {
                let routing = self.get(layer, step).ok_or_else(|| Error::Trace {
                    record: 0,
                    message: format!("missing routing for layer {layer} step {step}"),
                })?;
                let have = routing.num_tokens(self.top_k);
                if have != want {
                    return Err(Error::Trace {
                        record: 0,
                        message: format!(
                            "layer {layer} step {step} routes {have} tokens, batch expects {want}"
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Samples ranks from a truncated Zipf law by inverse CDF.
struct ZipfSampler {
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ZipfSampler {
    fn new(n: usize, exponent: f64) -> Self {
        let weights: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        ZipfSampler {
            weights,
            cumulative,
        }
    }

    fn total(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Rank whose cumulative interval contains `target`.
    fn locate(&self, target: f64) -> usize {
        self.cumulative
            .partition_point(|&c| c <= target)
            .min(self.weights.len() - 1)
    }

    fn first(&self, u: f64) -> usize {
        self.locate(u * self.total())
    }

    /// Draw conditioned on not returning `excluded`.
    fn excluding(&self, u: f64, excluded: usize) -> usize {
        let w = self.weights[excluded];
        let mut target = u * (self.total() - w);
        let before = self.cumulative[excluded] - w;
        if target >= before {
            target += w;
        }
        let rank = self.locate(target);
        if rank == excluded {
            // Only reachable through rounding at the interval edge.
            if excluded + 1 < self.weights.len() {
                excluded + 1
            } else {
                excluded - 1
            }
        } else {
            rank
        }
    }
}

/// Synthesizes a routing trace whose expert popularity follows a Zipf law
/// with exponent `skew`.
///
/// Each MoE layer gets its own seed-derived permutation of expert ids, kept
/// fixed across decode steps. Every token draws `top_k` distinct experts.
pub fn synth_routing(
    model: &ModelConfig,
    batch: &BatchConfig,
    skew: f64,
    seed: u64,
) -> Result<RoutingTrace> {
    model.validate()?;
    batch.validate()?;
    if !(skew.is_finite() && skew >= 0.0) {
        return Err(Error::field("skew", "must be a non-negative finite number"));
    }
    let e = model.num_experts;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = ZipfSampler::new(e, skew);
    let perms: Vec<Vec<u32>> = model
        .moe_layer_indices
        .iter()
        .map(|_| {
            let mut p: Vec<u32> = (0..e as u32).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();

    let tokens = batch.tokens_per_step() as usize;
    let mut layers = Vec::with_capacity(batch.num_steps() * perms.len());
    for step in 0..batch.num_steps() {
        for (&layer, perm) in model.moe_layer_indices.iter().zip(&perms) {
            let mut assignments = Vec::with_capacity(tokens * model.top_k);
            for _ in 0..tokens {
                let first = sampler.first(rng.gen::<f64>());
                assignments.push(perm[first]);
                if model.top_k == 2 {
                    let second = sampler.excluding(rng.gen::<f64>(), first);
                    assignments.push(perm[second]);
                }
            }
            layers.push(LayerRouting {
                layer,
                step,
                assignments,
            });
        }
    }
    Ok(RoutingTrace {
        num_experts: e,
        top_k: model.top_k,
        layers,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    layer: usize,
    step: usize,
    token: usize,
    experts: Vec<u32>,
}

pub fn write_trace(mut w: impl Write, trace: &RoutingTrace) -> Result<()> {
    for routing in &trace.layers {
        for (token, experts) in routing.tokens(trace.top_k).enumerate() {
            let rec = Record {
                layer: routing.layer,
                step: routing.step,
                token,
                experts: experts.to_vec(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        }
    }
    Ok(())
}

pub fn export_trace(path: impl AsRef<Path>, trace: &RoutingTrace) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_trace(&mut w, trace)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses and validates trace records against `model`.
pub fn read_trace(r: impl BufRead, model: &ModelConfig) -> Result<RoutingTrace> {
    let mut groups: BTreeMap<(usize, usize), Vec<u32>> = BTreeMap::new();
    let mut record = 0;
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<trace>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Trace {
            record,
            message: format!("malformed record: {e}"),
        })?;
        let bad = |message: String| Error::Trace { record, message };
        if !model.is_moe_layer(rec.layer) {
            return Err(bad(format!("layer {} is not an MoE layer", rec.layer)));
        }
        if rec.experts.len() != model.top_k {
            return Err(bad(format!(
                "token lists {} experts, top_k is {}",
                rec.experts.len(),
                model.top_k
            )));
        }
        if let Some(&id) = rec
            .experts
            .iter()
            .find(|&&id| id as usize >= model.num_experts)
        {
            return Err(bad(format!(
                "expert id out of range: {id} >= {}",
                model.num_experts
            )));
        }
        if rec.experts.len() == 2 && rec.experts[0] == rec.experts[1] {
            return Err(bad(format!(
                "token routes twice to expert {}",
                rec.experts[0]
            )));
        }
        let slot = groups.entry((rec.step, rec.layer)).or_default();
        let expected = slot.len() / model.top_k;
        if rec.token != expected {
            return Err(bad(format!(
                "token {} out of order in layer {} step {}, expected {expected}",
                rec.token, rec.layer, rec.step
            )));
        }
        slot.extend_from_slice(&rec.experts);
        record += 1;
    }
    Ok(RoutingTrace {
        num_experts: model.num_experts,
        top_k: model.top_k,
        layers: groups
            .into_iter()
            .map(|((step, layer), assignments)| LayerRouting {
                layer,
                step,
                assignments,
            })
            .collect(),
    })
}

pub fn ingest_trace(path: impl AsRef<Path>, model: &ModelConfig) -> Result<RoutingTrace> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(BufReader::new(file), model)
}
