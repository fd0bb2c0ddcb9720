//! Gating-side bookkeeping: top-k selection over a score map and per-expert
//! token histograms.
//!
//! Routing is drop-less and padding-less: every token reaches all of its
//! top-k experts and no expert has a capacity limit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `tokens × experts` gating scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    num_experts: usize,
    scores: Vec<f64>,
}

impl ScoreMap {
    pub fn new(num_experts: usize, scores: Vec<f64>) -> Result<Self> {
        if num_experts == 0 {
            return Err(Error::Routing("score map needs at least one expert".into()));
        }
        if !scores.len().is_multiple_of(num_experts) {
            return Err(Error::Routing(format!(
                "{} scores do not divide into rows of {num_experts}",
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Routing(format!(
                "non-finite score at token {}, expert {}",
                i / num_experts,
                i % num_experts
            )));
        }
        Ok(ScoreMap {
            num_experts,
            scores,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let e = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != e) {
            return Err(Error::Routing(format!("row {r} has a different length")));
        }
        ScoreMap::new(e.max(1), rows.concat())
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn num_tokens(&self) -> usize {
        self.scores.len() / self.num_experts
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.scores[token * self.num_experts..(token + 1) * self.num_experts]
    }
}

/// Picks the `k` highest-scoring experts of every token, best first.
///
/// Equal scores go to the lower expert id. Output order follows input tokens.
pub fn route_topk(scores: &ScoreMap, k: usize) -> Result<Vec<Vec<u32>>> {
    if k != 1 && k != 2 {
        return Err(Error::Routing(format!("k must be 1 or 2, got {k}")));
    }
    if k > scores.num_experts() {
        return Err(Error::Routing(format!(
            "k={k} exceeds the {} available experts",
            scores.num_experts()
        )));
    }
    Ok((0..scores.num_tokens())
        .map(|t| {
            let row = scores.row(t);
            let mut picked: Vec<u32> = Vec::with_capacity(k);
            for _ in 0..k {
                let mut best: Option<usize> = None;
                for (e, &s) in row.iter().enumerate() {
                    if picked.contains(&(e as u32)) {
                        continue;
                    }
                    // strict comparison keeps the lowest id among ties
                    if best.is_none_or(|b| s > row[b]) {
                        best = Some(e);
                    }
                }
                picked.push(best.unwrap() as u32);
            }
            picked
        })
        .collect())
}

/// Routed-token count per expert.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertHistogram {
    counts: Vec<u64>,
}

impl ExpertHistogram {
    pub fn zeros(num_experts: usize) -> Self {
        ExpertHistogram {
            counts: vec![0; num_experts],
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        ExpertHistogram { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn num_experts(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, expert: usize) -> u64 {
        self.counts[expert]
    }

    /// Total `(token, slot)` pairs, i.e. `top_k × tokens`.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Ids of experts with at least one routed token, ascending.
    pub fn activated(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(e, _)| e)
    }
}

/// Tallies `(token, slot)` pairs per expert. Ids must be `< num_experts`.
pub fn expert_histogram<'a, I>(assignments: I, num_experts: usize) -> ExpertHistogram
where
    I: IntoIterator<Item = &'a [u32]>,
{
    let mut hist = ExpertHistogram::zeros(num_experts);
    for token in assignments {
        for &e in token {
            hist.counts[e as usize] += 1;
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(rows: &[&[f64]]) -> ScoreMap {
        ScoreMap::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn one_hot() {
        assert_eq!(
            route_topk(&map(&[&[0.0, 1.0, 0.0]]), 1).unwrap(),
            vec![vec![1]]
        );
    }

    #[test]
    fn tie_goes_to_lower_id() {
        assert_eq!(
            route_topk(&map(&[&[0.5, 0.5, 0.1]]), 1).unwrap(),
            vec![vec![0]]
        );
        assert_eq!(
            route_topk(&map(&[&[0.5, 0.5, 0.5]]), 2).unwrap(),
            vec![vec![0, 1]]
        );
    }

    #[test]
    fn top2() {
        assert_eq!(
            route_topk(&map(&[&[0.1, 0.7, 0.2]]), 2).unwrap(),
            vec![vec![1, 2]]
        );
    }

    #[test]
    fn k_exceeds_experts() {
        assert!(route_topk(&map(&[&[1.0]]), 2).is_err());
        assert!(route_topk(&map(&[&[1.0, 2.0, 3.0, 4.0]]), 3).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(ScoreMap::new(2, vec![0.0, f64::NAN]).is_err());
        assert!(ScoreMap::new(2, vec![0.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn histograms() {
        let a: Vec<&[u32]> = vec![&[0], &[0]];
        assert_eq!(expert_histogram(a, 3).counts(), &[2, 0, 0]);
        let b: Vec<&[u32]> = vec![&[0, 1], &[1, 2]];
        assert_eq!(expert_histogram(b, 3).counts(), &[1, 2, 1]);
        let empty: Vec<&[u32]> = vec![];
        assert_eq!(expert_histogram(empty, 3).counts(), &[0, 0, 0]);
    }

    proptest! {
        #[test]
        fn scaling_keeps_selection(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 5), 1..20),
            scale in 0.01f64..100.0,
            k in 1usize..=2,
        ) {
            let base = route_topk(&ScoreMap::from_rows(&rows).unwrap(), k).unwrap();
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|s| s * scale).collect()).collect();
            let again = route_topk(&ScoreMap::from_rows(&scaled).unwrap(), k).unwrap();
            // per-row scaling can flip near-ties through rounding, so compare scores not ids
            for ((r, a), b) in rows.iter().zip(&base).zip(&again) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((r[*x as usize] - r[*y as usize]).abs() <= 1e-9 * r[*x as usize].abs().max(1.0));
                }
            }
        }

        #[test]
        fn histogram_conserves_slots(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 0..50),
            k in 1usize..=2,
        ) {
            let routed = if rows.is_empty() {
                vec![]
            } else {
                route_topk(&ScoreMap::from_rows(&rows).unwrap(), k).unwrap()
            };
            prop_assert_eq!(routed.len(), rows.len());
            for (r, picked) in rows.iter().zip(&routed) {
                // i-th output belongs to i-th token: its best pick is that row's max
                let max = r.iter().cloned().fold(f64::MIN, f64::max);
                prop_assert_eq!(r[picked[0] as usize], max);
            }
            let hist = expert_histogram(routed.iter().map(Vec::as_slice), 6);
            prop_assert_eq!(hist.total(), (k * rows.len()) as u64);
        }
    }
}
