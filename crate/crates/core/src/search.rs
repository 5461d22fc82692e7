//! Per-query head-set search producing multi-hot pseudo-labels.
//!
//! Phase one grows the set greedily, adding the head with the best nDCG after
//! inclusion until the budget is reached or nothing strictly improves. Phase
//! two hill-climbs over one-swap moves (one selected head out, one unselected
//! head in) while the best swap beats the current objective by more than the
//! tolerance. All argmax ties go to the lowest flat index (lexicographically
//! smallest `(out, in)` pair for swaps), so the search is fully deterministic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::HeadPool;
use crate::query::JudgedQuery;
use crate::relevance::HeadId;

pub const DEFAULT_BUDGET: usize = 8;
pub const DEFAULT_MAX_SWAP_ITERS: usize = 100;
pub const ORACLE_MAX_HEADS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Maximum head-set size.
    pub budget: usize,
    /// A swap is accepted only if it gains strictly more than this.
    pub tolerance: f64,
    pub max_swap_iters: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            budget: DEFAULT_BUDGET,
            tolerance: 0.0,
            max_swap_iters: DEFAULT_MAX_SWAP_ITERS,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.budget == 0 || self.budget > pool_size {
            return Err(Error::Config(format!(
                "budget {} must be in 1..={pool_size}",
                self.budget
            )));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::Config(format!(
                "tolerance {} must be >= 0",
                self.tolerance
            )));
        }
        if self.max_swap_iters == 0 {
            return Err(Error::Config("max_swap_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SearchEvent {
    Add {
        head: u32,
        objective: f64,
    },
    Swap {
        removed: u32,
        added: u32,
        objective: f64,
    },
    SwapCapReached {
        iterations: usize,
    },
}

impl SearchEvent {
    pub fn objective(&self) -> Option<f64> {
        match self {
            SearchEvent::Add { objective, .. } | SearchEvent::Swap { objective, .. } => {
                Some(*objective)
            }
            SearchEvent::SwapCapReached { .. } => None,
        }
    }
}

/// A head set with its objective and the events that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Sorted by flat index.
    pub heads: Vec<HeadId>,
    pub objective: f64,
    pub trace: Vec<SearchEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub query_id: String,
    /// Multi-hot over the pool, in pool order.
    pub y: Vec<u8>,
    pub achieved_ndcg: f64,
    /// Objective after the forward phase alone.
    pub forward_ndcg: f64,
    pub trace: Vec<SearchEvent>,
}

impl PseudoLabel {
    pub fn selected(&self, pool: &HeadPool) -> Vec<HeadId> {
        let mut heads: Vec<HeadId> = self
            .y
            .iter()
            .zip(&pool.heads)
            .filter(|(&y, _)| y == 1)
            .map(|(_, &h)| h)
            .collect();
        heads.sort();
        heads
    }

    pub fn targets(&self) -> Vec<f64> {
        self.y.iter().map(|&v| v as f64).collect()
    }
}

fn check_pool(query: &JudgedQuery, pool: &HeadPool) -> Result<Vec<HeadId>> {
    if pool.heads.is_empty() {
        return Err(Error::Empty("head pool"));
    }
    if let Some(&missing) = pool.heads.iter().find(|&&h| !query.matrix.contains(h)) {
        return Err(Error::HeadNotInMatrix(missing));
    }
    let mut candidates = pool.heads.clone();
    candidates.sort();
    Ok(candidates)
}

pub fn forward_select(
    query: &JudgedQuery,
    pool: &HeadPool,
    config: &SearchConfig,
) -> Result<SearchOutcome> {
    let candidates = check_pool(query, pool)?;
    let mut selected: Vec<HeadId> = Vec::new();
    let mut current = 0.0;
    let mut trace = Vec::new();
    let mut trial = Vec::with_capacity(config.budget);

    while selected.len() < config.budget {
        let mut best: Option<(HeadId, f64)> = None;
        for &h in &candidates {
            if selected.contains(&h) {
                continue;
            }
            trial.clear();
            trial.extend_from_slice(&selected);
            trial.push(h);
            let value = query.objective(&trial)?;
            if best.is_none_or(|(_, b)| value > b) {
                best = Some((h, value));
            }
        }
        match best {
            Some((h, value)) if value > current => {
                selected.push(h);
                current = value;
                trace.push(SearchEvent::Add {
                    head: h.flat,
                    objective: value,
                });
            }
            _ => break,
        }
    }
    selected.sort();
    Ok(SearchOutcome {
        heads: selected,
        objective: current,
        trace,
    })
}

pub fn swap_refine(
    initial: &[HeadId],
    query: &JudgedQuery,
    pool: &HeadPool,
    config: &SearchConfig,
) -> Result<SearchOutcome> {
    let candidates = check_pool(query, pool)?;
    if let Some(&stray) = initial.iter().find(|h| pool.position(**h).is_none()) {
        return Err(Error::Config(format!(
            "initial head {stray} is not in the pool"
        )));
    }
    let mut selected = initial.to_vec();
    selected.sort();
    selected.dedup();
    let mut current = query.objective(&selected)?;
    let mut trace = Vec::new();
    if selected.is_empty() {
        return Ok(SearchOutcome {
            heads: selected,
            objective: current,
            trace,
        });
    }

    let mut iterations = 0;
    loop {
        if iterations == config.max_swap_iters {
            log::warn!(
                "query {}: swap refinement stopped at the {iterations}-iteration cap",
                query.query_id()
            );
            trace.push(SearchEvent::SwapCapReached { iterations });
            break;
        }
        let mut best: Option<(usize, HeadId, f64)> = None;
        let mut trial = selected.clone();
        for (slot, _) in selected.iter().enumerate() {
            for &v in &candidates {
                if selected.contains(&v) {
                    continue;
                }
                trial[slot] = v;
                let value = query.objective(&trial)?;
                if best.is_none_or(|(_, _, b)| value > b) {
                    best = Some((slot, v, value));
                }
            }
            trial[slot] = selected[slot];
        }
        match best {
            Some((slot, v, value)) if value - current > config.tolerance => {
                let removed = selected[slot];
                selected[slot] = v;
                selected.sort();
                current = value;
                trace.push(SearchEvent::Swap {
                    removed: removed.flat,
                    added: v.flat,
                    objective: value,
                });
                iterations += 1;
            }
            _ => break,
        }
    }
    Ok(SearchOutcome {
        heads: selected,
        objective: current,
        trace,
    })
}

/// Forward selection, swap refinement, then multi-hot encoding over the pool.
pub fn search_query(
    query: &JudgedQuery,
    pool: &HeadPool,
    config: &SearchConfig,
) -> Result<PseudoLabel> {
    config.validate(pool.k())?;
    let forward = forward_select(query, pool, config)?;
    let refined = swap_refine(&forward.heads, query, pool, config)?;
    let y = pool
        .heads
        .iter()
        .map(|h| u8::from(refined.heads.contains(h)))
        .collect();
    let mut trace = forward.trace;
    trace.extend(refined.trace);
    Ok(PseudoLabel {
        query_id: query.query_id().to_string(),
        y,
        achieved_ndcg: refined.objective,
        forward_ndcg: forward.objective,
        trace,
    })
}

/// Searches every query independently; failures are reported per query and
/// results keep the input order.
pub fn search_labels(
    queries: &[JudgedQuery],
    pool: &HeadPool,
    config: &SearchConfig,
) -> Vec<Result<PseudoLabel>> {
    queries
        .par_iter()
        .map(|q| search_query(q, pool, config))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    /// Sorted by flat index.
    pub heads: Vec<HeadId>,
    pub ndcg: f64,
    /// Number of subsets evaluated.
    pub evaluated: usize,
}

/// Best non-empty subset of the pool with at most `max_size` heads, by full enumeration.
pub fn exhaustive_oracle(
    query: &JudgedQuery,
    pool: &HeadPool,
    max_size: usize,
) -> Result<OracleOutcome> {
    if pool.k() > ORACLE_MAX_HEADS {
        return Err(Error::OracleTooLarge(pool.k()));
    }
    if max_size == 0 || max_size > pool.k() {
        return Err(Error::Config(format!(
            "oracle max_size {max_size} must be in 1..={}",
            pool.k()
        )));
    }
    let heads = check_pool(query, pool)?;
    let mut best: Option<(Vec<HeadId>, f64)> = None;
    let mut evaluated = 0;
    for mask in 1u32..(1u32 << heads.len()) {
        if mask.count_ones() as usize > max_size {
            continue;
        }
        let subset: Vec<HeadId> = (0..heads.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| heads[i])
            .collect();
        let value = query.objective(&subset)?;
        evaluated += 1;
        let better = match &best {
            None => true,
            Some((set, b)) => value > *b || (value == *b && subset < *set),
        };
        if better {
            best = Some((subset, value));
        }
    }
    let (heads, ndcg) = best.expect("at least one subset evaluated");
    Ok(OracleOutcome {
        heads,
        ndcg,
        evaluated,
    })
}
