//! Compact head pool: the top-K heads by solo re-ranking quality.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::query::JudgedQuery;
use crate::relevance::HeadId;

/// Default pool size.
pub const DEFAULT_POOL_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPool {
    /// Descending solo score, ties by ascending flat index.
    pub heads: Vec<HeadId>,
    pub solo_scores: Vec<f64>,
    /// Hash identifying the query set the pool was scored on.
    pub provenance: String,
}

impl HeadPool {
    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn position(&self, head: HeadId) -> Option<usize> {
        self.heads.iter().position(|h| h.flat == head.flat)
    }

    /// The first `k` heads of the pool.
    pub fn top(&self, k: usize) -> Result<HeadPool> {
        if k == 0 || k > self.k() {
            return Err(Error::Config(format!(
                "cannot take top {k} of a pool of {}",
                self.k()
            )));
        }
        Ok(HeadPool {
            heads: self.heads[..k].to_vec(),
            solo_scores: self.solo_scores[..k].to_vec(),
            provenance: self.provenance.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Empty("head pool"));
        }
        if self.heads.len() != self.solo_scores.len() {
            return Err(Error::Invariant(
                "pool heads and solo scores differ in length".into(),
            ));
        }
        let mut flats: Vec<u32> = self.heads.iter().map(|h| h.flat).collect();
        flats.sort_unstable();
        flats.dedup();
        if flats.len() != self.heads.len() {
            return Err(Error::Invariant("pool contains duplicate heads".into()));
        }
        if self.solo_scores.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Invariant(
                "pool solo scores are not non-increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Mean solo nDCG of `head` over `queries`.
pub fn solo_head_score(head: HeadId, queries: &[JudgedQuery]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Empty("no queries to score heads on"));
    }
    let total = queries
        .iter()
        .map(|q| q.objective(&[head]))
        .sum::<Result<f64>>()?;
    Ok(total / queries.len() as f64)
}

pub fn build_pool(all_heads: &[HeadId], queries: &[JudgedQuery], k: usize) -> Result<HeadPool> {
    if k == 0 {
        return Err(Error::Config("pool size must be >= 1".into()));
    }
    if k > all_heads.len() {
        return Err(Error::PoolTooLarge {
            k,
            available: all_heads.len(),
        });
    }
    if queries.is_empty() {
        return Err(Error::Empty("no queries to score heads on"));
    }
    let mut scored = all_heads
        .par_iter()
        .map(|&h| solo_head_score(h, queries).map(|s| (h, s)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.flat.cmp(&b.0.flat)));
    scored.truncate(k);

    let ids: Vec<&str> = queries.iter().map(|q| q.query_id()).collect();
    Ok(HeadPool {
        heads: scored.iter().map(|(h, _)| *h).collect(),
        solo_scores: scored.iter().map(|(_, s)| *s).collect(),
        provenance: sha256_hex(ids.join("\n").as_bytes()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{ndcg_at_k, Judgments, MetricConfig};
    use crate::relevance::HeadScoreMatrix;

    fn h(flat: u32) -> HeadId {
        HeadId::from_flat(flat, 4)
    }

    fn query(id: &str, rows: Vec<Vec<f64>>, judgments: &[(&str, u32)]) -> JudgedQuery {
        let docs = (0..rows[0].len()).map(|i| format!("d{i}")).collect();
        let heads = (0..rows.len() as u32).map(h).collect();
        let judgments: Judgments = judgments.iter().map(|(d, g)| (d.to_string(), *g)).collect();
        JudgedQuery::new(
            HeadScoreMatrix::new(id, heads, docs, rows).unwrap(),
            judgments,
            MetricConfig::default(),
        )
    }

    #[test]
    fn solo_score_examples() {
        let q = query("q", vec![vec![0.9, 0.1, 0.0]], &[("d0", 1)]);
        assert_eq!(solo_head_score(h(0), &[q]).unwrap(), 1.0);

        // Flat scores: ties broken by doc id, positive doc "d2" lands last.
        let q = query("q", vec![vec![0.3, 0.3, 0.3]], &[("d2", 1)]);
        let oracle = ndcg_at_k(&["d0", "d1", "d2"], &q.judgments, &MetricConfig::default());
        assert_eq!(solo_head_score(h(0), &[q]).unwrap(), oracle);
        assert!((oracle - 0.5).abs() < 1e-15);

        let good = query("a", vec![vec![0.9, 0.1]], &[("d0", 1)]);
        let none = query("b", vec![vec![0.9, 0.1]], &[]);
        assert_eq!(solo_head_score(h(0), &[good.clone(), none]).unwrap(), 0.5);
        assert!(solo_head_score(h(3), &[good]).is_err());
    }

    fn three_head_queries() -> Vec<JudgedQuery> {
        // Solo nDCG on a 3-doc query with one relevant doc at d0:
        // rank 1 -> 1.0, rank 2 -> 1/log2(3), rank 3 -> 0.5.
        vec![query(
            "q",
            vec![
                vec![0.9, 0.1, 0.0],
                vec![0.0, 0.1, 0.9],
                vec![0.2, 0.3, 0.1],
            ],
            &[("d0", 1)],
        )]
    }

    #[test]
    fn build_pool_examples() {
        let queries = three_head_queries();
        let all = [h(0), h(1), h(2)];
        let pool = build_pool(&all, &queries, 2).unwrap();
        assert_eq!(pool.heads, vec![h(0), h(2)]);
        assert_eq!(pool.solo_scores[0], 1.0);
        assert!((pool.solo_scores[1] - 1.0 / 3f64.log2()).abs() < 1e-15);

        let full = build_pool(&all, &queries, 3).unwrap();
        assert_eq!(full.heads, vec![h(0), h(2), h(1)]);
        full.validate().unwrap();

        assert!(matches!(
            build_pool(&all, &queries, 4),
            Err(Error::PoolTooLarge { k: 4, available: 3 })
        ));
    }

    #[test]
    fn equal_scores_prefer_lower_flat() {
        let q = query("q", vec![vec![0.9, 0.1], vec![0.8, 0.2]], &[("d0", 1)]);
        let pool = build_pool(&[h(1), h(0)], &[q], 2).unwrap();
        assert_eq!(pool.heads, vec![h(0), h(1)]);
    }

    #[test]
    fn smaller_k_is_prefix_and_scale_invariant() {
        let queries = three_head_queries();
        let all = [h(0), h(1), h(2)];
        let full = build_pool(&all, &queries, 3).unwrap();
        for k in 1..=3 {
            assert_eq!(build_pool(&all, &queries, k).unwrap(), full.top(k).unwrap());
        }
        let scaled = query(
            "q",
            vec![
                vec![9.0, 1.0, 0.0],
                vec![0.0, 0.1, 0.9],
                vec![0.02, 0.03, 0.01],
            ],
            &[("d0", 1)],
        );
        assert_eq!(build_pool(&all, &[scaled], 3).unwrap().heads, full.heads);
    }
}
