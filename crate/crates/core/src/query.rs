//! A query's score matrix joined with its relevance judgments.

use crate::error::{Error, Result};
use crate::metrics::{ideal_dcg, ndcg_from_grades, Judgments, MetricConfig};
use crate::relevance::{rank_positions, HeadId, HeadScoreMatrix};

/// Score matrix plus judgments, with grades pre-aligned to the matrix's documents
/// so that head sets can be evaluated without string lookups.
#[derive(Debug, Clone)]
pub struct JudgedQuery {
    pub matrix: HeadScoreMatrix,
    pub judgments: Judgments,
    metric: MetricConfig,
    grades: Vec<u32>,
    ideal: f64,
}

impl JudgedQuery {
    pub fn new(matrix: HeadScoreMatrix, judgments: Judgments, metric: MetricConfig) -> Self {
        let grades = matrix
            .doc_ids()
            .iter()
            .map(|d| judgments.get(d).copied().unwrap_or(0))
            .collect();
        let ideal = ideal_dcg(&judgments, &metric);
        JudgedQuery {
            matrix,
            judgments,
            metric,
            grades,
            ideal,
        }
    }

    pub fn query_id(&self) -> &str {
        self.matrix.query_id()
    }

    pub fn metric(&self) -> &MetricConfig {
        &self.metric
    }

    /// nDCG@k of the ranking induced by summing `heads`. The empty set scores 0.
    ///
    /// Rows are summed in ascending flat order regardless of the order of
    /// `heads`, so equal sets always produce bit-identical objectives.
    pub fn objective(&self, heads: &[HeadId]) -> Result<f64> {
        if heads.is_empty() {
            return Ok(0.0);
        }
        let mut sorted = heads.to_vec();
        sorted.sort();
        sorted.dedup();
        let rows = sorted
            .iter()
            .map(|&h| self.matrix.row_index(h).ok_or(Error::HeadNotInMatrix(h)))
            .collect::<Result<Vec<_>>>()?;
        let mut scores = vec![0.0; self.matrix.num_docs()];
        self.matrix.sum_rows(&rows, &mut scores);
        let order = rank_positions(&scores, self.matrix.doc_ids());
        Ok(ndcg_from_grades(
            order.into_iter().map(|i| self.grades[i]),
            self.ideal,
            &self.metric,
        ))
    }
}
