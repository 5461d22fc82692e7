//! Attention-derived document relevance.
//!
//! A head's relevance score for a document is the attention mass flowing from
//! the query tokens into the document's tokens, averaged over query tokens.
//! Head sets score a document by the plain sum of their per-head scores.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sums of exported attention may exceed 1 by this much due to float32 transport.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// An attention head addressed both by `(layer, head)` and by its flat index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: u32,
    pub head: u32,
    pub flat: u32,
}

impl HeadId {
    pub fn new(layer: u32, head: u32, heads_per_layer: u32) -> Self {
        assert!(
            head < heads_per_layer,
            "head {head} >= heads_per_layer {heads_per_layer}"
        );
        HeadId {
            layer,
            head,
            flat: layer * heads_per_layer + head,
        }
    }

    pub fn from_flat(flat: u32, heads_per_layer: u32) -> Self {
        assert!(heads_per_layer > 0);
        HeadId {
            layer: flat / heads_per_layer,
            head: flat % heads_per_layer,
            flat,
        }
    }
}

impl Ord for HeadId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.flat
            .cmp(&other.flat)
            .then(self.layer.cmp(&other.layer))
            .then(self.head.cmp(&other.head))
    }
}

impl PartialOrd for HeadId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}(#{})", self.layer, self.head, self.flat)
    }
}

/// Raw query-token attention rows for one head, with each column assigned to a document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAttentionRecord {
    pub query_id: String,
    pub head: HeadId,
    /// One row per query token; columns are document-token positions.
    pub weights: Vec<Vec<f64>>,
    /// `spans[j]` is the document index owning column `j`.
    pub spans: Vec<usize>,
}

impl TokenAttentionRecord {
    pub fn validate(&self) -> Result<()> {
        for (z, row) in self.weights.iter().enumerate() {
            if row.len() != self.spans.len() {
                return Err(Error::InvalidRecord(format!(
                    "row {z} has {} columns, span map has {}",
                    row.len(),
                    self.spans.len()
                )));
            }
            let mut sum = 0.0;
            for (j, &w) in row.iter().enumerate() {
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::InvalidRecord(format!(
                        "weight ({z}, {j}) = {w} is not a finite non-negative value"
                    )));
                }
                sum += w;
            }
            if sum > 1.0 + ROW_SUM_TOLERANCE {
                return Err(Error::InvalidRecord(format!("row {z} sums to {sum} > 1")));
            }
        }
        Ok(())
    }

    /// Number of documents covered by the span map.
    pub fn num_docs(&self) -> usize {
        self.spans.iter().max().map_or(0, |&m| m + 1)
    }
}

/// Mean over query tokens of the attention mass landing on `doc_index`'s tokens.
pub fn score_doc_under_head(record: &TokenAttentionRecord, doc_index: usize) -> Result<f64> {
    if record.weights.is_empty() {
        return Err(Error::DegenerateQuery);
    }
    let columns: Vec<usize> = record
        .spans
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == doc_index)
        .map(|(j, _)| j)
        .collect();
    if columns.is_empty() {
        return Err(Error::UnknownDocument(doc_index));
    }
    let mass: f64 = record
        .weights
        .iter()
        .map(|row| columns.iter().map(|&j| row[j]).sum::<f64>())
        .sum();
    Ok(mass / record.weights.len() as f64)
}

/// Per-head, per-document relevance scores for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScoreMatrix {
    query_id: String,
    head_ids: Vec<HeadId>,
    doc_ids: Vec<String>,
    /// Row-major, `head_ids.len() x doc_ids.len()`.
    scores: Vec<f64>,
    rows_by_flat: HashMap<u32, usize>,
}

impl HeadScoreMatrix {
    pub fn new(
        query_id: impl Into<String>,
        head_ids: Vec<HeadId>,
        doc_ids: Vec<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if head_ids.is_empty() {
            return Err(Error::EmptyHeadList);
        }
        if rows.len() != head_ids.len() {
            return Err(Error::InvalidMatrix(format!(
                "{} rows for {} heads",
                rows.len(),
                head_ids.len()
            )));
        }
        let mut rows_by_flat = HashMap::with_capacity(head_ids.len());
        for (m, h) in head_ids.iter().enumerate() {
            if rows_by_flat.insert(h.flat, m).is_some() {
                return Err(Error::InvalidMatrix(format!("duplicate head {h}")));
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(doc_ids.len());
        for d in &doc_ids {
            if !seen.insert(d.as_str()) {
                return Err(Error::InvalidMatrix(format!("duplicate document id {d:?}")));
            }
        }
        let n = doc_ids.len();
        let mut scores = Vec::with_capacity(n * rows.len());
        for (m, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidMatrix(format!(
                    "row for {} has {} scores, expected {n}",
                    head_ids[m],
                    row.len()
                )));
            }
            for (i, &s) in row.iter().enumerate() {
                if !s.is_finite() || s < 0.0 {
                    return Err(Error::InvalidMatrix(format!(
                        "score ({}, {}) = {s} is not a finite non-negative value",
                        head_ids[m], doc_ids[i]
                    )));
                }
            }
            scores.extend(row);
        }
        Ok(HeadScoreMatrix {
            query_id: query_id.into(),
            head_ids,
            doc_ids,
            scores,
            rows_by_flat,
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn head_ids(&self) -> &[HeadId] {
        &self.head_ids
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn row_index(&self, head: HeadId) -> Option<usize> {
        self.rows_by_flat.get(&head.flat).copied()
    }

    pub fn row(&self, index: usize) -> &[f64] {
        let n = self.doc_ids.len();
        &self.scores[index * n..(index + 1) * n]
    }

    pub fn row_of(&self, head: HeadId) -> Option<&[f64]> {
        self.row_index(head).map(|m| self.row(m))
    }

    pub fn contains(&self, head: HeadId) -> bool {
        self.rows_by_flat.contains_key(&head.flat)
    }

    /// Sum of the rows at `indices`, accumulated in the given order.
    pub(crate) fn sum_rows(&self, indices: &[usize], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &m in indices {
            for (acc, s) in out.iter_mut().zip(self.row(m)) {
                *acc += s;
            }
        }
    }
}

/// Tabulates per-head document scores from token-level attention records.
pub fn build_score_matrix(
    records: &[TokenAttentionRecord],
    heads: &[HeadId],
    doc_ids: &[String],
) -> Result<HeadScoreMatrix> {
    if heads.is_empty() {
        return Err(Error::EmptyHeadList);
    }
    let missing: Vec<HeadId> = heads
        .iter()
        .filter(|h| !records.iter().any(|r| r.head.flat == h.flat))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingRecords(missing));
    }
    let first = records
        .iter()
        .find(|r| r.head.flat == heads[0].flat)
        .expect("checked above");
    let query_id = first.query_id.clone();

    let mut rows = Vec::with_capacity(heads.len());
    for h in heads {
        let record = records
            .iter()
            .find(|r| r.head.flat == h.flat)
            .expect("checked above");
        if record.spans != first.spans {
            return Err(Error::InvalidRecord(format!(
                "span map of {h} differs from that of {}",
                first.head
            )));
        }
        if record.query_id != query_id {
            return Err(Error::InvalidRecord(format!(
                "record for {h} belongs to query {:?}, expected {query_id:?}",
                record.query_id
            )));
        }
        record.validate()?;
        let row = (0..doc_ids.len())
            .map(|i| score_doc_under_head(record, i))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    HeadScoreMatrix::new(query_id, heads.to_vec(), doc_ids.to_vec(), rows)
}

/// Document scores summed over a head set.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedScores {
    pub query_id: String,
    pub doc_ids: Vec<String>,
    pub scores: Vec<f64>,
    /// Sorted by flat index, deduplicated.
    pub selected_heads: Vec<HeadId>,
}

impl AggregatedScores {
    /// Same ranking, scores multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        AggregatedScores {
            scores: self.scores.iter().map(|s| s * factor).collect(),
            ..self.clone()
        }
    }
}

pub fn aggregate(matrix: &HeadScoreMatrix, selected: &[HeadId]) -> Result<AggregatedScores> {
    if selected.is_empty() {
        return Err(Error::EmptyHeadSet);
    }
    let mut heads = selected.to_vec();
    heads.sort();
    heads.dedup();
    let rows = heads
        .iter()
        .map(|&h| matrix.row_index(h).ok_or(Error::HeadNotInMatrix(h)))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = vec![0.0; matrix.num_docs()];
    matrix.sum_rows(&rows, &mut scores);
    Ok(AggregatedScores {
        query_id: matrix.query_id().to_string(),
        doc_ids: matrix.doc_ids().to_vec(),
        scores,
        selected_heads: heads,
    })
}

/// Document positions by descending score, ties by ascending document id.
pub(crate) fn rank_positions(scores: &[f64], doc_ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| doc_ids[a].cmp(&doc_ids[b]))
    });
    order
}

pub fn rank(agg: &AggregatedScores) -> Vec<String> {
    rank_positions(&agg.scores, &agg.doc_ids)
        .into_iter()
        .map(|i| agg.doc_ids[i].clone())
        .collect()
}
