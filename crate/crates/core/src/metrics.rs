//! nDCG@k and TREC qrels.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Graded judgments for one query, keyed by document id.
pub type Judgments = BTreeMap<String, u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    /// `g(rel) = rel`
    #[default]
    Linear,
    /// `g(rel) = 2^rel - 1`
    Exponential,
}

impl Gain {
    pub fn value(self, grade: u32) -> f64 {
        match self {
            Gain::Linear => grade as f64,
            Gain::Exponential => (2f64).powi(grade as i32) - 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub k: usize,
    pub gain: Gain,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            k: 10,
            gain: Gain::Linear,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("nDCG cutoff k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Relevance judgments for a collection of queries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    queries: BTreeMap<String, Judgments>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, grade: u32) {
        self.queries
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), grade);
    }

    pub fn get(&self, query_id: &str) -> Option<&Judgments> {
        self.queries.get(query_id)
    }

    pub fn contains(&self, query_id: &str) -> bool {
        self.queries.contains_key(query_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Judgments)> {
        self.queries.iter()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Parses `query_id iteration doc_id grade` lines. Blank lines are skipped.
    pub fn parse(reader: impl BufRead, origin: &Path) -> Result<Self> {
        let mut qrels = Qrels::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 4 {
                return Err(Error::parse(
                    origin,
                    n + 1,
                    format!("expected 4 fields, found {}", fields.len()),
                ));
            }
            let grade: u32 = fields[3].parse().map_err(|_| {
                Error::parse(
                    origin,
                    n + 1,
                    format!("grade {:?} is not a non-negative integer", fields[3]),
                )
            })?;
            qrels.insert(fields[0], fields[2], grade);
        }
        Ok(qrels)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(std::io::BufReader::new(file), path)
    }

    /// Canonical TREC serialization, sorted by query then document.
    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.queries {
            for (d, g) in docs {
                out.push_str(&format!("{q} 0 {d} {g}\n"));
            }
        }
        out
    }
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Ideal DCG@k from every positively judged document of the query.
pub fn ideal_dcg(judgments: &Judgments, config: &MetricConfig) -> f64 {
    let mut grades: Vec<u32> = judgments.values().copied().filter(|&g| g > 0).collect();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    grades
        .iter()
        .take(config.k)
        .enumerate()
        .map(|(r, &g)| config.gain.value(g) * discount(r + 1))
        .sum()
}

/// nDCG@k for grades listed in ranked order, given a precomputed ideal DCG.
pub(crate) fn ndcg_from_grades(
    grades: impl IntoIterator<Item = u32>,
    ideal: f64,
    config: &MetricConfig,
) -> f64 {
    if ideal <= 0.0 {
        return 0.0;
    }
    let dcg: f64 = grades
        .into_iter()
        .take(config.k)
        .enumerate()
        .map(|(r, g)| config.gain.value(g) * discount(r + 1))
        .sum();
    dcg / ideal
}

/// nDCG@k of `ranking`; unjudged documents have grade 0 and a query without
/// positive judgments scores 0.
pub fn ndcg_at_k<S: AsRef<str>>(
    ranking: &[S],
    judgments: &Judgments,
    config: &MetricConfig,
) -> f64 {
    let ideal = ideal_dcg(judgments, config);
    let grades = ranking
        .iter()
        .map(|d| judgments.get(d.as_ref()).copied().unwrap_or(0));
    ndcg_from_grades(grades, ideal, config)
}

pub fn has_positive(judgments: &Judgments) -> bool {
    judgments.values().any(|&g| g > 0)
}

pub fn mean_ndcg(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("no per-query values to average"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
