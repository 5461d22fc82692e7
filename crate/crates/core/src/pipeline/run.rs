//! TREC run files: `query_id Q0 doc_id rank score tag`.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

/// `(doc_id, score, rank column)` as read from a run line.
type RawEntry = (String, f64, u64);

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    /// Best first; scores non-increasing.
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn doc_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|(d, _)| d.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunFile {
    /// Queries in order of first appearance.
    pub queries: Vec<RankedList>,
}

impl RunFile {
    /// Entries of each query are ordered by score descending, then by the
    /// rank column, so ties keep the order the producer wrote.
    pub fn parse(reader: impl BufRead, origin: &Path) -> Result<Self> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut raw: Vec<(String, Vec<RawEntry>)> = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let fail = |m: String| Error::parse(origin, n + 1, m);
            if f.len() != 6 {
                return Err(fail(format!("expected 6 fields, found {}", f.len())));
            }
            let rank: u64 = f[3]
                .parse()
                .map_err(|_| fail(format!("rank {:?} is not an integer", f[3])))?;
            let score: f64 = f[4]
                .parse()
                .map_err(|_| fail(format!("score {:?} is not a number", f[4])))?;
            if !score.is_finite() {
                return Err(fail(format!("score {score} is not finite")));
            }
            let slot = *index.entry(f[0].to_string()).or_insert_with(|| {
                raw.push((f[0].to_string(), Vec::new()));
                raw.len() - 1
            });
            if raw[slot].1.iter().any(|(d, _, _)| d == f[2]) {
                return Err(fail(format!(
                    "document {:?} listed twice for query {:?}",
                    f[2], f[0]
                )));
            }
            raw[slot].1.push((f[2].to_string(), score, rank));
        }
        let queries = raw
            .into_iter()
            .map(|(query_id, mut docs)| {
                docs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)));
                RankedList {
                    query_id,
                    entries: docs.into_iter().map(|(d, s, _)| (d, s)).collect(),
                }
            })
            .collect();
        Ok(RunFile { queries })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(std::io::BufReader::new(file), path)
    }

    pub fn to_trec_string(&self, tag: &str) -> String {
        let mut out = String::new();
        for q in &self.queries {
            for (rank, (doc, score)) in q.entries.iter().enumerate() {
                out.push_str(&format!(
                    "{} Q0 {} {} {} {}\n",
                    q.query_id,
                    doc,
                    rank + 1,
                    score,
                    tag
                ));
            }
        }
        out
    }

    pub fn get(&self, query_id: &str) -> Option<&RankedList> {
        self.queries.iter().find(|q| q.query_id == query_id)
    }
}
