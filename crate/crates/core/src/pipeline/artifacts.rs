//! Persisted pipeline artifacts. Each embeds the hashes of the inputs it was
//! derived from so later stages can refuse mismatched lineage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::read_json;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::pool::HeadPool;
use crate::relevance::HeadId;
use crate::router::{EpochLog, TrainConfig};
use crate::search::{PseudoLabel, SearchConfig, SearchEvent};

pub const POOL_KIND: &str = "routehead-pool";
pub const LABELS_KIND: &str = "routehead-labels";
pub const ROUTER_KIND: &str = "routehead-router";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub layer: u32,
    pub head: u32,
    pub flat: u32,
    pub solo_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolArtifact {
    pub kind: String,
    pub manifest_hash: String,
    pub qrels_hash: String,
    pub metric: MetricConfig,
    pub k: usize,
    pub heads: Vec<PoolEntry>,
}

impl PoolArtifact {
    pub fn new(pool: &HeadPool, qrels_hash: String, metric: MetricConfig) -> Self {
        PoolArtifact {
            kind: POOL_KIND.into(),
            manifest_hash: pool.provenance.clone(),
            qrels_hash,
            metric,
            k: pool.k(),
            heads: pool
                .heads
                .iter()
                .zip(&pool.solo_scores)
                .map(|(h, &s)| PoolEntry {
                    layer: h.layer,
                    head: h.head,
                    flat: h.flat,
                    solo_score: s,
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a: PoolArtifact = read_json(path)?;
        if a.kind != POOL_KIND {
            return Err(Error::Config(format!(
                "{} is not a pool artifact",
                path.display()
            )));
        }
        if a.k != a.heads.len() {
            return Err(Error::Invariant(format!(
                "{}: k does not match head count",
                path.display()
            )));
        }
        a.pool().validate()?;
        Ok(a)
    }

    pub fn pool(&self) -> HeadPool {
        HeadPool {
            heads: self
                .heads
                .iter()
                .map(|e| HeadId {
                    layer: e.layer,
                    head: e.head,
                    flat: e.flat,
                })
                .collect(),
            solo_scores: self.heads.iter().map(|e| e.solo_score).collect(),
            provenance: self.manifest_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub query_id: String,
    pub y: Vec<u8>,
    pub achieved_ndcg: f64,
    pub forward_ndcg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<SearchEvent>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl LabelRecord {
    pub fn from_label(label: PseudoLabel, verbose: bool) -> Self {
        LabelRecord {
            query_id: label.query_id,
            y: label.y,
            achieved_ndcg: label.achieved_ndcg,
            forward_ndcg: label.forward_ndcg,
            trace: verbose.then_some(label.trace),
            warning: None,
        }
    }

    pub fn targets(&self) -> Vec<f64> {
        self.y.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFailure {
    pub query_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsArtifact {
    pub kind: String,
    pub manifest_hash: String,
    pub qrels_hash: String,
    pub pool_hash: String,
    pub config: SearchConfig,
    /// Pool heads by flat index, in the order `y` is aligned to.
    pub pool_heads: Vec<u32>,
    pub labels: Vec<LabelRecord>,
    pub failures: Vec<LabelFailure>,
}

impl LabelsArtifact {
    pub fn load(path: &Path) -> Result<Self> {
        let a: LabelsArtifact = read_json(path)?;
        if a.kind != LABELS_KIND {
            return Err(Error::Config(format!(
                "{} is not a labels artifact",
                path.display()
            )));
        }
        if let Some(bad) = a.labels.iter().find(|l| l.y.len() != a.pool_heads.len()) {
            return Err(Error::Invariant(format!(
                "{}: label for {:?} has {} entries, pool has {}",
                path.display(),
                bad.query_id,
                bad.y.len(),
                a.pool_heads.len()
            )));
        }
        Ok(a)
    }
}

/// Sidecar metadata written next to the binary router weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterMeta {
    pub kind: String,
    pub manifest_hash: String,
    pub labels_hash: String,
    pub pool_hash: String,
    pub weights_hash: String,
    pub lambda: f64,
    pub config: TrainConfig,
    pub num_examples: usize,
    pub log: Vec<EpochLog>,
}

impl RouterMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let m: RouterMeta = read_json(path)?;
        if m.kind != ROUTER_KIND {
            return Err(Error::Config(format!(
                "{} is not router metadata",
                path.display()
            )));
        }
        Ok(m)
    }
}

/// `router.bin` -> `router.json`.
pub fn router_meta_path(weights: &Path) -> std::path::PathBuf {
    weights.with_extension("json")
}
