//! Synthetic fixture generator.
//!
//! Queries fall into latent clusters. Every cluster owns a few "signal" heads
//! whose scores track the relevance grades of that cluster's queries; on all
//! other queries, and for every other head, scores are noise. Query
//! embeddings sit around a per-cluster centroid, so the right head set is
//! predictable from the embedding alone.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{write_dump, DumpQuery, DumpSpec, EmbeddingRecord, ScoreRecord};
use super::io::{write_atomic, write_json};
use super::run::{RankedList, RunFile};
use crate::error::{Error, Result};
use crate::metrics::Qrels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dataset: String,
    pub layers: u32,
    pub heads_per_layer: u32,
    pub queries: usize,
    /// Additional held-out queries written under `test/`.
    pub test_queries: usize,
    pub docs_per_query: usize,
    pub relevant_per_query: usize,
    pub max_grade: u32,
    pub d_q: usize,
    pub clusters: usize,
    pub signal_heads_per_cluster: usize,
    /// Weight of the grade term in a signal head's raw score (noise is U(0, 1)).
    pub signal_strength: f64,
    /// Standard deviation of embedding noise around the cluster centroid.
    pub embedding_noise: f64,
    /// Candidates per query that are left out of the score matrix.
    pub unscored_candidates: usize,
    pub seed: u64,
    pub packed: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dataset: "synthetic".into(),
            layers: 8,
            heads_per_layer: 8,
            queries: 200,
            test_queries: 100,
            docs_per_query: 30,
            relevant_per_query: 3,
            max_grade: 2,
            d_q: 16,
            clusters: 4,
            signal_heads_per_cluster: 2,
            signal_strength: 1.5,
            embedding_noise: 0.3,
            unscored_candidates: 0,
            seed: 0,
            packed: false,
        }
    }
}

impl SynthConfig {
    pub fn total_heads(&self) -> usize {
        (self.layers * self.heads_per_layer) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers == 0 || self.heads_per_layer == 0 || self.d_q == 0 {
            return fail("layers, heads_per_layer and d_q must be >= 1");
        }
        if self.queries == 0 || self.docs_per_query == 0 || self.clusters == 0 {
            return fail("queries, docs_per_query and clusters must be >= 1");
        }
        if self.relevant_per_query > self.docs_per_query {
            return fail("relevant_per_query exceeds docs_per_query");
        }
        if self.unscored_candidates >= self.docs_per_query {
            return fail("unscored_candidates must leave at least one scored document");
        }
        if self.clusters * self.signal_heads_per_cluster > self.total_heads() {
            return fail("not enough heads for the requested signal heads");
        }
        if self.max_grade == 0 {
            return fail("max_grade must be >= 1");
        }
        Ok(())
    }
}

/// Hidden structure shared by the train and test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// `signal_heads[c]` are the flat indices carrying signal for cluster `c`.
    pub signal_heads: Vec<Vec<u32>>,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster of every generated query, by query id.
    pub query_clusters: Vec<(String, usize)>,
}

struct SplitData {
    spec: DumpSpec,
    scores: Vec<ScoreRecord>,
    embeddings: Vec<EmbeddingRecord>,
    qrels: Qrels,
    candidates: RunFile,
    clusters: Vec<(String, usize)>,
}

fn generate_split(
    config: &SynthConfig,
    truth: &SynthTruth,
    prefix: &str,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> SplitData {
    let total = config.total_heads();
    let n = config.docs_per_query;
    let noise = Normal::new(0.0, config.embedding_noise.max(0.0)).expect("valid std");
    let bm25_noise = Normal::new(0.0, 2.0).expect("valid std");

    let mut queries = Vec::with_capacity(count);
    let mut scores = Vec::with_capacity(count * total);
    let mut embeddings = Vec::with_capacity(count);
    let mut qrels = Qrels::new();
    let mut candidates = RunFile::default();
    let mut clusters = Vec::with_capacity(count);

    for qi in 0..count {
        let query_id = format!("{prefix}{qi:05}");
        let cluster = rng.random_range(0..config.clusters);
        clusters.push((query_id.clone(), cluster));
        let doc_ids: Vec<String> = (0..n).map(|i| format!("{query_id}-d{i:03}")).collect();

        let mut grades = vec![0u32; n];
        for i in sample(rng, n, config.relevant_per_query) {
            grades[i] = rng.random_range(1..=config.max_grade);
        }
        for (d, &g) in doc_ids.iter().zip(&grades) {
            if g > 0 {
                qrels.insert(&query_id, d, g);
            }
        }

        let scored = n - config.unscored_candidates;
        for head in 0..total as u32 {
            let signal = truth.signal_heads[cluster].contains(&head);
            let raw: Vec<f64> = grades[..scored]
                .iter()
                .map(|&g| {
                    let u: f64 = rng.random();
                    if signal {
                        u + config.signal_strength * g as f64 / config.max_grade as f64
                    } else {
                        u
                    }
                })
                .collect();
            let mass: f64 = rng.random_range(0.3..0.9);
            let sum: f64 = raw.iter().sum::<f64>().max(f64::MIN_POSITIVE);
            scores.push(ScoreRecord {
                query_id: query_id.clone(),
                head_flat: head,
                scores: raw.iter().map(|r| (r / sum * mass) as f32).collect(),
            });
        }

        let embedding = truth.centroids[cluster]
            .iter()
            .map(|c| (c + noise.sample(rng)) as f32)
            .collect();
        embeddings.push(EmbeddingRecord {
            query_id: query_id.clone(),
            embedding,
        });

        let mut entries: Vec<(String, f64)> = doc_ids
            .iter()
            .zip(&grades)
            .map(|(d, &g)| {
                let s = 10.0 + g as f64 + bm25_noise.sample(rng);
                (d.clone(), (s * 1e4).round() / 1e4)
            })
            .collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        candidates.queries.push(RankedList {
            query_id: query_id.clone(),
            entries,
        });

        queries.push(DumpQuery {
            query_id,
            doc_ids: doc_ids[..scored].to_vec(),
        });
    }

    SplitData {
        spec: DumpSpec {
            dataset: config.dataset.clone(),
            layers: config.layers,
            heads_per_layer: config.heads_per_layer,
            d_q: config.d_q,
            queries,
        },
        scores,
        embeddings,
        qrels,
        candidates,
        clusters,
    }
}

fn write_split(dir: &Path, data: &SplitData, packed: bool) -> Result<()> {
    write_dump(
        &dir.join("dump"),
        &data.spec,
        &data.scores,
        &data.embeddings,
        packed,
    )?;
    write_atomic(
        &dir.join("qrels.txt"),
        data.qrels.to_trec_string().as_bytes(),
    )?;
    write_atomic(
        &dir.join("candidates.run"),
        data.candidates.to_trec_string("bm25").as_bytes(),
    )?;
    Ok(())
}

/// Writes `dump/`, `qrels.txt`, `candidates.run` and `truth.json` into `out`,
/// and the same layout under `out/test/` when held-out queries are requested.
pub fn synthesize(config: &SynthConfig, out: &Path) -> Result<SynthTruth> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let picked = sample(
        &mut rng,
        config.total_heads(),
        config.clusters * config.signal_heads_per_cluster,
    )
    .into_vec();
    let signal_heads = picked
        .chunks(config.signal_heads_per_cluster.max(1))
        .take(config.clusters)
        .map(|c| {
            let mut v: Vec<u32> = c.iter().map(|&h| h as u32).collect();
            v.sort_unstable();
            v
        })
        .chain(std::iter::repeat(Vec::new()))
        .take(config.clusters)
        .collect();
    let centroids = (0..config.clusters)
        .map(|_| {
            (0..config.d_q)
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    let mut truth = SynthTruth {
        signal_heads,
        centroids,
        query_clusters: Vec::new(),
    };

    let train = generate_split(config, &truth, "q", config.queries, &mut rng);
    write_split(out, &train, config.packed)?;
    truth.query_clusters.extend(train.clusters);
    if config.test_queries > 0 {
        let test = generate_split(config, &truth, "t", config.test_queries, &mut rng);
        write_split(&out.join("test"), &test, config.packed)?;
        truth.query_clusters.extend(test.clusters);
    }
    write_json(&out.join("truth.json"), &truth)?;
    Ok(truth)
}
