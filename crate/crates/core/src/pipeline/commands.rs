//! The pipeline's commands, one function per CLI subcommand.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::artifacts::{
    router_meta_path, LabelFailure, LabelRecord, LabelsArtifact, PoolArtifact, RouterMeta,
    LABELS_KIND, ROUTER_KIND,
};
use super::dataset::{ingest, Dataset, DatasetManifest, IngestOptions};
use super::io::{file_hash, json_bytes, read_to_bytes, write_atomic, write_json};
use super::run::{RankedList, RunFile};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::metrics::{has_positive, mean_ndcg, ndcg_at_k, Judgments, MetricConfig, Qrels};
use crate::pool::{build_pool, HeadPool};
use crate::query::JudgedQuery;
use crate::relevance::{aggregate, rank, HeadId};
use crate::router::{
    select_heads, train, RouterParams, SelectionConfig, TrainConfig, TrainingExample,
};
use crate::search::{exhaustive_oracle, search_labels, SearchConfig};

pub fn cmd_ingest(
    dump_dir: &Path,
    out_dir: &Path,
    options: IngestOptions,
) -> Result<DatasetManifest> {
    ingest(dump_dir, out_dir, options)
}

fn load_qrels(path: &Path) -> Result<(Qrels, String)> {
    let bytes = read_to_bytes(path)?;
    let qrels = Qrels::parse(&bytes[..], path)?;
    Ok((qrels, sha256_hex(&bytes)))
}

fn lineage(what: &str, expected: &str, actual: &str, force: bool) -> Result<()> {
    if expected == actual {
        return Ok(());
    }
    let msg = format!("{what}: expected {expected}, found {actual}");
    if force {
        log::warn!("ignoring lineage mismatch ({msg})");
        Ok(())
    } else {
        Err(Error::Lineage(msg))
    }
}

fn judged_queries(
    dataset: &Dataset,
    qrels: &Qrels,
    metric: MetricConfig,
    only_judged: bool,
) -> Vec<JudgedQuery> {
    dataset
        .matrices
        .iter()
        .filter(|m| !only_judged || qrels.contains(m.query_id()))
        .map(|m| {
            let judgments = qrels.get(m.query_id()).cloned().unwrap_or_default();
            JudgedQuery::new(m.clone(), judgments, metric)
        })
        .collect()
}

fn check_pool_fits(pool: &HeadPool, manifest: &DatasetManifest) -> Result<()> {
    for h in &pool.heads {
        let expected = manifest.head(h.flat)?;
        if expected != *h {
            return Err(Error::Dimension(format!(
                "pool head {h} does not match the dataset layout ({expected})"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PoolOptions {
    pub k: usize,
    pub metric: MetricConfig,
}

/// Scores every head on the judged queries of the dataset and writes the top-K pool.
pub fn cmd_pool(
    dataset_dir: &Path,
    qrels_path: &Path,
    options: &PoolOptions,
    out: &Path,
) -> Result<PoolArtifact> {
    options.metric.validate()?;
    let dataset = Dataset::load(dataset_dir)?;
    let (qrels, qrels_hash) = load_qrels(qrels_path)?;
    let queries = judged_queries(&dataset, &qrels, options.metric, true);
    if queries.is_empty() {
        return Err(Error::Empty("no dataset query has judgments"));
    }
    let mut pool = build_pool(&dataset.manifest.all_heads(), &queries, options.k)?;
    pool.provenance = dataset.manifest.content_hash.clone();
    let artifact = PoolArtifact::new(&pool, qrels_hash, options.metric);
    write_json(out, &artifact)?;
    Ok(artifact)
}

#[derive(Debug, Clone, Default)]
pub struct LabelSearchOptions {
    pub config: SearchConfig,
    pub verbose: bool,
    pub force: bool,
}

pub fn cmd_label_search(
    dataset_dir: &Path,
    qrels_path: &Path,
    pool_path: &Path,
    options: &LabelSearchOptions,
    out: &Path,
) -> Result<LabelsArtifact> {
    let dataset = Dataset::load(dataset_dir)?;
    let (qrels, qrels_hash) = load_qrels(qrels_path)?;
    let pool_artifact = PoolArtifact::load(pool_path)?;
    lineage(
        "pool was built on a different dataset",
        &pool_artifact.manifest_hash,
        &dataset.manifest.content_hash,
        options.force,
    )?;
    if pool_artifact.qrels_hash != qrels_hash {
        log::warn!("label search uses different qrels than the pool was built on");
    }
    let pool = pool_artifact.pool();
    check_pool_fits(&pool, &dataset.manifest)?;
    options.config.validate(pool.k())?;

    let queries = judged_queries(&dataset, &qrels, pool_artifact.metric, false);
    let results = search_labels(&queries, &pool, &options.config);
    let mut labels = Vec::new();
    let mut failures = Vec::new();
    for (query, result) in queries.iter().zip(results) {
        match result {
            Ok(label) => {
                let mut record = LabelRecord::from_label(label, options.verbose);
                if !qrels.contains(query.query_id()) {
                    log::warn!(
                        "query {} has no judgments; emitting an empty label",
                        query.query_id()
                    );
                    record.warning = Some("query absent from qrels".into());
                }
                labels.push(record);
            }
            Err(e) => failures.push(LabelFailure {
                query_id: query.query_id().to_string(),
                error: e.to_string(),
            }),
        }
    }
    let artifact = LabelsArtifact {
        kind: LABELS_KIND.into(),
        manifest_hash: dataset.manifest.content_hash.clone(),
        qrels_hash,
        pool_hash: file_hash(pool_path)?,
        config: options.config,
        pool_heads: pool.heads.iter().map(|h| h.flat).collect(),
        labels,
        failures,
    };
    write_json(out, &artifact)?;
    Ok(artifact)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub config: TrainConfig,
    pub force: bool,
}

/// Trains the router and writes `out` (binary weights) plus its `.json` sidecar.
pub fn cmd_train(
    dataset_dir: &Path,
    labels_path: &Path,
    options: &TrainOptions,
    out: &Path,
) -> Result<RouterMeta> {
    let dataset = Dataset::load(dataset_dir)?;
    let labels = LabelsArtifact::load(labels_path)?;
    lineage(
        "labels were searched on a different dataset",
        &labels.manifest_hash,
        &dataset.manifest.content_hash,
        options.force,
    )?;
    let examples = labels
        .labels
        .iter()
        .map(|l| {
            let embedding = dataset.embedding(&l.query_id).ok_or_else(|| {
                Error::Invariant(format!(
                    "missing embedding for labeled query {:?}",
                    l.query_id
                ))
            })?;
            Ok(TrainingExample {
                embedding: embedding.to_vec(),
                targets: l.targets(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!(
        "training router: lambda={} lr={} epochs={} batch={} seed={} d_h={}",
        options.config.lambda,
        options.config.learning_rate,
        options.config.epochs,
        options.config.batch_size,
        options.config.seed,
        options.config.head_dim
    );
    let (params, log) = train(&examples, &options.config)?;
    let bytes = params.to_bytes();
    write_atomic(out, &bytes)?;
    let meta = RouterMeta {
        kind: ROUTER_KIND.into(),
        manifest_hash: dataset.manifest.content_hash.clone(),
        labels_hash: file_hash(labels_path)?,
        pool_hash: labels.pool_hash.clone(),
        weights_hash: sha256_hex(&bytes),
        lambda: options.config.lambda,
        config: options.config,
        num_examples: examples.len(),
        log,
    };
    write_json(&router_meta_path(out), &meta)?;
    Ok(meta)
}

#[derive(Debug, Clone)]
pub enum RerankStrategy {
    Router {
        weights: PathBuf,
        pool: PathBuf,
        selection: SelectionConfig,
    },
    StaticTopK {
        pool: PathBuf,
        k: usize,
    },
    AllHeads,
}

impl RerankStrategy {
    pub fn tag(&self) -> String {
        match self {
            RerankStrategy::Router { .. } => "router".into(),
            RerankStrategy::StaticTopK { k, .. } => format!("static_top{k}"),
            RerankStrategy::AllHeads => "all_heads".into(),
        }
    }
}

enum Selector {
    Router {
        params: RouterParams,
        pool: HeadPool,
        selection: SelectionConfig,
    },
    Fixed(Vec<HeadId>),
}

fn load_selector(
    strategy: &RerankStrategy,
    manifest: &DatasetManifest,
    force: bool,
) -> Result<Selector> {
    Ok(match strategy {
        RerankStrategy::AllHeads => Selector::Fixed(manifest.all_heads()),
        RerankStrategy::StaticTopK { pool, k } => {
            let pool = PoolArtifact::load(pool)?.pool();
            check_pool_fits(&pool, manifest)?;
            Selector::Fixed(pool.top(*k)?.heads)
        }
        RerankStrategy::Router {
            weights,
            pool: pool_path,
            selection,
        } => {
            let bytes = read_to_bytes(weights)?;
            let params = RouterParams::read_from(&bytes[..])?;
            let meta = RouterMeta::load(&router_meta_path(weights))?;
            lineage(
                "router weights",
                &meta.weights_hash,
                &sha256_hex(&bytes),
                force,
            )?;
            lineage(
                "router was trained against a different pool",
                &meta.pool_hash,
                &file_hash(pool_path)?,
                force,
            )?;
            let pool = PoolArtifact::load(pool_path)?.pool();
            check_pool_fits(&pool, manifest)?;
            if params.d_q != manifest.d_q {
                return Err(Error::Dimension(format!(
                    "router expects d_q={}, dataset has {}",
                    params.d_q, manifest.d_q
                )));
            }
            if params.k != pool.k() {
                return Err(Error::Dimension(format!(
                    "router has {} heads, pool has {}",
                    params.k,
                    pool.k()
                )));
            }
            Selector::Router {
                params,
                pool,
                selection: *selection,
            }
        }
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RerankReport {
    pub queries: usize,
    /// Candidate documents with no score row, appended in candidate order.
    pub appended_docs: usize,
    /// Candidate queries absent from the dataset, passed through unchanged.
    pub passthrough_queries: usize,
    pub mean_selected_heads: f64,
}

/// Re-ranks every candidate list and writes a TREC run to `out`.
pub fn cmd_rerank(
    dataset_dir: &Path,
    candidates_path: &Path,
    strategy: &RerankStrategy,
    force: bool,
    out: &Path,
) -> Result<(RunFile, RerankReport)> {
    let dataset = Dataset::load(dataset_dir)?;
    let candidates = RunFile::from_path(candidates_path)?;
    let selector = load_selector(strategy, &dataset.manifest, force)?;
    let mut report = RerankReport::default();
    let mut selected_total = 0usize;
    let mut output = RunFile::default();

    for list in &candidates.queries {
        let Some(matrix) = dataset.matrix(&list.query_id) else {
            log::warn!(
                "query {} is not in the dataset; passing candidates through",
                list.query_id
            );
            report.passthrough_queries += 1;
            output.queries.push(list.clone());
            continue;
        };
        let heads = match &selector {
            Selector::Fixed(heads) => heads.clone(),
            Selector::Router {
                params,
                pool,
                selection,
            } => {
                let e_q = dataset.embedding(&list.query_id).ok_or_else(|| {
                    Error::Invariant(format!("missing embedding for query {:?}", list.query_id))
                })?;
                select_heads(params, e_q, pool, selection)?
            }
        };
        selected_total += heads.len();
        report.queries += 1;
        let agg = aggregate(matrix, &heads)?;
        let candidate_set: HashSet<&str> = list.entries.iter().map(|(d, _)| d.as_str()).collect();
        let score_of = |d: &str| {
            agg.doc_ids
                .iter()
                .position(|x| x == d)
                .map(|i| agg.scores[i])
                .expect("ranked docs come from the matrix")
        };
        let mut entries: Vec<(String, f64)> = rank(&agg)
            .into_iter()
            .filter(|d| candidate_set.contains(d.as_str()))
            .map(|d| {
                let s = score_of(&d);
                (d, s)
            })
            .collect();
        let floor = entries.last().map_or(0.0, |(_, s)| *s);
        let scored: HashSet<&str> = matrix.doc_ids().iter().map(String::as_str).collect();
        let missing: Vec<String> = list
            .entries
            .iter()
            .filter(|(d, _)| !scored.contains(d.as_str()))
            .map(|(d, _)| d.clone())
            .collect();
        report.appended_docs += missing.len();
        for (i, d) in missing.into_iter().enumerate() {
            entries.push((d, floor - (i + 1) as f64));
        }
        output.queries.push(RankedList {
            query_id: list.query_id.clone(),
            entries,
        });
    }
    if report.appended_docs > 0 {
        log::warn!(
            "{} candidate documents had no scores and were appended",
            report.appended_docs
        );
    }
    if report.queries > 0 {
        report.mean_selected_heads = selected_total as f64 / report.queries as f64;
    }
    write_atomic(out, output.to_trec_string(&strategy.tag()).as_bytes())?;
    Ok((output, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query_id: String,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub per_query: Vec<QueryScore>,
    /// Queries in the run without any positive judgment.
    pub unjudged: Vec<String>,
    pub include_unjudged: bool,
    pub mean: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for q in &self.per_query {
            out.push_str(&format!(
                "ndcg_cut_{}\t{}\t{:.4}\n",
                self.k, q.query_id, q.ndcg
            ));
        }
        out.push_str(&format!("ndcg_cut_{}\tall\t{:.4}\n", self.k, self.mean));
        out
    }
}

/// nDCG@k per query of a run, plus the mean. Queries without positive
/// judgments are left out of the mean unless `include_unjudged` is set.
pub fn cmd_eval(
    run: &RunFile,
    qrels: &Qrels,
    metric: MetricConfig,
    include_unjudged: bool,
) -> Result<EvalReport> {
    metric.validate()?;
    let empty = Judgments::new();
    let mut per_query = Vec::new();
    let mut unjudged = Vec::new();
    for list in &run.queries {
        let judgments = qrels.get(&list.query_id).unwrap_or(&empty);
        if !has_positive(judgments) {
            unjudged.push(list.query_id.clone());
            if !include_unjudged {
                continue;
            }
        }
        per_query.push(QueryScore {
            query_id: list.query_id.clone(),
            ndcg: ndcg_at_k(&list.doc_ids(), judgments, &metric),
        });
    }
    let values: Vec<f64> = per_query.iter().map(|q| q.ndcg).collect();
    Ok(EvalReport {
        k: metric.k,
        per_query,
        unjudged,
        include_unjudged,
        mean: mean_ndcg(&values)?,
    })
}

pub fn cmd_eval_files(
    run_path: &Path,
    qrels_path: &Path,
    metric: MetricConfig,
    include_unjudged: bool,
) -> Result<EvalReport> {
    let run = RunFile::from_path(run_path)?;
    let (qrels, _) = load_qrels(qrels_path)?;
    cmd_eval(&run, &qrels, metric, include_unjudged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleQuery {
    pub query_id: String,
    pub search_ndcg: f64,
    pub oracle_ndcg: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub pool_subset_size: usize,
    pub max_size: usize,
    pub per_query: Vec<OracleQuery>,
    /// Fraction of queries where the search reached the oracle value.
    pub attainment_rate: f64,
    pub min_gap: f64,
}

#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub pool_subset_size: usize,
    pub max_size: usize,
    pub tolerance: f64,
    pub max_swap_iters: usize,
    pub force: bool,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            pool_subset_size: 8,
            max_size: 3,
            tolerance: 0.0,
            max_swap_iters: crate::search::DEFAULT_MAX_SWAP_ITERS,
            force: false,
        }
    }
}

/// Compares the two-phase search against full enumeration on the first
/// `pool_subset_size` pool heads, with the search budget set to `max_size`.
pub fn oracle_check(
    queries: &[JudgedQuery],
    pool: &HeadPool,
    options: &OracleOptions,
) -> Result<OracleReport> {
    let restricted = pool.top(options.pool_subset_size)?;
    let config = SearchConfig {
        budget: options.max_size,
        tolerance: options.tolerance,
        max_swap_iters: options.max_swap_iters,
    };
    let searched = search_labels(queries, &restricted, &config);
    let mut per_query = Vec::with_capacity(queries.len());
    for (q, label) in queries.iter().zip(searched) {
        let label = label?;
        let oracle = exhaustive_oracle(q, &restricted, options.max_size)?;
        per_query.push(OracleQuery {
            query_id: q.query_id().to_string(),
            search_ndcg: label.achieved_ndcg,
            oracle_ndcg: oracle.ndcg,
            gap: oracle.ndcg - label.achieved_ndcg,
        });
    }
    if per_query.is_empty() {
        return Err(Error::Empty("no queries for the oracle check"));
    }
    let attained = per_query.iter().filter(|q| q.gap == 0.0).count();
    let min_gap = per_query
        .iter()
        .map(|q| q.gap)
        .fold(f64::INFINITY, f64::min);
    let report = OracleReport {
        pool_subset_size: options.pool_subset_size,
        max_size: options.max_size,
        attainment_rate: attained as f64 / per_query.len() as f64,
        min_gap,
        per_query,
    };
    if report.min_gap < 0.0 {
        return Err(Error::Invariant(format!(
            "search beat the exhaustive oracle (gap {})",
            report.min_gap
        )));
    }
    Ok(report)
}

pub fn cmd_oracle_check(
    dataset_dir: &Path,
    qrels_path: &Path,
    pool_path: &Path,
    options: &OracleOptions,
) -> Result<OracleReport> {
    let dataset = Dataset::load(dataset_dir)?;
    let (qrels, _) = load_qrels(qrels_path)?;
    let artifact = PoolArtifact::load(pool_path)?;
    lineage(
        "pool was built on a different dataset",
        &artifact.manifest_hash,
        &dataset.manifest.content_hash,
        options.force,
    )?;
    let pool = artifact.pool();
    check_pool_fits(&pool, &dataset.manifest)?;
    let queries = judged_queries(&dataset, &qrels, artifact.metric, true);
    oracle_check(&queries, &pool, options)
}

/// Serialized form of a report, for `--json` outputs.
pub fn report_bytes<T: Serialize>(report: &T) -> Vec<u8> {
    json_bytes(report)
}
