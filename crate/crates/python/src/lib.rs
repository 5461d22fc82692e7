//! Python bindings for `routehead`.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use routehead::pipeline::commands::{
    cmd_eval_files, cmd_label_search, cmd_pool, cmd_rerank, cmd_train, LabelSearchOptions,
    PoolOptions, RerankStrategy, TrainOptions,
};
use routehead::pipeline::dataset::{ingest as ingest_dump, IngestOptions};
use routehead::pipeline::synth::{synthesize, SynthConfig};
use routehead::router::{self, SelectionConfig, TrainConfig, TrainingExample};
use routehead::search::{self, SearchConfig};
use routehead::{Error, Gain, HeadPool, JudgedQuery, MetricConfig};

fn py_err(e: Error) -> PyErr {
    let msg = format!("{}: {}", e.category(), e);
    match e {
        Error::Io { .. } => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn metric(k: usize, gain: &str) -> PyResult<MetricConfig> {
    let gain = match gain {
        "linear" => Gain::Linear,
        "exponential" => Gain::Exponential,
        other => return Err(PyValueError::new_err(format!("unknown gain {other:?}"))),
    };
    let m = MetricConfig { k, gain };
    m.validate().map_err(py_err)?;
    Ok(m)
}

#[pyclass(frozen, eq, ord, hash, from_py_object, name = "HeadId")]
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct PyHeadId(routehead::HeadId);

#[pymethods]
impl PyHeadId {
    #[new]
    fn new(layer: u32, head: u32, heads_per_layer: u32) -> Self {
        PyHeadId(routehead::HeadId::new(layer, head, heads_per_layer))
    }

    #[staticmethod]
    fn from_flat(flat: u32, heads_per_layer: u32) -> Self {
        PyHeadId(routehead::HeadId::from_flat(flat, heads_per_layer))
    }

    #[getter]
    fn layer(&self) -> u32 {
        self.0.layer
    }

    #[getter]
    fn head(&self) -> u32 {
        self.0.head
    }

    #[getter]
    fn flat(&self) -> u32 {
        self.0.flat
    }

    fn __repr__(&self) -> String {
        format!(
            "HeadId(layer={}, head={}, flat={})",
            self.0.layer, self.0.head, self.0.flat
        )
    }
}

/// Mean query-token attention mass on one document's tokens.
#[pyfunction]
fn score_doc_under_head(
    weights: Vec<Vec<f64>>,
    spans: Vec<usize>,
    doc_index: usize,
) -> PyResult<f64> {
    let record = routehead::TokenAttentionRecord {
        query_id: String::new(),
        head: routehead::HeadId::from_flat(0, 1),
        weights,
        spans,
    };
    record.validate().map_err(py_err)?;
    routehead::score_doc_under_head(&record, doc_index).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (ranking, judgments, k = 10, gain = "linear"))]
fn ndcg_at_k(
    ranking: Vec<String>,
    judgments: BTreeMap<String, u32>,
    k: usize,
    gain: &str,
) -> PyResult<f64> {
    Ok(routehead::ndcg_at_k(
        &ranking,
        &judgments,
        &metric(k, gain)?,
    ))
}

/// A query's head-by-document score matrix with its relevance judgments.
#[pyclass(frozen, name = "Query")]
struct PyQuery(JudgedQuery);

impl PyQuery {
    fn heads(&self, flats: &[u32]) -> PyResult<Vec<routehead::HeadId>> {
        let known = self.0.matrix.head_ids();
        flats
            .iter()
            .map(|&f| {
                known
                    .iter()
                    .find(|h| h.flat == f)
                    .copied()
                    .ok_or_else(|| PyValueError::new_err(format!("head {f} is not in the matrix")))
            })
            .collect()
    }

    fn pool(&self, flats: &[u32]) -> PyResult<HeadPool> {
        let pool = HeadPool {
            heads: self.heads(flats)?,
            solo_scores: vec![0.0; flats.len()],
            provenance: String::new(),
        };
        pool.validate().map_err(py_err)?;
        Ok(pool)
    }
}

#[pymethods]
impl PyQuery {
    /// `rows[i]` holds the scores of head `heads[i]` (flat index) over `doc_ids`.
    #[new]
    #[pyo3(signature = (query_id, heads, heads_per_layer, doc_ids, rows, judgments, k = 10, gain = "linear"))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        query_id: String,
        heads: Vec<u32>,
        heads_per_layer: u32,
        doc_ids: Vec<String>,
        rows: Vec<Vec<f64>>,
        judgments: BTreeMap<String, u32>,
        k: usize,
        gain: &str,
    ) -> PyResult<Self> {
        let heads = heads
            .into_iter()
            .map(|f| routehead::HeadId::from_flat(f, heads_per_layer))
            .collect();
        let matrix =
            routehead::HeadScoreMatrix::new(query_id, heads, doc_ids, rows).map_err(py_err)?;
        Ok(PyQuery(JudgedQuery::new(
            matrix,
            judgments,
            metric(k, gain)?,
        )))
    }

    #[getter]
    fn query_id(&self) -> String {
        self.0.query_id().to_string()
    }

    /// Summed scores of the selected heads, aligned to the document list.
    fn aggregate(&self, heads: Vec<u32>) -> PyResult<Vec<f64>> {
        let agg = routehead::aggregate(&self.0.matrix, &self.heads(&heads)?).map_err(py_err)?;
        Ok(agg.scores)
    }

    fn rank(&self, heads: Vec<u32>) -> PyResult<Vec<String>> {
        let agg = routehead::aggregate(&self.0.matrix, &self.heads(&heads)?).map_err(py_err)?;
        Ok(routehead::rank(&agg))
    }

    /// nDCG of the ranking induced by a head set; the empty set scores 0.
    fn objective(&self, heads: Vec<u32>) -> PyResult<f64> {
        self.0.objective(&self.heads(&heads)?).map_err(py_err)
    }

    /// Forward selection plus swap refinement over `pool` (flat indices).
    /// Returns the selected heads, the label over the pool, and the nDCG after each phase.
    #[pyo3(signature = (pool, budget = search::DEFAULT_BUDGET, tolerance = 0.0, max_swap_iters = search::DEFAULT_MAX_SWAP_ITERS))]
    fn search(
        &self,
        pool: Vec<u32>,
        budget: usize,
        tolerance: f64,
        max_swap_iters: usize,
    ) -> PyResult<(Vec<u32>, Vec<u8>, f64, f64)> {
        let pool = self.pool(&pool)?;
        let config = SearchConfig {
            budget,
            tolerance,
            max_swap_iters,
        };
        config.validate(pool.k()).map_err(py_err)?;
        let label = search::search_query(&self.0, &pool, &config).map_err(py_err)?;
        let heads = label.selected(&pool).iter().map(|h| h.flat).collect();
        Ok((heads, label.y, label.achieved_ndcg, label.forward_ndcg))
    }

    /// Best non-empty subset of `pool` with at most `max_size` heads, by enumeration.
    fn exhaustive_oracle(&self, pool: Vec<u32>, max_size: usize) -> PyResult<(Vec<u32>, f64)> {
        let pool = self.pool(&pool)?;
        let best = search::exhaustive_oracle(&self.0, &pool, max_size).map_err(py_err)?;
        Ok((best.heads.iter().map(|h| h.flat).collect(), best.ndcg))
    }
}

/// Top-`k` heads by mean solo nDCG over the queries, as `(flat, score)` pairs.
#[pyfunction]
fn build_pool(queries: Vec<PyRef<'_, PyQuery>>, k: usize) -> PyResult<Vec<(u32, f64)>> {
    let first = queries
        .first()
        .ok_or_else(|| PyValueError::new_err("no queries"))?;
    let heads = first.0.matrix.head_ids().to_vec();
    let judged: Vec<JudgedQuery> = queries.iter().map(|q| q.0.clone()).collect();
    let pool = routehead::build_pool(&heads, &judged, k).map_err(py_err)?;
    Ok(pool
        .heads
        .iter()
        .map(|h| h.flat)
        .zip(pool.solo_scores)
        .collect())
}

#[pyclass(frozen, name = "Router")]
struct PyRouter(router::RouterParams);

#[pymethods]
impl PyRouter {
    /// Trains a router on embeddings and multi-hot targets; returns the router
    /// and the mean loss of every epoch.
    #[staticmethod]
    #[pyo3(signature = (embeddings, targets, lambda_ = 0.01, learning_rate = 0.05, epochs = 100, batch_size = 32, seed = 0, head_dim = router::DEFAULT_HEAD_DIM))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        embeddings: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        lambda_: f64,
        learning_rate: f64,
        epochs: usize,
        batch_size: usize,
        seed: u64,
        head_dim: usize,
    ) -> PyResult<(Self, Vec<f64>)> {
        if embeddings.len() != targets.len() {
            return Err(PyValueError::new_err(
                "embeddings and targets differ in length",
            ));
        }
        let data: Vec<TrainingExample> = embeddings
            .into_iter()
            .zip(targets)
            .map(|(embedding, targets)| TrainingExample { embedding, targets })
            .collect();
        let config = TrainConfig {
            lambda: lambda_,
            learning_rate,
            epochs,
            batch_size,
            seed,
            head_dim,
            ..TrainConfig::default()
        };
        let (params, log) = router::train(&data, &config).map_err(py_err)?;
        Ok((PyRouter(params), log.iter().map(|l| l.loss.total).collect()))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        router::RouterParams::read_from(data)
            .map(PyRouter)
            .map_err(py_err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes()
    }

    #[getter]
    fn num_heads(&self) -> usize {
        self.0.k
    }

    #[getter]
    fn query_dim(&self) -> usize {
        self.0.d_q
    }

    /// Per-head activation probabilities for one query embedding.
    fn probabilities(&self, embedding: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(router::forward(&self.0, &embedding).map_err(py_err)?.p)
    }

    /// Pool positions above `threshold`, or the `fallback_top_n` most probable when none are.
    #[pyo3(signature = (embedding, threshold = 0.5, fallback_top_n = 1))]
    fn select(
        &self,
        embedding: Vec<f64>,
        threshold: f64,
        fallback_top_n: usize,
    ) -> PyResult<Vec<usize>> {
        let p = self.probabilities(embedding)?;
        let pool = HeadPool {
            heads: (0..p.len() as u32)
                .map(|i| routehead::HeadId::from_flat(i, 1))
                .collect(),
            solo_scores: vec![0.0; p.len()],
            provenance: String::new(),
        };
        let config = SelectionConfig {
            threshold,
            fallback_top_n,
        };
        let heads = router::select_from_probabilities(&p, &pool, &config).map_err(py_err)?;
        Ok(heads.iter().map(|h| h.flat as usize).collect())
    }
}

#[pyfunction]
fn micro_f1(predictions: Vec<Vec<bool>>, targets: Vec<Vec<f64>>) -> f64 {
    routehead::micro_f1(&predictions, &targets)
}

/// Writes a synthetic fixture (dump, qrels, candidate run, held-out split) to `out`.
#[pyfunction]
#[pyo3(signature = (out, queries = 200, test_queries = 100, layers = 8, heads_per_layer = 8, seed = 0))]
fn synth(
    out: PathBuf,
    queries: usize,
    test_queries: usize,
    layers: u32,
    heads_per_layer: u32,
    seed: u64,
) -> PyResult<()> {
    let config = SynthConfig {
        queries,
        test_queries,
        layers,
        heads_per_layer,
        seed,
        ..SynthConfig::default()
    };
    synthesize(&config, &out).map(|_| ()).map_err(py_err)
}

/// Validates a dump and writes a dataset directory; returns the manifest hash.
#[pyfunction]
#[pyo3(signature = (dump, out, packed = false))]
fn ingest(dump: PathBuf, out: PathBuf, packed: bool) -> PyResult<String> {
    let manifest = ingest_dump(&dump, &out, IngestOptions { packed }).map_err(py_err)?;
    Ok(manifest.content_hash)
}

#[pyfunction]
#[pyo3(signature = (dataset, qrels, out, k = routehead::pool::DEFAULT_POOL_SIZE))]
fn pool(dataset: PathBuf, qrels: PathBuf, out: PathBuf, k: usize) -> PyResult<Vec<u32>> {
    let options = PoolOptions {
        k,
        metric: MetricConfig::default(),
    };
    let artifact = cmd_pool(&dataset, &qrels, &options, &out).map_err(py_err)?;
    Ok(artifact.heads.iter().map(|h| h.flat).collect())
}

/// Searches labels for every query; returns `{query_id: achieved nDCG}`.
#[pyfunction]
#[pyo3(signature = (dataset, qrels, pool, out, budget = search::DEFAULT_BUDGET, tolerance = 0.0, verbose = false, force = false))]
#[allow(clippy::too_many_arguments)]
fn label_search(
    dataset: PathBuf,
    qrels: PathBuf,
    pool: PathBuf,
    out: PathBuf,
    budget: usize,
    tolerance: f64,
    verbose: bool,
    force: bool,
) -> PyResult<HashMap<String, f64>> {
    let options = LabelSearchOptions {
        config: SearchConfig {
            budget,
            tolerance,
            ..SearchConfig::default()
        },
        verbose,
        force,
    };
    let artifact = cmd_label_search(&dataset, &qrels, &pool, &options, &out).map_err(py_err)?;
    Ok(artifact
        .labels
        .into_iter()
        .map(|l| (l.query_id, l.achieved_ndcg))
        .collect())
}

/// Trains the router from a labels artifact; returns the per-epoch mean loss.
#[pyfunction]
#[pyo3(signature = (dataset, labels, out, lambda_ = 0.01, learning_rate = 0.05, epochs = 100, seed = 0, force = false))]
#[allow(clippy::too_many_arguments)]
fn train(
    dataset: PathBuf,
    labels: PathBuf,
    out: PathBuf,
    lambda_: f64,
    learning_rate: f64,
    epochs: usize,
    seed: u64,
    force: bool,
) -> PyResult<Vec<f64>> {
    let options = TrainOptions {
        config: TrainConfig {
            lambda: lambda_,
            learning_rate,
            epochs,
            seed,
            ..TrainConfig::default()
        },
        force,
    };
    let meta = cmd_train(&dataset, &labels, &options, &out).map_err(py_err)?;
    Ok(meta.log.iter().map(|l| l.loss.total).collect())
}

/// Re-ranks a candidate run. `strategy` is `router`, `static_top_k` or `all_heads`.
#[pyfunction]
#[pyo3(signature = (dataset, candidates, out, strategy = "all_heads", weights = None, pool = None, k = 16, threshold = 0.5, fallback_top_n = 1, force = false))]
#[allow(clippy::too_many_arguments)]
fn rerank(
    dataset: PathBuf,
    candidates: PathBuf,
    out: PathBuf,
    strategy: &str,
    weights: Option<PathBuf>,
    pool: Option<PathBuf>,
    k: usize,
    threshold: f64,
    fallback_top_n: usize,
    force: bool,
) -> PyResult<usize> {
    let need = |p: Option<PathBuf>, what: &str| {
        p.ok_or_else(|| PyValueError::new_err(format!("strategy {strategy:?} needs {what}")))
    };
    let strategy = match strategy {
        "all_heads" => RerankStrategy::AllHeads,
        "static_top_k" => RerankStrategy::StaticTopK {
            pool: need(pool, "pool")?,
            k,
        },
        "router" => RerankStrategy::Router {
            weights: need(weights, "weights")?,
            pool: need(pool, "pool")?,
            selection: SelectionConfig {
                threshold,
                fallback_top_n,
            },
        },
        other => return Err(PyValueError::new_err(format!("unknown strategy {other:?}"))),
    };
    let (_, report) = cmd_rerank(&dataset, &candidates, &strategy, force, &out).map_err(py_err)?;
    Ok(report.queries)
}

/// Mean nDCG@k of a run and the per-query values.
#[pyfunction]
#[pyo3(signature = (run, qrels, k = 10, include_unjudged = false))]
fn evaluate(
    run: PathBuf,
    qrels: PathBuf,
    k: usize,
    include_unjudged: bool,
) -> PyResult<(f64, HashMap<String, f64>)> {
    let report =
        cmd_eval_files(&run, &qrels, metric(k, "linear")?, include_unjudged).map_err(py_err)?;
    let per_query = report
        .per_query
        .into_iter()
        .map(|q| (q.query_id, q.ndcg))
        .collect();
    Ok((report.mean, per_query))
}

#[pymodule]
fn routehead_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHeadId>()?;
    m.add_class::<PyQuery>()?;
    m.add_class::<PyRouter>()?;
    m.add_function(wrap_pyfunction!(score_doc_under_head, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(build_pool, m)?)?;
    m.add_function(wrap_pyfunction!(micro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(ingest, m)?)?;
    m.add_function(wrap_pyfunction!(pool, m)?)?;
    m.add_function(wrap_pyfunction!(label_search, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(rerank, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
