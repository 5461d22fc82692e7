use std::path::{Path, PathBuf};

use routehead::pipeline::artifacts::{LabelsArtifact, RouterMeta};
use routehead::pipeline::commands::{
    cmd_eval, cmd_label_search, cmd_oracle_check, cmd_pool, cmd_rerank, cmd_train,
    LabelSearchOptions, OracleOptions, PoolOptions, RerankStrategy, TrainOptions,
};
use routehead::pipeline::dataset::{
    ingest, write_dump, Dataset, DumpQuery, DumpSpec, EmbeddingRecord, IngestOptions, ScoreRecord,
};
use routehead::pipeline::io::write_atomic;
use routehead::pipeline::run::{RankedList, RunFile};
use routehead::pipeline::synth::{synthesize, SynthConfig};
use routehead::router::{SelectionConfig, TrainConfig};
use routehead::search::SearchConfig;
use routehead::{aggregate, rank, MetricConfig, Qrels};

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn small_config() -> SynthConfig {
    SynthConfig {
        layers: 2,
        heads_per_layer: 4,
        queries: 24,
        test_queries: 12,
        docs_per_query: 10,
        d_q: 6,
        clusters: 2,
        signal_heads_per_cluster: 1,
        unscored_candidates: 2,
        seed: 3,
        ..SynthConfig::default()
    }
}

/// Synthesizes, ingests and pools a small fixture.
fn fixture(config: SynthConfig) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    synthesize(&config, &root.join("fx")).unwrap();
    ingest(
        &root.join("fx/dump"),
        &root.join("ds"),
        IngestOptions::default(),
    )
    .unwrap();
    ingest(
        &root.join("fx/test/dump"),
        &root.join("dst"),
        IngestOptions::default(),
    )
    .unwrap();
    let pool = PoolOptions {
        k: 4,
        metric: MetricConfig::default(),
    };
    cmd_pool(
        &root.join("ds"),
        &root.join("fx/qrels.txt"),
        &pool,
        &root.join("pool.json"),
    )
    .unwrap();
    Fixture { _tmp: tmp, root }
}

fn labels(f: &Fixture, options: &LabelSearchOptions) -> LabelsArtifact {
    cmd_label_search(
        &f.path("ds"),
        &f.path("fx/qrels.txt"),
        &f.path("pool.json"),
        options,
        &f.path("labels.json"),
    )
    .unwrap()
}

fn search_options() -> LabelSearchOptions {
    LabelSearchOptions {
        config: SearchConfig {
            budget: 2,
            ..SearchConfig::default()
        },
        ..LabelSearchOptions::default()
    }
}

fn quick_train() -> TrainOptions {
    TrainOptions {
        config: TrainConfig {
            epochs: 20,
            head_dim: 8,
            ..TrainConfig::default()
        },
        force: false,
    }
}

#[test]
fn pool_and_labels_are_reproducible() {
    let f = fixture(small_config());
    let first = std::fs::read(f.path("pool.json")).unwrap();
    let pool = PoolOptions {
        k: 4,
        metric: MetricConfig::default(),
    };
    cmd_pool(
        &f.path("ds"),
        &f.path("fx/qrels.txt"),
        &pool,
        &f.path("pool.json"),
    )
    .unwrap();
    assert_eq!(first, std::fs::read(f.path("pool.json")).unwrap());

    let a = labels(&f, &search_options());
    assert_eq!(a.labels.len(), 24);
    assert!(a.failures.is_empty());
    assert!(a.labels.iter().all(|l| l.y.len() == 4 && l.trace.is_none()));
    let verbose = labels(
        &f,
        &LabelSearchOptions {
            verbose: true,
            ..search_options()
        },
    );
    assert!(verbose.labels.iter().all(|l| l.trace.is_some()));
}

#[test]
fn pool_larger_than_head_count_is_rejected() {
    let f = fixture(small_config());
    let too_big = PoolOptions {
        k: 9,
        metric: MetricConfig::default(),
    };
    let err = cmd_pool(
        &f.path("ds"),
        &f.path("fx/qrels.txt"),
        &too_big,
        &f.path("p.json"),
    )
    .unwrap_err();
    assert_eq!(err.category(), "config");
}

#[test]
fn query_without_judgments_gets_empty_label_with_warning() {
    let f = fixture(small_config());
    let qrels = Qrels::from_path(&f.path("fx/qrels.txt")).unwrap();
    let mut trimmed = Qrels::new();
    for (q, judgments) in qrels.iter().filter(|(q, _)| q.as_str() != "q00000") {
        for (d, &g) in judgments {
            trimmed.insert(q.clone(), d.clone(), g);
        }
    }
    write_atomic(&f.path("trimmed.txt"), trimmed.to_trec_string().as_bytes()).unwrap();
    let a = cmd_label_search(
        &f.path("ds"),
        &f.path("trimmed.txt"),
        &f.path("pool.json"),
        &search_options(),
        &f.path("labels.json"),
    )
    .unwrap();
    let first = a.labels.iter().find(|l| l.query_id == "q00000").unwrap();
    assert!(first.y.iter().all(|&v| v == 0));
    assert!(first.warning.is_some());
    assert_eq!(a.labels.iter().filter(|l| l.warning.is_some()).count(), 1);
}

#[test]
fn lineage_mismatch_is_refused_unless_forced() {
    let f = fixture(small_config());
    let options = search_options();
    let err = cmd_label_search(
        &f.path("dst"),
        &f.path("fx/test/qrels.txt"),
        &f.path("pool.json"),
        &options,
        &f.path("l.json"),
    )
    .unwrap_err();
    assert_eq!(err.category(), "lineage");
    let forced = LabelSearchOptions {
        force: true,
        ..options
    };
    cmd_label_search(
        &f.path("dst"),
        &f.path("fx/test/qrels.txt"),
        &f.path("pool.json"),
        &forced,
        &f.path("l.json"),
    )
    .unwrap();
}

#[test]
fn training_records_lambda_and_depends_on_seed() {
    let f = fixture(small_config());
    labels(&f, &search_options());
    let mut options = quick_train();
    options.config.lambda = 0.25;
    let meta = cmd_train(
        &f.path("ds"),
        &f.path("labels.json"),
        &options,
        &f.path("a.bin"),
    )
    .unwrap();
    assert_eq!(meta.lambda, 0.25);
    assert_eq!(meta.log.len(), 20);
    assert_eq!(RouterMeta::load(&f.path("a.json")).unwrap(), meta);

    options.config.seed = 1;
    cmd_train(
        &f.path("ds"),
        &f.path("labels.json"),
        &options,
        &f.path("b.bin"),
    )
    .unwrap();
    assert_ne!(
        std::fs::read(f.path("a.bin")).unwrap(),
        std::fs::read(f.path("b.bin")).unwrap()
    );
}

#[test]
fn missing_embedding_names_the_query() {
    let f = fixture(small_config());
    labels(&f, &search_options());
    // Rebuild the dataset with one embedding dropped; labels still reference it.
    let dump = f.path("fx/dump");
    let lines: Vec<String> = std::fs::read_to_string(dump.join("embeddings.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"q00003\""))
        .map(|l| format!("{l}\n"))
        .collect();
    write_atomic(&dump.join("embeddings.jsonl"), lines.concat().as_bytes()).unwrap();
    ingest(&dump, &f.path("ds2"), IngestOptions::default()).unwrap();
    let options = TrainOptions {
        force: true,
        ..quick_train()
    };
    let err = cmd_train(
        &f.path("ds2"),
        &f.path("labels.json"),
        &options,
        &f.path("r.bin"),
    )
    .unwrap_err();
    assert!(err.to_string().contains("q00003"), "{err}");
}

#[test]
fn rerank_appends_unscored_candidates_in_candidate_order() {
    let f = fixture(small_config());
    let candidates = RunFile::from_path(&f.path("fx/test/candidates.run")).unwrap();
    let (run, report) = cmd_rerank(
        &f.path("dst"),
        &f.path("fx/test/candidates.run"),
        &RerankStrategy::AllHeads,
        false,
        &f.path("all.run"),
    )
    .unwrap();
    assert_eq!(report.queries, 12);
    assert_eq!(report.appended_docs, 24);
    let dataset = Dataset::load(&f.path("dst")).unwrap();
    for (out, input) in run.queries.iter().zip(&candidates.queries) {
        assert_eq!(out.entries.len(), input.entries.len());
        assert!(out.entries.windows(2).all(|w| w[0].1 >= w[1].1));
        let scored = dataset.matrix(&out.query_id).unwrap().doc_ids();
        let expected_tail: Vec<&str> = input
            .doc_ids()
            .into_iter()
            .filter(|d| !scored.iter().any(|s| s == d))
            .collect();
        assert_eq!(out.doc_ids()[out.entries.len() - 2..], expected_tail[..]);
    }
    assert_eq!(RunFile::from_path(&f.path("all.run")).unwrap(), run);
}

#[test]
fn static_strategy_over_whole_pool_matches_manual_aggregation() {
    let f = fixture(SynthConfig {
        unscored_candidates: 0,
        ..small_config()
    });
    let strategy = RerankStrategy::StaticTopK {
        pool: f.path("pool.json"),
        k: 4,
    };
    let (run, _) = cmd_rerank(
        &f.path("dst"),
        &f.path("fx/test/candidates.run"),
        &strategy,
        false,
        &f.path("s.run"),
    )
    .unwrap();
    let pool = routehead::pipeline::artifacts::PoolArtifact::load(&f.path("pool.json"))
        .unwrap()
        .pool();
    let dataset = Dataset::load(&f.path("dst")).unwrap();
    for list in &run.queries {
        let agg = aggregate(dataset.matrix(&list.query_id).unwrap(), &pool.heads).unwrap();
        assert_eq!(list.doc_ids(), rank(&agg));
    }
}

#[test]
fn all_heads_on_single_head_dump_equals_static_top_one() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = DumpSpec {
        dataset: "one".into(),
        layers: 1,
        heads_per_layer: 1,
        d_q: 2,
        queries: vec![DumpQuery {
            query_id: "q".into(),
            doc_ids: vec!["a".into(), "b".into(), "c".into()],
        }],
    };
    let scores = [ScoreRecord {
        query_id: "q".into(),
        head_flat: 0,
        scores: vec![0.1, 0.5, 0.2],
    }];
    let embeddings = [EmbeddingRecord {
        query_id: "q".into(),
        embedding: vec![1.0, 0.0],
    }];
    write_dump(&root.join("dump"), &spec, &scores, &embeddings, false).unwrap();
    ingest(
        &root.join("dump"),
        &root.join("ds"),
        IngestOptions::default(),
    )
    .unwrap();
    write_atomic(&root.join("qrels.txt"), b"q 0 b 1\n").unwrap();
    write_atomic(
        &root.join("cand.run"),
        b"q Q0 a 1 3 bm25\nq Q0 b 2 2 bm25\nq Q0 c 3 1 bm25\n",
    )
    .unwrap();
    let pool = PoolOptions {
        k: 1,
        metric: MetricConfig::default(),
    };
    cmd_pool(
        &root.join("ds"),
        &root.join("qrels.txt"),
        &pool,
        &root.join("pool.json"),
    )
    .unwrap();

    let rerank = |s: RerankStrategy, out: &str| {
        cmd_rerank(
            &root.join("ds"),
            &root.join("cand.run"),
            &s,
            false,
            &root.join(out),
        )
        .unwrap()
        .0
    };
    let all = rerank(RerankStrategy::AllHeads, "all.run");
    let top = rerank(
        RerankStrategy::StaticTopK {
            pool: root.join("pool.json"),
            k: 1,
        },
        "top.run",
    );
    assert_eq!(all, top);
    assert_eq!(all.queries[0].doc_ids(), vec!["b", "c", "a"]);
}

#[test]
fn router_fallback_keeps_runs_complete() {
    let f = fixture(small_config());
    labels(&f, &search_options());
    cmd_train(
        &f.path("ds"),
        &f.path("labels.json"),
        &quick_train(),
        &f.path("router.bin"),
    )
    .unwrap();
    let strategy = RerankStrategy::Router {
        weights: f.path("router.bin"),
        pool: f.path("pool.json"),
        selection: SelectionConfig {
            threshold: 0.999_999,
            fallback_top_n: 1,
        },
    };
    let (run, report) = cmd_rerank(
        &f.path("dst"),
        &f.path("fx/test/candidates.run"),
        &strategy,
        false,
        &f.path("r.run"),
    )
    .unwrap();
    assert_eq!(report.mean_selected_heads, 1.0);
    assert_eq!(run.queries.len(), 12);
    assert!(run.queries.iter().all(|q| q.entries.len() == 10));
}

#[test]
fn router_rejects_a_different_pool() {
    let f = fixture(small_config());
    labels(&f, &search_options());
    cmd_train(
        &f.path("ds"),
        &f.path("labels.json"),
        &quick_train(),
        &f.path("router.bin"),
    )
    .unwrap();
    let pool = PoolOptions {
        k: 3,
        metric: MetricConfig::default(),
    };
    cmd_pool(
        &f.path("ds"),
        &f.path("fx/qrels.txt"),
        &pool,
        &f.path("pool3.json"),
    )
    .unwrap();
    let strategy = |force_pool: &Path| RerankStrategy::Router {
        weights: f.path("router.bin"),
        pool: force_pool.to_path_buf(),
        selection: SelectionConfig::default(),
    };
    let err = cmd_rerank(
        &f.path("dst"),
        &f.path("fx/test/candidates.run"),
        &strategy(&f.path("pool3.json")),
        false,
        &f.path("r.run"),
    )
    .unwrap_err();
    assert_eq!(err.category(), "lineage");
    let err = cmd_rerank(
        &f.path("dst"),
        &f.path("fx/test/candidates.run"),
        &strategy(&f.path("pool3.json")),
        true,
        &f.path("r.run"),
    )
    .unwrap_err();
    assert_eq!(err.category(), "dimension");
}

#[test]
fn oracle_check_reports_non_negative_gaps() {
    let f = fixture(small_config());
    let options = OracleOptions {
        pool_subset_size: 4,
        max_size: 2,
        ..OracleOptions::default()
    };
    let report = cmd_oracle_check(
        &f.path("ds"),
        &f.path("fx/qrels.txt"),
        &f.path("pool.json"),
        &options,
    )
    .unwrap();
    assert_eq!(report.per_query.len(), 24);
    assert!(report.min_gap >= 0.0);
    assert!((0.0..=1.0).contains(&report.attainment_rate));
}

#[test]
fn eval_of_perfect_run_is_one() {
    let f = fixture(small_config());
    let qrels = Qrels::from_path(&f.path("fx/qrels.txt")).unwrap();
    let run = RunFile {
        queries: qrels
            .iter()
            .map(|(q, judgments)| {
                let mut docs: Vec<(&String, &u32)> = judgments.iter().collect();
                docs.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
                RankedList {
                    query_id: q.clone(),
                    entries: docs
                        .iter()
                        .enumerate()
                        .map(|(i, (d, _))| ((*d).clone(), -(i as f64)))
                        .collect(),
                }
            })
            .collect(),
    };
    let report = cmd_eval(&run, &qrels, MetricConfig::default(), false).unwrap();
    assert_eq!(report.mean, 1.0);
    assert_eq!(report.per_query.len(), 24);
}
