//! Query-dependent attention-head routing for zero-shot LLM re-ranking.
//!
//! Per-head document relevance comes from query-to-document attention mass.
//! An offline search builds, per training query, the head subset that
//! maximizes nDCG@10; a small router learns to predict those subsets from the
//! query embedding, and re-ranking sums scores over the heads it selects.

pub mod digest;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod pool;
pub mod query;
pub mod relevance;
pub mod router;
pub mod search;

pub use error::{Error, Result};
pub use metrics::{mean_ndcg, ndcg_at_k, Gain, Judgments, MetricConfig, Qrels};
pub use pool::{build_pool, solo_head_score, HeadPool};
pub use query::JudgedQuery;
pub use relevance::{
    aggregate, build_score_matrix, rank, score_doc_under_head, AggregatedScores, HeadId,
    HeadScoreMatrix, TokenAttentionRecord,
};
pub use router::{
    backward, forward, loss, micro_f1, select_heads, train, LossBreakdown, RouterOutput,
    RouterParams, SelectionConfig, TrainConfig, TrainingExample,
};
pub use search::{
    exhaustive_oracle, forward_select, search_labels, search_query, swap_refine, PseudoLabel,
    SearchConfig, SearchEvent,
};
