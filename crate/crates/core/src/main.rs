use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use routehead::pipeline::commands::{
    cmd_eval_files, cmd_ingest, cmd_label_search, cmd_oracle_check, cmd_pool, cmd_rerank,
    cmd_train, report_bytes, LabelSearchOptions, OracleOptions, PoolOptions, RerankStrategy,
    TrainOptions,
};
use routehead::pipeline::dataset::IngestOptions;
use routehead::pipeline::io::write_atomic;
use routehead::pipeline::synth::{synthesize, SynthConfig};
use routehead::router::{SelectionConfig, TrainConfig};
use routehead::search::SearchConfig;
use routehead::{Error, Gain, MetricConfig, Result};

#[derive(Parser)]
#[command(
    name = "routehead",
    version,
    about = "Attention-head routing for zero-shot re-ranking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GainArg {
    Linear,
    Exponential,
}

#[derive(Args)]
struct MetricArgs {
    /// Rank cutoff of nDCG.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_enum, default_value = "linear")]
    gain: GainArg,
}

impl MetricArgs {
    fn config(&self) -> MetricConfig {
        MetricConfig {
            k: self.k,
            gain: match self.gain {
                GainArg::Linear => Gain::Linear,
                GainArg::Exponential => Gain::Exponential,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Router,
    StaticTopK,
    AllHeads,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an extractor dump and write a hashed dataset directory.
    Ingest {
        dump: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Read the packed `scores.bin` instead of `scores.jsonl`.
        #[arg(long)]
        packed: bool,
    },
    /// Build the top-K head pool from solo head quality.
    Pool {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long = "pool-size", default_value_t = routehead::pool::DEFAULT_POOL_SIZE)]
        pool_size: usize,
        #[command(flatten)]
        metric: MetricArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Search per-query head-set labels over the pool.
    LabelSearch {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Maximum number of heads per label.
        #[arg(long, default_value_t = routehead::search::DEFAULT_BUDGET)]
        budget: usize,
        /// Minimum gain for a swap to be accepted.
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
        #[arg(long, default_value_t = routehead::search::DEFAULT_MAX_SWAP_ITERS)]
        max_swap_iters: usize,
        /// Embed search traces in the labels file.
        #[arg(long)]
        verbose: bool,
        #[arg(long)]
        force: bool,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train the router on searched labels.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        head_dim: Option<usize>,
        #[arg(long)]
        force: bool,
        /// Weights file; metadata goes next to it with a `.json` extension.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Re-rank a candidate run with a head-selection strategy.
    Rerank {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long, required_if_eq("strategy", "router"))]
        weights: Option<PathBuf>,
        #[arg(long, required_if_eq_any([("strategy", "router"), ("strategy", "static-top-k")]))]
        pool: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 1)]
        fallback_top_n: usize,
        /// Number of pool heads for the static strategy.
        #[arg(long = "top-k", default_value_t = 16)]
        top_k: usize,
        #[arg(long)]
        force: bool,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Per-query and mean nDCG of a run.
    Eval {
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[command(flatten)]
        metric: MetricArgs,
        /// Count queries without positive judgments as 0 in the mean.
        #[arg(long)]
        include_unjudged: bool,
        /// Write the JSON report here in addition to the text output.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare the label search against exhaustive enumeration.
    OracleCheck {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 8)]
        pool_subset_size: usize,
        #[arg(long, default_value_t = 3)]
        max_size: usize,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate a synthetic dump, qrels and candidate run.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        layers: u32,
        #[arg(long, default_value_t = 8)]
        heads_per_layer: u32,
        #[arg(long, default_value_t = 200)]
        queries: usize,
        #[arg(long, default_value_t = 100)]
        test_queries: usize,
        #[arg(long, default_value_t = 30)]
        docs: usize,
        #[arg(long, default_value_t = 3)]
        relevant: usize,
        #[arg(long, default_value_t = 16)]
        d_q: usize,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 2)]
        signal_heads: usize,
        #[arg(long, default_value_t = 1.5)]
        signal_strength: f64,
        #[arg(long, default_value_t = 0)]
        unscored: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        packed: bool,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { dump, out, packed } => {
            let m = cmd_ingest(&dump, &out, IngestOptions { packed })?;
            println!(
                "ingested {} queries, {} heads, hash {}",
                m.queries.len(),
                m.total_heads,
                m.content_hash
            );
        }
        Command::Pool {
            dataset,
            qrels,
            pool_size,
            metric,
            out,
        } => {
            let options = PoolOptions {
                k: pool_size,
                metric: metric.config(),
            };
            let a = cmd_pool(&dataset, &qrels, &options, &out)?;
            println!("pool of {} heads written to {}", a.k, out.display());
        }
        Command::LabelSearch {
            dataset,
            qrels,
            pool,
            budget,
            tolerance,
            max_swap_iters,
            verbose,
            force,
            out,
        } => {
            let options = LabelSearchOptions {
                config: SearchConfig {
                    budget,
                    tolerance,
                    max_swap_iters,
                },
                verbose,
                force,
            };
            let a = cmd_label_search(&dataset, &qrels, &pool, &options, &out)?;
            let mean = a.labels.iter().map(|l| l.achieved_ndcg).sum::<f64>()
                / a.labels.len().max(1) as f64;
            println!(
                "{} labels ({} failures), mean label nDCG {:.4}",
                a.labels.len(),
                a.failures.len(),
                mean
            );
        }
        Command::Train {
            dataset,
            labels,
            lambda,
            learning_rate,
            epochs,
            batch_size,
            seed,
            head_dim,
            force,
            out,
        } => {
            let d = TrainConfig::default();
            let config = TrainConfig {
                lambda: lambda.unwrap_or(d.lambda),
                learning_rate: learning_rate.unwrap_or(d.learning_rate),
                epochs: epochs.unwrap_or(d.epochs),
                batch_size: batch_size.unwrap_or(d.batch_size),
                seed: seed.unwrap_or(d.seed),
                head_dim: head_dim.unwrap_or(d.head_dim),
                ..d
            };
            let meta = cmd_train(&dataset, &labels, &TrainOptions { config, force }, &out)?;
            let last = meta.log.last().map_or(f64::NAN, |l| l.loss.total);
            println!(
                "trained on {} examples, final loss {:.6}",
                meta.num_examples, last
            );
        }
        Command::Rerank {
            dataset,
            candidates,
            strategy,
            weights,
            pool,
            threshold,
            fallback_top_n,
            top_k,
            force,
            out,
        } => {
            let need = |p: Option<PathBuf>, flag: &str| {
                p.ok_or_else(|| Error::Config(format!("--{flag} is required for this strategy")))
            };
            let strategy = match strategy {
                StrategyArg::AllHeads => RerankStrategy::AllHeads,
                StrategyArg::StaticTopK => RerankStrategy::StaticTopK {
                    pool: need(pool, "pool")?,
                    k: top_k,
                },
                StrategyArg::Router => RerankStrategy::Router {
                    weights: need(weights, "weights")?,
                    pool: need(pool, "pool")?,
                    selection: SelectionConfig {
                        threshold,
                        fallback_top_n,
                    },
                },
            };
            let (_, report) = cmd_rerank(&dataset, &candidates, &strategy, force, &out)?;
            println!(
                "re-ranked {} queries, {:.2} heads per query, {} appended docs",
                report.queries, report.mean_selected_heads, report.appended_docs
            );
        }
        Command::Eval {
            run,
            qrels,
            metric,
            include_unjudged,
            json,
        } => {
            let report = cmd_eval_files(&run, &qrels, metric.config(), include_unjudged)?;
            print!("{}", report.to_text());
            if let Some(path) = json {
                write_atomic(&path, &report_bytes(&report))?;
            }
        }
        Command::OracleCheck {
            dataset,
            qrels,
            pool,
            pool_subset_size,
            max_size,
            force,
            json,
        } => {
            let options = OracleOptions {
                pool_subset_size,
                max_size,
                force,
                ..OracleOptions::default()
            };
            let report = cmd_oracle_check(&dataset, &qrels, &pool, &options)?;
            for q in &report.per_query {
                println!(
                    "{}\t{:.6}\t{:.6}\t{:.6}",
                    q.query_id, q.search_ndcg, q.oracle_ndcg, q.gap
                );
            }
            println!(
                "attainment rate {:.4}, min gap {:.6}",
                report.attainment_rate, report.min_gap
            );
            if let Some(path) = json {
                write_atomic(&path, &report_bytes(&report))?;
            }
        }
        Command::Synth {
            out,
            layers,
            heads_per_layer,
            queries,
            test_queries,
            docs,
            relevant,
            d_q,
            clusters,
            signal_heads,
            signal_strength,
            unscored,
            seed,
            packed,
        } => {
            let config = SynthConfig {
                layers,
                heads_per_layer,
                queries,
                test_queries,
                docs_per_query: docs,
                relevant_per_query: relevant,
                d_q,
                clusters,
                signal_heads_per_cluster: signal_heads,
                signal_strength,
                unscored_candidates: unscored,
                seed,
                packed,
                ..SynthConfig::default()
            };
            let truth = synthesize(&config, &out)?;
            println!(
                "synthetic fixture written to {} ({} clusters)",
                out.display(),
                truth.signal_heads.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {}", e.category(), msg);
            ExitCode::FAILURE
        }
    }
}
