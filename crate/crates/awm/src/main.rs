use std::fs::{self, File};
use std::io::{self, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use awm::http_embedder::HttpEmbedder;
use awm::server;
use awm_core::classifier::LabelMode;
use awm_core::embedding::{BuiltinEmbedder, Embedder, Pooling};
use awm_core::log_ingest::{ingest_reader, RecordStore};
use awm_core::optimizer::{
    build_dependency_graph, estimate_speedup, format_stages, parse_business_deps, schedule,
};
use awm_core::service::pipeline::MODEL_FILE;
use awm_core::service::{
    embed_records, load_patterns, run_pipeline, train_classifier, Api, GroupBy, PipelineConfig,
    PipelineState,
};
use awm_core::sql_template::digest;
use awm_core::synthetic::interleaved_workload;
use awm_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "awm",
    version,
    about = "Mine workload patterns from database query logs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StoreArgs {
    /// Store directory holding records, caches, models and patterns.
    #[arg(long)]
    store: PathBuf,
    /// key=value settings file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Append query-log records (one JSON object per line) to a store.
    Ingest {
        /// Input file, or `-` for stdin.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 3)]
        retention_days: u32,
    },
    /// Print the template and SqlId of one SQL statement.
    Digest {
        #[arg(long)]
        sql: String,
    },
    /// Embed every stored query through the embedding cache.
    Embed {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        pooling: Option<Pooling>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        embedder_url: Option<String>,
    },
    /// Sample labels and train the business-group classifier.
    Train {
        #[command(flatten)]
        store: StoreArgs,
        /// Label sampling probability P_L.
        #[arg(long)]
        pl: Option<f64>,
        #[arg(long)]
        mode: Option<LabelMode>,
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        embedder_url: Option<String>,
    },
    /// Group, mine and schedule patterns.
    Mine {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        max_ord: Option<usize>,
        #[arg(long)]
        group_by: Option<GroupBy>,
    },
    /// Print the parallel stages of one pattern, one stage per line.
    Optimize {
        /// Pattern output file written by `mine` or `run`.
        #[arg(long)]
        patterns: PathBuf,
        #[arg(long)]
        pattern_id: usize,
        /// Business dependencies, `from -> to` per line.
        #[arg(long)]
        deps: Option<PathBuf>,
        /// Response time per pattern position, whitespace separated.
        #[arg(long)]
        rt: Option<PathBuf>,
    },
    /// Train if needed, then mine: the whole pipeline over an ingested store.
    Run {
        #[command(flatten)]
        store: StoreArgs,
    },
    /// Write a synthetic two-business query log with planted patterns.
    Synth {
        #[arg(long)]
        output: PathBuf,
        /// Repetitions of each planted pattern.
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the pattern API over HTTP.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn load_config(args: &StoreArgs) -> Result<PipelineConfig> {
    match &args.config {
        Some(path) => PipelineConfig::parse(&fs::read_to_string(path)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn make_embedder(config: &PipelineConfig) -> Result<Box<dyn Embedder>> {
    Ok(match &config.embedder_url {
        Some(url) => Box::new(HttpEmbedder::connect(url)?),
        None => Box::new(BuiltinEmbedder::new(config.embedding())),
    })
}

fn print_summary(state: &PipelineState) {
    for g in &state.groups {
        let multi = state
            .patterns
            .iter()
            .filter(|p| p.group == g.group && p.pattern.len() > 1)
            .count();
        println!(
            "group {}: {} queries, {} templates, order {}, {} multi-query patterns",
            g.group, g.sequence_len, g.alphabet_size, g.ord, multi
        );
    }
    for p in state.patterns.iter().filter(|p| p.pattern.len() > 1) {
        println!(
            "  pattern {} [{}] support {} probability {:.4}",
            p.id, p.group, p.support, p.probability
        );
        for t in &p.templates {
            println!("    {t}");
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            input,
            store,
            retention_days,
        } => {
            let mut records = RecordStore::open(&store)?;
            let report = if input == Path::new("-") {
                ingest_reader(io::stdin().lock(), &mut records, retention_days)?
            } else {
                ingest_reader(
                    BufReader::new(File::open(&input)?),
                    &mut records,
                    retention_days,
                )?
            };
            println!(
                "appended {}, skipped {}, purged {}, stored {}",
                report.appended,
                report.skipped,
                report.purged,
                records.len()
            );
        }
        Command::Digest { sql } => {
            let template = digest(&sql)?;
            println!("{}", template.text);
            println!("{}", template.sql_id());
        }
        Command::Embed {
            store,
            pooling,
            batch_size,
            dim,
            embedder_url,
        } => {
            let mut config = load_config(&store)?;
            config.pooling = pooling.unwrap_or(config.pooling);
            config.batch_size = batch_size.unwrap_or(config.batch_size);
            config.dim = dim.unwrap_or(config.dim);
            config.embedder_url = embedder_url.or(config.embedder_url);
            config.validate()?;
            let report = embed_records(&store.store, make_embedder(&config)?.as_ref())?;
            println!(
                "queries {}, distinct {}, cached vectors {}",
                report.queries, report.distinct, report.store_size
            );
        }
        Command::Train {
            store,
            pl,
            mode,
            batches,
            seed,
            embedder_url,
        } => {
            let mut config = load_config(&store)?;
            config.p_l = pl.unwrap_or(config.p_l);
            config.label_mode = mode.unwrap_or(config.label_mode);
            config.num_batches = batches.unwrap_or(config.num_batches);
            config.seed = seed.unwrap_or(config.seed);
            config.embedder_url = embedder_url.or(config.embedder_url);
            let report = train_classifier(&store.store, &config, make_embedder(&config)?.as_ref())?;
            println!(
                "trained on {} of {} records, classes [{}], feature dim {}",
                report.labeled,
                report.records,
                report.classes.join(", "),
                report.feature_dim
            );
        }
        Command::Mine {
            store,
            theta,
            max_ord,
            group_by,
        } => {
            let mut config = load_config(&store)?;
            config.theta = theta.unwrap_or(config.theta);
            config.max_ord = max_ord.unwrap_or(config.max_ord);
            config.group_by = group_by.unwrap_or(config.group_by);
            let state = run_pipeline(&store.store, &config, make_embedder(&config)?.as_ref())?;
            print_summary(&state);
        }
        Command::Optimize {
            patterns,
            pattern_id,
            deps,
            rt,
        } => {
            let entries = load_patterns(&patterns)?;
            let entry = entries
                .iter()
                .find(|p| p.id == pattern_id)
                .ok_or_else(|| Error::Config(format!("no pattern with id {pattern_id}")))?;
            let templates = entry
                .templates
                .iter()
                .map(|t| digest(t))
                .collect::<Result<Vec<_>>>()?;
            let deps = match deps {
                Some(path) => parse_business_deps(&fs::read_to_string(path)?)?,
                None => entry.deps.clone(),
            };
            let rt = match rt {
                Some(path) => fs::read_to_string(path)?
                    .split_whitespace()
                    .map(|v| {
                        v.parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad rt value {v:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => entry.rt.clone(),
            };
            let stages = schedule(&build_dependency_graph(&templates, &deps)?)?;
            print!("{}", format_stages(&stages));
            match estimate_speedup(&stages, &rt) {
                Ok(ratio) => eprintln!("estimated speedup {ratio:.4}"),
                Err(e) => eprintln!("no speedup estimate: {e}"),
            }
        }
        Command::Run { store } => {
            let config = load_config(&store)?;
            let embedder = make_embedder(&config)?;
            if config.group_by == GroupBy::Predicted && !store.store.join(MODEL_FILE).exists() {
                let report = train_classifier(&store.store, &config, embedder.as_ref())?;
                println!(
                    "trained on {} of {} records, classes [{}]",
                    report.labeled,
                    report.records,
                    report.classes.join(", ")
                );
            }
            let state = run_pipeline(&store.store, &config, embedder.as_ref())?;
            print_summary(&state);
        }
        Command::Synth { output, reps, seed } => {
            let workload = interleaved_workload(reps, seed);
            let lines: String = workload
                .records
                .iter()
                .map(|r| r.to_line() + "\n")
                .collect();
            fs::write(&output, lines)?;
            println!(
                "wrote {} records to {}",
                workload.records.len(),
                output.display()
            );
            for p in &workload.planted {
                let ids: Vec<String> = p.pattern.iter().map(ToString::to_string).collect();
                println!("planted [{}] in {} x{}", ids.join(", "), p.group, p.support);
            }
        }
        Command::Serve { store, port, host } => {
            let api = Arc::new(Api::load(&store)?);
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|_| Error::Config(format!("bad listen address {host}:{port}")))?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!(
                    "serving {} patterns on http://{}",
                    api.snapshot().patterns.len(),
                    listener.local_addr()?
                );
                server::serve(api, listener).await
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
