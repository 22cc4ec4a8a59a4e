use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use gqa_core::preprocess::{make_user_key, QueryBundle};
use gqa_core::rejection::{evaluate, read_corpus, ThresholdSweep};
use gqa_core::service::{self, Service, ServiceConfig};
use gqa_core::store::StoreRole;
use gqa_core::Error;

#[derive(Parser)]
#[command(name = "gqa", version, about = "Group-chat technical assistant")]
struct Cli {
    /// Config file (TOML, or JSON with a .json extension). HXD_CONFIG takes precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StoreArg {
    Rejection,
    Response,
}

impl From<StoreArg> for StoreRole {
    fn from(s: StoreArg) -> Self {
        match s {
            StoreArg::Rejection => StoreRole::Rejection,
            StoreArg::Response => StoreRole::Response,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve,
    /// Add every supported file under a directory to a store.
    Ingest {
        #[arg(long, value_enum)]
        store: StoreArg,
        dir: PathBuf,
    },
    /// Run one question through the pipeline and print the reply record.
    Query {
        text: String,
        #[arg(long)]
        group: String,
        #[arg(long, default_value = "cli")]
        user: String,
    },
    /// Sweep the similarity threshold over a labeled corpus and print TSV.
    EvalReject {
        corpus: PathBuf,
        /// Also apply the question-score stage at this threshold.
        #[arg(long)]
        question_threshold: Option<u8>,
        #[arg(long, default_value_t = 0.0)]
        start: f32,
        #[arg(long, default_value_t = 1.0)]
        end: f32,
        #[arg(long, default_value_t = 0.01)]
        step: f32,
    },
    /// Recall a sent reply.
    Withdraw { reply_id: String },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::MalformedCorpus { .. } => 3,
        _ => 1,
    }
}

fn load(explicit: Option<&Path>) -> gqa_core::Result<ServiceConfig> {
    ServiceConfig::load(&ServiceConfig::locate(explicit)?)
}

fn print_json(value: &impl serde::Serialize) -> gqa_core::Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

/// A closed pipe (`gqa ... | head`) is not an error.
fn emit(text: &str) -> gqa_core::Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("stdout", e)),
        _ => Ok(()),
    }
}

fn serve(cfg: ServiceConfig) -> gqa_core::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Config(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async move {
        let svc = Arc::new(Service::from_config(&cfg)?);
        let listener = tokio::net::TcpListener::bind(&cfg.listen)
            .await
            .map_err(|e| Error::Config(format!("cannot listen on {}: {e}", cfg.listen)))?;
        let addr = listener.local_addr().map_err(|e| Error::io(".", e))?;
        tracing::info!(%addr, "serving");
        let ticker = svc.spawn_ticker(Duration::from_secs(1));
        let app = service::router(Arc::clone(&svc));
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::io(addr.to_string(), e))?;
        ticker.abort();
        let rest = svc.flush_all();
        for r in svc.process(rest).await {
            r?;
        }
        Ok(())
    })
}

fn run(cli: Cli) -> gqa_core::Result<()> {
    let cfg = load(cli.config.as_deref())?;
    match cli.command {
        Command::Serve => serve(cfg),
        Command::Ingest { store, dir } => {
            let role = StoreRole::from(store);
            let mut fs = service::open_store(&cfg, role)?;
            let summary = fs.ingest(&dir)?;
            fs.persist(service::store_path(&cfg, role))?;
            for skipped in &summary.skipped {
                eprintln!("skipped {}: {}", skipped.path.display(), skipped.reason);
            }
            print_json(&summary)
        }
        Command::Query { text, group, user } => {
            let pipeline = service::build_pipeline(&cfg)?;
            let now = pipeline.clock().now().timestamp();
            let bundle = QueryBundle::single(make_user_key(&group, &user)?, &text, now, &format!("cli-{now}"));
            print_json(&pipeline.run(&bundle)?)
        }
        Command::EvalReject {
            corpus,
            question_threshold,
            start,
            end,
            step,
        } => {
            let file = std::fs::File::open(&corpus).map_err(|e| Error::io(&corpus, e))?;
            let items = read_corpus(BufReader::new(file))?;
            let store = service::open_store(&cfg, StoreRole::Rejection)?;
            let gateway = match question_threshold {
                Some(_) => Some(service::build_gateway(&cfg)?),
                None => None,
            };
            let scorer = gateway.as_ref().zip(question_threshold);
            let report = evaluate(&items, &store, scorer, &ThresholdSweep { start, end, step })?;
            emit(&report.to_tsv())
        }
        Command::Withdraw { reply_id } => print_json(&service::build_pipeline(&cfg)?.withdraw(&reply_id)?),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
