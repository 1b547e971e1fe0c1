//! Terminal front end over the retrieval core: build snapshots from
//! embedding dumps, query them, run the evaluation protocols, time the
//! index, and serve a snapshot over HTTP.

mod commands;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "hashscope",
    version,
    about = "Binary-hash polyp case retrieval: ingest, query, evaluate, serve"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse embedding views per polyp, quantize, and write a snapshot
    Ingest(commands::ingest::IngestArgs),
    /// Look up nearest stored cases for each polyp in an embedding file
    Query(commands::query::QueryArgs),
    /// Retrieval and classification benchmarks
    #[command(subcommand)]
    Eval(commands::eval::EvalCommand),
    /// Time hash retrieval against a float scan on synthetic data
    Bench(commands::bench::BenchArgs),
    /// Contrastive and spreading objectives over an embedding batch
    Loss(commands::loss::LossArgs),
    /// Serve a snapshot read-only over HTTP
    Serve(commands::serve::ServeArgs),
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Ingest(args) => commands::ingest::run(args),
        Command::Query(args) => commands::query::run(args),
        Command::Eval(cmd) => commands::eval::run(cmd),
        Command::Bench(args) => commands::bench::run(args),
        Command::Loss(args) => commands::loss::run(args),
        Command::Serve(args) => commands::serve::run(args),
    }
}
