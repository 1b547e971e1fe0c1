use std::path::PathBuf;

use clap::Args;
use hashscope_core::diagnosis::DEFAULT_K;
use hashscope_service::ServiceConfig;

use super::MetricArg;

#[derive(Args)]
pub struct ServeArgs {
    /// Snapshot to serve
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Neighbors returned when a request leaves k unset
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Metric used when a request leaves it unset
    #[arg(long, value_enum, default_value_t = MetricArg::Hamming)]
    metric: MetricArg,
}

pub fn run(args: ServeArgs) -> anyhow::Result<()> {
    let mut config = ServiceConfig::new(args.db, args.port);
    config.host = args.host;
    config.default_k = args.k;
    config.metric = args.metric.into();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(hashscope_service::serve(config))?;
    Ok(())
}
