use std::collections::HashSet;
use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use hashscope_core::diagnosis::{CaseDatabase, DEFAULT_K};
use hashscope_core::fusion::FusionConfig;
use hashscope_core::io::{group_scenes, load_embeddings};
use hashscope_core::snapshot::load_snapshot;
use hashscope_service::api::build_query_response;

use super::MetricArg;

#[derive(Args)]
pub struct QueryArgs {
    /// Snapshot to search
    #[arg(long)]
    db: PathBuf,
    /// Embedding container of query views, grouped by polyp
    #[arg(long)]
    input: PathBuf,
    /// Neighbors per query
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::Hamming)]
    metric: MetricArg,
    /// Drop stored records that share a query polyp's identity
    #[arg(long)]
    exclude_self: bool,
}

pub fn run(args: QueryArgs) -> anyhow::Result<()> {
    let store =
        load_snapshot(&args.db).with_context(|| format!("reading {}", args.db.display()))?;
    let db = CaseDatabase::build(store)?;
    let file = load_embeddings(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let scenes = group_scenes(&file)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for scene in &scenes {
        let exclude: Option<HashSet<u64>> = args
            .exclude_self
            .then(|| db.record_ids_of_polyp(scene.polyp_id()).into_iter().collect());
        let views: Vec<Vec<f64>> = scene
            .views()
            .iter()
            .map(|view| view.values().to_vec())
            .collect();
        let response = build_query_response(
            &db,
            &views,
            args.k,
            args.metric.into(),
            FusionConfig::default(),
            exclude.as_ref(),
        )
        .with_context(|| format!("querying polyp {}", scene.polyp_id()))?;
        writeln!(out, "{}", serde_json::to_string(&response)?)?;
    }
    Ok(())
}
