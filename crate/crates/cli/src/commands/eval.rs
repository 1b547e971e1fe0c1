use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Subcommand};
use hashscope_core::diagnosis::DEFAULT_K;
use hashscope_core::eval::reid::{
    full_grid, reid_benchmark, render_reid_table, split_views, ReidRowReport, SimilarityMetric,
};
use hashscope_core::eval::{aligned_table, classification_benchmark};
use hashscope_core::fusion::FusionConfig;
use hashscope_core::io::{group_scenes, load_embeddings};
use hashscope_core::snapshot::load_snapshot;

use super::MetricArg;

#[derive(Subcommand)]
pub enum EvalCommand {
    /// Re-identify held-out views against fused references
    Reid(ReidArgs),
    /// Cross-validated diagnosis from neighbor votes
    Cls(ClsArgs),
}

#[derive(Args)]
pub struct ReidArgs {
    /// Snapshot whose code width pins the hash side of the comparison
    #[arg(long)]
    db: PathBuf,
    /// Embedding container of multi-view scenes to split and re-identify
    #[arg(long)]
    embeddings: PathBuf,
    /// Restrict to one metric; both run when omitted
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
}

#[derive(Args)]
pub struct ClsArgs {
    #[arg(long)]
    db: PathBuf,
    /// Cross-validation folds over labeled polyps
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Neighbors per vote
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
}

pub fn run(command: EvalCommand) -> anyhow::Result<()> {
    match command {
        EvalCommand::Reid(args) => run_reid(args),
        EvalCommand::Cls(args) => run_cls(args),
    }
}

fn run_reid(args: ReidArgs) -> anyhow::Result<()> {
    let store =
        load_snapshot(&args.db).with_context(|| format!("reading {}", args.db.display()))?;
    let bits = store.hash_bits();
    let file = load_embeddings(&args.embeddings)
        .with_context(|| format!("reading {}", args.embeddings.display()))?;
    anyhow::ensure!(
        bits <= file.dim,
        "snapshot code width {} exceeds embedding dimension {}",
        bits,
        file.dim
    );
    let scenes = group_scenes(&file)?;
    let split = split_views(&scenes)?;
    let rows = full_grid(&split);
    let metrics: Vec<SimilarityMetric> = match args.metric {
        Some(arg) => vec![arg.into()],
        None => vec![SimilarityMetric::Hamming, SimilarityMetric::Cosine],
    };
    let mut reports: Vec<ReidRowReport> = Vec::new();
    for metric in metrics {
        reports.extend(reid_benchmark(
            &scenes,
            metric,
            &rows,
            FusionConfig::default(),
            Some(bits),
        )?);
    }
    println!("{}", serde_json::to_string(&reports)?);
    print!("{}", render_reid_table(&reports));
    Ok(())
}

fn run_cls(args: ClsArgs) -> anyhow::Result<()> {
    let store =
        load_snapshot(&args.db).with_context(|| format!("reading {}", args.db.display()))?;
    let report = classification_benchmark(&store, args.folds, args.seed, args.k)?;
    println!("{}", serde_json::to_string(&report)?);
    let mut rows: Vec<Vec<String>> = report
        .folds
        .iter()
        .map(|fold| {
            vec![
                fold.fold.to_string(),
                format!("{:.4}", fold.auc),
                format!("{:.4}", fold.acc),
                format!("{:.4}", fold.f1),
                fold.test_queries.to_string(),
            ]
        })
        .collect();
    let total_queries: usize = report.folds.iter().map(|fold| fold.test_queries).sum();
    rows.push(vec![
        "mean".to_string(),
        format!("{:.4}", report.mean_auc),
        format!("{:.4}", report.mean_acc),
        format!("{:.4}", report.mean_f1),
        total_queries.to_string(),
    ]);
    print!(
        "{}",
        aligned_table(&["fold", "auc", "acc", "f1", "test_queries"], &rows)
    );
    Ok(())
}
