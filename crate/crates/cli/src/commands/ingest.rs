use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use hashscope_core::fusion::FusionConfig;
use hashscope_core::io::{build_store, load_embeddings, load_label_sidecar};
use hashscope_core::model::IndexParams;
use hashscope_core::snapshot::save_snapshot;
use serde::Serialize;

#[derive(Args)]
pub struct IngestArgs {
    /// Embedding container holding one row per captured view
    #[arg(long)]
    embeddings: PathBuf,
    /// JSONL sidecar of {"polyp_id", "label"}; wins over embedded labels
    #[arg(long)]
    labels: PathBuf,
    /// Snapshot path to write
    #[arg(long)]
    out: PathBuf,
    /// Skip L2 normalization before and after view averaging
    #[arg(long)]
    no_normalize: bool,
    /// Code width in bits; defaults to the embedding dimension
    #[arg(long)]
    hash_bits: Option<usize>,
}

#[derive(Serialize)]
struct IngestSummary {
    records: usize,
    dimension: usize,
    hash_bits: usize,
    labeled: usize,
    bytes: u64,
    out: String,
}

pub fn run(args: IngestArgs) -> anyhow::Result<()> {
    let file = load_embeddings(&args.embeddings)
        .with_context(|| format!("reading {}", args.embeddings.display()))?;
    let (sidecar, label_warnings) = load_label_sidecar(&args.labels)
        .with_context(|| format!("reading {}", args.labels.display()))?;
    for warning in &label_warnings {
        eprintln!("warning: {warning}");
    }
    let fusion = if args.no_normalize {
        FusionConfig {
            normalize_inputs: false,
            normalize_output: false,
        }
    } else {
        FusionConfig::default()
    };
    let outcome = build_store(
        &file,
        Some(&sidecar),
        fusion,
        args.hash_bits,
        IndexParams::default(),
    )?;
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    let store = outcome.store;
    let labeled = store
        .records()
        .iter()
        .filter(|r| r.label.is_labeled())
        .count();
    let bytes = save_snapshot(&store, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let summary = IngestSummary {
        records: store.len(),
        dimension: file.dim,
        hash_bits: store.hash_bits(),
        labeled,
        bytes,
        out: args.out.display().to_string(),
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}
