use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};
use hashscope_core::io::{load_embeddings, load_pair_sidecar};
use hashscope_core::losses::{
    entropy_regularizer, infonce_exclusive, infonce_inclusive, EmbeddingBatch, EntropyOptions,
    PositivePairSet, DEFAULT_TEMPERATURE,
};
use serde::Serialize;

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    /// Denominator excludes the anchor's other positives
    Exclusive,
    /// Denominator ranges over every other element
    Inclusive,
}

#[derive(Args)]
pub struct LossArgs {
    /// Embedding container; rows are batch elements in file order
    #[arg(long)]
    embeddings: PathBuf,
    /// JSON {"pairs": [[i, j], ...]} of positive row indices;
    /// defaults to all ordered pairs within each polyp
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, value_enum, default_value_t = VariantArg::Exclusive)]
    variant: VariantArg,
    /// Spread raw vectors instead of normalized ones
    #[arg(long)]
    raw_distances: bool,
}

#[derive(Serialize)]
struct LossSummary {
    variant: &'static str,
    temperature: f64,
    raw_distances: bool,
    batch: usize,
    pairs: usize,
    infonce: f64,
    entropy: f64,
    objective: f64,
}

pub fn run(args: LossArgs) -> anyhow::Result<()> {
    let file = load_embeddings(&args.embeddings)
        .with_context(|| format!("reading {}", args.embeddings.display()))?;
    let vectors: Vec<Vec<f64>> = file
        .rows
        .iter()
        .map(|row| row.values.iter().map(|&v| v as f64).collect())
        .collect();
    let batch = EmbeddingBatch::new(vectors)?;
    let pairs = match &args.pairs {
        Some(path) => {
            let listed = load_pair_sidecar(path)
                .with_context(|| format!("reading {}", path.display()))?;
            PositivePairSet::from_unordered(listed, batch.len())?
        }
        None => {
            let mut by_polyp: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
            for (index, row) in file.rows.iter().enumerate() {
                by_polyp.entry(row.polyp_id).or_default().push(index);
            }
            let groups: Vec<Vec<usize>> = by_polyp.into_values().collect();
            PositivePairSet::from_groups(&groups, batch.len())?
        }
    };
    let infonce = match args.variant {
        VariantArg::Exclusive => infonce_exclusive(&batch, &pairs, args.temperature)?,
        VariantArg::Inclusive => infonce_inclusive(&batch, &pairs, args.temperature)?,
    };
    let entropy = entropy_regularizer(
        &batch,
        &pairs,
        EntropyOptions {
            raw_distances: args.raw_distances,
        },
    )?;
    let summary = LossSummary {
        variant: match args.variant {
            VariantArg::Exclusive => "exclusive",
            VariantArg::Inclusive => "inclusive",
        },
        temperature: args.temperature,
        raw_distances: args.raw_distances,
        batch: batch.len(),
        pairs: pairs.pair_count(),
        infonce,
        entropy,
        objective: infonce + entropy,
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}
