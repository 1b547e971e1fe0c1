use clap::{Args, ValueEnum};
use hashscope_core::eval::speed::{speed_benchmark, BenchDistribution, SpeedBenchConfig};
use hashscope_core::eval::aligned_table;

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DistArg {
    Clustered,
    Uniform,
}

impl From<DistArg> for BenchDistribution {
    fn from(arg: DistArg) -> BenchDistribution {
        match arg {
            DistArg::Clustered => BenchDistribution::Clustered,
            DistArg::Uniform => BenchDistribution::Uniform,
        }
    }
}

#[derive(Args)]
pub struct BenchArgs {
    /// Stored records to generate
    #[arg(long)]
    n: usize,
    /// Embedding dimension; codes use the same width
    #[arg(long)]
    dim: usize,
    /// Shape of the synthetic embedding cloud
    #[arg(long, value_enum)]
    dist: DistArg,
    /// Timed passes per method; medians are reported
    #[arg(long)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn run(args: BenchArgs) -> anyhow::Result<()> {
    let config = SpeedBenchConfig {
        seed: args.seed,
        ..SpeedBenchConfig::new(args.n, args.dim, args.dist.into(), args.repeats)
    };
    let report = speed_benchmark(config)?;
    println!("{}", serde_json::to_string(&report)?);
    println!(
        "single-threaded, {} records, {} dims, {} codes, median of {} repeats",
        report.records, report.dim, report.hash_bits, report.repeats
    );
    let rows = vec![
        vec![
            "cosine scan".to_string(),
            format!("{:.6}", report.cosine_scan.median_batch_secs),
            format!("{:.1}", report.cosine_scan.queries_per_sec),
            "1.00".to_string(),
        ],
        vec![
            "hamming scan".to_string(),
            format!("{:.6}", report.hamming_scan.median_batch_secs),
            format!("{:.1}", report.hamming_scan.queries_per_sec),
            format!("{:.2}", report.hamming_scan_speedup_vs_cosine),
        ],
        vec![
            "hamming tree".to_string(),
            format!("{:.6}", report.hamming_tree.median_batch_secs),
            format!("{:.1}", report.hamming_tree.queries_per_sec),
            format!("{:.2}", report.tree_speedup_vs_cosine),
        ],
    ];
    print!(
        "{}",
        aligned_table(
            &["method", "median_batch_secs", "queries_per_sec", "speedup"],
            &rows
        )
    );
    Ok(())
}
