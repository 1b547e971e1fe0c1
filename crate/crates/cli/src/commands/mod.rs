pub mod bench;
pub mod eval;
pub mod ingest;
pub mod loss;
pub mod query;
pub mod serve;

use clap::ValueEnum;
use hashscope_core::eval::reid::SimilarityMetric;

/// Ranking metric selector shared by `query`, `eval reid`, and `serve`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Hamming,
    Cosine,
}

impl From<MetricArg> for SimilarityMetric {
    fn from(arg: MetricArg) -> SimilarityMetric {
        match arg {
            MetricArg::Hamming => SimilarityMetric::Hamming,
            MetricArg::Cosine => SimilarityMetric::Cosine,
        }
    }
}
