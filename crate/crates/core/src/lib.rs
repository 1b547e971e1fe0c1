//! Scene-level polyp re-identification over binary hash codes.
//!
//! The pipeline: per-view embeddings are averaged into a single scene
//! embedding ([`fusion`]), sign-quantized into a compact binary code
//! ([`hashing`]), and stored in an exact Hamming-metric ball tree
//! ([`index`]). New cases are diagnosed by majority vote over their
//! nearest stored neighbors ([`diagnosis`]). Training-side objectives
//! (contrastive, hash entropy, masked reconstruction) are provided as
//! forward passes with analytic gradients ([`losses`]), and [`eval`]
//! carries the retrieval/classification benchmark harness.
//!
//! Everything downstream of a seed is deterministic: index construction,
//! fold assignment, and synthetic data generation all draw from
//! explicitly seeded ChaCha8 streams, and tie-breaks are defined on
//! record ids so that results are reproducible across runs and machines.

pub mod diagnosis;
pub mod eval;
pub mod fusion;
pub mod hashing;
pub mod index;
pub mod io;
pub mod losses;
pub mod model;
pub mod snapshot;
pub mod synth;
