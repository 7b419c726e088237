//! Serendipitous recommendation through hierarchical interest clusters.
//!
//! The pipeline builds a balanced cluster tree over the item catalog, mines
//! serendipitous transitions from interaction logs, asks a generation
//! backend which cluster to explore next for each popular item, caches those
//! plans incrementally and restricts candidate retrieval to the planned
//! cluster. `evalsim` measures the result against a seeded user simulator.

pub mod batchinfer;
pub mod cli;
pub mod clustertree;
pub mod corpus;
pub mod evalsim;
pub mod persist;
pub mod planner;
pub mod retriever;
pub mod serendipity;
pub mod synth;
