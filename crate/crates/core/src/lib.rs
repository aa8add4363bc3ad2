//! Ledger ingestion, schema refinement and query engine.

pub mod bench;
pub mod config;
pub mod gen;
pub mod ingest;
pub mod model;
pub mod parser;
pub mod query;
pub mod records;
pub mod schema;
pub mod source;
pub mod store;
pub mod sync;
