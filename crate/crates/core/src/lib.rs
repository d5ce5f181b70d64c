//! Converts MediaWiki revision-history dumps into size-capped, randomly
//! accessible JSONL warehouses and applies streaming transformations to them.

pub mod builder;
pub mod download;
pub mod ingest;
pub mod model;
pub mod modifier;
pub mod profiles;
pub mod progress;
pub mod warehouse;

pub use model::{
    parse_block_line, serialize_block, validate_block, Block, BuildConfig, Contributor,
    NamespaceFilter, SegmentMetadata, TextPayload, Violation,
};
