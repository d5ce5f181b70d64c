//! Streaming ingest of MediaWiki XML export dumps.
//!
//! A dump is read in a single linear pass. Each `<revision>` becomes one
//! [`Block`] and is released before the next event is produced, so memory is
//! bounded by the largest single revision regardless of how many revisions an
//! article has. Compressed inputs are decoded on the fly.

mod parser;
mod source;

use std::io;
use std::path::PathBuf;
use std::sync::Arc;

pub use parser::{open_dump, DumpReader};
pub use source::{Codec, DumpSource};

use crate::model::{Block, NamespaceFilter};

// Revisions dominate the stream, so boxing them would only add allocations.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum DumpEvent {
    ArticleStart {
        article_id: String,
        title: String,
        namespace: Option<i64>,
    },
    Revision(Block),
    ArticleEnd {
        article_id: String,
    },
    DumpEnd,
}

/// What the reader does after malformed XML.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecoveryMode {
    /// Resume at the next `<page>`.
    #[default]
    SkipArticle,
    /// End the stream.
    Abort,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub namespaces: NamespaceFilter,
    pub recovery: RecoveryMode,
}

impl IngestOptions {
    pub fn all_namespaces() -> Self {
        Self {
            namespaces: NamespaceFilter::All,
            ..Self::default()
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot open {}: {source}", path.display())]
    Open { path: PathBuf, source: io::Error },
    #[error("unrecognized codec for {}", path.display())]
    UnrecognizedCodec { path: PathBuf },
    #[error("root element is <{found}>, expected <mediawiki>")]
    NotMediaWiki { found: String },
    #[error("read error at byte {offset}: {source}")]
    Io { offset: u64, source: Arc<io::Error> },
    #[error("malformed XML at byte {offset} (article {article_id:?}): {message}")]
    Malformed {
        offset: u64,
        article_id: Option<String>,
        message: String,
    },
    #[error("malformed revision at byte {offset} in article {article_id}: {message}")]
    MalformedRevision {
        offset: u64,
        article_id: String,
        message: String,
    },
}

impl IngestError {
    /// Whether the stream can continue after this error.
    pub fn is_recoverable(&self) -> bool {
        matches!(
            self,
            IngestError::Malformed { .. } | IngestError::MalformedRevision { .. }
        )
    }
}
