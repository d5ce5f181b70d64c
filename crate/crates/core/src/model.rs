//! Canonical data types shared by every stage of the pipeline.
//!
//! A [`Block`] is one revision of one article. Blocks are stored one per line
//! in the warehouse JSONL format produced by [`serialize_block`]; keys are
//! always emitted in the same order so that equal blocks serialize to equal
//! bytes regardless of which worker wrote them.

use std::fmt;
use std::net::IpAddr;
use std::path::PathBuf;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};

/// Default compressed size at which a warehouse is sealed (1 GiB).
pub const DEFAULT_WAREHOUSE_SIZE_LIMIT: u64 = 1 << 30;
/// Smallest accepted warehouse size limit (1 MiB).
pub const MIN_WAREHOUSE_SIZE_LIMIT: u64 = 1 << 20;
/// Default cap on a single serialized block line.
pub const DEFAULT_MAX_LINE_BYTES: usize = 512 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("block schema violation: {}", join_violations(.0))]
    Schema(Vec<Violation>),
}

fn join_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// One broken rule, named by the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Author of a revision. Registered users carry `username` + `id`,
/// anonymous edits carry only `ip`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Contributor {
    pub username: Option<String>,
    pub id: Option<String>,
    pub ip: Option<String>,
}

impl Contributor {
    pub fn registered(username: impl Into<String>, id: impl Into<String>) -> Self {
        Self {
            username: Some(username.into()),
            id: Some(id.into()),
            ip: None,
        }
    }

    pub fn anonymous(ip: impl Into<String>) -> Self {
        Self {
            ip: Some(ip.into()),
            ..Self::default()
        }
    }
}

/// Revision wikitext plus the byte count the dump declared for it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextPayload {
    /// Verbatim `bytes` attribute; not checked against `text`.
    pub bytes: Option<String>,
    pub text: String,
    /// Set for suppressed revisions (`<text deleted="deleted"/>`).
    pub deleted: bool,
    pub extras: Map<String, Value>,
}

impl TextPayload {
    pub fn new(bytes: Option<String>, text: impl Into<String>) -> Self {
        Self {
            bytes,
            text: text.into(),
            ..Self::default()
        }
    }
}

/// One revision of one article.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Block {
    pub article_id: String,
    pub revision_id: String,
    pub timestamp: String,
    pub contributor: Contributor,
    pub comment: Option<String>,
    pub format: Option<String>,
    pub text: TextPayload,
    pub sha1: Option<String>,
    /// Keys outside the block schema, kept for forward compatibility.
    pub extras: Map<String, Value>,
}

impl Serialize for Contributor {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(None)?;
        if let Some(username) = &self.username {
            map.serialize_entry("username", username)?;
        }
        if let Some(id) = &self.id {
            map.serialize_entry("id", id)?;
        }
        if let Some(ip) = &self.ip {
            map.serialize_entry("ip", ip)?;
        }
        map.end()
    }
}

impl Serialize for TextPayload {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(None)?;
        if let Some(bytes) = &self.bytes {
            map.serialize_entry("@bytes", bytes)?;
        }
        map.serialize_entry("#text", &self.text)?;
        if self.deleted {
            map.serialize_entry("deleted", &true)?;
        }
        for (key, value) in &self.extras {
            map.serialize_entry(key, value)?;
        }
        map.end()
    }
}

impl Serialize for Block {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(None)?;
        map.serialize_entry("article_id", &self.article_id)?;
        map.serialize_entry("revision_id", &self.revision_id)?;
        map.serialize_entry("timestamp", &self.timestamp)?;
        map.serialize_entry("contributor", &self.contributor)?;
        if let Some(comment) = &self.comment {
            map.serialize_entry("comment", comment)?;
        }
        if let Some(format) = &self.format {
            map.serialize_entry("format", format)?;
        }
        map.serialize_entry("text", &self.text)?;
        if let Some(sha1) = &self.sha1 {
            map.serialize_entry("sha1", sha1)?;
        }
        for (key, value) in &self.extras {
            map.serialize_entry(key, value)?;
        }
        map.end()
    }
}

/// Encodes a block as one LF-terminated JSON line with fixed key order.
///
/// Embedded newlines in string values are escaped by JSON, so the returned
/// buffer contains exactly one LF, at the end.
pub fn serialize_block(block: &Block) -> Vec<u8> {
    let mut line = Vec::with_capacity(block.text.text.len() + 256);
    write_block_line(block, &mut line);
    line
}

/// Like [`serialize_block`] but appends into a caller-owned buffer.
pub fn write_block_line(block: &Block, out: &mut Vec<u8>) {
    // Writing into a Vec cannot fail and Strings are always valid UTF-8.
    serde_json::to_writer(&mut *out, block).expect("block serialization is infallible");
    out.push(b'\n');
}

/// Parses one warehouse line back into a [`Block`].
///
/// Structural problems (missing required keys, wrong JSON types) are
/// rejected; semantic checks are left to [`validate_block`].
pub fn parse_block_line(line: &[u8]) -> Result<Block, ModelError> {
    let line = strip_line_ending(line);
    let value: Value = serde_json::from_slice(line).map_err(|err| ModelError::Json {
        offset: json_error_offset(line, &err),
        message: err.to_string(),
    })?;
    match value {
        Value::Object(map) => Block::from_json_object(map).map_err(ModelError::Schema),
        _ => Err(ModelError::Schema(vec![Violation::new(
            "<root>",
            "expected a JSON object",
        )])),
    }
}

/// Parses a line as a generic JSON object, for datasets whose schema has
/// been changed by a modifier.
pub fn parse_object_line(line: &[u8]) -> Result<Map<String, Value>, ModelError> {
    let line = strip_line_ending(line);
    match serde_json::from_slice(line) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ModelError::Schema(vec![Violation::new(
            "<root>",
            "expected a JSON object",
        )])),
        Err(err) => Err(ModelError::Json {
            offset: json_error_offset(line, &err),
            message: err.to_string(),
        }),
    }
}

fn strip_line_ending(line: &[u8]) -> &[u8] {
    line.strip_suffix(b"\n").unwrap_or(line)
}

fn json_error_offset(input: &[u8], err: &serde_json::Error) -> usize {
    if err.is_eof() {
        return input.len();
    }
    // serde_json reports 1-based line and column; fold them into a byte offset.
    let line_start: usize = input
        .split(|&b| b == b'\n')
        .take(err.line().saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum();
    (line_start + err.column().saturating_sub(1)).min(input.len())
}

impl Block {
    /// Builds a block from a decoded JSON object, collecting every
    /// structural violation rather than stopping at the first.
    pub fn from_json_object(mut map: Map<String, Value>) -> Result<Block, Vec<Violation>> {
        let mut violations = Vec::new();

        let article_id = take_required_string(&mut map, "article_id", &mut violations);
        let revision_id = take_required_string(&mut map, "revision_id", &mut violations);
        let timestamp = take_required_string(&mut map, "timestamp", &mut violations);

        let contributor = match map.remove("contributor") {
            None | Some(Value::Null) => Contributor::default(),
            Some(Value::Object(mut obj)) => {
                let contributor = Contributor {
                    username: take_optional_string(
                        &mut obj,
                        "contributor.username",
                        "username",
                        &mut violations,
                    ),
                    id: take_optional_string(&mut obj, "contributor.id", "id", &mut violations),
                    ip: take_optional_string(&mut obj, "contributor.ip", "ip", &mut violations),
                };
                for key in obj.keys() {
                    violations.push(Violation::new(format!("contributor.{key}"), "unknown key"));
                }
                contributor
            }
            Some(_) => {
                violations.push(Violation::new("contributor", "expected an object"));
                Contributor::default()
            }
        };

        let comment = take_optional_string(&mut map, "comment", "comment", &mut violations);
        let format = take_optional_string(&mut map, "format", "format", &mut violations);

        let text = match map.remove("text") {
            None => {
                violations.push(Violation::new("text", "missing"));
                TextPayload::default()
            }
            Some(Value::Object(mut obj)) => {
                let bytes =
                    take_optional_string(&mut obj, "text.@bytes", "@bytes", &mut violations);
                let text = match obj.remove("#text") {
                    Some(Value::String(s)) => s,
                    Some(_) => {
                        violations.push(Violation::new("text.#text", "expected a string"));
                        String::new()
                    }
                    None => {
                        violations.push(Violation::new("text.#text", "missing"));
                        String::new()
                    }
                };
                let deleted = match obj.remove("deleted") {
                    None => false,
                    Some(Value::Bool(b)) => b,
                    Some(_) => {
                        violations.push(Violation::new("text.deleted", "expected a boolean"));
                        false
                    }
                };
                TextPayload {
                    bytes,
                    text,
                    deleted,
                    extras: obj,
                }
            }
            Some(_) => {
                violations.push(Violation::new("text", "expected an object"));
                TextPayload::default()
            }
        };

        let sha1 = take_optional_string(&mut map, "sha1", "sha1", &mut violations);

        if violations.is_empty() {
            Ok(Block {
                article_id,
                revision_id,
                timestamp,
                contributor,
                comment,
                format,
                text,
                sha1,
                extras: map,
            })
        } else {
            Err(violations)
        }
    }
}

fn take_required_string(
    map: &mut Map<String, Value>,
    key: &str,
    violations: &mut Vec<Violation>,
) -> String {
    match map.remove(key) {
        Some(Value::String(s)) => s,
        Some(_) => {
            violations.push(Violation::new(key, "expected a string"));
            String::new()
        }
        None => {
            violations.push(Violation::new(key, "missing"));
            String::new()
        }
    }
}

fn take_optional_string(
    map: &mut Map<String, Value>,
    field: &str,
    key: &str,
    violations: &mut Vec<Violation>,
) -> Option<String> {
    match map.remove(key) {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s),
        Some(_) => {
            violations.push(Violation::new(field, "expected a string"));
            None
        }
    }
}

/// Checks every block invariant. Returns an empty list for a valid block.
pub fn validate_block(block: &Block) -> Vec<Violation> {
    let mut violations = Vec::new();

    for (field, value) in [
        ("article_id", &block.article_id),
        ("revision_id", &block.revision_id),
    ] {
        if !is_positive_decimal(value) {
            violations.push(Violation::new(field, "not a positive integer"));
        }
    }

    if parse_timestamp(&block.timestamp).is_none() {
        violations.push(Violation::new("timestamp", "not ISO-8601"));
    }

    let c = &block.contributor;
    let registered = c.username.is_some() || c.id.is_some();
    match (registered, c.ip.is_some()) {
        (true, true) => violations.push(Violation::new("contributor", "ambiguous identity")),
        (false, false) => violations.push(Violation::new("contributor", "missing identity")),
        (true, false) if c.username.is_none() || c.id.is_none() => violations.push(Violation::new(
            "contributor",
            "incomplete registered identity",
        )),
        _ => {}
    }
    if let Some(id) = &c.id {
        if !is_decimal(id) {
            violations.push(Violation::new("contributor.id", "not a decimal integer"));
        }
    }
    if let Some(ip) = &c.ip {
        if ip.parse::<IpAddr>().is_err() {
            violations.push(Violation::new("contributor.ip", "not an IP address"));
        }
    }

    if let Some(bytes) = &block.text.bytes {
        if !is_decimal(bytes) {
            violations.push(Violation::new("text.@bytes", "not a non-negative integer"));
        }
    }

    if let Some(sha1) = &block.sha1 {
        let base36 = sha1
            .bytes()
            .all(|b| b.is_ascii_digit() || b.is_ascii_lowercase());
        if sha1.is_empty() || !base36 {
            violations.push(Violation::new("sha1", "not lowercase base-36"));
        }
    }

    violations
}

fn is_decimal(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

fn is_positive_decimal(s: &str) -> bool {
    is_decimal(s) && s.bytes().any(|b| b != b'0')
}

/// Parses an ISO-8601 / RFC 3339 instant as stored in dumps.
pub fn parse_timestamp(s: &str) -> Option<chrono::DateTime<chrono::FixedOffset>> {
    chrono::DateTime::parse_from_rfc3339(s).ok()
}

/// Per-article sidecar record locating a segment frame inside a warehouse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetadata {
    pub warehouse: String,
    pub article_id: String,
    pub title: String,
    pub namespace: Option<i64>,
    pub byte_start: u64,
    pub byte_length: u64,
    pub uncompressed_bytes: u64,
    pub num_revisions: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_timestamp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_timestamp: Option<String>,
    #[serde(default)]
    pub custom: Map<String, Value>,
}

impl SegmentMetadata {
    pub fn byte_end(&self) -> u64 {
        self.byte_start + self.byte_length
    }
}

/// Which page namespaces the builder keeps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamespaceFilter {
    All,
    Only(Vec<i64>),
}

impl NamespaceFilter {
    /// Pages without a `<ns>` element always pass.
    pub fn accepts(&self, namespace: Option<i64>) -> bool {
        match (self, namespace) {
            (NamespaceFilter::All, _) | (_, None) => true,
            (NamespaceFilter::Only(keep), Some(ns)) => keep.contains(&ns),
        }
    }
}

impl Default for NamespaceFilter {
    fn default() -> Self {
        NamespaceFilter::Only(vec![0])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

/// Settings for the building process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildConfig {
    pub output_dir: PathBuf,
    pub num_workers: usize,
    /// Compressed bytes after which a warehouse is sealed.
    pub warehouse_size_limit: u64,
    /// Advisory only; recorded in the manifest.
    pub memory_budget_per_worker: u64,
    pub compression_level: u32,
    pub namespaces: NamespaceFilter,
    pub overwrite: bool,
    /// Optional cap on the summed size of input files being processed at once.
    pub max_inflight_input_bytes: Option<u64>,
    pub max_line_bytes: usize,
    /// Emit a heartbeat progress event every this many articles per worker.
    pub heartbeat_articles: u64,
}

impl BuildConfig {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            output_dir: output_dir.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_workers == 0 {
            return Err(ConfigError("num_workers must be at least 1".into()));
        }
        if self.warehouse_size_limit < MIN_WAREHOUSE_SIZE_LIMIT {
            return Err(ConfigError(format!(
                "warehouse_size_limit must be at least {MIN_WAREHOUSE_SIZE_LIMIT} bytes"
            )));
        }
        if self.memory_budget_per_worker == 0 {
            return Err(ConfigError(
                "memory_budget_per_worker must be positive".into(),
            ));
        }
        if self.compression_level > 9 {
            return Err(ConfigError("compression_level must be within 0..=9".into()));
        }
        if self.heartbeat_articles == 0 {
            return Err(ConfigError("heartbeat_articles must be positive".into()));
        }
        Ok(())
    }
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("./warehouses"),
            num_workers: 1,
            warehouse_size_limit: DEFAULT_WAREHOUSE_SIZE_LIMIT,
            memory_budget_per_worker: 1 << 30,
            compression_level: 6,
            namespaces: NamespaceFilter::default(),
            overwrite: false,
            max_inflight_input_bytes: None,
            max_line_bytes: DEFAULT_MAX_LINE_BYTES,
            heartbeat_articles: 1000,
        }
    }
}
