//! Approximate wikitext link extraction.
//!
//! Rules, applied left to right:
//! - `{{...}}` templates are removed with their content (nesting counted).
//! - `<ref ...>` / `</ref>` / `<ref .../>` tags are removed; text between
//!   an opening and closing tag is kept and scanned like any other text.
//! - `[[Target|label]]` is an internal link and renders as its label, or the
//!   target when there is no label. Targets starting with `File:` or
//!   `Image:` are images and render as nothing.
//! - `[http://host label]` is an external link and renders as its label, or
//!   the URL when there is no label.
//! - Bare `http://` / `https://` URLs are external links and stay in the
//!   text as they are.
//!
//! Links nested inside links are not recognized.

use std::collections::HashSet;

use serde::Serialize;
use serde_json::{json, Value};

use super::{block_field, block_text};
use crate::model::SegmentMetadata;
use crate::modifier::{ModifierProfile, ProfileError};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LinkExtraction {
    pub clean_text: String,
    pub external_links: Vec<String>,
    pub internal_links: Vec<String>,
    pub images: Vec<String>,
}

#[derive(Default)]
struct Unique {
    items: Vec<String>,
    seen: HashSet<String>,
}

impl Unique {
    fn push(&mut self, item: &str) {
        if !item.is_empty() && self.seen.insert(item.to_string()) {
            self.items.push(item.to_string());
        }
    }
}

pub fn extract_links(source: &str) -> LinkExtraction {
    let text = strip_ref_tags(&strip_templates(source));
    let mut clean = String::with_capacity(text.len());
    let (mut external, mut internal, mut images) =
        (Unique::default(), Unique::default(), Unique::default());
    let mut rest = text.as_str();
    while !rest.is_empty() {
        if let Some(body) = rest.strip_prefix("[[") {
            if let Some(end) = body.find("]]") {
                let inner = &body[..end];
                let (target, label) = match inner.split_once('|') {
                    Some((target, label)) => (target.trim(), Some(label)),
                    None => (inner.trim(), None),
                };
                if is_image(target) {
                    images.push(target);
                } else {
                    internal.push(target);
                    clean.push_str(label.unwrap_or(target));
                }
                rest = &body[end + 2..];
                continue;
            }
        }
        if let Some(body) = rest.strip_prefix('[') {
            if starts_with_scheme(body) {
                if let Some(end) = body.find(']') {
                    let inner = &body[..end];
                    match inner.split_once(char::is_whitespace) {
                        Some((url, label)) if !label.trim().is_empty() => {
                            external.push(url);
                            clean.push_str(label.trim());
                        }
                        _ => {
                            let url = inner.trim();
                            external.push(url);
                            clean.push_str(url);
                        }
                    }
                    rest = &body[end + 1..];
                    continue;
                }
            }
        }
        if starts_with_scheme(rest) {
            let len = bare_url_len(rest);
            external.push(&rest[..len]);
            clean.push_str(&rest[..len]);
            rest = &rest[len..];
            continue;
        }
        let ch = rest.chars().next().expect("non-empty");
        clean.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    LinkExtraction {
        clean_text: clean,
        external_links: external.items,
        internal_links: internal.items,
        images: images.items,
    }
}

/// External and internal link targets of a text, deduplicated in order.
pub fn link_targets(source: &str) -> Vec<String> {
    let links = extract_links(source);
    let mut all = Unique::default();
    for url in links.external_links.iter().chain(&links.internal_links) {
        all.push(url);
    }
    all.items
}

fn is_image(target: &str) -> bool {
    let lower = target.trim_start_matches(':').to_ascii_lowercase();
    lower.starts_with("file:") || lower.starts_with("image:")
}

fn starts_with_scheme(s: &str) -> bool {
    let head = s.get(..8).unwrap_or(s).to_ascii_lowercase();
    head.starts_with("http://") || head.starts_with("https://")
}

fn bare_url_len(s: &str) -> usize {
    let end = s
        .find(|c: char| c.is_whitespace() || "<>[]{}|\"".contains(c))
        .unwrap_or(s.len());
    let trimmed = s[..end].trim_end_matches(['.', ',', ';', ':', '!', '?', ')', '\'']);
    trimmed.len()
}

fn strip_templates(source: &str) -> String {
    let mut out = String::with_capacity(source.len());
    let mut depth = 0usize;
    let mut rest = source;
    while !rest.is_empty() {
        if let Some(after) = rest.strip_prefix("{{") {
            depth += 1;
            rest = after;
        } else if depth > 0 && rest.starts_with("}}") {
            depth -= 1;
            rest = &rest[2..];
        } else {
            let ch = rest.chars().next().expect("non-empty");
            if depth == 0 {
                out.push(ch);
            }
            rest = &rest[ch.len_utf8()..];
        }
    }
    out
}

fn strip_ref_tags(source: &str) -> String {
    let mut out = String::with_capacity(source.len());
    let mut rest = source;
    while let Some(start) = find_ref_tag(rest) {
        out.push_str(&rest[..start]);
        let tag = &rest[start..];
        match tag.find('>') {
            Some(end) => rest = &tag[end + 1..],
            None => {
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

fn find_ref_tag(s: &str) -> Option<usize> {
    let bytes = s.as_bytes();
    let mut from = 0;
    while let Some(pos) = s[from..].find('<') {
        let at = from + pos;
        let name_start = if bytes.get(at + 1) == Some(&b'/') {
            at + 2
        } else {
            at + 1
        };
        let name = bytes.get(name_start..name_start + 3);
        let after = bytes.get(name_start + 3);
        if name.is_some_and(|n| n.eq_ignore_ascii_case(b"ref"))
            && after.is_some_and(|&c| c == b'>' || c == b'/' || c.is_ascii_whitespace())
        {
            return Some(at);
        }
        from = at + 1;
    }
    None
}

/// Replaces each block with
/// `{revision_id, clean_text, external_links, internal_links, images}`.
#[derive(Debug, Default, Clone)]
pub struct LinksProfile;

impl ModifierProfile for LinksProfile {
    fn block(
        &mut self,
        content: Value,
        _metadata: &mut SegmentMetadata,
    ) -> Result<Option<Value>, ProfileError> {
        let links = extract_links(block_text(&content)?);
        Ok(Some(json!({
            "revision_id": content.get("revision_id").cloned().unwrap_or(Value::Null),
            "clean_text": links.clean_text,
            "external_links": links.external_links,
            "internal_links": links.internal_links,
            "images": links.images,
        })))
    }
}

/// Emits `{article_id, revision_id, timestamp, added_urls, removed_urls}`
/// against the previous revision of the same segment.
#[derive(Debug, Default, Clone)]
pub struct UrlDiffProfile {
    previous: Vec<String>,
}

impl ModifierProfile for UrlDiffProfile {
    fn block(
        &mut self,
        content: Value,
        _metadata: &mut SegmentMetadata,
    ) -> Result<Option<Value>, ProfileError> {
        let current = link_targets(block_text(&content)?);
        let timestamp = block_field(&content, "timestamp")?;
        let before: HashSet<&String> = self.previous.iter().collect();
        let after: HashSet<&String> = current.iter().collect();
        let added: Vec<&String> = current.iter().filter(|u| !before.contains(u)).collect();
        let removed: Vec<&String> = self
            .previous
            .iter()
            .filter(|u| !after.contains(u))
            .collect();
        let out = json!({
            "article_id": content.get("article_id").cloned().unwrap_or(Value::Null),
            "revision_id": content.get("revision_id").cloned().unwrap_or(Value::Null),
            "timestamp": timestamp,
            "added_urls": added,
            "removed_urls": removed,
        });
        self.previous = current;
        Ok(Some(out))
    }
}
