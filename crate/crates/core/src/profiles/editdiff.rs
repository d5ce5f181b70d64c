use serde::Serialize;
use serde_json::{json, Value};
use similar::{capture_diff_slices, Algorithm, DiffOp};

use super::{block_field, block_text};
use crate::model::SegmentMetadata;
use crate::modifier::{ModifierProfile, ProfileError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    Add,
    Remove,
}

/// One changed line. `line` is the index in the previous text for
/// removals and in the current text for additions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Change {
    #[serde(rename = "type")]
    pub kind: ChangeKind,
    pub content: String,
    pub line: usize,
}

/// Splits on `\n`. The empty text has no lines.
pub fn split_lines(text: &str) -> Vec<&str> {
    if text.is_empty() {
        Vec::new()
    } else {
        text.split('\n').collect()
    }
}

/// Minimal line diff of `previous` against `current`. Within each hunk the
/// removals come before the additions.
pub fn line_diff(previous: &str, current: &str) -> Vec<Change> {
    let old = split_lines(previous);
    let new = split_lines(current);
    let mut changes = Vec::new();
    let remove = |changes: &mut Vec<Change>, start: usize, len: usize| {
        changes.extend((start..start + len).map(|line| Change {
            kind: ChangeKind::Remove,
            content: old[line].to_string(),
            line,
        }));
    };
    let add = |changes: &mut Vec<Change>, start: usize, len: usize| {
        changes.extend((start..start + len).map(|line| Change {
            kind: ChangeKind::Add,
            content: new[line].to_string(),
            line,
        }));
    };
    for op in capture_diff_slices(Algorithm::Myers, &old, &new) {
        match op {
            DiffOp::Equal { .. } => {}
            DiffOp::Delete {
                old_index, old_len, ..
            } => remove(&mut changes, old_index, old_len),
            DiffOp::Insert {
                new_index, new_len, ..
            } => add(&mut changes, new_index, new_len),
            DiffOp::Replace {
                old_index,
                old_len,
                new_index,
                new_len,
            } => {
                remove(&mut changes, old_index, old_len);
                add(&mut changes, new_index, new_len);
            }
        }
    }
    changes
}

/// Rebuilds the current text from the previous one: drop every removed
/// line, then insert every added line at its index in ascending order.
pub fn apply_changes(previous: &str, changes: &[Change]) -> Result<String, String> {
    let old = split_lines(previous);
    let mut removed = vec![false; old.len()];
    for change in changes.iter().filter(|c| c.kind == ChangeKind::Remove) {
        match old.get(change.line) {
            Some(line) if *line == change.content && !removed[change.line] => {
                removed[change.line] = true
            }
            _ => return Err(format!("remove of line {} does not match", change.line)),
        }
    }
    let mut lines: Vec<&str> = old
        .iter()
        .zip(&removed)
        .filter(|(_, gone)| !**gone)
        .map(|(line, _)| *line)
        .collect();
    let mut adds: Vec<&Change> = changes
        .iter()
        .filter(|c| c.kind == ChangeKind::Add)
        .collect();
    adds.sort_by_key(|c| c.line);
    for change in adds {
        if change.line > lines.len() {
            return Err(format!("add at line {} is past the end", change.line));
        }
        lines.insert(change.line, &change.content);
    }
    Ok(lines.join("\n"))
}

/// Consumes the first block of a segment and emits
/// `{changes, summary: null, timestamp}` for every later one.
#[derive(Debug, Default, Clone)]
pub struct EditDiffProfile {
    previous: Option<String>,
}

impl ModifierProfile for EditDiffProfile {
    fn block(
        &mut self,
        content: Value,
        _metadata: &mut SegmentMetadata,
    ) -> Result<Option<Value>, ProfileError> {
        let current = block_text(&content)?;
        let timestamp = block_field(&content, "timestamp")?;
        let out = self.previous.as_deref().map(|previous| {
            json!({
                "changes": line_diff(previous, current),
                "summary": Value::Null,
                "timestamp": timestamp,
            })
        });
        self.previous = Some(current.to_string());
        Ok(out)
    }
}
