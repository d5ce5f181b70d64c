//! Built-in modifier profiles.
//!
//! - `snapshot[:days]` keeps one revision per interval (default 180 days).
//! - `links` replaces each block with its links, images and plain text.
//! - `urldiff` records which link targets each revision added or removed.
//! - `editdiff` records a line diff against the previous revision.
//!
//! All of them keep state only for the current segment.

mod editdiff;
mod snapshot;
mod wikitext;

use serde_json::Value;

pub use editdiff::{apply_changes, line_diff, split_lines, Change, ChangeKind, EditDiffProfile};
pub use snapshot::{SnapshotConfig, SnapshotProfile};
pub use wikitext::{extract_links, link_targets, LinkExtraction, LinksProfile, UrlDiffProfile};

use crate::modifier::{Profile, ProfileError};

/// Names accepted by [`parse_profile`], as shown in usage text.
pub const BUILTIN_PROFILES: &[&str] = &["snapshot[:days]", "links", "urldiff", "editdiff"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProfileSpecError {
    #[error("unknown profile {0:?}; built-in profiles: {builtins}", builtins = BUILTIN_PROFILES.join(", "))]
    Unknown(String),
    #[error("profile {name}: invalid argument {arg:?}: {reason}")]
    BadArgument {
        name: String,
        arg: String,
        reason: String,
    },
}

/// Parses a `NAME[:ARG]` profile spec into a built-in profile.
pub fn parse_profile(spec: &str) -> Result<Profile, ProfileSpecError> {
    let (name, arg) = match spec.split_once(':') {
        Some((name, arg)) => (name, Some(arg)),
        None => (spec, None),
    };
    let no_arg = |profile: Profile| match arg {
        None => Ok(profile),
        Some(arg) => Err(ProfileSpecError::BadArgument {
            name: name.into(),
            arg: arg.into(),
            reason: "takes no argument".into(),
        }),
    };
    match name {
        "snapshot" => {
            let days = match arg {
                None => SnapshotConfig::default().interval_days,
                Some(arg) => arg.parse::<u32>().ok().filter(|&d| d >= 1).ok_or_else(|| {
                    ProfileSpecError::BadArgument {
                        name: name.into(),
                        arg: arg.into(),
                        reason: "expected a positive number of days".into(),
                    }
                })?,
            };
            let config = SnapshotConfig {
                interval_days: days,
            };
            Ok(Profile::new(format!("snapshot:{days}"), move || {
                SnapshotProfile::new(config.clone())
            }))
        }
        "links" => no_arg(Profile::new("links", LinksProfile::default)),
        "urldiff" => no_arg(Profile::new("urldiff", UrlDiffProfile::default)),
        "editdiff" => no_arg(Profile::new("editdiff", EditDiffProfile::default)),
        _ => Err(ProfileSpecError::Unknown(spec.into())),
    }
}

/// `content.text.#text` as a string.
pub(crate) fn block_text(content: &Value) -> Result<&str, ProfileError> {
    content
        .get("text")
        .and_then(|t| t.get("#text"))
        .and_then(Value::as_str)
        .ok_or_else(|| ProfileError::new("block has no text.#text string"))
}

pub(crate) fn block_field<'a>(content: &'a Value, key: &str) -> Result<&'a str, ProfileError> {
    content
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| ProfileError::new(format!("block has no {key} string")))
}
