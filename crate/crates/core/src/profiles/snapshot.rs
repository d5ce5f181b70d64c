use chrono::{DateTime, FixedOffset, TimeDelta};
use serde_json::Value;

use super::block_field;
use crate::model::{parse_timestamp, SegmentMetadata};
use crate::modifier::{ModifierProfile, ProfileError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotConfig {
    pub interval_days: u32,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        Self { interval_days: 180 }
    }
}

/// Keeps the first revision of a segment, then every revision at least
/// `interval_days` after the last one kept. Intervals are fixed lengths of
/// 24-hour days, not calendar months.
#[derive(Debug, Clone)]
pub struct SnapshotProfile {
    interval: TimeDelta,
    last_kept: Option<DateTime<FixedOffset>>,
}

impl SnapshotProfile {
    pub fn new(config: SnapshotConfig) -> Self {
        Self {
            interval: TimeDelta::days(i64::from(config.interval_days.max(1))),
            last_kept: None,
        }
    }
}

impl Default for SnapshotProfile {
    fn default() -> Self {
        Self::new(SnapshotConfig::default())
    }
}

impl ModifierProfile for SnapshotProfile {
    fn block(
        &mut self,
        content: Value,
        _metadata: &mut SegmentMetadata,
    ) -> Result<Option<Value>, ProfileError> {
        let raw = block_field(&content, "timestamp")?;
        let current = parse_timestamp(raw)
            .ok_or_else(|| ProfileError::new(format!("unparseable timestamp {raw:?}")))?;
        let keep = match self.last_kept {
            None => true,
            Some(last) => current >= last + self.interval,
        };
        if keep {
            self.last_kept = Some(current);
            Ok(Some(content))
        } else {
            Ok(None)
        }
    }
}
