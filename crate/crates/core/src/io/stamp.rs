use std::path::Path;

use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::error::Result;

pub const STAMP_FILE: &str = "stamp.json";

/// Written next to every CLI output so a run can be reproduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproStamp {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

impl ReproStamp {
    pub fn new(command: impl Into<String>, config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_hash: config_hash.into(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

pub fn write_stamp(dir: &Path, stamp: &ReproStamp) -> Result<()> {
    let mut text = serde_json::to_string_pretty(stamp)?;
    text.push('\n');
    atomic_write(&dir.join(STAMP_FILE), text.as_bytes())
}
