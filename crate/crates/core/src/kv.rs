//! `key=value` line format used by config files and checkpoint headers.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{MugError, Result};

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(MugError::Parse {
                path: source.to_string(),
                line: n + 1,
                msg: format!("expected key=value, got {line:?}"),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse()
        .map_err(|e| MugError::Config(format!("bad value {raw:?} for {key}: {e}")))
}
