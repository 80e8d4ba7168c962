// SPDX-License-Identifier: MIT OR Apache-2.0

//! Resolved run configs: defaults, then an optional JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// File every command writes next to its outputs.
pub const CONFIG_FILE: &str = "config.json";

/// Starts from `T::default()` or from the JSON file at `path`.
///
/// Keys missing from the file keep their defaults; unknown keys are errors.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Overwrites `slot` when a flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Path that must have been provided by a flag or the config file.
pub fn required(path: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match path {
        Some(p) => Ok(p.clone()),
        None => bail!("missing required setting `{name}` (flag or config file)"),
    }
}

/// Buffered output files, written only after every computation succeeded.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    pub fn add_json<T: Serialize + ?Sized>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        self.add(path, to_json(value)?);
        Ok(())
    }

    /// Creates parent directories and writes every file.
    pub fn commit(self) -> Result<()> {
        for (path, bytes) in self.files {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)
                    .with_context(|| format!("creating {}", parent.display()))?;
            }
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

/// A parsed list of reals, kept as one flag value.
#[derive(Debug, Clone, PartialEq)]
pub struct Reals(pub Vec<f64>);

/// Parses `lo:hi:step` into `lo, lo + step, ...` up to `hi` inclusive.
///
/// Values are computed as `lo + i·step` so no error accumulates.
pub fn parse_grid(text: &str) -> Result<Reals, String> {
    let parts: Vec<&str> = text.split(':').collect();
    let [lo, hi, step] = parts[..] else {
        return Err(format!("expected lo:hi:step, got `{text}`"));
    };
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}"));
    let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
    if !(lo.is_finite() && hi.is_finite() && step.is_finite())
        || step <= 0.0
        || lo <= 0.0
        || hi < lo
    {
        return Err(format!(
            "grid needs 0 < lo <= hi and step > 0, got `{text}`"
        ));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok(Reals((0..count).map(|i| lo + i as f64 * step).collect()))
}

/// Parses a comma-separated list of finite reals.
pub fn parse_list(text: &str) -> Result<Reals, String> {
    let values = text
        .split(',')
        .map(|s| {
            let v: f64 = s.trim().parse().map_err(|e| format!("`{s}`: {e}"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("`{s}` is not finite"))
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(Reals(values))
}

/// Non-empty lines of a text file, in order.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}
