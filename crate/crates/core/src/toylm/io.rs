// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint directories: `index.json` plus one ACTV1 container per tensor.
//!
//! ```text
//! index.json   {"format", "config", "step", "tensors": {name: {"shape", "file"}}}
//! <name>.actv  rows = shape[0] (1 for vectors), columns = remaining extent,
//!              zero label bytes, meta {"tensor": name, "shape": [...]}
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Params;
use super::{ToyLmCheckpoint, ToyLmConfig};
use crate::actv::RawContainer;
use crate::error::{Error, Result};

/// Value of the `format` field in `index.json`.
pub const CHECKPOINT_FORMAT: &str = "tracetrust-toylm/1";

const INDEX_FILE: &str = "index.json";

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    format: String,
    config: ToyLmConfig,
    step: u64,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct TensorMeta {
    tensor: String,
    shape: Vec<usize>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [len] => (1, *len),
        [rows, rest @ ..] => (*rows, rest.iter().product()),
        [] => (1, 1),
    }
}

/// Writes `ckpt` into `dir`, creating it if needed.
pub fn save_checkpoint(ckpt: &ToyLmCheckpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let layout = Params::layout(ckpt.config());
    let mut tensors = BTreeMap::new();
    for ((name, shape), data) in layout.into_iter().zip(ckpt.params().tensors()) {
        let file = format!("{name}.actv");
        let (n, d) = rows_cols(&shape);
        let meta = serde_json::to_vec(&TensorMeta {
            tensor: name.clone(),
            shape: shape.clone(),
        })?;
        let raw = RawContainer {
            n,
            d,
            meta,
            labels: vec![0; n],
            data: data.clone(),
        };
        let path = dir.join(&file);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::file(&path, e))?);
        raw.write(&mut w)?;
        w.flush().map_err(|e| Error::file(&path, e))?;
        tensors.insert(name, TensorEntry { shape, file });
    }
    let index = Index {
        format: CHECKPOINT_FORMAT.to_string(),
        config: *ckpt.config(),
        step: ckpt.step(),
        tensors,
    };
    let path = dir.join(INDEX_FILE);
    let mut text = serde_json::to_string_pretty(&index)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::file(&path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`], checking every shape
/// against the stored config.
pub fn load_checkpoint(dir: &Path) -> Result<ToyLmCheckpoint> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let index: Index = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: invalid checkpoint index: {e}", path.display())))?;
    if index.format != CHECKPOINT_FORMAT {
        return Err(Error::format(format!(
            "{}: unsupported checkpoint format {:?}",
            path.display(),
            index.format
        )));
    }
    index.config.validate()?;
    let layout = Params::layout(&index.config);
    if index.tensors.len() != layout.len() {
        return Err(Error::validation(format!(
            "{}: expected {} tensors, found {}",
            path.display(),
            layout.len(),
            index.tensors.len()
        )));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let entry = index.tensors.get(name).ok_or_else(|| {
            Error::validation(format!("{}: missing tensor {name}", path.display()))
        })?;
        if &entry.shape != shape {
            return Err(Error::validation(format!(
                "tensor {name}: index shape {:?} does not match config shape {shape:?}",
                entry.shape
            )));
        }
        let tpath = dir.join(&entry.file);
        let mut r = BufReader::new(File::open(&tpath).map_err(|e| Error::file(&tpath, e))?);
        let raw = RawContainer::read(&mut r)?;
        let meta: TensorMeta = serde_json::from_slice(&raw.meta)
            .map_err(|e| Error::format(format!("{}: invalid tensor meta: {e}", tpath.display())))?;
        if meta.tensor != *name || &meta.shape != shape || (raw.n, raw.d) != rows_cols(shape) {
            return Err(Error::validation(format!(
                "{}: tensor header does not match {name} {shape:?}",
                tpath.display()
            )));
        }
        tensors.push(raw.data);
    }
    let params = Params::from_tensors(&index.config, tensors);
    ToyLmCheckpoint::from_params(index.config, index.step, params)
}
