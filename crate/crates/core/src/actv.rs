// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation datasets and the ACTV1 container.
//!
//! An [`ActivationDataset`] is an `n × d` matrix of hidden-state coordinates
//! with one binary label per row and a small JSON metadata record. It is the
//! unit of exchange between the extractors, the probes, the HSIC sweep and the
//! steering code.
//!
//! # ACTV1 layout
//!
//! All integers little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"ACTV"`                |
//! | 4      | 4    | version `u32` = 1              |
//! | 8      | 1    | dtype `u8` = 1 (f32)           |
//! | 9      | 8    | `n` (`u64`)                    |
//! | 17     | 8    | `d` (`u64`)                    |
//! | 25     | 4    | meta length `u32`              |
//! | 29     | m    | meta JSON (UTF-8)              |
//! | 29+m   | n    | labels, one byte per row       |
//! | 29+m+n | 4nd  | activations, row-major f32     |
//!
//! Readers reject short payloads and trailing bytes, so any change to the
//! length fields is detected.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Container magic.
pub const MAGIC: [u8; 4] = *b"ACTV";
/// Only supported container version.
pub const FORMAT_VERSION: u32 = 1;
/// dtype code for 32-bit little-endian floats.
pub const DTYPE_F32: u8 = 1;
/// Size of the fixed header preceding the meta JSON.
pub const HEADER_LEN: usize = 29;
/// The only token position produced by this crate's extractors.
pub const LAST_TOKEN: &str = "last_token";

// ---------------------------------------------------------------------------
// Raw container
// ---------------------------------------------------------------------------

/// Untyped ACTV1 payload: header fields plus opaque meta bytes.
///
/// [`ActivationDataset`] and the toy model's tensor files are both stored in
/// this container; only the interpretation of `meta` differs.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RawContainer {
    pub n: usize,
    pub d: usize,
    pub meta: Vec<u8>,
    pub labels: Vec<u8>,
    pub data: Vec<f32>,
}

impl RawContainer {
    pub(crate) fn write<W: Write>(&self, sink: &mut W) -> Result<u64> {
        debug_assert_eq!(self.labels.len(), self.n);
        debug_assert_eq!(self.data.len(), self.n * self.d);
        let meta_len = u32::try_from(self.meta.len())
            .map_err(|_| Error::validation("meta JSON longer than u32::MAX bytes"))?;

        let mut header = [0u8; HEADER_LEN];
        header[0..4].copy_from_slice(&MAGIC);
        header[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        header[8] = DTYPE_F32;
        header[9..17].copy_from_slice(&(self.n as u64).to_le_bytes());
        header[17..25].copy_from_slice(&(self.d as u64).to_le_bytes());
        header[25..29].copy_from_slice(&meta_len.to_le_bytes());

        sink.write_all(&header)?;
        sink.write_all(&self.meta)?;
        sink.write_all(&self.labels)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        Ok((HEADER_LEN + self.meta.len() + self.labels.len() + buf.len()) as u64)
    }

    pub(crate) fn read<R: Read>(source: &mut R) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN];
        let got = read_up_to(source, &mut header)?;
        if got < 4 || header[0..4] != MAGIC {
            return Err(Error::format("missing ACTV magic"));
        }
        if got < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                found: got as u64,
            });
        }
        let layout = BodyLayout::parse(&header)?;
        let expected = layout.body_len;

        let mut body = Vec::new();
        let found = source.take(expected).read_to_end(&mut body)? as u64;
        if found < expected {
            return Err(Error::Truncated { expected, found });
        }
        let mut probe = [0u8; 1];
        if read_up_to(source, &mut probe)? != 0 {
            return Err(Error::format(format!(
                "trailing bytes after {expected}-byte payload"
            )));
        }

        Ok(layout.decode(&body))
    }

    /// Decodes a complete in-memory container. The total length is checked
    /// against the header before any payload is touched.
    pub(crate) fn from_slice(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[0..4] != MAGIC {
            return Err(Error::format("missing ACTV magic"));
        }
        let header: &[u8; HEADER_LEN] = bytes
            .get(..HEADER_LEN)
            .and_then(|h| h.try_into().ok())
            .ok_or(Error::Truncated {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            })?;
        let layout = BodyLayout::parse(header)?;
        let body = &bytes[HEADER_LEN..];
        let found = body.len() as u64;
        if found < layout.body_len {
            return Err(Error::Truncated {
                expected: layout.body_len,
                found,
            });
        }
        if found > layout.body_len {
            return Err(Error::format(format!(
                "trailing bytes after {}-byte payload",
                layout.body_len
            )));
        }
        Ok(layout.decode(body))
    }
}

/// Sizes declared by a header.
struct BodyLayout {
    n: usize,
    d: usize,
    meta_len: usize,
    body_len: u64,
}

impl BodyLayout {
    fn parse(header: &[u8; HEADER_LEN]) -> Result<Self> {
        let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported ACTV version {version}")));
        }
        if header[8] != DTYPE_F32 {
            return Err(Error::format(format!(
                "unsupported dtype code {}",
                header[8]
            )));
        }
        let n = u64::from_le_bytes(header[9..17].try_into().expect("8 bytes"));
        let d = u64::from_le_bytes(header[17..25].try_into().expect("8 bytes"));
        let meta_len = u32::from_le_bytes(header[25..29].try_into().expect("4 bytes")) as u64;
        if n == 0 || d == 0 {
            return Err(Error::validation(format!("empty matrix: n={n}, d={d}")));
        }
        let data_bytes = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(4))
            .ok_or_else(|| Error::format(format!("n={n}, d={d} overflows the payload size")))?;
        let body_len = meta_len
            .checked_add(n)
            .and_then(|v| v.checked_add(data_bytes))
            .filter(|&v| usize::try_from(v).is_ok())
            .ok_or_else(|| Error::format("payload size overflows"))?;
        Ok(Self {
            n: n as usize,
            d: d as usize,
            meta_len: meta_len as usize,
            body_len,
        })
    }

    /// Splits a body of exactly `body_len` bytes.
    fn decode(&self, body: &[u8]) -> RawContainer {
        let (n, d, meta_len) = (self.n, self.d, self.meta_len);
        let meta = body[..meta_len].to_vec();
        let labels = body[meta_len..meta_len + n].to_vec();
        let data = body[meta_len + n..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        RawContainer {
            n,
            d,
            meta,
            labels,
            data,
        }
    }
}

fn read_up_to<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

// ---------------------------------------------------------------------------
// Dataset metadata
// ---------------------------------------------------------------------------

/// Trustworthiness dimension a dataset probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimensionLabel {
    Reliability,
    Toxicity,
    Privacy,
    Fairness,
    Robustness,
    Other,
}

impl std::fmt::Display for DimensionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Reliability => "reliability",
            Self::Toxicity => "toxicity",
            Self::Privacy => "privacy",
            Self::Fairness => "fairness",
            Self::Robustness => "robustness",
            Self::Other => "other",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DimensionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::invalid(format!("unknown dimension label {s:?}")))
    }
}

/// Provenance record stored inside every ACTV1 dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dataset_name: String,
    pub dimension_label: DimensionLabel,
    pub checkpoint_id: String,
    pub layer: u32,
    pub token_position: String,
    pub balanced: bool,
    pub label_semantics: String,
}

impl DatasetMeta {
    /// Metadata for a last-token extraction at `(checkpoint_id, layer)`.
    pub fn last_token(
        dataset_name: impl Into<String>,
        dimension_label: DimensionLabel,
        checkpoint_id: impl Into<String>,
        layer: u32,
    ) -> Self {
        Self {
            dataset_name: dataset_name.into(),
            dimension_label,
            checkpoint_id: checkpoint_id.into(),
            layer,
            token_position: LAST_TOKEN.to_string(),
            balanced: false,
            label_semantics: String::new(),
        }
    }

    pub fn key(&self) -> SweepKey {
        SweepKey::new(self.checkpoint_id.clone(), self.layer)
    }
}

// ---------------------------------------------------------------------------
// ActivationDataset
// ---------------------------------------------------------------------------

/// Row-major `n × d` activations with binary labels and provenance.
///
/// Construction validates every invariant, so a value of this type is always
/// safe to write and to feed to the probes.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    n: usize,
    d: usize,
    activations: Vec<f32>,
    labels: Vec<u8>,
    meta: DatasetMeta,
}

impl ActivationDataset {
    /// Builds a dataset from row-major `activations` with `d` columns.
    pub fn new(
        d: usize,
        activations: Vec<f32>,
        labels: Vec<u8>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 || d == 0 {
            return Err(Error::validation(format!("empty matrix: n={n}, d={d}")));
        }
        if activations.len() != n * d {
            return Err(Error::validation(format!(
                "activation buffer has {} values, expected n·d = {}",
                activations.len(),
                n * d
            )));
        }
        let ds = Self {
            n,
            d,
            activations,
            labels,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Builds a dataset from a list of equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(
        rows: &[R],
        labels: Vec<u8>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.len() != labels.len() {
            return Err(Error::validation(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let mut activations = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::validation(format!(
                    "row {i} has {} columns, expected {d}",
                    r.len()
                )));
            }
            activations.extend_from_slice(r);
        }
        Self::new(d, activations, labels, meta)
    }

    fn validate(&self) -> Result<()> {
        if let Some(pos) = self.activations.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite activation at row {}, column {}",
                pos / self.d,
                pos % self.d
            )));
        }
        if let Some(i) = self.labels.iter().position(|&y| y > 1) {
            return Err(Error::validation(format!(
                "label {} at row {i} is not 0 or 1",
                self.labels[i]
            )));
        }
        if self.meta.balanced {
            let (neg, pos) = self.class_counts();
            if neg.abs_diff(pos) > 1 {
                return Err(Error::validation(format!(
                    "meta.balanced is set but classes have {neg} and {pos} rows"
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Row-major activation buffer.
    pub fn activations(&self) -> &[f32] {
        &self.activations
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.activations[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.activations.chunks_exact(self.d)
    }

    /// `(count of label 0, count of label 1)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        (self.n - pos, pos)
    }

    /// Subset of rows in the given order. Metadata is copied with `balanced`
    /// recomputed for the subset.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut activations = Vec::with_capacity(indices.len() * self.d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n {
                return Err(Error::invalid(format!(
                    "row index {i} out of range for n={}",
                    self.n
                )));
            }
            activations.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        let mut meta = self.meta.clone();
        let pos = labels.iter().filter(|&&y| y == 1).count();
        meta.balanced = meta.balanced && (labels.len() - pos).abs_diff(pos) <= 1;
        Self::new(self.d, activations, labels, meta)
    }

    /// Replaces the metadata, re-checking the balance flag.
    pub fn with_meta(mut self, meta: DatasetMeta) -> Result<Self> {
        self.meta = meta;
        self.validate()?;
        Ok(self)
    }

    /// Same activations with every label flipped.
    pub fn with_flipped_labels(&self) -> Self {
        let mut out = self.clone();
        for y in &mut out.labels {
            *y = 1 - *y;
        }
        out
    }

    /// Applies `f` to every activation value.
    pub fn map_activations(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        let activations = self.activations.iter().map(|&v| f(v)).collect();
        Self::new(self.d, activations, self.labels.clone(), self.meta.clone())
    }

    fn to_raw(&self) -> Result<RawContainer> {
        Ok(RawContainer {
            n: self.n,
            d: self.d,
            meta: serde_json::to_vec(&self.meta)?,
            labels: self.labels.clone(),
            data: self.activations.clone(),
        })
    }

    fn from_raw(raw: RawContainer) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_slice(&raw.meta)
            .map_err(|e| Error::format(format!("invalid dataset meta JSON: {e}")))?;
        Self::new(raw.d, raw.data, raw.labels, meta)
    }

    /// Encodes the dataset as an ACTV1 byte vector.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_actv(self, &mut out)?;
        Ok(out)
    }

    /// Decodes a complete ACTV1 byte buffer. Equivalent to [`read_actv`]
    /// over the slice, but a length mismatch is rejected before decoding.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_raw(RawContainer::from_slice(bytes)?)
    }
}

/// Writes `dataset` in ACTV1 layout and returns the number of bytes emitted.
pub fn write_actv<W: Write>(dataset: &ActivationDataset, sink: &mut W) -> Result<u64> {
    dataset.validate()?;
    dataset.to_raw()?.write(sink)
}

/// Reads one ACTV1 dataset, consuming `source` to its end.
pub fn read_actv<R: Read>(source: &mut R) -> Result<ActivationDataset> {
    ActivationDataset::from_raw(RawContainer::read(source)?)
}

pub fn write_actv_file(dataset: &ActivationDataset, path: &Path) -> Result<u64> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut sink = BufWriter::new(file);
    let written = write_actv(dataset, &mut sink)?;
    sink.flush().map_err(|e| Error::file(path, e))?;
    Ok(written)
}

pub fn read_actv_file(path: &Path) -> Result<ActivationDataset> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_actv(&mut BufReader::new(file)).map_err(|e| match e {
        Error::Io(source) => Error::file(path, source),
        other => Error::validation(format!("{}: {other}", path.display())),
    })
}

// ---------------------------------------------------------------------------
// Sweep manifests
// ---------------------------------------------------------------------------

/// One cell of the checkpoint × layer grid.
///
/// Ordering is lexicographic on `checkpoint_id`, then numeric on `layer`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SweepKey {
    pub checkpoint_id: String,
    pub layer: u32,
}

impl SweepKey {
    pub fn new(checkpoint_id: impl Into<String>, layer: u32) -> Self {
        Self {
            checkpoint_id: checkpoint_id.into(),
            layer,
        }
    }
}

impl std::fmt::Display for SweepKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, layer {})", self.checkpoint_id, self.layer)
    }
}

/// Manifest row pointing at one ACTV1 file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub checkpoint_id: String,
    pub layer: u32,
    /// Path of the ACTV1 file, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub dataset_name: String,
    pub dimension_label: DimensionLabel,
    /// Training step of the checkpoint. Optional; the MI sweep falls back to
    /// the trailing digits of `checkpoint_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
}

impl ManifestEntry {
    pub fn key(&self) -> SweepKey {
        SweepKey::new(self.checkpoint_id.clone(), self.layer)
    }

    /// Resolved step for time-series analyses.
    pub fn step(&self) -> Result<u64> {
        if let Some(step) = self.step {
            return Ok(step);
        }
        let digits: String = self
            .checkpoint_id
            .chars()
            .rev()
            .take_while(|c| c.is_ascii_digit())
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        digits.parse().map_err(|_| {
            Error::validation(format!(
                "checkpoint {:?} has no `step` field and no trailing step number",
                self.checkpoint_id
            ))
        })
    }
}

/// Sweep manifest document: `{"entries": [ManifestEntry, ...]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: invalid manifest: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    /// Entries sorted by [`SweepKey`], rejecting duplicate keys.
    ///
    /// Does not touch the filesystem; see [`validate_manifest`] for the full check.
    pub fn ordered_entries(&self) -> Result<Vec<ManifestEntry>> {
        let mut entries = self.entries.clone();
        entries.sort_by_key(|e| e.key());
        for pair in entries.windows(2) {
            if pair[0].key() == pair[1].key() {
                return Err(Error::validation(format!(
                    "duplicate manifest key {}",
                    pair[0].key()
                )));
            }
        }
        Ok(entries)
    }

    pub fn resolve_path(entry: &ManifestEntry, base_dir: &Path) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base_dir.join(&entry.path)
        }
    }
}

/// Checks a manifest against the files it references.
///
/// Returns the keys in sweep order. Fails on the first duplicate key, missing
/// or unreadable file, or metadata that disagrees with its manifest entry.
pub fn validate_manifest(manifest: &Manifest, base_dir: &Path) -> Result<Vec<SweepKey>> {
    let entries = manifest.ordered_entries()?;
    let mut seen = BTreeSet::new();
    for entry in &entries {
        let path = Manifest::resolve_path(entry, base_dir);
        if !path.is_file() {
            return Err(Error::validation(format!(
                "manifest entry {} references missing file {}",
                entry.key(),
                path.display()
            )));
        }
        let ds = read_actv_file(&path)?;
        check_entry_meta(entry, ds.meta(), &path)?;
        seen.insert(entry.key());
    }
    Ok(seen.into_iter().collect())
}

pub(crate) fn check_entry_meta(
    entry: &ManifestEntry,
    meta: &DatasetMeta,
    path: &Path,
) -> Result<()> {
    let mismatch = |field: &str, want: String, got: String| {
        Error::validation(format!(
            "{}: meta {field} is {got:?} but manifest says {want:?}",
            path.display()
        ))
    };
    if meta.checkpoint_id != entry.checkpoint_id {
        return Err(mismatch(
            "checkpoint_id",
            entry.checkpoint_id.clone(),
            meta.checkpoint_id.clone(),
        ));
    }
    if meta.layer != entry.layer {
        return Err(mismatch(
            "layer",
            entry.layer.to_string(),
            meta.layer.to_string(),
        ));
    }
    if meta.dataset_name != entry.dataset_name {
        return Err(mismatch(
            "dataset_name",
            entry.dataset_name.clone(),
            meta.dataset_name.clone(),
        ));
    }
    if meta.dimension_label != entry.dimension_label {
        return Err(mismatch(
            "dimension_label",
            entry.dimension_label.to_string(),
            meta.dimension_label.to_string(),
        ));
    }
    Ok(())
}
