//! Adapter weights in memory and the `ADPT1` on-disk format.
//!
//! An adapter file is laid out as
//!
//! ```text
//! "ADPT1\n" | manifest_len: u64 LE | manifest (UTF-8 JSON) | zero pad to 8 | payload
//! ```
//!
//! The payload holds every tensor as little-endian `f32`, row-major, in
//! manifest order (lexicographic by tensor name). Offsets in the manifest are
//! relative to the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 6] = b"ADPT1\n";
pub const INDEX_FILE: &str = "index.txt";

const LORA_A_SUFFIX: &str = ".lora_A";
const LORA_B_SUFFIX: &str = ".lora_B";

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("tensor name must be non-empty")]
    EmptyTensorName,
    #[error("tensor `{name}` has invalid shape {rows}x{cols}")]
    InvalidShape { name: String, rows: usize, cols: usize },
    #[error("tensor `{name}` holds {len} values but shape {rows}x{cols} needs {expected}")]
    DataLength {
        name: String,
        rows: usize,
        cols: usize,
        len: usize,
        expected: usize,
    },
    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),
    #[error("rank must be positive")]
    ZeroRank,
    #[error("alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("task_id must be non-empty")]
    EmptyTaskId,
    #[error("layer `{layer}` is missing its `{missing}` tensor")]
    MissingPair { layer: String, missing: String },
    #[error("tensor `{name}` does not follow the LoRA naming scheme")]
    UnpairedTensor { name: String },
    #[error("layer `{layer}`: lora_A is {a_rows}x{a_cols}, lora_B is {b_rows}x{b_cols}, rank {rank}")]
    RankMismatch {
        layer: String,
        rank: usize,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("adapter set is empty")]
    EmptySet,
    #[error("duplicate task_id `{0}` in adapter set")]
    DuplicateTask(String),
    #[error("adapter `{task_id}` does not match the schema of `{reference}`: {detail}")]
    SchemaMismatch {
        task_id: String,
        reference: String,
        detail: String,
    },
    #[error("flat vector has {got} values, schema needs {expected}")]
    FlatLength { got: usize, expected: usize },
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("file too short for header ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("manifest length {declared} exceeds file size {available}")]
    ManifestLength { declared: u64, available: usize },
    #[error("manifest is not valid: {0}")]
    Manifest(String),
    #[error("tensor `{name}`: shape {rows}x{cols} needs {expected} bytes but manifest declares {declared}")]
    ShapeBytes {
        name: String,
        rows: usize,
        cols: usize,
        expected: usize,
        declared: usize,
    },
    #[error("tensor `{name}`: offset {offset} does not follow the previous tensor (expected {expected})")]
    Offset {
        name: String,
        offset: usize,
        expected: usize,
    },
    #[error("duplicate tensor name `{0}` in manifest")]
    DuplicateTensor(String),
    #[error("tensor `{name}` is out of order in manifest")]
    TensorOrder { name: String },
    #[error("non-zero alignment padding")]
    Padding,
    #[error("payload shorter than manifest declares ({available} < {declared} bytes)")]
    PayloadShort { declared: usize, available: usize },
    #[error("payload longer than manifest declares ({available} > {declared} bytes)")]
    PayloadLong { declared: usize, available: usize },
    #[error("invalid adapter: {0}")]
    Adapter(#[from] AdapterError),
    #[error("index lists `{0}` twice")]
    DuplicateIndexEntry(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<FormatError>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, AdapterError> {
        if rows == 0 || cols == 0 {
            return Err(AdapterError::InvalidShape {
                name: String::new(),
                rows,
                cols,
            });
        }
        if data.len() != rows * cols {
            return Err(AdapterError::DataLength {
                name: String::new(),
                rows,
                cols,
                len: data.len(),
                expected: rows * cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self, AdapterError> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self, AdapterError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }
}

/// Named matrices, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorMap {
    entries: BTreeMap<String, Matrix>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) -> Result<(), AdapterError> {
        let name = name.into();
        if name.is_empty() {
            return Err(AdapterError::EmptyTensorName);
        }
        if self.entries.contains_key(&name) {
            return Err(AdapterError::DuplicateTensor(name));
        }
        self.entries.insert(name, m);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn schema(&self) -> Schema {
        Schema {
            tensors: self
                .entries
                .iter()
                .map(|(k, m)| (k.clone(), m.rows, m.cols))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(Matrix::len).sum()
    }
}

/// Tensor names and shapes, in flattening order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    tensors: Vec<(String, usize, usize)>,
}

impl Schema {
    /// Builds a schema from `(name, rows, cols)` triples; order is normalized.
    pub fn new(mut tensors: Vec<(String, usize, usize)>) -> Result<Self, AdapterError> {
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        for w in tensors.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(AdapterError::DuplicateTensor(w[0].0.clone()));
            }
        }
        for (name, rows, cols) in &tensors {
            if name.is_empty() {
                return Err(AdapterError::EmptyTensorName);
            }
            if *rows == 0 || *cols == 0 {
                return Err(AdapterError::InvalidShape {
                    name: name.clone(),
                    rows: *rows,
                    cols: *cols,
                });
            }
        }
        Ok(Self { tensors })
    }

    /// LoRA schema with `layers` layers named `layer_{i}`, each holding
    /// `lora_A` (`rank x d_in`) and `lora_B` (`d_out x rank`).
    pub fn lora(layers: usize, rank: usize, d_in: usize, d_out: usize) -> Result<Self, AdapterError> {
        let mut tensors = Vec::with_capacity(layers * 2);
        for l in 0..layers {
            tensors.push((format!("layer_{l}{LORA_A_SUFFIX}"), rank, d_in));
            tensors.push((format!("layer_{l}{LORA_B_SUFFIX}"), d_out, rank));
        }
        Self::new(tensors)
    }

    pub fn tensors(&self) -> &[(String, usize, usize)] {
        &self.tensors
    }

    pub fn dim(&self) -> usize {
        self.tensors.iter().map(|(_, r, c)| r * c).sum()
    }

    pub fn unflatten(&self, flat: &[f32]) -> Result<TensorMap, AdapterError> {
        if flat.len() != self.dim() {
            return Err(AdapterError::FlatLength {
                got: flat.len(),
                expected: self.dim(),
            });
        }
        let mut map = TensorMap::new();
        let mut at = 0;
        for (name, rows, cols) in &self.tensors {
            let n = rows * cols;
            map.insert(name.clone(), Matrix::new(*rows, *cols, flat[at..at + n].to_vec())?)?;
            at += n;
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterMeta {
    pub task_id: String,
    pub rank: usize,
    pub alpha: f64,
    pub group_label: Option<String>,
    pub lang_label: Option<String>,
}

impl AdapterMeta {
    pub fn new(task_id: impl Into<String>, rank: usize, alpha: f64) -> Self {
        Self {
            task_id: task_id.into(),
            rank,
            alpha,
            group_label: None,
            lang_label: None,
        }
    }

    pub fn with_group(mut self, label: impl Into<String>) -> Self {
        self.group_label = Some(label.into());
        self
    }

    pub fn with_lang(mut self, label: impl Into<String>) -> Self {
        self.lang_label = Some(label.into());
        self
    }

    /// LoRA scale `alpha / rank` applied to `B·A`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// One task's LoRA: every layer `L` carries `L.lora_A` and `L.lora_B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    meta: AdapterMeta,
    weights: TensorMap,
}

impl LoraAdapter {
    pub fn new(meta: AdapterMeta, weights: TensorMap) -> Result<Self, AdapterError> {
        if meta.task_id.is_empty() {
            return Err(AdapterError::EmptyTaskId);
        }
        if meta.rank == 0 {
            return Err(AdapterError::ZeroRank);
        }
        if !(meta.alpha.is_finite() && meta.alpha > 0.0) {
            return Err(AdapterError::InvalidAlpha(meta.alpha));
        }
        for (name, m) in weights.iter() {
            let (layer, is_a) = split_lora_name(name).ok_or_else(|| AdapterError::UnpairedTensor {
                name: name.to_string(),
            })?;
            let partner = if is_a {
                format!("{layer}{LORA_B_SUFFIX}")
            } else {
                format!("{layer}{LORA_A_SUFFIX}")
            };
            let Some(other) = weights.get(&partner) else {
                return Err(AdapterError::MissingPair {
                    layer: layer.to_string(),
                    missing: partner,
                });
            };
            let (a, b) = if is_a { (m, other) } else { (other, m) };
            if a.rows != meta.rank || b.cols != meta.rank {
                return Err(AdapterError::RankMismatch {
                    layer: layer.to_string(),
                    rank: meta.rank,
                    a_rows: a.rows,
                    a_cols: a.cols,
                    b_rows: b.rows,
                    b_cols: b.cols,
                });
            }
        }
        Ok(Self { meta, weights })
    }

    /// Rebuilds an adapter from a flat vector laid out by `schema`.
    pub fn from_flat(meta: AdapterMeta, schema: &Schema, flat: &[f32]) -> Result<Self, AdapterError> {
        Self::new(meta, schema.unflatten(flat)?)
    }

    pub fn meta(&self) -> &AdapterMeta {
        &self.meta
    }

    pub fn task_id(&self) -> &str {
        &self.meta.task_id
    }

    pub fn weights(&self) -> &TensorMap {
        &self.weights
    }

    pub fn schema(&self) -> Schema {
        self.weights.schema()
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// All tensors concatenated in name order, each row-major.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, m) in self.weights.iter() {
            out.extend_from_slice(&m.data);
        }
        out
    }

    /// Layer names (the `L` in `L.lora_A`), lexicographic.
    pub fn layers(&self) -> Vec<&str> {
        self.weights
            .iter()
            .filter_map(|(name, _)| name.strip_suffix(LORA_A_SUFFIX))
            .collect()
    }

    pub fn lora_pair(&self, layer: &str) -> Option<(&Matrix, &Matrix)> {
        Some((
            self.weights.get(&format!("{layer}{LORA_A_SUFFIX}"))?,
            self.weights.get(&format!("{layer}{LORA_B_SUFFIX}"))?,
        ))
    }

    pub fn with_meta(&self, meta: AdapterMeta) -> Result<Self, AdapterError> {
        Self::new(meta, self.weights.clone())
    }

    /// Serialized size in the `ADPT1` format.
    pub fn encoded_len(&self) -> usize {
        self.to_bytes().len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::with_capacity(self.weights.len());
        let mut offset = 0usize;
        for (name, m) in self.weights.iter() {
            let nbytes = m.len() * 4;
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: [m.rows, m.cols],
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let manifest = Manifest {
            task_id: self.meta.task_id.clone(),
            rank: self.meta.rank,
            alpha: self.meta.alpha,
            group_label: self.meta.group_label.clone(),
            lang_label: self.meta.lang_label.clone(),
            tensors,
        };
        let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");

        let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + 8 + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.resize(align8(out.len()), 0);
        for (_, m) in self.weights.iter() {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let header = MAGIC.len() + 8;
        if bytes.len() < header {
            return Err(FormatError::TruncatedHeader(bytes.len()));
        }
        let declared = u64::from_le_bytes(bytes[MAGIC.len()..header].try_into().unwrap());
        let available = bytes.len() - header;
        if declared > available as u64 {
            return Err(FormatError::ManifestLength { declared, available });
        }
        let manifest_end = header + declared as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[header..manifest_end])
            .map_err(|e| FormatError::Manifest(e.to_string()))?;

        let payload_start = align8(manifest_end);
        if payload_start > bytes.len() {
            return Err(FormatError::PayloadShort {
                declared: manifest.tensors.iter().map(|t| t.nbytes).sum(),
                available: 0,
            });
        }
        if bytes[manifest_end..payload_start].iter().any(|&b| b != 0) {
            return Err(FormatError::Padding);
        }

        let mut expected_offset = 0usize;
        let mut prev: Option<&str> = None;
        for t in &manifest.tensors {
            if let Some(p) = prev {
                if p == t.name {
                    return Err(FormatError::DuplicateTensor(t.name.clone()));
                }
                if p > t.name.as_str() {
                    return Err(FormatError::TensorOrder { name: t.name.clone() });
                }
            }
            prev = Some(&t.name);
            let [rows, cols] = t.shape;
            let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4));
            if expected != Some(t.nbytes) {
                return Err(FormatError::ShapeBytes {
                    name: t.name.clone(),
                    rows,
                    cols,
                    expected: expected.unwrap_or(usize::MAX),
                    declared: t.nbytes,
                });
            }
            if t.offset != expected_offset {
                return Err(FormatError::Offset {
                    name: t.name.clone(),
                    offset: t.offset,
                    expected: expected_offset,
                });
            }
            expected_offset += t.nbytes;
        }

        let payload = &bytes[payload_start..];
        if payload.len() < expected_offset {
            return Err(FormatError::PayloadShort {
                declared: expected_offset,
                available: payload.len(),
            });
        }
        if payload.len() > expected_offset {
            return Err(FormatError::PayloadLong {
                declared: expected_offset,
                available: payload.len(),
            });
        }

        let mut weights = TensorMap::new();
        for t in &manifest.tensors {
            let data: Vec<f32> = payload[t.offset..t.offset + t.nbytes]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let m = Matrix::new(t.shape[0], t.shape[1], data).map_err(|e| match e {
                AdapterError::InvalidShape { rows, cols, .. } => AdapterError::InvalidShape {
                    name: t.name.clone(),
                    rows,
                    cols,
                },
                other => other,
            })?;
            weights.insert(t.name.clone(), m)?;
        }
        let meta = AdapterMeta {
            task_id: manifest.task_id,
            rank: manifest.rank,
            alpha: manifest.alpha,
            group_label: manifest.group_label,
            lang_label: manifest.lang_label,
        };
        Ok(Self::new(meta, weights)?)
    }
}

fn split_lora_name(name: &str) -> Option<(&str, bool)> {
    if let Some(layer) = name.strip_suffix(LORA_A_SUFFIX) {
        Some((layer, true))
    } else {
        name.strip_suffix(LORA_B_SUFFIX).map(|layer| (layer, false))
    }
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    task_id: String,
    rank: usize,
    alpha: f64,
    group_label: Option<String>,
    lang_label: Option<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    nbytes: usize,
}

pub fn write_adapter(adapter: &LoraAdapter, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    fs::write(path, adapter.to_bytes()).map_err(io_err(path))
}

pub fn read_adapter(path: impl AsRef<Path>) -> Result<LoraAdapter, FormatError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    LoraAdapter::from_bytes(&bytes).map_err(|e| FormatError::File {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

/// N adapters with one shared schema and distinct task ids, in catalog order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    adapters: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn new(adapters: Vec<LoraAdapter>) -> Result<Self, AdapterError> {
        let Some(first) = adapters.first() else {
            return Err(AdapterError::EmptySet);
        };
        let schema = first.schema();
        let mut seen = std::collections::HashSet::new();
        for a in &adapters {
            if !seen.insert(a.task_id()) {
                return Err(AdapterError::DuplicateTask(a.task_id().to_string()));
            }
            check_schema(first, a, &schema)?;
        }
        Ok(Self { adapters })
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn get(&self, i: usize) -> &LoraAdapter {
        &self.adapters[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LoraAdapter> {
        self.adapters.iter()
    }

    pub fn schema(&self) -> Schema {
        self.adapters[0].schema()
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.adapters.iter().map(LoraAdapter::task_id).collect()
    }

    pub fn index_of(&self, task_id: &str) -> Option<usize> {
        self.adapters.iter().position(|a| a.task_id() == task_id)
    }

    pub fn into_inner(self) -> Vec<LoraAdapter> {
        self.adapters
    }
}

/// Errors unless `b` has exactly the tensor names and shapes of `a`.
pub fn ensure_same_schema(a: &LoraAdapter, b: &LoraAdapter) -> Result<(), AdapterError> {
    check_schema(a, b, &a.schema())
}

fn check_schema(reference: &LoraAdapter, a: &LoraAdapter, schema: &Schema) -> Result<(), AdapterError> {
    let other = a.schema();
    if &other == schema {
        return Ok(());
    }
    let mismatch = |detail: String| AdapterError::SchemaMismatch {
        task_id: a.task_id().to_string(),
        reference: reference.task_id().to_string(),
        detail,
    };
    for (x, y) in schema.tensors.iter().zip(&other.tensors) {
        if x.0 != y.0 {
            return Err(mismatch(format!("tensor `{}` vs `{}`", x.0, y.0)));
        }
        if (x.1, x.2) != (y.1, y.2) {
            return Err(mismatch(format!(
                "tensor `{}` is {}x{} vs {}x{}",
                x.0, y.1, y.2, x.1, x.2
            )));
        }
    }
    Err(mismatch(format!(
        "{} tensors vs {}",
        other.tensors.len(),
        schema.tensors.len()
    )))
}

/// File name used for an adapter inside a set directory.
pub fn adapter_file_name(task_id: &str) -> String {
    let safe: String = task_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{safe}.adpt")
}

/// Writes one `ADPT1` file per adapter plus `index.txt` listing them in order.
pub fn write_adapter_set(set: &AdapterSet, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, FormatError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut index = String::new();
    let mut paths = Vec::with_capacity(set.len());
    let mut names = std::collections::HashSet::new();
    for a in set.iter() {
        let name = adapter_file_name(a.task_id());
        if !names.insert(name.clone()) {
            return Err(FormatError::DuplicateIndexEntry(name));
        }
        let path = dir.join(&name);
        write_adapter(a, &path)?;
        index.push_str(&name);
        index.push('\n');
        paths.push(path);
    }
    let index_path = dir.join(INDEX_FILE);
    fs::write(&index_path, index).map_err(io_err(&index_path))?;
    Ok(paths)
}

/// File names listed in a set directory's index, in catalog order.
pub fn read_index(dir: impl AsRef<Path>) -> Result<Vec<String>, FormatError> {
    let path = dir.as_ref().join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut names = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        if !seen.insert(line.to_string()) {
            return Err(FormatError::DuplicateIndexEntry(line.to_string()));
        }
        names.push(line.to_string());
    }
    if names.is_empty() {
        return Err(FormatError::EmptyIndex);
    }
    Ok(names)
}

pub fn read_adapter_set(dir: impl AsRef<Path>) -> Result<AdapterSet, FormatError> {
    let dir = dir.as_ref();
    let adapters = read_index(dir)?
        .iter()
        .map(|name| read_adapter(dir.join(name)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AdapterSet::new(adapters)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adapter(task: &str, rank: usize, layers: usize, seed: u32) -> LoraAdapter {
        let schema = Schema::lora(layers, rank, 3, 2).unwrap();
        let flat: Vec<f32> = (0..schema.dim())
            .map(|i| ((i as u32).wrapping_mul(2654435761u32) ^ seed) as f32 / u32::MAX as f32 - 0.5)
            .collect();
        LoraAdapter::from_flat(AdapterMeta::new(task, rank, 8.0), &schema, &flat).unwrap()
    }

    #[test]
    fn flatten_is_row_major() {
        let mut w = TensorMap::new();
        w.insert("l0.lora_A", Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap())
            .unwrap();
        w.insert("l0.lora_B", Matrix::from_rows(&[&[5.0, 6.0]]).unwrap())
            .unwrap();
        let a = LoraAdapter::new(AdapterMeta::new("t", 2, 4.0), w).unwrap();
        assert_eq!(a.flatten(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn tensor_map_iterates_lexicographically() {
        let mut w = TensorMap::new();
        w.insert("b", Matrix::from_rows(&[&[5.0]]).unwrap()).unwrap();
        w.insert("a", Matrix::from_rows(&[&[7.0]]).unwrap()).unwrap();
        let flat: Vec<f32> = w.iter().flat_map(|(_, m)| m.data().to_vec()).collect();
        assert_eq!(flat, vec![7.0, 5.0]);
        assert_eq!(w.schema().tensors()[0].0, "a");
    }

    #[test]
    fn rejects_bad_tensor_maps() {
        let mut w = TensorMap::new();
        assert!(matches!(
            w.insert("", Matrix::zeros(1, 1).unwrap()),
            Err(AdapterError::EmptyTensorName)
        ));
        w.insert("x", Matrix::zeros(1, 1).unwrap()).unwrap();
        assert!(matches!(
            w.insert("x", Matrix::zeros(1, 1).unwrap()),
            Err(AdapterError::DuplicateTensor(_))
        ));
        assert!(Matrix::zeros(0, 3).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn lora_pairing_is_enforced() {
        let mut w = TensorMap::new();
        w.insert("l.lora_A", Matrix::zeros(2, 3).unwrap()).unwrap();
        let err = LoraAdapter::new(AdapterMeta::new("t", 2, 1.0), w.clone()).unwrap_err();
        assert!(matches!(err, AdapterError::MissingPair { .. }));

        w.insert("l.lora_B", Matrix::zeros(4, 3).unwrap()).unwrap();
        let err = LoraAdapter::new(AdapterMeta::new("t", 2, 1.0), w).unwrap_err();
        assert!(matches!(err, AdapterError::RankMismatch { .. }));

        let mut w = TensorMap::new();
        w.insert("bias", Matrix::zeros(1, 3).unwrap()).unwrap();
        let err = LoraAdapter::new(AdapterMeta::new("t", 1, 1.0), w).unwrap_err();
        assert!(matches!(err, AdapterError::UnpairedTensor { .. }));
    }

    #[test]
    fn unflatten_inverts_flatten() {
        let a = adapter("t", 2, 3, 7);
        let back = LoraAdapter::from_flat(a.meta().clone(), &a.schema(), &a.flatten()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn bytes_round_trip_is_canonical() {
        let a = adapter("task-1", 2, 2, 3)
            .with_meta(AdapterMeta::new("task-1", 2, 8.0).with_group("sum").with_lang("de"))
            .unwrap();
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..6], MAGIC);
        let back = LoraAdapter::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes(), bytes);
        let manifest_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let payload = align8(14 + manifest_len);
        assert_eq!(bytes.len() - payload, a.param_count() * 4);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = adapter("t", 2, 2, 1).to_bytes();
        let err = LoraAdapter::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, FormatError::PayloadShort { .. }));
        assert!(err.to_string().starts_with("payload shorter than manifest declares"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = adapter("t", 2, 2, 1).to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = LoraAdapter::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "bad magic");
    }

    #[test]
    fn schema_check_names_the_mismatch() {
        let a = adapter("a", 2, 2, 1);
        let b = adapter("b", 2, 3, 1);
        let c = adapter("c", 3, 2, 1);
        assert!(ensure_same_schema(&a, &a.with_meta(AdapterMeta::new("z", 2, 1.0)).unwrap()).is_ok());
        assert!(matches!(ensure_same_schema(&a, &b), Err(AdapterError::SchemaMismatch { .. })));
        assert!(matches!(ensure_same_schema(&a, &c), Err(AdapterError::SchemaMismatch { .. })));
        assert!(AdapterSet::new(vec![a.clone(), c]).is_err());
        assert!(matches!(
            AdapterSet::new(vec![a.clone(), a]),
            Err(AdapterError::DuplicateTask(_))
        ));
        assert!(matches!(AdapterSet::new(vec![]), Err(AdapterError::EmptySet)));
    }

    #[test]
    fn set_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = AdapterSet::new(vec![adapter("b", 2, 1, 1), adapter("a", 2, 1, 2)]).unwrap();
        write_adapter_set(&set, dir.path()).unwrap();
        assert_eq!(read_index(dir.path()).unwrap(), vec!["b.adpt", "a.adpt"]);
        assert_eq!(read_adapter_set(dir.path()).unwrap(), set);
    }
}
