//! Named f32 tensor containers and detector-head surgery.
//!
//! # `PWT1` file layout
//!
//! ```text
//! offset  size  content
//! 0       4     magic b"PWT1"
//! 4       4     manifest length L, u32 little endian
//! 8       L     UTF-8 JSON array [{"name": str, "shape": [u64, ...]}, ...]
//! 8+L     ...   f32 little-endian data of each tensor, row-major, in manifest order
//! ```
//!
//! Nothing may follow the last blob.
//!
//! # Head surgery
//!
//! A classification (or box regression) head is a weight tensor whose
//! `class_axis` enumerates `classes * rows_per_class` rows, plus a 1-D bias of
//! the same length. Partial weight transfer builds a task head where each
//! task class `k` either copies the rows of its mapped source class `g(k)`
//! verbatim or, when unmapped, is freshly initialized.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ClassId, ClassVocabulary};

pub const MAGIC: &[u8; 4] = b"PWT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("file does not start with the PWT1 magic")]
    BadMagic,
    #[error("file ends before {0}")]
    TruncatedFile(&'static str),
    #[error("tensor {name:?}: {reason}")]
    ShapeMismatch { name: String, reason: String },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("tensor {0:?} is not in the store")]
    MissingTensor(String),
    #[error("invalid tensor name {0:?}")]
    InvalidName(String),
    #[error("class map entry out of range: {0}")]
    MapOutOfRange(String),
    #[error("invalid init spec: {0}")]
    InvalidInit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic => "BadMagic",
            CheckpointError::TruncatedFile(_) => "TruncatedFile",
            CheckpointError::ShapeMismatch { .. } => "ShapeMismatch",
            CheckpointError::CorruptManifest(_) => "CorruptManifest",
            CheckpointError::TrailingBytes(_) => "TrailingBytes",
            CheckpointError::MissingTensor(_) => "MissingTensor",
            CheckpointError::InvalidName(_) => "InvalidName",
            CheckpointError::MapOutOfRange(_) => "MapOutOfRange",
            CheckpointError::InvalidInit(_) => "InvalidInit",
            CheckpointError::Io(_) => "Io",
        }
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: String::new(),
                reason: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Number of slices along `axis` and the `(outer, inner)` strides around it.
    fn axis_layout(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    /// Builds a tensor whose slice `r` along `axis` is produced by `fill(r)`.
    /// Each call to `fill` must return exactly `outer * inner` values, in
    /// memory order.
    fn from_axis_slices(
        mut shape: Vec<usize>,
        axis: usize,
        rows: usize,
        mut fill: impl FnMut(usize) -> Vec<f32>,
    ) -> Tensor {
        shape[axis] = rows;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0f32; outer * rows * inner];
        for r in 0..rows {
            let slice = fill(r);
            debug_assert_eq!(slice.len(), outer * inner);
            for o in 0..outer {
                let dst = (o * rows + r) * inner;
                data[dst..dst + inner].copy_from_slice(&slice[o * inner..(o + 1) * inner]);
            }
        }
        Tensor { shape, data }
    }

    /// Values of slice `r` along `axis`, in memory order.
    fn axis_slice(&self, axis: usize, r: usize) -> Vec<f32> {
        let (outer, rows, inner) = self.axis_layout(axis);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let src = (o * rows + r) * inner;
            out.extend_from_slice(&self.data[src..src + inner]);
        }
        out
    }
}

/// Insertion-ordered named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    tensors: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<u64>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor, keeping the original position on replace.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(CheckpointError::InvalidName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest: Vec<ManifestEntry> = self
            .tensors
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: name.clone(),
                shape: t.shape.iter().map(|&d| d as u64).collect(),
            })
            .collect();
        let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
        let data_len: usize = self.tensors.values().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(8 + manifest.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(CheckpointError::TruncatedFile("magic"));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len_bytes: [u8; 4] = bytes
            .get(4..8)
            .ok_or(CheckpointError::TruncatedFile("manifest length"))?
            .try_into()
            .expect("4 bytes");
        let manifest_len = u32::from_le_bytes(len_bytes) as usize;
        let manifest_bytes = bytes
            .get(8..8 + manifest_len)
            .ok_or(CheckpointError::TruncatedFile("manifest"))?;
        let manifest: Vec<ManifestEntry> =
            serde_json::from_slice(manifest_bytes).map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;
        let mut offset = 8 + manifest_len;
        let mut store = TensorStore::new();
        for entry in manifest {
            if entry.name.is_empty() {
                return Err(CheckpointError::InvalidName(entry.name));
            }
            if store.tensors.contains_key(&entry.name) {
                return Err(CheckpointError::CorruptManifest(format!("duplicate tensor {:?}", entry.name)));
            }
            let shape: Vec<usize> = entry.shape.iter().map(|&d| d as usize).collect();
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|c| c.checked_mul(4).map(|_| c))
                .ok_or_else(|| CheckpointError::ShapeMismatch {
                    name: entry.name.clone(),
                    reason: format!("shape {shape:?} overflows"),
                })?;
            let blob = offset
                .checked_add(count * 4)
                .and_then(|end| bytes.get(offset..end))
                .ok_or(CheckpointError::TruncatedFile("tensor data"))?;
            let data = blob
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += count * 4;
            store.tensors.insert(entry.name, Tensor { shape, data });
        }
        if offset != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - offset));
        }
        Ok(store)
    }
}

pub fn write_store(store: &TensorStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&store.to_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<TensorStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    TensorStore::from_bytes(&bytes)
}

/// Location and layout of a head inside a store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub weight: String,
    pub bias: String,
    /// Axis of the weight tensor that enumerates class rows.
    pub class_axis: usize,
    /// 1 for classification, 4 for box-delta regression.
    pub rows_per_class: usize,
}

impl HeadSpec {
    pub fn classification(weight: impl Into<String>, bias: impl Into<String>) -> Self {
        HeadSpec {
            weight: weight.into(),
            bias: bias.into(),
            class_axis: 0,
            rows_per_class: 1,
        }
    }

    pub fn regression(weight: impl Into<String>, bias: impl Into<String>) -> Self {
        HeadSpec {
            rows_per_class: 4,
            ..Self::classification(weight, bias)
        }
    }

    /// Checks the head tensors and returns the number of source classes.
    fn source_classes(&self, store: &TensorStore) -> Result<usize> {
        if self.rows_per_class == 0 {
            return Err(CheckpointError::ShapeMismatch {
                name: self.weight.clone(),
                reason: "rows_per_class must be at least 1".into(),
            });
        }
        let w = store.require(&self.weight)?;
        let b = store.require(&self.bias)?;
        if self.class_axis >= w.shape.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: self.weight.clone(),
                reason: format!("class axis {} out of range for shape {:?}", self.class_axis, w.shape),
            });
        }
        let rows = w.shape[self.class_axis];
        if b.shape != [rows] {
            return Err(CheckpointError::ShapeMismatch {
                name: self.bias.clone(),
                reason: format!("bias shape {:?} does not match {rows} weight rows", b.shape),
            });
        }
        if rows % self.rows_per_class != 0 {
            return Err(CheckpointError::ShapeMismatch {
                name: self.weight.clone(),
                reason: format!("{rows} rows are not a multiple of {}", self.rows_per_class),
            });
        }
        Ok(rows / self.rows_per_class)
    }
}

/// Partial task-class -> source-class mapping; absent keys are unmapped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap(BTreeMap<usize, usize>);

impl ClassMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, task: ClassId, source: ClassId) -> Option<ClassId> {
        self.0.insert(task.0, source.0).map(ClassId)
    }

    pub fn get(&self, task: ClassId) -> Option<ClassId> {
        self.0.get(&task.0).copied().map(ClassId)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, ClassId)> + '_ {
        self.0.iter().map(|(&t, &s)| (ClassId(t), ClassId(s)))
    }

    /// Identity over the first `n` classes.
    pub fn identity(n: usize) -> Self {
        ClassMap((0..n).map(|i| (i, i)).collect())
    }

    /// Resolves a `{"task_name": "source_name"}` JSON object against both vocabularies.
    pub fn from_json_names(json: &str, task: &ClassVocabulary, source: &ClassVocabulary) -> Result<Self> {
        let names: BTreeMap<String, String> =
            serde_json::from_str(json).map_err(|e| CheckpointError::MapOutOfRange(format!("bad class map JSON: {e}")))?;
        let mut map = ClassMap::new();
        for (t, s) in names {
            let ti = task
                .id(&t)
                .ok_or_else(|| CheckpointError::MapOutOfRange(format!("unknown task class {t:?}")))?;
            let si = source
                .id(&s)
                .ok_or_else(|| CheckpointError::MapOutOfRange(format!("unknown source class {s:?}")))?;
            map.insert(ti, si);
        }
        Ok(map)
    }

    fn validate(&self, task_classes: usize, source_classes: usize) -> Result<()> {
        for (t, s) in self.iter() {
            if t.0 >= task_classes {
                return Err(CheckpointError::MapOutOfRange(format!(
                    "task class {t} >= task class count {task_classes}"
                )));
            }
            if s.0 >= source_classes {
                return Err(CheckpointError::MapOutOfRange(format!(
                    "source class {s} >= source class count {source_classes}"
                )));
            }
        }
        Ok(())
    }
}

/// Random initialization for unmapped class rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub mean: f32,
    pub std: f32,
    /// Constant written into unmapped bias entries.
    pub bias: f32,
    pub seed: u64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            mean: 0.0,
            std: 0.01,
            bias: 0.0,
            seed: 0,
        }
    }
}

/// Where unmapped rows come from.
#[derive(Debug, Clone, Copy)]
pub enum UnmappedRows<'a> {
    /// Normal draws; weight rows are filled in class-row order.
    Random(&'a InitSpec),
    /// Rows of a task-shaped head (e.g. a model fine-tuned without transfer),
    /// taken at the same task class index.
    Fallback(&'a TensorStore),
}

/// What a transfer did, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TransferSummary {
    pub transferred: usize,
    pub initialized: usize,
}

impl std::fmt::Display for TransferSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "transferred {}, initialized {}", self.transferred, self.initialized)
    }
}

/// Builds a task head from `src`: mapped classes copy their source rows and
/// bias entries bit for bit, unmapped classes draw from `init`. All other
/// tensors are copied unchanged.
pub fn partial_weight_transfer(
    src: &TensorStore,
    head: &HeadSpec,
    map: &ClassMap,
    task_class_count: usize,
    init: &InitSpec,
) -> Result<TensorStore> {
    transfer_head(src, head, map, task_class_count, UnmappedRows::Random(init)).map(|(s, _)| s)
}

/// General form of [`partial_weight_transfer`], also returning counts.
pub fn transfer_head(
    src: &TensorStore,
    head: &HeadSpec,
    map: &ClassMap,
    task_class_count: usize,
    unmapped: UnmappedRows<'_>,
) -> Result<(TensorStore, TransferSummary)> {
    let source_classes = head.source_classes(src)?;
    map.validate(task_class_count, source_classes)?;
    let rpc = head.rows_per_class;
    let weight = src.require(&head.weight)?;
    let bias = src.require(&head.bias)?;
    let task_rows = task_class_count * rpc;

    let (fallback_w, fallback_b) = match unmapped {
        UnmappedRows::Fallback(store) => {
            let w = store.require(&head.weight)?;
            let b = store.require(&head.bias)?;
            let mut expected = weight.shape.clone();
            expected[head.class_axis] = task_rows;
            if w.shape != expected || b.shape != [task_rows] {
                return Err(CheckpointError::ShapeMismatch {
                    name: head.weight.clone(),
                    reason: format!("fallback head must have shape {expected:?} and bias [{task_rows}]"),
                });
            }
            (Some(w), Some(b))
        }
        UnmappedRows::Random(spec) => {
            if !(spec.std > 0.0 && spec.std.is_finite() && spec.mean.is_finite()) {
                return Err(CheckpointError::InvalidInit(format!("std must be positive, got {}", spec.std)));
            }
            (None, None)
        }
    };

    let mut sampler = match unmapped {
        UnmappedRows::Random(spec) => Some((
            ChaCha8Rng::seed_from_u64(spec.seed),
            Normal::new(spec.mean, spec.std).map_err(|e| CheckpointError::InvalidInit(e.to_string()))?,
            spec.bias,
        )),
        UnmappedRows::Fallback(_) => None,
    };

    let (outer, _, inner) = weight.axis_layout(head.class_axis);
    let new_weight = Tensor::from_axis_slices(weight.shape.clone(), head.class_axis, task_rows, |row| {
        let task_class = ClassId(row / rpc);
        match map.get(task_class) {
            Some(s) => weight.axis_slice(head.class_axis, s.0 * rpc + row % rpc),
            None => match (&mut sampler, fallback_w) {
                (Some((rng, normal, _)), _) => (0..outer * inner).map(|_| normal.sample(rng)).collect(),
                (None, Some(fw)) => fw.axis_slice(head.class_axis, row),
                (None, None) => unreachable!("either random or fallback rows"),
            },
        }
    });
    let new_bias: Vec<f32> = (0..task_rows)
        .map(|row| match map.get(ClassId(row / rpc)) {
            Some(s) => bias.data[s.0 * rpc + row % rpc],
            None => match (&sampler, fallback_b) {
                (Some((_, _, b)), _) => *b,
                (None, Some(fb)) => fb.data[row],
                (None, None) => unreachable!("either random or fallback rows"),
            },
        })
        .collect();

    let mut out = src.clone();
    out.insert(head.weight.clone(), new_weight)?;
    out.insert(
        head.bias.clone(),
        Tensor {
            shape: vec![task_rows],
            data: new_bias,
        },
    )?;
    let transferred = map.len();
    Ok((
        out,
        TransferSummary {
            transferred,
            initialized: task_class_count - transferred,
        },
    ))
}

/// Replaces the head with one class per `(object, attribute)` pair, each
/// initialized from the object's source rows.
pub fn expand_attribute_head(src: &TensorStore, head: &HeadSpec, pairs: &[(ClassId, ClassId)]) -> Result<TensorStore> {
    let source_classes = head.source_classes(src)?;
    if let Some((o, _)) = pairs.iter().find(|(o, _)| o.0 >= source_classes) {
        return Err(CheckpointError::MapOutOfRange(format!(
            "object class {o} >= source class count {source_classes}"
        )));
    }
    let rpc = head.rows_per_class;
    let weight = src.require(&head.weight)?;
    let bias = src.require(&head.bias)?;
    // copy the object's row block for each pair directly
    let new_weight = Tensor::from_axis_slices(weight.shape.clone(), head.class_axis, pairs.len() * rpc, |row| {
        let (object, _) = pairs[row / rpc];
        weight.axis_slice(head.class_axis, object.0 * rpc + row % rpc)
    });
    let new_bias = pairs
        .iter()
        .flat_map(|(object, _)| bias.data[object.0 * rpc..(object.0 + 1) * rpc].iter().copied())
        .collect();
    let mut out = src.clone();
    out.insert(head.weight.clone(), new_weight)?;
    out.insert(
        head.bias.clone(),
        Tensor {
            shape: vec![pairs.len() * rpc],
            data: new_bias,
        },
    )?;
    Ok(out)
}

/// The many-to-one map `pair index -> object class` induced by a pair list.
pub fn induced_pair_map(pairs: &[(ClassId, ClassId)]) -> ClassMap {
    let mut map = ClassMap::new();
    for (i, (object, _)) in pairs.iter().enumerate() {
        map.insert(ClassId(i), *object);
    }
    map
}
