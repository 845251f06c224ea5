//! Flat parameter space and the binary container format.
//!
//! A model is a single flat vector of reals plus a [`TensorLayout`] naming
//! contiguous spans of it. Flattening order is fixed: tensors concatenate
//! in input order and each tensor is row-major, so two runs over the same
//! input produce byte-identical containers.
//!
//! Fusion math always runs in 64-bit floats. `R32` is a storage precision:
//! constructing an `R32` vector rounds every element through `f32` once, so
//! save followed by load is bit-exact for either dtype.

mod container;

pub use container::{Container, ContainerKind, MAGIC, VERSION};

use std::sync::Arc;

use thiserror::Error;

/// Errors from layout construction, flattening, and container IO.
#[derive(Debug, Error)]
pub enum StoreError {
    #[error("tensor name '{0}' appears more than once")]
    DuplicateName(String),
    #[error("tensor '{name}': expected {expected} elements, got {got}")]
    LengthMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("tensor '{name}' element {index} is not finite (or exceeds the storage dtype range)")]
    NonFiniteValue { name: String, index: usize },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("expected magic {MAGIC:?}, found {0:?}")]
    BadMagic([u8; 8]),
    #[error("container version {0} is not supported (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("{0}")]
    CorruptSection(String),
}

impl StoreError {
    /// Stable error name for CLI reporting.
    pub fn name(&self) -> &'static str {
        match self {
            StoreError::DuplicateName(_) => "DuplicateName",
            StoreError::LengthMismatch { .. } => "LengthMismatch",
            StoreError::NonFiniteValue { .. } => "NonFiniteValue",
            StoreError::Io(_) => "IoError",
            StoreError::BadMagic(_) => "BadMagic",
            StoreError::UnsupportedVersion(_) => "UnsupportedVersion",
            StoreError::CorruptSection(_) => "CorruptSection",
        }
    }
}

/// Element precision used when a vector is serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    R32,
    R64,
}

impl Dtype {
    pub fn size_bytes(self) -> u64 {
        match self {
            Dtype::R32 => 4,
            Dtype::R64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::R32 => 0,
            Dtype::R64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::R32),
            1 => Some(Dtype::R64),
            _ => None,
        }
    }
}

/// One named span of the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub offset: usize,
    pub len: usize,
}

/// Ordered, contiguous, non-overlapping map from tensor names to spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorLayout {
    entries: Vec<LayoutEntry>,
    total_len: usize,
}

impl TensorLayout {
    /// Builds a layout from (name, dims) pairs in input order.
    ///
    /// Offsets are assigned cumulatively, so entries are contiguous and
    /// non-overlapping by construction. Names must be unique and every
    /// dim must be positive; an empty dims list denotes a scalar.
    pub fn new<S: AsRef<str>>(shapes: &[(S, Vec<u32>)]) -> Result<Self, StoreError> {
        let mut entries = Vec::with_capacity(shapes.len());
        let mut offset = 0usize;
        for (name, dims) in shapes {
            let name = name.as_ref();
            if entries.iter().any(|e: &LayoutEntry| e.name == name) {
                return Err(StoreError::DuplicateName(name.to_string()));
            }
            if dims.contains(&0) {
                return Err(StoreError::LengthMismatch {
                    name: name.to_string(),
                    expected: 1,
                    got: 0,
                });
            }
            // Checked arithmetic: dims come from untrusted files.
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| StoreError::LengthMismatch {
                    name: name.to_string(),
                    expected: usize::MAX,
                    got: 0,
                })?;
            entries.push(LayoutEntry {
                name: name.to_string(),
                dims: dims.clone(),
                offset,
                len,
            });
            offset = offset
                .checked_add(len)
                .ok_or_else(|| StoreError::LengthMismatch {
                    name: name.to_string(),
                    expected: usize::MAX,
                    got: 0,
                })?;
        }
        Ok(TensorLayout {
            entries,
            total_len: offset,
        })
    }

    /// Single flat tensor layout, handy for tests and plain vectors.
    pub fn vector(name: &str, len: u32) -> Self {
        TensorLayout::new(&[(name, vec![len])]).expect("single positive-dim entry is valid")
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// Name of the entry covering the given flat index.
    fn entry_at(&self, index: usize) -> &str {
        self.entries
            .iter()
            .find(|e| index >= e.offset && index < e.offset + e.len)
            .map(|e| e.name.as_str())
            .unwrap_or("<out of range>")
    }
}

/// A named tensor as it exists outside the flat space.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, values: Vec<f64>) -> Self {
        NamedTensor {
            name: name.into(),
            dims,
            values,
        }
    }
}

/// Flat real-valued vector with a layout and a storage precision.
///
/// Immutable after construction; all element values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatVector {
    layout: Arc<TensorLayout>,
    values: Vec<f64>,
    dtype: Dtype,
}

impl FlatVector {
    /// Validates lengths and finiteness. `R32` rounds every element
    /// through `f32`; values outside the `f32` range are rejected.
    pub fn new(
        layout: Arc<TensorLayout>,
        values: Vec<f64>,
        dtype: Dtype,
    ) -> Result<Self, StoreError> {
        if values.len() != layout.total_len() {
            return Err(StoreError::LengthMismatch {
                name: "<flat vector>".to_string(),
                expected: layout.total_len(),
                got: values.len(),
            });
        }
        let mut values = values;
        for (i, v) in values.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(StoreError::NonFiniteValue {
                    name: layout.entry_at(i).to_string(),
                    index: i,
                });
            }
            if dtype == Dtype::R32 {
                let narrowed = *v as f32;
                if !narrowed.is_finite() {
                    return Err(StoreError::NonFiniteValue {
                        name: layout.entry_at(i).to_string(),
                        index: i,
                    });
                }
                *v = narrowed as f64;
            }
        }
        Ok(FlatVector {
            layout,
            values,
            dtype,
        })
    }

    /// Construction for values already known to satisfy the invariants
    /// (finite, correct length, quantized if `R32`).
    pub(crate) fn from_raw(layout: Arc<TensorLayout>, values: Vec<f64>, dtype: Dtype) -> Self {
        debug_assert_eq!(values.len(), layout.total_len());
        debug_assert!(values.iter().all(|v| v.is_finite()));
        FlatVector {
            layout,
            values,
            dtype,
        }
    }

    pub fn zeros(layout: Arc<TensorLayout>, dtype: Dtype) -> Self {
        let values = vec![0.0; layout.total_len()];
        FlatVector {
            layout,
            values,
            dtype,
        }
    }

    pub fn layout(&self) -> &TensorLayout {
        &self.layout
    }

    pub fn layout_arc(&self) -> Arc<TensorLayout> {
        Arc::clone(&self.layout)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True when both vectors share the same layout contents.
    pub fn same_layout(&self, other: &FlatVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    /// Sequential L1 norm in index order.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    /// Values of one named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .entry(name)
            .map(|e| &self.values[e.offset..e.offset + e.len])
    }

    /// SHA-256 over the layout, dtype, and raw element bits.
    pub fn content_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for e in self.layout.entries() {
            hasher.update((e.name.len() as u64).to_le_bytes());
            hasher.update(e.name.as_bytes());
            for &d in &e.dims {
                hasher.update(d.to_le_bytes());
            }
        }
        hasher.update([self.dtype.tag()]);
        for v in &self.values {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hasher.finalize().into()
    }
}

/// Concatenates named tensors into one flat vector (64-bit storage).
///
/// Concatenation order is input order; each tensor is laid out row-major,
/// which for a flat `values` list means the list is taken as-is.
pub fn flatten(tensors: &[NamedTensor]) -> Result<FlatVector, StoreError> {
    flatten_with_dtype(tensors, Dtype::R64)
}

pub fn flatten_with_dtype(tensors: &[NamedTensor], dtype: Dtype) -> Result<FlatVector, StoreError> {
    let shapes: Vec<(&str, Vec<u32>)> = tensors
        .iter()
        .map(|t| (t.name.as_str(), t.dims.clone()))
        .collect();
    let layout = TensorLayout::new(&shapes)?;
    let mut values = Vec::with_capacity(layout.total_len());
    for (t, entry) in tensors.iter().zip(layout.entries()) {
        if t.values.len() != entry.len {
            return Err(StoreError::LengthMismatch {
                name: t.name.clone(),
                expected: entry.len,
                got: t.values.len(),
            });
        }
        values.extend_from_slice(&t.values);
    }
    FlatVector::new(Arc::new(layout), values, dtype)
}

/// Splits a flat vector back into named tensors. Exact inverse of
/// [`flatten`] for any well-formed input.
pub fn unflatten(v: &FlatVector) -> Vec<NamedTensor> {
    v.layout()
        .entries()
        .iter()
        .map(|e| NamedTensor {
            name: e.name.clone(),
            dims: e.dims.clone(),
            values: v.values()[e.offset..e.offset + e.len].to_vec(),
        })
        .collect()
}
