//! Flat parameter vectors with declared tensor layouts.
//!
//! Model state, pseudo-gradients, and error-feedback buffers are all dense
//! `f64` vectors whose structure is described by a [`Layout`]: an ordered list
//! of named tensor shapes whose element counts sum to the vector length.

use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One named tensor in a layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must be non-empty with nonzero dims, got {shape:?}"
            )));
        }
        Ok(TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
        })
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered tensor layout shared by every replica in a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    offsets: Vec<usize>,
    total: usize,
    digest: [u8; 32],
}

impl Layout {
    pub fn new(tensors: Vec<TensorSpec>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::InvalidArgument("layout has no tensors".into()));
        }
        let mut offsets = Vec::with_capacity(tensors.len());
        let mut total = 0usize;
        let mut hasher = Sha256::new();
        for t in &tensors {
            offsets.push(total);
            total += t.element_count();
            hasher.update((t.name.len() as u64).to_be_bytes());
            hasher.update(t.name.as_bytes());
            hasher.update((t.shape.len() as u64).to_be_bytes());
            for &d in &t.shape {
                hasher.update((d as u64).to_be_bytes());
            }
        }
        let digest = hasher.finalize().into();
        Ok(Layout {
            tensors,
            offsets,
            total,
            digest,
        })
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn element_count(&self) -> usize {
        self.total
    }

    /// Flat offset of tensor `i` within the vector.
    pub fn tensor_offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    /// Content hash of the layout; replicas compare these before aggregating.
    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }
}

/// Dense parameter/pseudo-gradient vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.element_count() {
            return Err(Error::InvalidArgument(format!(
                "value count {} does not match layout element count {}",
                values.len(),
                layout.element_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite value in vector".into()));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.element_count()],
            layout,
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout.digest() == other.layout.digest()
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|v| v * v).sum())
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    /// `self += c * other`, elementwise.
    pub fn add_scaled(&mut self, other: &ParamVector, c: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::InvalidArgument("layout mismatch".into()));
        }
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += c * b;
        }
        Ok(())
    }

    /// SHA-256 over the big-endian bit patterns; equal digests mean
    /// bitwise-equal state.
    pub fn content_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.to_bits().to_be_bytes());
        }
        hasher.finalize().into()
    }
}

pub fn digest_hex(digest: &[u8; 32]) -> String {
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Opaque 16-byte peer identifier; ordering is plain byte order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PeerId(pub [u8; 16]);

impl PeerId {
    /// Deterministic id for the `ordinal`-th peer ever spawned in a run.
    pub fn from_ordinal(seed: u64, ordinal: u64) -> PeerId {
        let mut s = crate::rng::Stream::new(seed, "peer-id").with(ordinal);
        let mut bytes = [0u8; 16];
        bytes[..8].copy_from_slice(&s.next_u64().to_be_bytes());
        bytes[8..].copy_from_slice(&s.next_u64().to_be_bytes());
        PeerId(bytes)
    }

    pub fn to_hex(self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Short prefix is enough for human-facing logs.
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}
