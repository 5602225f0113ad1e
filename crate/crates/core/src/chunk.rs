//! Chunk geometry and tiling.
//!
//! Sparsification operates on fixed-size chunks: 64x64 blocks for 2-D weight
//! matrices whose dimensions divide evenly, and contiguous length-4096 runs
//! for everything else. Rank >= 3 tensors and 2-D tensors with dimensions not
//! divisible by the block side are flattened to 1-D before chunking; trailing
//! partial chunks are allowed and receive a proportionally smaller k.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Layout;

/// Chunk sizing plus the per-chunk selection budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkGeometry {
    chunk_2d: usize,
    chunk_1d: usize,
    k: usize,
}

impl ChunkGeometry {
    pub fn new(chunk_2d: usize, chunk_1d: usize, k: usize) -> Result<Self> {
        if chunk_2d * chunk_2d != chunk_1d {
            return Err(Error::InvalidArgument(format!(
                "chunk_2d^2 ({}) must equal chunk_1d ({chunk_1d})",
                chunk_2d * chunk_2d
            )));
        }
        if k == 0 || k > chunk_1d {
            return Err(Error::InvalidArgument(format!(
                "k must satisfy 1 <= k <= {chunk_1d}, got {k}"
            )));
        }
        Ok(ChunkGeometry {
            chunk_2d,
            chunk_1d,
            k,
        })
    }

    /// 64x64 blocks, 4096-long runs, 64 kept per full chunk.
    pub fn standard() -> Self {
        ChunkGeometry {
            chunk_2d: 64,
            chunk_1d: 4096,
            k: 64,
        }
    }

    /// Same tiling but k = chunk length: selection becomes the identity.
    pub fn lossless() -> Self {
        ChunkGeometry {
            chunk_2d: 64,
            chunk_1d: 4096,
            k: 4096,
        }
    }

    pub fn chunk_2d(&self) -> usize {
        self.chunk_2d
    }

    pub fn chunk_1d(&self) -> usize {
        self.chunk_1d
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Selection budget for a possibly-partial chunk: proportional floor,
/// clamped to at least one element so no chunk is ever empty.
pub fn effective_k(chunk_len: usize, geometry: &ChunkGeometry) -> usize {
    debug_assert!(chunk_len >= 1 && chunk_len <= geometry.chunk_1d);
    1.max(geometry.k * chunk_len / geometry.chunk_1d)
}

/// One chunk of a tensor: a list of contiguous runs in the flat vector.
///
/// 1-D chunks are a single run; 64x64 blocks are 64 runs of 64 (one per block
/// row). Within-chunk positions enumerate the runs in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkDescriptor {
    pub tensor_index: usize,
    /// (absolute flat start, run length) pairs, in position order.
    pub runs: Vec<(usize, usize)>,
    pub len: usize,
}

impl ChunkDescriptor {
    /// Absolute flat positions of the chunk, in within-chunk order.
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.runs
            .iter()
            .flat_map(|&(start, len)| start..start + len)
    }

    /// Absolute flat position of within-chunk index `rel`.
    pub fn position(&self, mut rel: usize) -> usize {
        for &(start, len) in &self.runs {
            if rel < len {
                return start + rel;
            }
            rel -= len;
        }
        panic!("relative index {rel} out of chunk of length {}", self.len);
    }
}

/// Tiles one tensor into chunks. `base_offset` is the tensor's flat offset in
/// the enclosing vector and `tensor_index` its position in the layout.
///
/// The tiling is a partition: every flat index belongs to exactly one chunk,
/// in row-major block order for blocked 2-D tensors and offset order
/// otherwise.
pub fn chunk_tensor(
    shape: &[usize],
    geometry: &ChunkGeometry,
    tensor_index: usize,
    base_offset: usize,
) -> Result<Vec<ChunkDescriptor>> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "cannot chunk empty shape {shape:?}"
        )));
    }
    let side = geometry.chunk_2d;
    if shape.len() == 2 && shape[0].is_multiple_of(side) && shape[1].is_multiple_of(side) {
        let (rows, cols) = (shape[0], shape[1]);
        let mut chunks = Vec::with_capacity((rows / side) * (cols / side));
        for block_row in 0..rows / side {
            for block_col in 0..cols / side {
                let runs = (0..side)
                    .map(|r| {
                        let row = block_row * side + r;
                        (base_offset + row * cols + block_col * side, side)
                    })
                    .collect();
                chunks.push(ChunkDescriptor {
                    tensor_index,
                    runs,
                    len: side * side,
                });
            }
        }
        return Ok(chunks);
    }

    // Everything else is flattened to 1-D and cut into contiguous runs.
    let total: usize = shape.iter().product();
    let mut chunks = Vec::with_capacity(total.div_ceil(geometry.chunk_1d));
    let mut offset = 0;
    while offset < total {
        let len = geometry.chunk_1d.min(total - offset);
        chunks.push(ChunkDescriptor {
            tensor_index,
            runs: vec![(base_offset + offset, len)],
            len,
        });
        offset += len;
    }
    Ok(chunks)
}

/// Tiles every tensor of a layout, in layout order.
pub fn chunk_layout(layout: &Layout, geometry: &ChunkGeometry) -> Result<Vec<ChunkDescriptor>> {
    let mut chunks = Vec::new();
    for (i, t) in layout.tensors().iter().enumerate() {
        chunks.extend(chunk_tensor(
            &t.shape,
            geometry,
            i,
            layout.tensor_offset(i),
        )?);
    }
    Ok(chunks)
}
