//! Three-axis rotary position indices and rotation.
//!
//! Index assignment for a [`TokenStream`]:
//!
//! - TEXT tokens of a run: `(t, 0, 0)` with `t` advancing by one per token,
//!   starting at 1 for the first run.
//! - `<image k>` tokens: `(m + 1, ⌊i/h⌋ − ⌊w/2⌋, (i mod h) − ⌊h/2⌋)` for
//!   zero-based `i < w·h`, where `m` is the temporal index of the last TEXT
//!   token before the block.
//! - VAE tokens of subject `k`: same spatial layout on the VAE grid, `t = m + 2`.
//! - The next TEXT run resumes at `m + 3`.
//!
//! Rotation splits the head dimension into `(d_t, d_y, d_x)`; axis `a` owns
//! `d_a / 2` adjacent column pairs, pair `j` rotated by `pos_a · θ^(−2j/d_a)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, PairRotation, Tensor};
use crate::token_layout::{SubjectSpec, TokenKind, TokenStream};

#[derive(Debug, Error)]
pub enum RopeError {
    #[error("invalid rope config: {0}")]
    Config(String),
    #[error("vector has {got} entries, config expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("malformed stream: {0}")]
    Malformed(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RopeIndex {
    pub t: i64,
    pub y: i64,
    pub x: i64,
}

impl RopeIndex {
    pub const ORIGIN: RopeIndex = RopeIndex { t: 0, y: 0, x: 0 };

    pub fn new(t: i64, y: i64, x: i64) -> Self {
        Self { t, y, x }
    }

    pub fn offset(self, d: RopeIndex) -> Self {
        Self::new(self.t + d.t, self.y + d.y, self.x + d.x)
    }

    fn axis(self, a: usize) -> i64 {
        match a {
            0 => self.t,
            1 => self.y,
            _ => self.x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    head_dim: usize,
    partition: (usize, usize, usize),
    theta: f64,
}

pub const DEFAULT_THETA: f64 = 10_000.0;

impl RopeConfig {
    /// Even split of `head_dim` into three even parts, remainder pairs going
    /// to `t` first, then `y`; `θ = 10000`.
    pub fn new(head_dim: usize) -> Result<Self, RopeError> {
        if !head_dim.is_multiple_of(2) || head_dim < 6 {
            return Err(RopeError::Config(format!(
                "head_dim {head_dim} must be even and at least 6"
            )));
        }
        let pairs = head_dim / 2;
        let (base, rem) = (pairs / 3, pairs % 3);
        let dt = 2 * (base + usize::from(rem >= 1));
        let dy = 2 * (base + usize::from(rem == 2));
        let dx = 2 * base;
        Self::with_partition(head_dim, (dt, dy, dx), DEFAULT_THETA)
    }

    pub fn with_partition(
        head_dim: usize,
        partition: (usize, usize, usize),
        theta: f64,
    ) -> Result<Self, RopeError> {
        let (a, b, c) = partition;
        if [a, b, c].iter().any(|&d| d < 2 || d % 2 != 0) {
            return Err(RopeError::Config(format!("partition {partition:?} needs even parts ≥ 2")));
        }
        if a + b + c != head_dim {
            return Err(RopeError::Config(format!(
                "partition {partition:?} does not sum to head_dim {head_dim}"
            )));
        }
        if !(theta.is_finite() && theta > 0.0) {
            return Err(RopeError::Config(format!("theta {theta} must be positive")));
        }
        Ok(Self { head_dim, partition, theta })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn partition(&self) -> (usize, usize, usize) {
        self.partition
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Rotation angles for the `head_dim / 2` pairs of one position.
    pub fn angles(&self, idx: RopeIndex) -> Vec<f64> {
        let dims = [self.partition.0, self.partition.1, self.partition.2];
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for (a, &d) in dims.iter().enumerate() {
            let pos = idx.axis(a) as f64;
            for j in 0..d / 2 {
                out.push(pos * self.theta.powf(-2.0 * j as f64 / d as f64));
            }
        }
        out
    }

    /// Rotation for a `n × (heads · head_dim)` matrix whose row `r` sits at
    /// `indices[r]`; every head is rotated identically.
    pub fn rotation(&self, indices: &[RopeIndex], heads: usize) -> Result<Arc<PairRotation>, RopeError> {
        let per_head = self.head_dim / 2;
        let mut angles = Vec::with_capacity(indices.len() * per_head * heads);
        for &idx in indices {
            let a = self.angles(idx);
            for _ in 0..heads {
                angles.extend_from_slice(&a);
            }
        }
        Ok(Arc::new(PairRotation::from_angles(indices.len(), per_head * heads, &angles)?))
    }
}

/// `(start_t + j, 0, 0)` for `j < count`.
pub fn assign_text_indices(start_t: i64, count: usize) -> Vec<RopeIndex> {
    (0..count as i64).map(|j| RopeIndex::new(start_t + j, 0, 0)).collect()
}

fn centered_grid(t: i64, w: usize, h: usize) -> Vec<RopeIndex> {
    let (w, h) = (w as i64, h as i64);
    (0..w * h).map(|i| RopeIndex::new(t, i / h - w / 2, i % h - h / 2)).collect()
}

/// Spatially centered `<image>` block at temporal index `m1 + 1`.
pub fn assign_image_sem_indices(m1: i64, w: usize, h: usize) -> Vec<RopeIndex> {
    centered_grid(m1 + 1, w, h)
}

/// VAE block aligned with the `<image>` block, at temporal index `m1 + 2`.
pub fn assign_image_vae_indices(m1: i64, w: usize, h: usize) -> Vec<RopeIndex> {
    centered_grid(m1 + 2, w, h)
}

/// One index per token of `stream`, in stream order.
pub fn assign_stream(stream: &TokenStream, subjects: &[SubjectSpec]) -> Result<Vec<RopeIndex>, RopeError> {
    if stream.subject_count() != subjects.len() {
        return Err(RopeError::Malformed(format!(
            "stream has {} subjects, {} grids given",
            stream.subject_count(),
            subjects.len()
        )));
    }
    let mut out = Vec::with_capacity(stream.len());
    let mut cursor: i64 = 1;
    let mut vae_t = vec![0i64; subjects.len()];
    for seg in stream.segments() {
        match seg.kind {
            TokenKind::Text => {
                out.extend(assign_text_indices(cursor, seg.len()));
                cursor += seg.len() as i64;
            }
            TokenKind::ImgSem | TokenKind::ImgVae => {
                let k = seg.subject_id.expect("validated stream");
                let s = &subjects[k];
                let grid = if seg.kind == TokenKind::ImgSem { s.sem_grid } else { s.vae_grid };
                if seg.len() != grid.0 * grid.1 {
                    return Err(RopeError::Malformed(format!(
                        "subject {k} {} block has {} tokens, grid {grid:?}",
                        seg.kind.as_str(),
                        seg.len()
                    )));
                }
                if seg.kind == TokenKind::ImgSem {
                    let m = cursor - 1;
                    out.extend(assign_image_sem_indices(m, grid.0, grid.1));
                    vae_t[k] = m;
                    cursor = m + 3;
                } else {
                    out.extend(assign_image_vae_indices(vae_t[k], grid.0, grid.1));
                }
            }
        }
    }
    Ok(out)
}

/// `(frame, y, x)` indices of a video latent grid, frames from `t = 0`,
/// rows/cols from 0. Row-major over `(frame, y, x)`.
pub fn video_indices(frames: usize, height: usize, width: usize) -> Vec<RopeIndex> {
    let mut out = Vec::with_capacity(frames * height * width);
    for f in 0..frames {
        for y in 0..height {
            for x in 0..width {
                out.push(RopeIndex::new(f as i64, y as i64, x as i64));
            }
        }
    }
    out
}

/// Rotates one `head_dim` vector to position `idx`.
pub fn apply_rope(vec: &Tensor, idx: RopeIndex, cfg: &RopeConfig) -> Result<Tensor, RopeError> {
    if vec.numel() != cfg.head_dim {
        return Err(RopeError::DimMismatch { expected: cfg.head_dim, got: vec.numel() });
    }
    let rot = cfg.rotation(&[idx], 1)?;
    let row = vec.reshape(&[1, cfg.head_dim])?;
    Ok(rot.apply(&row, false)?.reshape(vec.dims())?)
}
