//! Cross-modal attention tensors.
//!
//! A tensor holds the attention that one output position pays to every visual
//! token, for every layer and head. Values are laid out row-major in
//! `(layer, head, visual_token)` order, so entry `(l, h, n)` lives at flat index
//! `(l * H + h) * N + n`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MhsaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionShape {
    pub layers: usize,
    pub heads: usize,
    pub visual_tokens: usize,
}

impl AttentionShape {
    pub const QWEN25_VL: AttentionShape = AttentionShape::new_unchecked(28, 28, 144);
    pub const INTERNVL2: AttentionShape = AttentionShape::new_unchecked(32, 32, 256);
    pub const LLAVA_15: AttentionShape = AttentionShape::new_unchecked(32, 32, 576);

    pub fn new(layers: usize, heads: usize, visual_tokens: usize) -> Result<Self> {
        if layers == 0 || heads == 0 || visual_tokens == 0 {
            return Err(MhsaError::Config(format!(
                "attention shape ({layers},{heads},{visual_tokens}) has a zero dimension"
            )));
        }
        Ok(Self::new_unchecked(layers, heads, visual_tokens))
    }

    const fn new_unchecked(layers: usize, heads: usize, visual_tokens: usize) -> Self {
        AttentionShape {
            layers,
            heads,
            visual_tokens,
        }
    }

    /// Looks up a named preset (`qwen`, `internvl`, `llava`) or parses `L,H,N`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "qwen" | "qwen2.5-vl" => Ok(Self::QWEN25_VL),
            "internvl" | "internvl2" => Ok(Self::INTERNVL2),
            "llava" | "llava-v1.5" => Ok(Self::LLAVA_15),
            other => {
                let dims: Vec<usize> = other
                    .split([',', 'x'])
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| MhsaError::Config(format!("unknown shape `{s}`")))?;
                match dims.as_slice() {
                    [l, h, n] => Self::new(*l, *h, *n),
                    _ => Err(MhsaError::Config(format!("unknown shape `{s}`"))),
                }
            }
        }
    }

    /// Total number of entries, `L * H * N`.
    pub fn flat_dim(&self) -> usize {
        self.layers * self.heads * self.visual_tokens
    }

    #[inline]
    pub fn index(&self, layer: usize, head: usize, token: usize) -> usize {
        (layer * self.heads + head) * self.visual_tokens + token
    }

    /// Size of one layer slice (`H * N`).
    pub fn layer_len(&self) -> usize {
        self.heads * self.visual_tokens
    }
}

impl fmt::Display for AttentionShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.layers, self.heads, self.visual_tokens)
    }
}

/// Attention of one output position over all visual tokens, for every layer and head.
///
/// Raw tensors come straight from a model trace and have every entry in `[0, 1]`.
/// Corrected tensors (`A + ΔA`) are flagged and may leave that range.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    shape: AttentionShape,
    values: Vec<f32>,
    corrected: bool,
}

impl AttentionTensor {
    /// Builds a raw tensor, checking length and the `[0, 1]` range.
    pub fn new(shape: AttentionShape, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.flat_dim() {
            return Err(MhsaError::shape(
                format!("{} values for {shape}", shape.flat_dim()),
                values.len(),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MhsaError::Format(format!(
                "raw attention entry {bad} outside [0, 1]"
            )));
        }
        Ok(AttentionTensor {
            shape,
            values,
            corrected: false,
        })
    }

    /// Builds a tensor without the range check. Used for corrections and offsets.
    pub fn new_corrected(shape: AttentionShape, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.flat_dim() {
            return Err(MhsaError::shape(
                format!("{} values for {shape}", shape.flat_dim()),
                values.len(),
            ));
        }
        Ok(AttentionTensor {
            shape,
            values,
            corrected: true,
        })
    }

    /// An additive offset (such as a correction `ΔA`): any sign, not flagged corrected.
    pub fn offset(shape: AttentionShape, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.flat_dim() {
            return Err(MhsaError::shape(
                format!("{} values for {shape}", shape.flat_dim()),
                values.len(),
            ));
        }
        Ok(AttentionTensor {
            shape,
            values,
            corrected: false,
        })
    }

    pub fn zeros(shape: AttentionShape) -> Self {
        AttentionTensor {
            shape,
            values: vec![0.0; shape.flat_dim()],
            corrected: false,
        }
    }

    /// Inverse of [`flatten`](Self::flatten): rebuilds a raw tensor from a flat vector.
    pub fn unflatten(shape: AttentionShape, flat: &[f64]) -> Result<Self> {
        Self::new(shape, flat.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> AttentionShape {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_corrected(&self) -> bool {
        self.corrected
    }

    pub fn get(&self, layer: usize, head: usize, token: usize) -> f32 {
        self.values[self.shape.index(layer, head, token)]
    }

    /// One `(layer, head)` row over the visual tokens.
    pub fn row(&self, layer: usize, head: usize) -> &[f32] {
        let start = self.shape.index(layer, head, 0);
        &self.values[start..start + self.shape.visual_tokens]
    }

    pub fn layer(&self, layer: usize) -> &[f32] {
        let len = self.shape.layer_len();
        &self.values[layer * len..(layer + 1) * len]
    }

    /// Flat row-major vector of length `L * H * N`, widened to f64.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    /// Fraction of entries outside `[0, 1]`. Always 0 for raw tensors.
    pub fn out_of_range_fraction(&self) -> f64 {
        let n = self
            .values
            .iter()
            .filter(|v| !(0.0..=1.0).contains(*v))
            .count();
        n as f64 / self.values.len() as f64
    }

    pub(crate) fn check_shape(&self, expected: AttentionShape) -> Result<()> {
        if self.shape != expected {
            return Err(MhsaError::shape(expected, self.shape));
        }
        Ok(())
    }
}

/// Per-position attention collected while generating `M` output tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    shape: AttentionShape,
    steps: Vec<AttentionTensor>,
}

impl AttentionTrace {
    pub fn new(shape: AttentionShape, steps: Vec<AttentionTensor>) -> Result<Self> {
        if steps.is_empty() {
            return Err(MhsaError::EmptyTrace);
        }
        for step in &steps {
            step.check_shape(shape)?;
        }
        Ok(AttentionTrace { shape, steps })
    }

    pub fn shape(&self) -> AttentionShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[AttentionTensor] {
        &self.steps
    }

    pub fn into_steps(self) -> Vec<AttentionTensor> {
        self.steps
    }
}

/// Attention from the first output position (the answer token of a yes/no question).
pub fn first_token_attention(trace: &AttentionTrace) -> Result<AttentionTensor> {
    trace.steps.first().cloned().ok_or(MhsaError::EmptyTrace)
}

/// Elementwise mean over all output positions in f64, before narrowing to f32.
pub fn mean_attention_flat(trace: &AttentionTrace) -> Result<Vec<f64>> {
    if trace.steps.is_empty() {
        return Err(MhsaError::EmptyTrace);
    }
    let m = trace.steps.len() as f64;
    let mut acc = vec![0.0f64; trace.shape.flat_dim()];
    for step in &trace.steps {
        for (a, &v) in acc.iter_mut().zip(&step.values) {
            *a += f64::from(v);
        }
    }
    acc.iter_mut().for_each(|a| *a /= m);
    Ok(acc)
}

/// Elementwise mean over all output positions.
pub fn mean_attention(trace: &AttentionTrace) -> Result<AttentionTensor> {
    let first = trace.steps.first().ok_or(MhsaError::EmptyTrace)?;
    let values: Vec<f32> = mean_attention_flat(trace)?
        .iter()
        .map(|&a| a as f32)
        .collect();
    let corrected = trace.steps.iter().any(|s| s.corrected);
    Ok(AttentionTensor {
        shape: first.shape,
        values,
        corrected,
    })
}

/// Attention of the `m`-th generated token.
pub fn token_attention(trace: &AttentionTrace, m: usize) -> Result<AttentionTensor> {
    trace
        .steps
        .get(m)
        .cloned()
        .ok_or(MhsaError::IndexOutOfRange {
            index: m,
            len: trace.steps.len(),
        })
}
