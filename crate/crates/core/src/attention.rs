//! Instance-aware self-attention.
//!
//! The sequence is `[joint tokens | inst_1 | … | inst_N]`. Joint tokens see
//! everything; each instance group sees the joint tokens and itself, never
//! another instance group.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::nn::{attend, Linear, Scope};

/// Logit assigned to forbidden query/key pairs.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Joint,
    Instance(usize),
}

/// Token counts per segment: joint tokens first, then each instance group.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SegmentLayout {
    pub joint: usize,
    pub groups: Vec<usize>,
}

impl SegmentLayout {
    pub fn new(joint: usize, groups: Vec<usize>) -> Self {
        Self { joint, groups }
    }

    pub fn total(&self) -> usize {
        self.joint + self.groups.iter().sum::<usize>()
    }

    pub fn segment_map(&self) -> Vec<Segment> {
        let mut out = vec![Segment::Joint; self.joint];
        for (i, g) in self.groups.iter().enumerate() {
            out.extend(std::iter::repeat_n(Segment::Instance(i), *g));
        }
        out
    }

    /// `(start, len)` of every instance group.
    pub fn group_ranges(&self) -> Vec<(usize, usize)> {
        let mut start = self.joint;
        self.groups
            .iter()
            .map(|g| {
                let r = (start, *g);
                start += g;
                r
            })
            .collect()
    }
}

/// A token matrix with its segment layout.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub layout: SegmentLayout,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, layout: SegmentLayout) -> Result<Self> {
        let rows = tokens.dim(0)?;
        if rows != layout.total() {
            return Err(mismatch("token rows", layout.total(), rows));
        }
        Ok(Self { tokens, layout })
    }
}

/// Dense boolean attention mask, row = query, column = key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn forbidden_count(&self) -> usize {
        self.allowed.iter().filter(|a| !**a).count()
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|a| *a)
    }

    /// Additive logit bias: 0 where allowed, [`MASKED_LOGIT`] elsewhere.
    pub fn bias(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let vals: Vec<f32> = self
            .allowed
            .iter()
            .map(|a| if *a { 0.0 } else { MASKED_LOGIT as f32 })
            .collect();
        Ok(Tensor::from_vec(vals, (self.size, self.size), device)?.to_dtype(dtype)?)
    }
}

/// Builds the block mask for `joint` joint tokens and the given instance groups.
pub fn build_mask(joint: usize, group_sizes: &[usize]) -> Result<AttentionMask> {
    if joint == 0 {
        return Err(invalid("attention mask needs at least one joint token"));
    }
    if let Some(i) = group_sizes.iter().position(|g| *g == 0) {
        return Err(invalid(format!("instance group {i} is empty")));
    }
    let layout = SegmentLayout::new(joint, group_sizes.to_vec());
    let segs = layout.segment_map();
    let n = segs.len();
    let mut allowed = vec![false; n * n];
    for (q, sq) in segs.iter().enumerate() {
        for (k, sk) in segs.iter().enumerate() {
            allowed[q * n + k] = match (sq, sk) {
                (Segment::Instance(a), Segment::Instance(b)) => a == b,
                _ => true,
            };
        }
    }
    Ok(AttentionMask { size: n, allowed })
}

/// How instance groups are folded into the attention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// One masked attention over the whole sequence.
    #[default]
    Unified,
    /// Joint self-attention plus an unweighted sum of per-instance attentions.
    PerInstance,
}

/// Multi-head self-attention honouring the instance grouping.
#[derive(Debug, Clone)]
pub struct InstanceAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl InstanceAttention {
    pub fn new(scope: &Scope, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(invalid(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(&scope.pp("qkv"), dim, 3 * dim)?,
            out: Linear::new(&scope.pp("out"), dim, dim)?,
            heads,
        })
    }

    fn split_qkv(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let dim = x.dim(1)?;
        let qkv = self.qkv.forward(x)?;
        Ok((
            qkv.narrow(1, 0, dim)?,
            qkv.narrow(1, dim, dim)?,
            qkv.narrow(1, 2 * dim, dim)?,
        ))
    }

    pub fn forward(&self, seq: &TokenSequence, mode: AttentionMode) -> Result<Tensor> {
        let layout = &seq.layout;
        let rows = seq.tokens.dim(0)?;
        if rows != layout.total() {
            return Err(mismatch("token rows", layout.total(), rows));
        }
        match mode {
            AttentionMode::Unified => {
                let mask = build_mask(layout.joint, &layout.groups)?;
                self.forward_masked(&seq.tokens, &mask)
            }
            AttentionMode::PerInstance => self.forward_per_instance(&seq.tokens, layout),
        }
    }

    /// Unified mode with an explicit mask.
    pub fn forward_masked(&self, tokens: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
        let rows = tokens.dim(0)?;
        if rows != mask.size() {
            return Err(mismatch("mask size", rows, mask.size()));
        }
        let (q, k, v) = self.split_qkv(tokens)?;
        let bias = if mask.is_full() {
            None
        } else {
            Some(mask.bias(tokens.dtype(), tokens.device())?)
        };
        let a = attend(&q, &k, &v, self.heads, bias.as_ref())?;
        self.out.forward(&a)
    }

    fn forward_per_instance(&self, tokens: &Tensor, layout: &SegmentLayout) -> Result<Tensor> {
        let (q, k, v) = self.split_qkv(tokens)?;
        let l = layout.joint;
        let (qj, kj, vj) = (q.narrow(0, 0, l)?, k.narrow(0, 0, l)?, v.narrow(0, 0, l)?);
        let mut joint = attend(&qj, &kj, &vj, self.heads, None)?;
        let mut parts = Vec::with_capacity(layout.groups.len() + 1);
        let mut inst_out = Vec::with_capacity(layout.groups.len());
        for (start, len) in layout.group_ranges() {
            let (qi, ki, vi) = (
                q.narrow(0, start, len)?,
                k.narrow(0, start, len)?,
                v.narrow(0, start, len)?,
            );
            // joint queries over this instance's keys only
            joint = (joint + attend(&qj, &ki, &vi, self.heads, None)?)?;
            // instance queries over joint ∪ own group
            let keys = Tensor::cat(&[&kj, &ki], 0)?;
            let vals = Tensor::cat(&[&vj, &vi], 0)?;
            inst_out.push(attend(&qi, &keys, &vals, self.heads, None)?);
        }
        parts.push(joint);
        parts.extend(inst_out);
        let all = Tensor::cat(&parts, 0)?;
        self.out.forward(&all)
    }
}

/// Positions that contribute to the denoising loss: every joint position,
/// no instance position.
pub fn loss_mask(layout: &SegmentLayout) -> Vec<bool> {
    layout
        .segment_map()
        .into_iter()
        .map(|s| s == Segment::Joint)
        .collect()
}
