//! Semantic condition encoders and the per-modality projections that bring
//! their tokens to the backbone width.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec::{pad_to_multiple, Frame, SpaceToDepth};
use crate::error::{invalid, mismatch, Error, Result};
use crate::nn::{fnv1a, grid_positions, sinusoid, tensor_from_f32, tensor_from_f64, EncoderBlock, Init, Linear, Mlp, Scope};

/// Number of hash buckets of the text vocabulary.
pub const TEXT_BUCKETS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Background,
    Instance,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Background => "background",
            Modality::Instance => "instance",
            Modality::Text => "text",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "background" | "bg" => Ok(Modality::Background),
            "instance" | "inst" => Ok(Modality::Instance),
            "text" => Ok(Modality::Text),
            other => Err(Error::UnknownModality(other.to_string())),
        }
    }
}

/// Encoder output tokens, `K × d`.
#[derive(Debug, Clone)]
pub struct SemanticFeature {
    pub tokens: Tensor,
    pub modality: Modality,
}

/// Projected tokens, `K × D_DiT`.
#[derive(Debug, Clone)]
pub struct ProjectedFeature {
    pub tokens: Tensor,
}

impl ProjectedFeature {
    pub fn width(&self) -> Result<usize> {
        Ok(self.tokens.dim(1)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Image encoder width `d`.
    pub image_dim: usize,
    /// Output tokens per image `K`.
    pub image_tokens: usize,
    /// Text encoder width.
    pub text_dim: usize,
    /// Maximum caption tokens kept.
    pub text_max_tokens: usize,
    pub heads: usize,
    /// Patch edge in pixels.
    pub patch: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_dim: 64,
            image_tokens: 16,
            text_dim: 64,
            text_max_tokens: 64,
            heads: 4,
            patch: 4,
        }
    }
}

/// Patchify → linear → two attention blocks over `[queries ‖ patches]` → the
/// `K` query outputs through a final linear layer.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    patch_embed: Linear,
    queries: Tensor,
    blocks: Vec<EncoderBlock>,
    pub final_layer: Linear,
    cfg: EncoderConfig,
}

impl ImageEncoder {
    pub fn new(scope: &Scope, cfg: EncoderConfig) -> Result<Self> {
        let d = cfg.image_dim;
        Ok(Self {
            patch_embed: Linear::new(&scope.pp("patch_embed"), 3 * cfg.patch * cfg.patch, d)?,
            queries: scope.get("queries", &[cfg.image_tokens, d], Init::Normal(0.5))?,
            blocks: (0..2)
                .map(|i| EncoderBlock::new(&scope.pp(&format!("block{i}")), d, cfg.heads))
                .collect::<Result<_>>()?,
            final_layer: Linear::new(&scope.pp("final"), d, d)?,
            cfg,
        })
    }

    pub fn encode(&self, image: &Frame, modality: Modality) -> Result<SemanticFeature> {
        if image.iter().any(|v| !v.is_finite()) {
            return Err(invalid("image contains non-finite pixels"));
        }
        let (h, w, c) = image.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(invalid(format!("image shape {:?} is not H×W×3", image.dim())));
        }
        let codec = SpaceToDepth::new(self.cfg.patch);
        let padded = pad_to_multiple(image, self.cfg.patch);
        let z = codec.encode_image(&padded)?;
        let (_, hp, wp, dp) = z.dims();
        let n = hp * wp;
        let dtype = self.queries.dtype();
        let dev = self.queries.device();
        let patches = tensor_from_f32(&z.to_token_rows(), &[n, dp], dtype, dev)?;
        let pos = tensor_from_f64(&grid_positions(1, hp, wp, self.cfg.image_dim), &[n, self.cfg.image_dim], dtype, dev)?;
        let x = (self.patch_embed.forward(&patches)? + pos)?;
        let mut x = Tensor::cat(&[&self.queries, &x], 0)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        let tokens = self.final_layer.forward(&x.narrow(0, 0, self.cfg.image_tokens)?)?;
        Ok(SemanticFeature { tokens, modality })
    }
}

/// Final avalanche of splitmix64; FNV alone leaves the low bits clustered.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Lowercased alphanumeric words mapped to hash buckets.
pub fn text_buckets(caption: &str, max_tokens: usize) -> Vec<usize> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .take(max_tokens)
        .map(|w| (mix(fnv1a(w.to_lowercase().as_bytes())) % TEXT_BUCKETS as u64) as usize)
        .collect()
}

/// Hash-bucketed embedding → two attention blocks.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    embedding: Tensor,
    pad: Tensor,
    blocks: Vec<EncoderBlock>,
    cfg: EncoderConfig,
}

impl TextEncoder {
    pub fn new(scope: &Scope, cfg: EncoderConfig) -> Result<Self> {
        let d = cfg.text_dim;
        Ok(Self {
            embedding: scope.get("embedding", &[TEXT_BUCKETS, d], Init::Normal(1.0))?,
            pad: scope.get("pad", &[1, d], Init::Normal(1.0))?,
            blocks: (0..2)
                .map(|i| EncoderBlock::new(&scope.pp(&format!("block{i}")), d, cfg.heads))
                .collect::<Result<_>>()?,
            cfg,
        })
    }

    pub fn encode(&self, caption: &str) -> Result<SemanticFeature> {
        let ids = text_buckets(caption, self.cfg.text_max_tokens);
        let d = self.cfg.text_dim;
        let dev = self.embedding.device();
        let x = if ids.is_empty() {
            self.pad.clone()
        } else {
            let idx = Tensor::from_vec(ids.iter().map(|i| *i as u32).collect::<Vec<_>>(), ids.len(), dev)?;
            self.embedding.index_select(&idx, 0)?
        };
        let n = x.dim(0)?;
        let pos: Vec<f64> = (0..n).flat_map(|i| sinusoid(i as f64, d, 1000.0)).collect();
        let mut x = (x + tensor_from_f64(&pos, &[n, d], self.embedding.dtype(), dev)?)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(SemanticFeature {
            tokens: x,
            modality: Modality::Text,
        })
    }
}

/// The three modality-specific projection MLPs. A single instance MLP is
/// shared by every instance.
#[derive(Debug, Clone)]
pub struct Projector {
    pub background: Mlp,
    pub instance: Mlp,
    pub text: Mlp,
    hidden: usize,
}

impl Projector {
    pub fn new(scope: &Scope, image_dim: usize, text_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            background: Mlp::new(&scope.pp("mlp_bg"), image_dim, hidden, hidden)?,
            instance: Mlp::new(&scope.pp("mlp_inst"), image_dim, hidden, hidden)?,
            text: Mlp::new(&scope.pp("text_projection"), text_dim, hidden, hidden)?,
            hidden,
        })
    }

    pub fn project(&self, feature: &SemanticFeature) -> Result<ProjectedFeature> {
        let mlp = match feature.modality {
            Modality::Background => &self.background,
            Modality::Instance => &self.instance,
            Modality::Text => &self.text,
        };
        let expected = mlp.fc1.weight.dim(1)?;
        let got = feature.tokens.dim(1)?;
        if got != expected {
            return Err(mismatch(format!("{} feature width", feature.modality), expected, got));
        }
        let tokens = mlp.forward(&feature.tokens)?;
        debug_assert_eq!(tokens.dim(1)?, self.hidden);
        Ok(ProjectedFeature { tokens })
    }

    /// Projects by modality name, for callers that carry modality as text.
    pub fn project_named(&self, modality: &str, tokens: Tensor) -> Result<ProjectedFeature> {
        let modality = modality.parse()?;
        self.project(&SemanticFeature { tokens, modality })
    }
}
