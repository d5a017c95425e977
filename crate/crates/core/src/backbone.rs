//! Toy diffusion transformer predicting the noise of the latent clip.
//!
//! Each block runs instance-aware self-attention over `[joint | instances]`,
//! then the decoupled condition experts on the joint tokens through the
//! condition gate, then a feed-forward layer. Every sub-layer is pre-normed
//! and modulated by the timestep embedding.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, InstanceAttention, SegmentLayout, TokenSequence};
use crate::control::{gate, ConditionBundle, ExpertAttention, GateState};
use crate::error::{invalid, mismatch, Result};
use crate::nn::{sinusoid, tensor_from_f64, Init, LayerNorm, Linear, Mlp, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Hidden width `D_DiT`.
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Latent cells per token edge. Only 1 is supported.
    pub patch: usize,
    pub attention_mode: AttentionMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            blocks: 6,
            heads: 4,
            patch: 1,
            attention_mode: AttentionMode::Unified,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(invalid(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.patch != 1 {
            return Err(invalid("only patch size 1 is supported"));
        }
        if self.blocks == 0 {
            return Err(invalid("denoiser needs at least one block"));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserBlock {
    pub attn: InstanceAttention,
    pub experts: ExpertAttention,
    pub gate: GateState,
    pub ffn: Mlp,
    /// Timestep → six shift/scale vectors.
    pub modulation: Linear,
}

impl DenoiserBlock {
    fn new(scope: &Scope, cfg: &DenoiserConfig) -> Result<Self> {
        let d = cfg.hidden;
        Ok(Self {
            attn: InstanceAttention::new(&scope.pp("attn"), d, cfg.heads)?,
            experts: ExpertAttention::new(&scope.pp("experts"), d, cfg.heads)?,
            gate: GateState::new(&scope.pp("gate"))?,
            ffn: Mlp::new(&scope.pp("ffn"), d, 2 * d, d)?,
            modulation: Linear::zeros(&scope.pp("modulation"), d, 6 * d)?,
        })
    }
}

/// Everything the denoiser needs besides `x_t` and `t`.
#[derive(Debug, Clone)]
pub struct DenoiserConditions {
    /// `(L, D_s + D_c)` sketch and canvas channels per joint token.
    pub cond: Tensor,
    /// `(g_i, D_n)` latent tokens of each instance.
    pub instance_tokens: Vec<Tensor>,
    /// `(L, D)` fixed positional table of the joint grid.
    pub positions: Tensor,
    pub bundle: ConditionBundle,
    /// Skip the condition experts entirely (gate pinned at zero).
    pub skip_experts: bool,
}

impl DenoiserConditions {
    pub fn layout(&self) -> Result<SegmentLayout> {
        Ok(SegmentLayout::new(
            self.cond.dim(0)?,
            self.instance_tokens
                .iter()
                .map(|t| t.dim(0))
                .collect::<candle_core::Result<_>>()?,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub latent_channels: usize,
    pub cond_channels: usize,
    embed: Linear,
    segment: Tensor,
    time_mlp: Mlp,
    pub blocks: Vec<DenoiserBlock>,
    final_modulation: Linear,
    pub head: Linear,
}

impl Denoiser {
    pub fn new(scope: &Scope, config: DenoiserConfig, latent_channels: usize, cond_channels: usize) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        Ok(Self {
            embed: Linear::new(&scope.pp("embed"), latent_channels + cond_channels, d)?,
            segment: scope.get("segment", &[1, d], Init::Normal(0.5))?,
            time_mlp: Mlp::new(&scope.pp("time_mlp"), d, d, d)?,
            blocks: (0..config.blocks)
                .map(|i| DenoiserBlock::new(&scope.pp(&format!("block{i}")), &config))
                .collect::<Result<_>>()?,
            final_modulation: Linear::zeros(&scope.pp("final_modulation"), d, 2 * d)?,
            head: Linear::zeros(&scope.pp("head"), d, latent_channels)?,
            config,
            latent_channels,
            cond_channels,
        })
    }

    fn time_embedding(&self, t: usize) -> Result<Tensor> {
        let d = self.config.hidden;
        let dtype = self.segment.dtype();
        let e = tensor_from_f64(&sinusoid(t as f64, d, 10_000.0), &[1, d], dtype, self.segment.device())?;
        Ok(self.time_mlp.forward(&e)?.silu()?)
    }

    /// Noise prediction for every token of the sequence, `(L_total, D_n)`.
    /// Rows past the joint tokens belong to instances and carry no target.
    pub fn forward(&self, x_t: &Tensor, t: usize, cond: &DenoiserConditions) -> Result<Tensor> {
        let (l, dn) = x_t.dims2()?;
        if dn != self.latent_channels {
            return Err(mismatch("noise channels", self.latent_channels, dn));
        }
        let (lc, dc) = cond.cond.dims2()?;
        if lc != l {
            return Err(mismatch("condition tokens", l, lc));
        }
        if dc != self.cond_channels {
            return Err(mismatch("condition channels", self.cond_channels, dc));
        }
        let d = self.config.hidden;
        let joint = Tensor::cat(&[x_t, &cond.cond], 1)?;
        let mut parts = vec![(self.embed.forward(&joint)? + &cond.positions)?];
        for inst in &cond.instance_tokens {
            let (g, c) = inst.dims2()?;
            if c != self.latent_channels {
                return Err(mismatch("instance token channels", self.latent_channels, c));
            }
            let pad = Tensor::zeros((g, self.cond_channels), inst.dtype(), inst.device())?;
            let row = Tensor::cat(&[inst, &pad], 1)?;
            parts.push(self.embed.forward(&row)?.broadcast_add(&self.segment)?);
        }
        let mut h = Tensor::cat(&parts, 0)?;
        let layout = cond.layout()?;
        let total = layout.total();
        let temb = self.time_embedding(t)?;
        let norm = LayerNorm::plain();
        let modulate = |x: &Tensor, shift: &Tensor, scale: &Tensor| -> Result<Tensor> {
            Ok(norm.forward(x)?.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
        };
        for block in &self.blocks {
            let m = block.modulation.forward(&temb)?;
            let chunk = |i: usize| m.narrow(1, i * d, d);
            let (sh1, sc1, sh2, sc2, sh3, sc3) = (chunk(0)?, chunk(1)?, chunk(2)?, chunk(3)?, chunk(4)?, chunk(5)?);

            let a = modulate(&h, &sh1, &sc1)?;
            let seq = TokenSequence::new(a, layout.clone())?;
            h = (&h + block.attn.forward(&seq, self.config.attention_mode)?)?;

            if !cond.skip_experts {
                let hj = h.narrow(0, 0, l)?;
                let c = modulate(&hj, &sh2, &sc2)?;
                let h_attn = block.experts.forward(&c, &cond.bundle)?;
                let hj = gate(&hj, &h_attn, &block.gate)?;
                h = if total > l {
                    Tensor::cat(&[&hj, &h.narrow(0, l, total - l)?], 0)?
                } else {
                    hj
                };
            }

            let f = modulate(&h, &sh3, &sc3)?;
            h = (&h + block.ffn.forward(&f)?)?;
        }
        let m = self.final_modulation.forward(&temb)?;
        let out = modulate(&h, &m.narrow(1, 0, d)?, &m.narrow(1, d, d)?)?;
        self.head.forward(&out)
    }
}

/// Mean squared error over the positions selected by `mask`.
pub fn masked_mse(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let rows = pred.dim(0)?;
    if target.dims() != pred.dims() {
        return Err(invalid(format!(
            "target shape {:?} differs from prediction {:?}",
            target.dims(),
            pred.dims()
        )));
    }
    if mask.len() != rows {
        return Err(mismatch("loss mask length", rows, mask.len()));
    }
    let idx: Vec<u32> = mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| i as u32)
        .collect();
    if idx.is_empty() {
        return Err(invalid("loss mask selects no positions"));
    }
    let idx = Tensor::from_vec(idx.clone(), idx.len(), pred.device())?;
    let p = pred.index_select(&idx, 0)?;
    let q = target.index_select(&idx, 0)?;
    Ok((p - q)?.sqr()?.mean_all()?)
}
