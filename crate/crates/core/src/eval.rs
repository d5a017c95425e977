//! Evaluation on held-out toy clips: sprite colour accuracy, instance swaps
//! and clip SSIM.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::backbone::DenoiserConfig;
use crate::codec::PixelVideo;
use crate::data::{render_clip, SampleRecord, SceneConfig};
use crate::encoders::EncoderConfig;
use crate::error::{invalid, Result};
use crate::metrics::video_ssim;
use crate::model::{ColorizationModel, ModelConfig, SampleOptions};
use crate::train::condition_inputs;

/// Colour distance under which a sprite counts as correctly coloured.
pub const COLOR_TOLERANCE: f32 = 0.15;

/// The small two-sprite setting used for quick end-to-end runs.
pub fn toy_scene() -> SceneConfig {
    SceneConfig {
        width: 32,
        height: 32,
        frames: 4,
        min_sprites: 2,
        max_sprites: 2,
        min_size: 8,
        max_size: 12,
        max_speed: 1.0,
        allow_overlap: false,
        distinct_colors: true,
    }
}

pub fn toy_model() -> ModelConfig {
    ModelConfig {
        factor: 4,
        denoiser: DenoiserConfig {
            hidden: 64,
            blocks: 2,
            heads: 4,
            patch: 1,
            attention_mode: AttentionMode::Unified,
        },
        encoders: EncoderConfig {
            image_dim: 32,
            image_tokens: 4,
            text_dim: 32,
            text_max_tokens: 64,
            heads: 4,
            patch: 4,
        },
        ..ModelConfig::default()
    }
}

/// Mean colour of `video` over the pixels selected by `region`.
pub fn region_mean_color(video: &PixelVideo, region: &Array3<bool>) -> Option<[f32; 3]> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for ((t, y, x), m) in region.indexed_iter() {
        if *m {
            for c in 0..3 {
                sum[c] += video.data[[t, y, x, c]] as f64;
            }
            n += 1;
        }
    }
    (n > 0).then(|| sum.map(|s| (s / n as f64) as f32))
}

pub fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColorEval {
    pub hits: usize,
    pub total: usize,
    pub distances: Vec<f32>,
    /// Mean SSIM of generated clips against the ground truth.
    pub ssim: f64,
}

impl ColorEval {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// Samples every record and scores each sprite region against the colour
/// of its reference instance.
pub fn color_accuracy(model: &ColorizationModel, records: &[SampleRecord], seed: u64, steps: usize) -> Result<ColorEval> {
    let mut out = ColorEval::default();
    let mut ssim_sum = 0.0;
    for (i, r) in records.iter().enumerate() {
        let opts = SampleOptions {
            seed: seed.wrapping_add(i as u64),
            steps,
            ..Default::default()
        };
        let video = model.sample(&condition_inputs(r), &opts)?;
        ssim_sum += video_ssim(&video, &r.frames)?;
        for (k, sprite) in r.script.sprites.iter().enumerate() {
            let Some(mean) = region_mean_color(&video, &r.sprite_region(k)) else {
                continue;
            };
            let d = color_distance(mean, sprite.color_rgb());
            out.distances.push(d);
            out.total += 1;
            if d < COLOR_TOLERANCE {
                out.hits += 1;
            }
        }
    }
    out.ssim = if records.is_empty() { 0.0 } else { ssim_sum / records.len() as f64 };
    Ok(out)
}

/// The record with the colours of sprites `a` and `b` exchanged: instance
/// crops, canvas and caption follow the new colours, sketches stay as they were.
pub fn swap_colors(record: &SampleRecord, a: usize, b: usize) -> Result<SampleRecord> {
    let n = record.script.sprites.len();
    if a >= n || b >= n || a == b {
        return Err(invalid(format!("cannot swap sprites {a} and {b} of {n}")));
    }
    let mut script = record.script.clone();
    let ca = script.sprites[a].color;
    script.sprites[a].color = script.sprites[b].color;
    script.sprites[b].color = ca;
    let mut swapped = render_clip(&script, record.frames.frames())?;
    swapped.sketches = record.sketches.clone();
    swapped.id = format!("{}_swap{a}{b}", record.id);
    Ok(swapped)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SwapEval {
    pub flips: usize,
    pub pairs: usize,
}

impl SwapEval {
    pub fn rate(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.flips as f64 / self.pairs as f64
        }
    }
}

/// Swaps the first two sprites of every record; a pair flips when both
/// regions end up closer to the partner's original colour than to their own.
pub fn swap_flips(model: &ColorizationModel, records: &[SampleRecord], seed: u64, steps: usize) -> Result<SwapEval> {
    let mut out = SwapEval::default();
    for (i, r) in records.iter().enumerate() {
        if r.script.sprites.len() < 2 {
            continue;
        }
        let swapped = swap_colors(r, 0, 1)?;
        let opts = SampleOptions {
            seed: seed.wrapping_add(i as u64),
            steps,
            ..Default::default()
        };
        let video = model.sample(&condition_inputs(&swapped), &opts)?;
        let (c0, c1) = (r.script.sprites[0].color_rgb(), r.script.sprites[1].color_rgb());
        let m0 = region_mean_color(&video, &r.sprite_region(0));
        let m1 = region_mean_color(&video, &r.sprite_region(1));
        out.pairs += 1;
        if let (Some(m0), Some(m1)) = (m0, m1) {
            if color_distance(m0, c1) < color_distance(m0, c0) && color_distance(m1, c0) < color_distance(m1, c1) {
                out.flips += 1;
            }
        }
    }
    Ok(out)
}
