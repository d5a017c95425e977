//! The full conditional denoiser: condition encoders, projections, the
//! backbone and the learnable condition weights, plus conditioning
//! preparation and ancestral sampling.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, Var};
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::loss_mask;
use crate::backbone::{masked_mse, Denoiser, DenoiserConditions, DenoiserConfig};
use crate::canvas::{build_condition_stream, CanvasSpec, ConditionLatents, InstanceSet};
use crate::codec::{pad_to_multiple, LatentVideo, PixelVideo, SpaceToDepth};
use crate::control::{set_weights, ConditionBundle, LearnedWeights, WeightOverrides, WeightValues, W_BG};
use crate::encoders::{EncoderConfig, ImageEncoder, Modality, Projector, TextEncoder};
use crate::error::{invalid, mismatch, Error, Result};
use crate::nn::{grid_positions, tensor_from_f32, tensor_from_f64, to_f64_vec, ParamStore};
use crate::schedule::{NoiseSchedule, ScheduleConfig};

/// Training variants with one component disabled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoInstanceAttention,
    NoCanvasGuidance,
    NoDecoupledControl,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoInstanceAttention,
        Ablation::NoCanvasGuidance,
        Ablation::NoDecoupledControl,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoInstanceAttention => "no_instance_attention",
            Ablation::NoCanvasGuidance => "no_canvas_guidance",
            Ablation::NoDecoupledControl => "no_decoupled_control",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownAblation(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Codec downsample factor `f`.
    pub factor: usize,
    pub denoiser: DenoiserConfig,
    pub encoders: EncoderConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            denoiser: DenoiserConfig::default(),
            encoders: EncoderConfig::default(),
            schedule: ScheduleConfig::default(),
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }
}

/// Raw conditions of one clip.
#[derive(Debug, Clone)]
pub struct ConditionInputs {
    /// Placements and optional background.
    pub canvas: CanvasSpec,
    pub instances: InstanceSet,
    pub sketches: PixelVideo,
    pub caption: String,
}

impl ConditionInputs {
    pub fn frames(&self) -> usize {
        self.sketches.frames()
    }
}

/// Options of [`ColorizationModel::sample`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub seed: u64,
    /// Reverse steps over the strided schedule; 0 means 50.
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub overrides: WeightOverrides,
}

pub struct ColorizationModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub codec: SpaceToDepth,
    pub schedule: NoiseSchedule,
    pub image_encoder: ImageEncoder,
    pub text_encoder: TextEncoder,
    pub projector: Projector,
    pub denoiser: Denoiser,
    pub weights: LearnedWeights,
}

impl fmt::Debug for ColorizationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ColorizationModel")
            .field("config", &self.config)
            .field("store", &self.store)
            .finish()
    }
}

impl ColorizationModel {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let dn = config.latent_channels();
        let enc = config.encoders;
        let hidden = config.denoiser.hidden;
        let model = Self {
            codec: SpaceToDepth::new(config.factor),
            schedule: NoiseSchedule::new(config.schedule)?,
            image_encoder: ImageEncoder::new(&root.pp("image_encoder"), enc)?,
            text_encoder: TextEncoder::new(&root.pp("text_encoder"), enc)?,
            projector: Projector::new(&root.pp("projector"), enc.image_dim, enc.text_dim, hidden)?,
            denoiser: Denoiser::new(&root.pp("denoiser"), config.denoiser, dn, 2 * dn)?,
            weights: LearnedWeights::new(&root.pp("control"))?,
            config,
            store,
        };
        Ok(model)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Parameters never touched by the optimiser.
    pub fn frozen_names(&self) -> Vec<String> {
        let mut names = vec![W_BG.to_string()];
        if self.config.ablation == Ablation::NoDecoupledControl {
            names.extend(
                self.store
                    .names()
                    .into_iter()
                    .filter(|n| n.ends_with(".gate.g")),
            );
        }
        names
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let frozen = self.frozen_names();
        self.store
            .vars()
            .into_iter()
            .filter(|(n, _)| !frozen.contains(n))
            .collect()
    }

    /// Clamps the learnable condition weights at zero.
    pub fn clamp_weights(&self) -> Result<()> {
        for name in [crate::control::W_INST, crate::control::W_TEXT] {
            let var = self.store.get(name).expect("condition weights exist");
            let clamped = var.as_tensor().relu()?;
            var.set(&clamped)?;
        }
        Ok(())
    }

    pub fn weight_values(&self, instances: usize) -> Result<WeightValues> {
        self.weights.values(instances)
    }

    fn tensor_rows(&self, latent: &LatentVideo) -> Result<Tensor> {
        let (t, h, w, c) = latent.dims();
        tensor_from_f32(&latent.to_token_rows(), &[t * h * w, c], self.dtype(), self.store.device())
    }

    /// Encodes sketches, canvas stream, instances and semantic conditions.
    pub fn prepare(&self, inputs: &ConditionInputs, overrides: &WeightOverrides) -> Result<DenoiserConditions> {
        let f = self.config.factor;
        let frames = inputs.frames();
        let (h, w) = (inputs.sketches.height(), inputs.sketches.width());
        if (inputs.canvas.height, inputs.canvas.width) != (h, w) {
            return Err(invalid(format!(
                "canvas {}×{} does not match sketches {h}×{w}",
                inputs.canvas.height, inputs.canvas.width
            )));
        }
        inputs.canvas.validate(f)?;
        let sketch = self.codec.encode(&inputs.sketches)?;
        let mut stream = build_condition_stream(&inputs.canvas, &inputs.instances, frames)?;
        if self.config.ablation == Ablation::NoCanvasGuidance {
            stream.data.fill(0.0);
        }
        let canvas = self.codec.encode(&stream)?;
        let latents = ConditionLatents::new(sketch, canvas)?;
        let (tl, hl, wl, _) = latents.sketch_stream.dims();
        let cond_latent = LatentVideo {
            data: ndarray::concatenate(
                ndarray::Axis(3),
                &[latents.sketch_stream.data.view(), latents.canvas_stream.data.view()],
            )
            .map_err(|e| invalid(e.to_string()))?,
            scale_factor: f,
        };
        let cond = self.tensor_rows(&cond_latent)?;

        let dev = self.store.device();
        let dtype = self.dtype();
        let hidden = self.config.denoiser.hidden;
        let positions = tensor_from_f64(&grid_positions(tl, hl, wl, hidden), &[tl * hl * wl, hidden], dtype, dev)?;

        let mut instance_tokens = Vec::new();
        let mut inst_features = Vec::new();
        for inst in inputs.instances.iter() {
            let crop = pad_to_multiple(&inst.image.masked_rgb(), f);
            if self.config.ablation != Ablation::NoInstanceAttention {
                instance_tokens.push(self.tensor_rows(&self.codec.encode_image(&crop)?)?);
            }
            let feat = self.image_encoder.encode(&crop, Modality::Instance)?;
            inst_features.push(self.projector.project(&feat)?);
        }
        let bg = match &inputs.canvas.background {
            Some(img) => {
                let feat = self.image_encoder.encode(img, Modality::Background)?;
                Some(self.projector.project(&feat)?)
            }
            None => None,
        };
        let text = self.projector.project(&self.text_encoder.encode(&inputs.caption)?)?;
        let bundle = ConditionBundle {
            bg,
            weights: self.weights.for_instances(inst_features.len())?,
            instances: inst_features,
            text: Some(text),
        };
        let bundle = set_weights(&bundle, overrides)?;
        Ok(DenoiserConditions {
            cond,
            instance_tokens,
            positions,
            bundle,
            skip_experts: self.config.ablation == Ablation::NoDecoupledControl,
        })
    }

    /// Raw per-token output `(L_total, D_n)`.
    pub fn forward(&self, x_t: &Tensor, t: usize, cond: &DenoiserConditions) -> Result<Tensor> {
        if t >= self.schedule.steps() {
            return Err(Error::TimestepOutOfRange { t, steps: self.schedule.steps() });
        }
        self.denoiser.forward(x_t, t, cond)
    }

    /// Predicted noise for a noisy latent clip.
    pub fn predict_noise(&self, x_t: &LatentVideo, t: usize, cond: &DenoiserConditions) -> Result<LatentVideo> {
        let rows = self.tensor_rows(x_t)?;
        let out = self.forward(&rows, t, cond)?;
        let l = x_t.cells();
        let eps = out.narrow(0, 0, l)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        LatentVideo::from_token_rows(eps, x_t.dims(), x_t.scale_factor)
    }

    /// Denoising loss on the joint noise positions. `target` covers the whole
    /// sequence; instance rows are ignored.
    pub fn loss(&self, x_t: &Tensor, t: usize, target: &Tensor, cond: &DenoiserConditions) -> Result<Tensor> {
        let pred = self.forward(x_t, t, cond)?;
        let mask = loss_mask(&cond.layout()?);
        masked_mse(&pred, target, &mask)
    }

    /// Full-sequence regression target: `eps` on joint rows, zeros on instance rows.
    pub fn full_target(&self, eps: &Tensor, cond: &DenoiserConditions) -> Result<Tensor> {
        let layout = cond.layout()?;
        let extra = layout.total() - layout.joint;
        if extra == 0 {
            return Ok(eps.clone());
        }
        let pad = Tensor::zeros((extra, eps.dim(1)?), eps.dtype(), eps.device())?;
        Ok(Tensor::cat(&[eps, &pad], 0)?)
    }

    /// Ancestral sampling over the strided schedule.
    pub fn sample(&self, inputs: &ConditionInputs, opts: &SampleOptions) -> Result<PixelVideo> {
        let cond = self.prepare(inputs, &opts.overrides)?;
        let f = self.config.factor;
        let frames = inputs.frames();
        let (h, w) = (inputs.sketches.height(), inputs.sketches.width());
        let dims = (frames, h / f, w / f, self.config.latent_channels());
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let steps = if opts.steps == 0 { 50 } else { opts.steps };
        let ts = self.schedule.strided(steps);
        let rows = dims.0 * dims.1 * dims.2;
        let mut x0 = vec![0.0f64; n];
        for (k, &t) in ts.iter().enumerate() {
            let prev = ts.get(k + 1).copied();
            let xt = tensor_from_f64(&x, &[rows, dims.3], self.dtype(), self.store.device())?;
            let out = self.forward(&xt, t, &cond)?;
            let eps = to_f64_vec(&out.narrow(0, 0, rows)?)?;
            let step = self.schedule.reverse_step(t, prev)?;
            for i in 0..n {
                x0[i] = step.predict_x0(x[i], eps[i]).clamp(0.0, 1.0);
            }
            if prev.is_none() {
                break;
            }
            let sd = step.variance.sqrt();
            for i in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                x[i] = step.mean_from_x0(x0[i], x[i]) + sd * z;
            }
        }
        let latent = LatentVideo {
            data: Array4::from_shape_vec(dims, x0.iter().map(|v| *v as f32).collect())
                .map_err(|e| invalid(e.to_string()))?,
            scale_factor: f,
        };
        let video = self.codec.decode(&latent)?;
        PixelVideo::new(video.data)
    }

    /// Checks that a clip's latent grid matches the conditions.
    pub fn check_latent(&self, latent: &LatentVideo, cond: &DenoiserConditions) -> Result<()> {
        let l = cond.cond.dim(0)?;
        if latent.cells() != l {
            return Err(mismatch("latent cells", l, latent.cells()));
        }
        Ok(())
    }
}
