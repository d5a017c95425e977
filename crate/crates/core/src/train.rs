//! Noise-prediction training loop with AdamW, global-norm clipping, a CSV
//! loss log and periodic checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::canvas::CanvasSpec;
use crate::checkpoint::Checkpoint;
use crate::control::WeightOverrides;
use crate::data::SampleRecord;
use crate::error::{invalid, Error, Result};
use crate::model::{Ablation, ColorizationModel, ConditionInputs, ModelConfig};
use crate::nn::tensor_from_f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub grad_clip: f64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            steps: 20_000,
            batch_size: 1,
            weight_decay: 0.01,
            seed: 0,
            ablation: Ablation::Full,
            grad_clip: 1.0,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(invalid("weight decay must be non-negative"));
        }
        if self.log_every == 0 {
            return Err(invalid("log interval must be positive"));
        }
        Ok(())
    }
}

/// Canvas, instances, sketches and caption of a corpus sample, with the
/// sample's clean background on the canvas.
pub fn condition_inputs(record: &SampleRecord) -> ConditionInputs {
    let mut canvas = CanvasSpec::new(record.frames.width(), record.frames.height())
        .with_background(record.background.clone());
    for p in &record.placements {
        canvas = canvas.place(p.clone());
    }
    ConditionInputs {
        canvas,
        instances: record.instances.clone(),
        sketches: record.sketches.clone(),
        caption: record.caption.clone(),
    }
}

pub struct TrainOutcome {
    pub model: ColorizationModel,
    /// Loss of every step.
    pub losses: Vec<f64>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Mean of each trailing window of `window` losses.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for (i, l) in losses.iter().enumerate() {
        sum += l;
        if i >= window {
            sum -= losses[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

struct Prepared {
    x0: Vec<f64>,
    rows: usize,
    channels: usize,
    inputs: ConditionInputs,
}

fn prepare_record(model: &ColorizationModel, record: &SampleRecord) -> Result<Prepared> {
    let latent = model.codec.encode(&record.frames)?;
    let (t, h, w, c) = latent.dims();
    Ok(Prepared {
        x0: latent.to_token_rows().iter().map(|v| *v as f64).collect(),
        rows: t * h * w,
        channels: c,
        inputs: condition_inputs(record),
    })
}

fn global_norm_clip(grads: &mut candle_core::backprop::GradStore, vars: &[Tensor], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.remove(v) {
                grads.insert(v, (g * s)?);
            }
        }
    }
    Ok(norm)
}

/// Trains a fresh model on `records`. With `out_dir`, writes `loss.csv`,
/// `train_config.json`, periodic `step_%06d.ckpt` and `final.ckpt`.
pub fn train(
    model_config: ModelConfig,
    config: &TrainConfig,
    records: &[SampleRecord],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model_config = ModelConfig {
        ablation: config.ablation,
        ..model_config
    };
    let model = ColorizationModel::new(model_config, config.seed, DType::F32)?;
    fit(model, config, records, out_dir)
}

/// Continues training an existing model. The model's own ablation applies.
pub fn fit(
    model: ColorizationModel,
    config: &TrainConfig,
    records: &[SampleRecord],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if records.is_empty() {
        return Err(invalid("training corpus is empty"));
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("train_config.json"), serde_json::to_string_pretty(config)?)?;
            let path = dir.join("loss.csv");
            let fresh = !path.exists();
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "step,loss,lr")?;
            }
            Some(f)
        }
        None => None,
    };
    let prepared = records
        .iter()
        .map(|r| prepare_record(&model, r))
        .collect::<Result<Vec<_>>>()?;
    let train_instances = {
        let n = records[0].instances.len();
        records.iter().all(|r| r.instances.len() == n).then_some(n)
    };
    let save = |step: usize, name: &str| -> Result<Option<PathBuf>> {
        match out_dir {
            Some(dir) => {
                let mut ck = Checkpoint::from_model(&model, config.seed, step)?;
                ck.header.train_instances = train_instances;
                let path = dir.join(name);
                ck.save(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    };

    let trainable = model.trainable_vars();
    let tensors: Vec<Tensor> = trainable.iter().map(|(_, v)| v.as_tensor().clone()).collect();
    let mut opt = AdamW::new(
        trainable.into_iter().map(|(_, v)| v).collect(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a11_0000_0000_0001);
    let steps_total = model.schedule.steps();
    let mut losses = Vec::with_capacity(config.steps);
    let mut last_good = None;
    let overrides = WeightOverrides::default();

    for step in 1..=config.steps {
        let mut total: Option<Tensor> = None;
        for _ in 0..config.batch_size {
            let p = &prepared[rng.random_range(0..prepared.len())];
            let t = rng.random_range(0..steps_total);
            let eps: Vec<f64> = (0..p.x0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (a, s) = model.schedule.coefficients(t)?;
            let xt: Vec<f64> = p.x0.iter().zip(&eps).map(|(x, e)| a * x + s * e).collect();
            let dev = model.store.device();
            let xt = tensor_from_f64(&xt, &[p.rows, p.channels], model.dtype(), dev)?;
            let eps = tensor_from_f64(&eps, &[p.rows, p.channels], model.dtype(), dev)?;
            let cond = model.prepare(&p.inputs, &overrides)?;
            let target = model.full_target(&eps, &cond)?;
            let loss = model.loss(&xt, t, &target, &cond)?;
            total = Some(match total {
                Some(acc) => (acc + loss)?,
                None => loss,
            });
        }
        let loss = (total.expect("batch size is positive") / config.batch_size as f64)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, last_good });
        }
        let mut grads = loss.backward()?;
        global_norm_clip(&mut grads, &tensors, config.grad_clip)?;
        opt.step(&grads)?;
        model.clamp_weights()?;
        losses.push(value);
        if step % config.log_every == 0 {
            if let Some(f) = log.as_mut() {
                writeln!(f, "{step},{value},{}", config.learning_rate)?;
            }
            tracing::info!(step, loss = value, "train");
        }
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            last_good = save(step, &format!("step_{step:06}.ckpt"))?;
        }
    }
    let last_checkpoint = save(config.steps, "final.ckpt")?.or(last_good);
    Ok(TrainOutcome {
        model,
        losses,
        last_checkpoint,
    })
}
