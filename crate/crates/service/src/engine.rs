//! Loaded model plus the request-to-conditions plumbing shared by the CLI and
//! the HTTP server.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::RwLock;

use animator_core::canvas::{Instance, InstanceImage, InstanceSet};
use animator_core::codec::PixelVideo;
use animator_core::control::{WeightValues, INSTANCE_WEIGHT_SLOTS};
use animator_core::{CanvasSpec, Checkpoint, ColorizationModel, ConditionInputs, Error, SampleOptions, WeightOverrides};
use candle_core::DType;
use serde::Serialize;

/// Everything needed to colorize one clip, after decoding.
#[derive(Debug, Clone)]
pub struct InferJob {
    pub canvas: CanvasSpec,
    pub sketches: PixelVideo,
    pub caption: String,
    pub overrides: WeightOverrides,
    pub seed: u64,
    pub steps: usize,
}

/// A job rejected before sampling, with the offending field when known.
#[derive(Debug)]
pub struct Rejection {
    pub path: Option<String>,
    pub message: String,
}

impl Rejection {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: Some(path.into()),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.path {
            Some(p) => write!(f, "{p}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for Rejection {}

#[derive(Debug, Clone, Serialize)]
pub struct DefaultWeights {
    pub w_bg: f64,
    pub w_text: f64,
    /// One entry per instance slot, in instance order.
    pub w_inst: Vec<f64>,
}

/// Content-addressed store of uploaded reference instances.
#[derive(Debug, Default)]
pub struct InstanceStore {
    items: RwLock<BTreeMap<String, InstanceImage>>,
}

impl InstanceStore {
    /// Registers an image and returns its id. Uploading the same pixels twice
    /// yields the same id.
    pub fn register(&self, image: InstanceImage) -> String {
        let id = format!("img_{:016x}", image_digest(&image));
        let mut items = self.items.write().unwrap_or_else(|e| e.into_inner());
        items.entry(id.clone()).or_insert(image);
        id
    }

    pub fn get(&self, id: &str) -> Option<InstanceImage> {
        self.items.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.items.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn image_digest(image: &InstanceImage) -> u64 {
    let (height, width, _) = image.rgb.dim();
    let mut bytes = Vec::with_capacity(16 + image.rgb.len() * 4 + image.mask.len());
    bytes.extend((height as u64).to_le_bytes());
    bytes.extend((width as u64).to_le_bytes());
    bytes.extend(image.rgb.iter().flat_map(|v| v.to_bits().to_le_bytes()));
    bytes.extend(image.mask.iter().map(|m| *m as u8));
    fnv1a(&bytes)
}

/// Orders the instances referenced by `canvas` by first appearance in its
/// placement list. Per-instance weight overrides index into this order.
pub fn resolve_instances(
    canvas: &CanvasSpec,
    lookup: impl Fn(&str) -> Option<InstanceImage>,
) -> Result<InstanceSet, Rejection> {
    let mut set = InstanceSet::new();
    for (i, p) in canvas.placements.iter().enumerate() {
        if set.get(&p.instance_id).is_some() {
            continue;
        }
        let image = lookup(&p.instance_id).ok_or_else(|| {
            Rejection::new(
                format!("canvas.placements[{i}].instance_id"),
                format!("unknown instance id `{}`", p.instance_id),
            )
        })?;
        set.items.push(Instance {
            id: p.instance_id.clone(),
            image,
        });
    }
    Ok(set)
}

pub struct Engine {
    pub model: ColorizationModel,
    pub version: String,
    pub store: InstanceStore,
}

impl Engine {
    pub fn new(model: ColorizationModel, version: impl Into<String>) -> Self {
        Self {
            model,
            version: version.into(),
            store: InstanceStore::default(),
        }
    }

    pub fn from_checkpoint_file(path: &Path) -> animator_core::Result<Self> {
        let bytes = std::fs::read(path)?;
        let ck = Checkpoint::from_bytes(&bytes)?;
        let version = format!(
            "{}-step{}-{:016x}",
            ck.header.model.ablation,
            ck.header.step,
            fnv1a(&bytes)
        );
        Ok(Self::new(ck.to_model(DType::F32)?, version))
    }

    pub fn factor(&self) -> usize {
        self.model.config.factor
    }

    pub fn default_weights(&self) -> animator_core::Result<DefaultWeights> {
        let WeightValues { w_bg, w_inst, w_text } = self.model.weight_values(INSTANCE_WEIGHT_SLOTS)?;
        Ok(DefaultWeights { w_bg, w_text, w_inst })
    }

    /// Checks a job against the loaded model before any sampling happens.
    pub fn check(&self, job: &InferJob, instances: &InstanceSet) -> Result<(), Rejection> {
        let f = self.factor();
        job.canvas
            .validate(f)
            .map_err(|e| Rejection::new("canvas", e.to_string()))?;
        let (h, w) = (job.sketches.height(), job.sketches.width());
        if (h, w) != (job.canvas.height, job.canvas.width) {
            return Err(Rejection::new(
                "sketches",
                format!(
                    "sketch frames are {w}×{h} but the canvas is {}×{}",
                    job.canvas.width, job.canvas.height
                ),
            ));
        }
        if let Some(bg) = &job.canvas.background {
            let (bh, bw, _) = bg.dim();
            if (bh, bw) != (h, w) {
                return Err(Rejection::new("background", format!("background is {bw}×{bh}, canvas is {w}×{h}")));
            }
        }
        if instances.len() > INSTANCE_WEIGHT_SLOTS {
            return Err(Rejection::new(
                "canvas.placements",
                format!("{} instances exceed the {INSTANCE_WEIGHT_SLOTS} supported", instances.len()),
            ));
        }
        job.overrides
            .validate()
            .map_err(|e| Rejection::new("weight_overrides", e.to_string()))?;
        if let Some((i, _)) = job.overrides.w_inst.iter().find(|(i, _)| **i >= instances.len()) {
            return Err(Rejection::new(
                format!("weight_overrides.w_inst.{i}"),
                format!("instance index {i} out of range for {} instances", instances.len()),
            ));
        }
        if job.steps > self.model.schedule.steps() {
            return Err(Rejection::new(
                "steps",
                format!("at most {} sampling steps", self.model.schedule.steps()),
            ));
        }
        Ok(())
    }

    /// Runs a checked job. Errors here are failures of the model, not of the
    /// request.
    pub fn run(&self, job: &InferJob, instances: InstanceSet) -> Result<PixelVideo, Error> {
        let inputs = ConditionInputs {
            canvas: job.canvas.clone(),
            instances,
            sketches: job.sketches.clone(),
            caption: job.caption.clone(),
        };
        let opts = SampleOptions {
            seed: job.seed,
            steps: job.steps,
            overrides: job.overrides.clone(),
        };
        self.model.sample(&inputs, &opts)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
