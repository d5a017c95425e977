//! `animator` subcommands.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use animator_core::canvas::InstanceImage;
use animator_core::codec::PixelVideo;
use animator_core::data::{read_frame_dir, write_corpus, Corpus};
use animator_core::imageio::{read_mask, write_rgb};
use animator_core::metrics::{render_table, MetricSuite};
use animator_core::train::{condition_inputs, fit};
use animator_core::{CanvasSpec, ColorizationModel, SampleOptions, WeightOverrides};
use anyhow::{bail, Context};
use candle_core::DType;
use clap::{Args, Parser, Subcommand};

use crate::config::{scene_preset, RunConfig};
use crate::engine::{resolve_instances, Engine, InferJob};
use crate::server::{serve, AppState};

pub const CHECKPOINT_ENV: &str = "ANIMATOR_CHECKPOINT";

#[derive(Debug, Parser)]
#[command(name = "animator", version, about = "Multi-instance sketch video colorization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural sprite corpus.
    GenerateData(GenerateArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Colorize one sketch clip.
    Infer(InferArgs),
    /// Compare generated clips with ground truth.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Scene preset: `base` (64×64, 16 frames, 1-4 sprites) or `toy`.
    #[arg(long, default_value = "base")]
    pub scene: String,
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model preset (`toy` or `base`).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ablation: Option<String>,
    /// Continue from a checkpoint instead of a fresh initialisation.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct WeightArgs {
    #[arg(long = "w-bg")]
    pub w_bg: Option<f64>,
    #[arg(long = "w-text")]
    pub w_text: Option<f64>,
    /// Per-instance weight as `index=value`; repeatable.
    #[arg(long = "w-inst", value_parser = parse_instance_weight)]
    pub w_inst: Vec<(usize, f64)>,
}

impl WeightArgs {
    pub fn overrides(&self) -> WeightOverrides {
        WeightOverrides {
            w_bg: self.w_bg,
            w_text: self.w_text,
            w_inst: self.w_inst.iter().copied().collect(),
        }
    }
}

fn parse_instance_weight(s: &str) -> Result<(usize, f64), String> {
    let (i, v) = s.split_once('=').ok_or_else(|| format!("expected index=value, got `{s}`"))?;
    let i = i.trim().parse().map_err(|e| format!("bad instance index `{i}`: {e}"))?;
    let v = v.trim().parse().map_err(|e| format!("bad weight `{v}`: {e}"))?;
    Ok((i, v))
}

#[derive(Debug, Args)]
pub struct CheckpointArg {
    /// Model checkpoint. `ANIMATOR_CHECKPOINT` overrides it when set.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl CheckpointArg {
    pub fn resolve(&self) -> anyhow::Result<PathBuf> {
        checkpoint_path(self.checkpoint.as_deref(), std::env::var_os(CHECKPOINT_ENV))
    }
}

/// The environment value, when non-empty, replaces the flag.
pub fn checkpoint_path(flag: Option<&Path>, env: Option<std::ffi::OsString>) -> anyhow::Result<PathBuf> {
    match env.filter(|v| !v.is_empty()) {
        Some(v) => Ok(PathBuf::from(v)),
        None => flag
            .map(Path::to_path_buf)
            .with_context(|| format!("no checkpoint given (--checkpoint or {CHECKPOINT_ENV})")),
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    /// CanvasSpec JSON document.
    #[arg(long)]
    pub canvas: PathBuf,
    /// Directory of sketch PNG frames.
    #[arg(long)]
    pub sketches: PathBuf,
    #[arg(long, default_value = "")]
    pub caption: String,
    /// Directory holding `<id>.png` (and optional `<id>.mask.png`) per instance id.
    #[arg(long)]
    pub instances: Option<PathBuf>,
    /// Extra instance image as `id=path.png`; repeatable.
    #[arg(long = "instance", value_parser = parse_instance_path)]
    pub instance: Vec<(String, PathBuf)>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reverse sampling steps (0 = default stride).
    #[arg(long, default_value_t = 0)]
    pub steps: usize,
    #[command(flatten)]
    pub weights: WeightArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_instance_path(s: &str) -> Result<(String, PathBuf), String> {
    let (id, p) = s.split_once('=').ok_or_else(|| format!("expected id=path, got `{s}`"))?;
    Ok((id.to_string(), PathBuf::from(p)))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generated clips: a frame directory, a directory of clip directories, or a corpus.
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// Ground-truth clips in the same layout.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Colorize `--data` with this checkpoint first, writing clips to `--gen` when given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub steps: usize,
    #[arg(long, default_value = "model")]
    pub label: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Base directory for relative paths in request documents.
    #[arg(long, default_value = ".")]
    pub data_root: PathBuf,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => {
            let engine = load_engine(&a.checkpoint.resolve()?)?;
            let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad host/port")?;
            let state = AppState {
                engine: Arc::new(engine),
                data_root: a.data_root,
            };
            tokio::runtime::Runtime::new()?.block_on(serve(state, addr))
        }
    }
}

fn load_engine(path: &Path) -> anyhow::Result<Engine> {
    Engine::from_checkpoint_file(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let mut scene = scene_preset(&a.scene)?;
    if let Some(f) = a.frames {
        scene.frames = f;
    }
    let manifest = write_corpus(&a.out, a.seed, a.size, &scene)?;
    println!("wrote {} samples to {}", manifest.samples.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.preset.is_some() {
        cfg.preset = a.preset.clone();
        cfg.model = None;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(ab) = &a.ablation {
        cfg.train.ablation = ab.parse()?;
    }
    let data = a.data.or(cfg.data.clone()).context("no corpus given (--data or `data` in the config)")?;
    let out = a.out.or(cfg.out.clone()).context("no output directory given (--out or `out` in the config)")?;
    let records = Corpus::open(&data)?.load_all()?;
    let model = match &a.resume {
        Some(p) => {
            let ck = animator_core::Checkpoint::load(p)?;
            if ck.header.model.ablation != cfg.train.ablation {
                bail!(
                    "checkpoint was trained as `{}`, config asks for `{}`",
                    ck.header.model.ablation,
                    cfg.train.ablation
                );
            }
            ck.to_model(DType::F32)?
        }
        None => {
            let mut model_cfg = cfg.model_config()?;
            model_cfg.ablation = cfg.train.ablation;
            ColorizationModel::new(model_cfg, cfg.train.seed, DType::F32)?
        }
    };
    println!(
        "training {} steps on {} samples ({}) → {}",
        cfg.train.steps,
        records.len(),
        cfg.train.ablation,
        out.display()
    );
    let outcome = fit(model, &cfg.train, &records, Some(&out))?;
    if let Some(last) = outcome.losses.last() {
        println!("final loss {last:.5}");
    }
    Ok(())
}

/// Loads `<id>.png` plus an optional `<id>.mask.png` for every id in a directory.
fn instance_pool(dir: Option<&Path>, extra: &[(String, PathBuf)]) -> anyhow::Result<BTreeMap<String, InstanceImage>> {
    let mut pool = BTreeMap::new();
    if let Some(dir) = dir {
        for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if let Some(id) = name.strip_suffix(".png").filter(|id| !id.ends_with(".mask")) {
                pool.insert(id.to_string(), load_instance(&path)?);
            }
        }
    }
    for (id, path) in extra {
        pool.insert(id.clone(), load_instance(path)?);
    }
    Ok(pool)
}

fn load_instance(path: &Path) -> anyhow::Result<InstanceImage> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mask_path = path.with_extension("mask.png");
    if mask_path.exists() {
        let rgb = animator_core::imageio::decode_png(&bytes)?;
        return Ok(InstanceImage::with_mask(rgb, read_mask(&mask_path)?)?);
    }
    Ok(crate::api::decode_instance(&bytes, None)?)
}

fn write_clip(dir: &Path, video: &PixelVideo) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (t, f) in video.to_frames().iter().enumerate() {
        write_rgb(&dir.join(format!("{t:03}.png")), f)?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> anyhow::Result<()> {
    let engine = load_engine(&a.checkpoint.resolve()?)?;
    let text = std::fs::read_to_string(&a.canvas).with_context(|| format!("reading {}", a.canvas.display()))?;
    let mut canvas: CanvasSpec = crate::api::parse_document(&text)?;
    let base = a.canvas.parent().unwrap_or(Path::new("."));
    canvas.resolve_background(base)?;
    let pool = instance_pool(a.instances.as_deref(), &a.instance)?;
    let job = InferJob {
        canvas,
        sketches: read_frame_dir(&a.sketches)?,
        caption: a.caption.clone(),
        overrides: a.weights.overrides(),
        seed: a.seed,
        steps: a.steps,
    };
    let instances = resolve_instances(&job.canvas, |id| pool.get(id).cloned())?;
    engine.check(&job, &instances)?;
    let video = engine.run(&job, instances)?;
    write_clip(&a.out, &video)?;
    println!("wrote {} frames to {}", video.frames(), a.out.display());
    Ok(())
}

/// Reads clips from a single frame directory, a corpus, or a directory of
/// clip directories (each either holding PNGs or a `frames/` subdirectory).
pub fn load_clips(dir: &Path) -> anyhow::Result<Vec<PixelVideo>> {
    if dir.join("manifest.json").exists() {
        let corpus = Corpus::open(dir)?;
        return (0..corpus.len()).map(|i| Ok(corpus.load(i)?.frames)).collect();
    }
    let mut subdirs = Vec::new();
    let mut has_png = false;
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            subdirs.push(path);
        } else if path.extension().is_some_and(|e| e == "png") {
            has_png = true;
        }
    }
    if has_png {
        return Ok(vec![read_frame_dir(dir)?]);
    }
    subdirs.sort();
    if subdirs.is_empty() {
        bail!("no clips found in {}", dir.display());
    }
    subdirs
        .iter()
        .map(|d| {
            let frames = d.join("frames");
            Ok(read_frame_dir(if frames.is_dir() { &frames } else { d })?)
        })
        .collect()
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let (generated, truth) = match (&a.checkpoint, &a.data) {
        (Some(ck), Some(data)) => {
            let engine = load_engine(&checkpoint_path(Some(ck), std::env::var_os(CHECKPOINT_ENV))?)?;
            let corpus = Corpus::open(data)?;
            let mut generated = Vec::new();
            let mut truth = Vec::new();
            for i in 0..corpus.len() {
                let record = corpus.load(i)?;
                let opts = SampleOptions {
                    seed: a.seed,
                    steps: a.steps,
                    overrides: WeightOverrides::default(),
                };
                let video = engine.model.sample(&condition_inputs(&record), &opts)?;
                if let Some(out) = &a.gen {
                    write_clip(&out.join(&record.id), &video)?;
                }
                generated.push(video);
                truth.push(record.frames);
            }
            (generated, truth)
        }
        (None, None) => {
            let gen = a.gen.as_deref().context("--gen is required")?;
            let truth = a.truth.as_deref().context("--truth is required")?;
            (load_clips(gen)?, load_clips(truth)?)
        }
        _ => bail!("--checkpoint and --data go together"),
    };
    let report = MetricSuite::new().report(&generated, &truth)?;
    print!("{}", render_table(&[(a.label.clone(), report)]));
    Ok(())
}
