//! Procedural animation corpus: scene scripts, clip rendering, sketch
//! extraction, captions, scene segmentation and the on-disk layout.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canvas::{InstanceImage, InstanceSet, Placement};
use crate::codec::{Frame, PixelVideo};
use crate::error::{invalid, Error, Result};
use crate::imageio;
use crate::nn::fnv1a;

/// Named sprite colours (8-bit so PNG storage is exact).
pub const SPRITE_COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 80, 220]),
    ("yellow", [240, 210, 40]),
    ("orange", [240, 140, 30]),
    ("purple", [140, 60, 200]),
    ("cyan", [40, 200, 210]),
    ("pink", [240, 110, 180]),
];

/// Named background colours.
pub const BACKGROUND_COLORS: [(&str, [u8; 3]); 6] = [
    ("white", [245, 245, 245]),
    ("gray", [128, 128, 128]),
    ("blue", [110, 150, 230]),
    ("beige", [225, 205, 160]),
    ("dark", [40, 40, 50]),
    ("green", [150, 210, 150]),
];

pub fn rgb(c: [u8; 3]) -> [f32; 3] {
    [
        imageio::from_u8(c[0]),
        imageio::from_u8(c[1]),
        imageio::from_u8(c[2]),
    ]
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> f32 {
    let (a, b) = (rgb(a), rgb(b));
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Binary mask of the shape inside a `size × size` box.
    pub fn mask(&self, size: usize) -> Array2<bool> {
        let s = size as f32;
        let c = s / 2.0;
        Array2::from_shape_fn((size, size), |(y, x)| {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            match self {
                Shape::Square => true,
                Shape::Circle => (px - c).powi(2) + (py - c).powi(2) <= c * c,
                Shape::Triangle => (px - c).abs() <= py / s * c,
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Flat,
    Gradient,
    Checker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundStyle {
    pub kind: BackgroundKind,
    /// Index into [`BACKGROUND_COLORS`].
    pub primary: usize,
    pub secondary: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Static,
    /// Straight line at `speed` px/frame along `angle` radians.
    Linear { angle: f32 },
    /// Circle of `radius` px traversed at `speed` px/frame from `phase`.
    Circular { radius: f32, phase: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteScript {
    pub shape: Shape,
    /// Index into [`SPRITE_COLORS`].
    pub color: usize,
    pub size: usize,
    /// Centre at frame 0 (circular: centre of the orbit).
    pub start: (f32, f32),
    pub trajectory: Trajectory,
    pub speed: f32,
}

impl SpriteScript {
    pub fn color_name(&self) -> &'static str {
        SPRITE_COLORS[self.color].0
    }

    pub fn color_rgb(&self) -> [f32; 3] {
        rgb(SPRITE_COLORS[self.color].1)
    }

    /// Centre at frame `t`.
    pub fn center(&self, t: usize) -> (f32, f32) {
        let t = t as f32;
        match self.trajectory {
            Trajectory::Static => self.start,
            Trajectory::Linear { angle } => (
                self.start.0 + angle.cos() * self.speed * t,
                self.start.1 + angle.sin() * self.speed * t,
            ),
            Trajectory::Circular { radius, phase } => {
                let a = phase + self.speed * t / radius.max(1e-3);
                (self.start.0 + radius * a.cos(), self.start.1 + radius * a.sin())
            }
        }
    }

    /// Top-left pixel of the sprite box at frame `t`.
    pub fn top_left(&self, t: usize) -> (i32, i32) {
        let (cx, cy) = self.center(t);
        let h = self.size as f32 / 2.0;
        ((cx - h).round() as i32, (cy - h).round() as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub background: BackgroundStyle,
    pub sprites: Vec<SpriteScript>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub max_speed: f32,
    /// Whether sprites may overlap in some frame.
    pub allow_overlap: bool,
    /// Give every sprite a distinct colour.
    pub distinct_colors: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 16,
            min_sprites: 1,
            max_sprites: 4,
            min_size: 8,
            max_size: 20,
            max_speed: 1.5,
            allow_overlap: true,
            distinct_colors: false,
        }
    }
}

impl SceneConfig {
    /// The long-clip setting.
    pub const LONG_CLIP_FRAMES: usize = 81;

    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.min_sprites && self.min_sprites <= self.max_sprites && self.max_sprites <= 4) {
            return Err(invalid("sprite count bounds must satisfy 1 ≤ min ≤ max ≤ 4"));
        }
        if self.frames == 0 {
            return Err(invalid("clips need at least one frame"));
        }
        if self.min_size < 2 || self.min_size > self.max_size || self.max_size > self.width.min(self.height) {
            return Err(invalid("sprite sizes must fit on the canvas"));
        }
        Ok(())
    }
}

fn visible_fraction(sprite: &SpriteScript, mask: &Array2<bool>, t: usize, w: usize, h: usize) -> f32 {
    let (x0, y0) = sprite.top_left(t);
    let mut total = 0usize;
    let mut inside = 0usize;
    for ((y, x), m) in mask.indexed_iter() {
        if *m {
            total += 1;
            let (cx, cy) = (x0 + x as i32, y0 + y as i32);
            if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
                inside += 1;
            }
        }
    }
    inside as f32 / total.max(1) as f32
}

fn boxes_overlap(a: &SpriteScript, b: &SpriteScript, t: usize) -> bool {
    let (ax, ay) = a.top_left(t);
    let (bx, by) = b.top_left(t);
    let (sa, sb) = (a.size as i32, b.size as i32);
    ax < bx + sb + 1 && bx < ax + sa + 1 && ay < by + sb + 1 && by < ay + sa + 1
}

/// Draws a scene from `seed`, rejecting sprites that leave the canvas by more
/// than half or (optionally) overlap.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneScript> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (config.width, config.height);
    let kind = [BackgroundKind::Flat, BackgroundKind::Gradient, BackgroundKind::Checker][rng.random_range(0..3)];
    let primary = rng.random_range(0..BACKGROUND_COLORS.len());
    let mut secondary = rng.random_range(0..BACKGROUND_COLORS.len() - 1);
    if secondary >= primary {
        secondary += 1;
    }
    let background = BackgroundStyle {
        kind,
        primary,
        secondary,
    };
    let bg_colors = [BACKGROUND_COLORS[primary].1, BACKGROUND_COLORS[secondary].1];
    let count = rng.random_range(config.min_sprites..=config.max_sprites);
    let mut sprites: Vec<SpriteScript> = Vec::with_capacity(count);
    let mut attempts = 0;
    while sprites.len() < count {
        attempts += 1;
        if attempts > 10_000 {
            // restart with a derived seed; the budget only runs out on cramped canvases
            return generate_scene(seed.wrapping_mul(6364136223846793005).wrapping_add(1), config);
        }
        let shape = Shape::ALL[rng.random_range(0..3)];
        let color = rng.random_range(0..SPRITE_COLORS.len());
        if config.distinct_colors && sprites.iter().any(|s| s.color == color) {
            continue;
        }
        if bg_colors.iter().any(|b| color_distance(*b, SPRITE_COLORS[color].1) < 0.45) {
            continue;
        }
        let size = rng.random_range(config.min_size..=config.max_size);
        let start = (rng.random_range(0.0..w as f32), rng.random_range(0.0..h as f32));
        let speed = rng.random_range(0.0..=config.max_speed);
        let trajectory = match rng.random_range(0..3) {
            0 => Trajectory::Static,
            1 => Trajectory::Linear {
                angle: rng.random_range(0.0..2.0 * PI),
            },
            _ => Trajectory::Circular {
                radius: rng.random_range(2.0..(w.min(h) as f32 / 4.0).max(2.5)),
                phase: rng.random_range(0.0..2.0 * PI),
            },
        };
        let sprite = SpriteScript {
            shape,
            color,
            size,
            start,
            trajectory,
            speed: if trajectory == Trajectory::Static { 0.0 } else { speed },
        };
        let mask = shape.mask(size);
        let on_canvas = (0..config.frames).all(|t| visible_fraction(&sprite, &mask, t, w, h) >= 0.5);
        if !on_canvas {
            continue;
        }
        if !config.allow_overlap
            && sprites
                .iter()
                .any(|o| (0..config.frames).any(|t| boxes_overlap(o, &sprite, t)))
        {
            continue;
        }
        sprites.push(sprite);
    }
    Ok(SceneScript {
        seed,
        width: w,
        height: h,
        background,
        sprites,
    })
}

/// One training example.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: String,
    pub script: SceneScript,
    pub frames: PixelVideo,
    pub sketches: PixelVideo,
    pub instances: InstanceSet,
    /// Where each instance sits in the reference frame; z-order = sprite index.
    pub placements: Vec<Placement>,
    pub background: Frame,
    pub reference_index: usize,
    pub reference_frame: Frame,
    pub caption: String,
    /// Per-frame owner of each pixel: 0 = background, `k + 1` = sprite `k`.
    pub labels: Array3<u8>,
}

impl SampleRecord {
    /// Visible pixels of sprite `k` over all frames.
    pub fn sprite_region(&self, k: usize) -> Array3<bool> {
        self.labels.mapv(|l| l as usize == k + 1)
    }
}

pub fn render_background(style: &BackgroundStyle, width: usize, height: usize) -> Frame {
    let a = rgb(BACKGROUND_COLORS[style.primary].1);
    let b = rgb(BACKGROUND_COLORS[style.secondary].1);
    Array3::from_shape_fn((height, width, 3), |(y, x, c)| match style.kind {
        BackgroundKind::Flat => a[c],
        BackgroundKind::Gradient => {
            let f = y as f32 / (height.max(2) - 1) as f32;
            imageio::from_u8(imageio::to_u8(a[c] * (1.0 - f) + b[c] * f))
        }
        BackgroundKind::Checker => {
            if ((x / 8) + (y / 8)) % 2 == 0 {
                a[c]
            } else {
                b[c]
            }
        }
    })
}

/// Index of the reference frame drawn for a script.
pub fn reference_index(script: &SceneScript, frames: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed ^ 0x5eed_f4a3_e000_0001);
    rng.random_range(0..frames)
}

/// Renders `frames` frames of a script into a full sample record.
pub fn render_clip(script: &SceneScript, frames: usize) -> Result<SampleRecord> {
    if frames == 0 {
        return Err(invalid("clips need at least one frame"));
    }
    let (w, h) = (script.width, script.height);
    let background = render_background(&script.background, w, h);
    let masks: Vec<Array2<bool>> = script.sprites.iter().map(|s| s.shape.mask(s.size)).collect();
    let mut data = Array4::zeros((frames, h, w, 3));
    let mut labels = Array3::<u8>::zeros((frames, h, w));
    for t in 0..frames {
        let mut frame = background.clone();
        for (k, (sprite, mask)) in script.sprites.iter().zip(&masks).enumerate() {
            let (x0, y0) = sprite.top_left(t);
            let color = sprite.color_rgb();
            for ((y, x), m) in mask.indexed_iter() {
                let (cx, cy) = (x0 + x as i32, y0 + y as i32);
                if *m && cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
                    for c in 0..3 {
                        frame[[cy as usize, cx as usize, c]] = color[c];
                    }
                    labels[[t, cy as usize, cx as usize]] = (k + 1) as u8;
                }
            }
        }
        data.index_axis_mut(Axis(0), t).assign(&frame);
    }
    let video = PixelVideo::new(data)?;
    let sketches = extract_sketch(&video)?;
    let ref_idx = reference_index(script, frames);
    let reference_frame = video.frame(ref_idx).to_owned();
    let mut instances = InstanceSet::new();
    let mut placements = Vec::new();
    for (k, (sprite, mask)) in script.sprites.iter().zip(&masks).enumerate() {
        let color = sprite.color_rgb();
        let crop = Array3::from_shape_fn((sprite.size, sprite.size, 3), |(y, x, c)| {
            if mask[[y, x]] {
                color[c]
            } else {
                0.0
            }
        });
        let id = format!("inst_{k}");
        instances.push(id.clone(), InstanceImage::with_mask(crop, mask.clone())?);
        let (x, y) = sprite.top_left(ref_idx);
        placements.push(Placement {
            instance_id: id,
            x,
            y,
            scale: 1.0,
            z_order: k as i32,
        });
    }
    let mut record = SampleRecord {
        id: format!("scene_{:016x}", script.seed),
        script: script.clone(),
        frames: video,
        sketches,
        instances,
        placements,
        background,
        reference_index: ref_idx,
        reference_frame,
        caption: String::new(),
        labels,
    };
    record.caption = build_caption(script, &record);
    Ok(record)
}

/// Scene generation and rendering in one step.
pub fn generate_record(seed: u64, config: &SceneConfig) -> Result<SampleRecord> {
    let script = generate_scene(seed, config)?;
    render_clip(&script, config.frames)
}

/// Gradient-magnitude edge map: 3×3 Sobel differences per channel (edge
/// replicated), strongest channel, thresholded at 0.2, dark lines on white.
pub fn extract_sketch(frames: &PixelVideo) -> Result<PixelVideo> {
    const THRESHOLD: f32 = 0.2;
    let (t, h, w, c) = frames.data.dim();
    let mut out = Array4::from_elem((t, h, w, c), 1.0f32);
    let at = |ti: usize, y: i64, x: i64, ch: usize| -> f32 {
        let y = y.clamp(0, h as i64 - 1) as usize;
        let x = x.clamp(0, w as i64 - 1) as usize;
        frames.data[[ti, y, x, ch]]
    };
    for ti in 0..t {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut mag = 0.0f32;
                for ch in 0..c {
                    let gx = (at(ti, y - 1, x + 1, ch) + 2.0 * at(ti, y, x + 1, ch) + at(ti, y + 1, x + 1, ch)
                        - at(ti, y - 1, x - 1, ch)
                        - 2.0 * at(ti, y, x - 1, ch)
                        - at(ti, y + 1, x - 1, ch))
                        / 4.0;
                    let gy = (at(ti, y + 1, x - 1, ch) + 2.0 * at(ti, y + 1, x, ch) + at(ti, y + 1, x + 1, ch)
                        - at(ti, y - 1, x - 1, ch)
                        - 2.0 * at(ti, y - 1, x, ch)
                        - at(ti, y - 1, x + 1, ch))
                        / 4.0;
                    mag = mag.max((gx * gx + gy * gy).sqrt());
                }
                if mag > THRESHOLD {
                    for ch in 0..c {
                        out[[ti, y as usize, x as usize, ch]] = 0.0;
                    }
                }
            }
        }
    }
    PixelVideo::new(out)
}

/// Phrase for the 3×3 grid cell holding `(cx, cy)`.
pub fn grid_phrase(cx: f32, cy: f32, width: usize, height: usize) -> &'static str {
    let col = ((cx * 3.0 / width as f32).floor() as i32).clamp(0, 2);
    let row = ((cy * 3.0 / height as f32).floor() as i32).clamp(0, 2);
    const PHRASES: [[&str; 3]; 3] = [
        ["the upper left", "the upper center", "the upper right"],
        ["the middle left", "the center", "the middle right"],
        ["the lower left", "the lower center", "the lower right"],
    ];
    PHRASES[row as usize][col as usize]
}

fn motion_phrase(sprite: &SpriteScript) -> String {
    match sprite.trajectory {
        Trajectory::Static => "stays still".into(),
        _ if sprite.speed < 0.05 => "stays still".into(),
        Trajectory::Circular { .. } => "moves in a circle".into(),
        Trajectory::Linear { angle } => {
            // image y grows downwards
            let dirs = ["right", "lower right", "down", "lower left", "left", "upper left", "up", "upper right"];
            let a = angle.rem_euclid(2.0 * PI);
            let idx = ((a / (PI / 4.0)).round() as usize) % 8;
            match dirs[idx] {
                d @ ("up" | "down") => format!("moves {d}"),
                d => format!("moves to the {d}"),
            }
        }
    }
}

fn background_phrase(style: &BackgroundStyle) -> String {
    let a = BACKGROUND_COLORS[style.primary].0;
    let b = BACKGROUND_COLORS[style.secondary].0;
    match style.kind {
        BackgroundKind::Flat => format!("a plain {a} background"),
        BackgroundKind::Gradient => format!("a {a} to {b} gradient background"),
        BackgroundKind::Checker => format!("a {a} and {b} checkered background"),
    }
}

/// Centroid of the visible pixels of sprite `k` in frame `t`.
pub fn sprite_centroid(labels: &Array3<u8>, t: usize, k: usize) -> Option<(f32, f32)> {
    let frame = labels.index_axis(Axis(0), t);
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for ((y, x), l) in frame.indexed_iter() {
        if *l as usize == k + 1 {
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            n += 1;
        }
    }
    (n > 0).then(|| ((sx / n as f64) as f32, (sy / n as f64) as f32))
}

/// Four-part caption: Location, Appearance, Motion, Background.
pub fn build_caption(script: &SceneScript, record: &SampleRecord) -> String {
    let mut location = Vec::new();
    let mut appearance = Vec::new();
    let mut motion = Vec::new();
    for (k, s) in script.sprites.iter().enumerate() {
        let name = format!("{} {}", s.color_name(), s.shape.name());
        let place = match sprite_centroid(&record.labels, record.reference_index, k) {
            Some((cx, cy)) => grid_phrase(cx, cy, script.width, script.height),
            None => "hidden",
        };
        location.push(format!("the {name} is at {place}"));
        appearance.push(format!("a {name}"));
        motion.push(format!("the {name} {}", motion_phrase(s)));
    }
    format!(
        "Location: {}. Appearance: {}. Motion: {}. Background: {}.",
        location.join("; "),
        appearance.join("; "),
        motion.join("; "),
        background_phrase(&script.background)
    )
}

/// Splits a long video into clips.
pub trait SceneSegmenter: Send + Sync {
    fn segment(&self, video: &PixelVideo) -> Result<Vec<PixelVideo>>;
}

/// Fixed-length chunking; the last clip may be shorter.
#[derive(Debug, Clone, Copy)]
pub struct ChunkSegmenter {
    pub chunk: usize,
}

impl SceneSegmenter for ChunkSegmenter {
    fn segment(&self, video: &PixelVideo) -> Result<Vec<PixelVideo>> {
        if self.chunk == 0 {
            return Err(invalid("chunk length must be positive"));
        }
        let frames = video.to_frames();
        frames
            .chunks(self.chunk)
            .map(PixelVideo::from_frames)
            .collect()
    }
}

/// Named segmentation backends. `fixed` chunks at 16 frames.
pub struct SegmenterRegistry {
    backends: BTreeMap<String, Box<dyn SceneSegmenter>>,
}

impl Default for SegmenterRegistry {
    fn default() -> Self {
        let mut r = Self {
            backends: BTreeMap::new(),
        };
        r.register("fixed", Box::new(ChunkSegmenter { chunk: 16 }));
        r
    }
}

impl SegmenterRegistry {
    pub fn register(&mut self, name: &str, backend: Box<dyn SceneSegmenter>) {
        self.backends.insert(name.to_string(), backend);
    }

    pub fn segment(&self, video: &PixelVideo, backend: &str) -> Result<Vec<PixelVideo>> {
        self.backends
            .get(backend)
            .ok_or_else(|| Error::UnknownBackend(backend.to_string()))?
            .segment(video)
    }
}

/// Top-level corpus description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub size: usize,
    pub scene: SceneConfig,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub dir: String,
    pub seed: u64,
}

/// Per-sample metadata stored next to the images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub script: SceneScript,
    pub frames: usize,
    pub reference_index: usize,
    pub placements: Vec<Placement>,
    pub caption: String,
}

/// Seed of sample `index` in a corpus drawn from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    fnv1a(&[seed.to_le_bytes(), (index as u64).to_le_bytes()].concat())
}

pub fn generate_corpus(seed: u64, size: usize, scene: &SceneConfig) -> Result<Vec<SampleRecord>> {
    (0..size)
        .map(|i| {
            let mut r = generate_record(sample_seed(seed, i), scene)?;
            r.id = format!("sample_{i:06}");
            Ok(r)
        })
        .collect()
}

pub fn write_sample(dir: &Path, record: &SampleRecord) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("sketches"))?;
    fs::create_dir_all(dir.join("instances"))?;
    for (t, f) in record.frames.to_frames().iter().enumerate() {
        imageio::write_rgb(&dir.join("frames").join(format!("{t:03}.png")), f)?;
    }
    for (t, f) in record.sketches.to_frames().iter().enumerate() {
        imageio::write_rgb(&dir.join("sketches").join(format!("{t:03}.png")), f)?;
    }
    for (k, inst) in record.instances.iter().enumerate() {
        imageio::write_rgb(&dir.join("instances").join(format!("inst_{k}.png")), &inst.image.rgb)?;
        imageio::write_mask(&dir.join("instances").join(format!("inst_{k}.mask.png")), &inst.image.mask)?;
    }
    imageio::write_rgb(&dir.join("background.png"), &record.background)?;
    imageio::write_rgb(&dir.join("reference.png"), &record.reference_frame)?;
    fs::write(dir.join("caption.txt"), &record.caption)?;
    let meta = SampleMeta {
        id: record.id.clone(),
        script: record.script.clone(),
        frames: record.frames.frames(),
        reference_index: record.reference_index,
        placements: record.placements.clone(),
        caption: record.caption.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Writes `size` samples plus `manifest.json` under `out`.
pub fn write_corpus(out: &Path, seed: u64, size: usize, scene: &SceneConfig) -> Result<Manifest> {
    fs::create_dir_all(out)?;
    let mut samples = Vec::with_capacity(size);
    for i in 0..size {
        let s = sample_seed(seed, i);
        let mut record = generate_record(s, scene)?;
        record.id = format!("sample_{i:06}");
        let dir = format!("sample_{i:06}");
        write_sample(&out.join(&dir), &record)?;
        samples.push(ManifestEntry {
            id: record.id,
            dir,
            seed: s,
        });
    }
    let manifest = Manifest {
        seed,
        size,
        scene: *scene,
        samples,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads every PNG of a directory in file-name order.
pub fn read_frame_dir(dir: &Path) -> Result<PixelVideo> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Corpus(format!("no PNG frames in {}", dir.display())));
    }
    let frames = paths
        .iter()
        .map(|p| imageio::read_rgb(p))
        .collect::<Result<Vec<_>>>()?;
    PixelVideo::from_frames(&frames)
}

/// Loads one sample directory written by [`write_sample`].
pub fn read_sample(dir: &Path) -> Result<SampleRecord> {
    let meta: SampleMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let frames = read_frame_dir(&dir.join("frames"))?;
    let sketches = read_frame_dir(&dir.join("sketches"))?;
    let mut instances = InstanceSet::new();
    for k in 0..meta.script.sprites.len() {
        let rgb = imageio::read_rgb(&dir.join("instances").join(format!("inst_{k}.png")))?;
        let mask = imageio::read_mask(&dir.join("instances").join(format!("inst_{k}.mask.png")))?;
        instances.push(format!("inst_{k}"), InstanceImage::with_mask(rgb, mask)?);
    }
    // labels are not stored; re-render them from the script
    let rendered = render_clip(&meta.script, meta.frames)?;
    Ok(SampleRecord {
        id: meta.id,
        script: meta.script,
        frames,
        sketches,
        instances,
        placements: meta.placements,
        background: imageio::read_rgb(&dir.join("background.png"))?,
        reference_index: meta.reference_index,
        reference_frame: imageio::read_rgb(&dir.join("reference.png"))?,
        caption: fs::read_to_string(dir.join("caption.txt"))?,
        labels: rendered.labels,
    })
}

/// A corpus on disk.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join("manifest.json"))
            .map_err(|e| Error::Corpus(format!("cannot read manifest in {}: {e}", root.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.samples.len() != manifest.size {
            return Err(Error::Corpus(format!(
                "manifest lists {} samples but declares {}",
                manifest.samples.len(),
                manifest.size
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(&self, index: usize) -> Result<SampleRecord> {
        let entry = self
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| Error::Corpus(format!("sample {index} out of range")))?;
        read_sample(&self.root.join(&entry.dir))
    }

    pub fn load_all(&self) -> Result<Vec<SampleRecord>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
