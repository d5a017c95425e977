//! Canvas guidance: composing reference instances onto a blank canvas,
//! building the canvas/background condition clip, and channel fusion of the
//! noise, sketch and canvas latents.

use std::path::Path;

use ndarray::{concatenate, s, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::codec::{Frame, LatentVideo, PixelVideo};
use crate::error::{invalid, mismatch, Error, Result};
use crate::imageio;

/// A reference instance: RGB crop plus a binary alpha mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceImage {
    pub rgb: Frame,
    pub mask: Array2<bool>,
}

impl InstanceImage {
    /// Alpha is taken from the non-black pixels of the crop.
    pub fn from_rgb(rgb: Frame) -> Self {
        let (h, w, _) = rgb.dim();
        let mask = Array2::from_shape_fn((h, w), |(y, x)| {
            (0..3).any(|c| rgb[[y, x, c]] > 0.0)
        });
        Self { rgb, mask }
    }

    pub fn with_mask(rgb: Frame, mask: Array2<bool>) -> Result<Self> {
        let (h, w, _) = rgb.dim();
        if mask.dim() != (h, w) {
            return Err(invalid(format!(
                "mask shape {:?} does not match image {:?}",
                mask.dim(),
                (h, w)
            )));
        }
        Ok(Self { rgb, mask })
    }

    pub fn height(&self) -> usize {
        self.rgb.dim().0
    }

    pub fn width(&self) -> usize {
        self.rgb.dim().1
    }

    /// Crop with every masked-out pixel set to black.
    pub fn masked_rgb(&self) -> Frame {
        let mut out = self.rgb.clone();
        for ((y, x), m) in self.mask.indexed_iter() {
            if !*m {
                out.slice_mut(s![y, x, ..]).fill(0.0);
            }
        }
        out
    }

    /// Mean colour over the masked pixels.
    pub fn mean_color(&self) -> [f32; 3] {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for ((y, x), m) in self.mask.indexed_iter() {
            if *m {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += self.rgb[[y, x, c]] as f64;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        [
            (acc[0] / n) as f32,
            (acc[1] / n) as f32,
            (acc[2] / n) as f32,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub image: InstanceImage,
}

/// Ordered collection of reference instances.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceSet {
    pub items: Vec<Instance>,
}

impl InstanceSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: impl Into<String>, image: InstanceImage) {
        self.items.push(Instance {
            id: id.into(),
            image,
        });
    }

    pub fn get(&self, id: &str) -> Option<&InstanceImage> {
        self.items.iter().find(|i| i.id == id).map(|i| &i.image)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Instance> {
        self.items.iter()
    }
}

/// One instance placed on the canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub instance_id: String,
    pub x: i32,
    pub y: i32,
    #[serde(default = "one")]
    pub scale: f32,
    #[serde(default)]
    pub z_order: i32,
}

fn one() -> f32 {
    1.0
}

/// The user-facing composition document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_path: Option<String>,
    #[serde(default)]
    pub placements: Vec<Placement>,
    /// Resolved background image; loaded from `background_path` or supplied inline.
    #[serde(skip)]
    pub background: Option<Frame>,
}

impl CanvasSpec {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            background_path: None,
            placements: Vec::new(),
            background: None,
        }
    }

    pub fn with_background(mut self, background: Frame) -> Self {
        self.background = Some(background);
        self
    }

    pub fn place(mut self, placement: Placement) -> Self {
        self.placements.push(placement);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Loads `background_path` (relative paths resolve against `base`).
    pub fn resolve_background(&mut self, base: &Path) -> Result<()> {
        if self.background.is_some() {
            return Ok(());
        }
        if let Some(p) = &self.background_path {
            let path = if Path::new(p).is_absolute() {
                Path::new(p).to_path_buf()
            } else {
                base.join(p)
            };
            self.background = Some(imageio::read_rgb(&path)?);
        }
        Ok(())
    }

    pub fn validate(&self, factor: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid("canvas dimensions must be positive"));
        }
        if self.height % factor != 0 {
            return Err(Error::NotDivisible {
                axis: "height",
                len: self.height,
                factor,
            });
        }
        if self.width % factor != 0 {
            return Err(Error::NotDivisible {
                axis: "width",
                len: self.width,
                factor,
            });
        }
        for p in &self.placements {
            if !(p.scale > 0.0 && p.scale.is_finite()) {
                return Err(invalid(format!(
                    "placement of `{}` has non-positive scale {}",
                    p.instance_id, p.scale
                )));
            }
        }
        Ok(())
    }

    /// Placements in paint order: ascending z-order, ties broken by content so
    /// the result never depends on list order.
    pub fn paint_order(&self) -> Vec<&Placement> {
        let mut order: Vec<&Placement> = self.placements.iter().collect();
        order.sort_by(|a, b| {
            a.z_order
                .cmp(&b.z_order)
                .then_with(|| a.instance_id.cmp(&b.instance_id))
                .then_with(|| a.y.cmp(&b.y))
                .then_with(|| a.x.cmp(&b.x))
                .then_with(|| a.scale.total_cmp(&b.scale))
        });
        order
    }
}

/// Resampling used when scaling an instance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    #[default]
    Nearest,
    Bilinear,
}

fn scaled_len(len: usize, scale: f32) -> usize {
    (len as f32 * scale).round().max(0.0) as usize
}

fn nearest_src(dst: usize, scale: f32, len: usize) -> usize {
    (((dst as f32 + 0.5) / scale).floor() as usize).min(len - 1)
}

fn bilinear(img: &Frame, sy: f32, sx: f32, c: usize) -> f32 {
    let (h, w, _) = img.dim();
    let y = (sy - 0.5).clamp(0.0, (h - 1) as f32);
    let x = (sx - 0.5).clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = img[[y0, x0, c]] * (1.0 - fx) + img[[y0, x1, c]] * fx;
    let bot = img[[y1, x0, c]] * (1.0 - fx) + img[[y1, x1, c]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Composes the reference canvas with nearest-neighbour scaling.
pub fn compose(spec: &CanvasSpec, instances: &InstanceSet) -> Result<Frame> {
    compose_with(spec, instances, Resample::Nearest)
}

pub fn compose_with(spec: &CanvasSpec, instances: &InstanceSet, resample: Resample) -> Result<Frame> {
    if spec.width == 0 || spec.height == 0 {
        return Err(invalid("canvas dimensions must be positive"));
    }
    let (ch, cw) = (spec.height as i64, spec.width as i64);
    let mut canvas = Array3::<f32>::zeros((spec.height, spec.width, 3));
    for p in spec.paint_order() {
        let inst = instances
            .get(&p.instance_id)
            .ok_or_else(|| Error::UnknownInstance(p.instance_id.clone()))?;
        if !(p.scale > 0.0 && p.scale.is_finite()) {
            return Err(invalid(format!(
                "placement of `{}` has non-positive scale {}",
                p.instance_id, p.scale
            )));
        }
        let (ih, iw) = (inst.height(), inst.width());
        let (sh, sw) = (scaled_len(ih, p.scale), scaled_len(iw, p.scale));
        let y0 = (p.y as i64).max(0);
        let x0 = (p.x as i64).max(0);
        let y1 = (p.y as i64 + sh as i64).min(ch);
        let x1 = (p.x as i64 + sw as i64).min(cw);
        if ih == 0 || iw == 0 || y1 <= y0 || x1 <= x0 {
            tracing::warn!(
                instance = %p.instance_id,
                x = p.x,
                y = p.y,
                "placement has zero visible area; skipped"
            );
            continue;
        }
        for cy in y0..y1 {
            let dy = (cy - p.y as i64) as usize;
            let sy = nearest_src(dy, p.scale, ih);
            for cx in x0..x1 {
                let dx = (cx - p.x as i64) as usize;
                let sx = nearest_src(dx, p.scale, iw);
                if !inst.mask[[sy, sx]] {
                    continue;
                }
                for c in 0..3 {
                    canvas[[cy as usize, cx as usize, c]] = match resample {
                        Resample::Nearest => inst.rgb[[sy, sx, c]],
                        Resample::Bilinear => bilinear(
                            &inst.rgb,
                            (dy as f32 + 0.5) / p.scale,
                            (dx as f32 + 0.5) / p.scale,
                            c,
                        ),
                    };
                }
            }
        }
    }
    Ok(canvas)
}

/// Canvas/background condition clip: frame 0 is the composed canvas, the
/// remaining frames repeat the background or stay blank.
pub fn build_condition_stream(
    spec: &CanvasSpec,
    instances: &InstanceSet,
    frames: usize,
) -> Result<PixelVideo> {
    if frames == 0 {
        return Err(invalid("condition stream needs at least one frame"));
    }
    let (h, w) = (spec.height, spec.width);
    if let Some(bg) = &spec.background {
        if bg.dim() != (h, w, 3) {
            return Err(invalid(format!(
                "background shape {:?} does not match canvas {:?}",
                bg.dim(),
                (h, w, 3)
            )));
        }
    }
    let canvas = compose(spec, instances)?;
    let mut data = Array4::zeros((frames, h, w, 3));
    data.index_axis_mut(Axis(0), 0).assign(&canvas);
    if let Some(bg) = &spec.background {
        for t in 1..frames {
            data.index_axis_mut(Axis(0), t).assign(bg);
        }
    }
    PixelVideo::new(data)
}

/// Channel-wise concatenation `[noise ‖ sketch ‖ canvas]`.
pub fn fuse_conditions(
    noise: &LatentVideo,
    sketch: &LatentVideo,
    canvas: &LatentVideo,
) -> Result<LatentVideo> {
    let (t, h, w, _) = noise.dims();
    for (name, z) in [("sketch", sketch), ("canvas", canvas)] {
        let (zt, zh, zw, _) = z.dims();
        if zt != t {
            return Err(mismatch(format!("{name} frames"), t, zt));
        }
        if zh != h {
            return Err(mismatch(format!("{name} height"), h, zh));
        }
        if zw != w {
            return Err(mismatch(format!("{name} width"), w, zw));
        }
    }
    let data = concatenate(
        Axis(3),
        &[noise.data.view(), sketch.data.view(), canvas.data.view()],
    )
    .map_err(|e| invalid(e.to_string()))?;
    Ok(LatentVideo {
        data,
        scale_factor: noise.scale_factor,
    })
}

/// Splits a fused latent back into its streams given their channel widths.
pub fn split_fused(fused: &LatentVideo, widths: &[usize]) -> Result<Vec<LatentVideo>> {
    let total: usize = widths.iter().sum();
    if total != fused.channels() {
        return Err(mismatch("fused channels", total, fused.channels()));
    }
    let mut start = 0;
    Ok(widths
        .iter()
        .map(|w| {
            let part = fused.data.slice(s![.., .., .., start..start + w]).to_owned();
            start += w;
            LatentVideo {
                data: part,
                scale_factor: fused.scale_factor,
            }
        })
        .collect())
}

/// Sketch and canvas latents, temporally aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionLatents {
    pub canvas_stream: LatentVideo,
    pub sketch_stream: LatentVideo,
}

impl ConditionLatents {
    pub fn new(sketch_stream: LatentVideo, canvas_stream: LatentVideo) -> Result<Self> {
        let (a, b) = (sketch_stream.dims(), canvas_stream.dims());
        if (a.0, a.1, a.2) != (b.0, b.1, b.2) {
            return Err(invalid(format!(
                "sketch latent {a:?} and canvas latent {b:?} are not aligned"
            )));
        }
        Ok(Self {
            canvas_stream,
            sketch_stream,
        })
    }

    pub fn joint_channels(&self) -> usize {
        self.sketch_stream.channels() + self.canvas_stream.channels()
    }
}
