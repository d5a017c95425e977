//! Wire documents of the HTTP service.

use std::path::Path;

use animator_core::canvas::InstanceImage;
use animator_core::codec::{Frame, PixelVideo};
use animator_core::data::read_frame_dir;
use animator_core::imageio::{decode_mask_png, decode_png, encode_png, from_u8};
use animator_core::{CanvasSpec, WeightOverrides};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::engine::{InferJob, Rejection};

/// Sketch frames, either a server-side directory of PNGs or inline base64 PNGs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SketchSource {
    Path(String),
    Frames(Vec<String>),
}

/// An instance image sent with the request instead of uploaded beforehand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineInstance {
    pub id: String,
    /// Base64 PNG; an alpha channel, if present, becomes the mask.
    pub png: String,
    #[serde(default)]
    pub mask_png: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    pub canvas: CanvasSpec,
    pub sketches: SketchSource,
    #[serde(default)]
    pub caption: String,
    #[serde(default)]
    pub weight_overrides: WeightOverrides,
    #[serde(default)]
    pub seed: u64,
    /// Reverse sampling steps; 0 picks the default stride.
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub instances: Vec<InlineInstance>,
    /// Base64 PNG background; takes precedence over `canvas.background_path`.
    #[serde(default)]
    pub background_png: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub decode_ms: f64,
    pub sample_ms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InferResponse {
    pub model_version: String,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    /// Base64 PNG per output frame.
    pub frames: Vec<String>,
    /// Ids of the instance token groups, in weight-index order.
    pub instance_order: Vec<String>,
    pub timing: Timing,
    /// The request document exactly as received.
    pub request: Box<RawValue>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeRequest {
    pub canvas: CanvasSpec,
    #[serde(default)]
    pub instances: Vec<InlineInstance>,
    #[serde(default)]
    pub background_png: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceCreated {
    pub instance_id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

pub fn decode_base64(field: &str, text: &str) -> Result<Vec<u8>, Rejection> {
    STANDARD
        .decode(text.trim())
        .map_err(|e| Rejection::new(field, format!("invalid base64: {e}")))
}

pub fn encode_base64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

/// Decodes an instance PNG. An alpha channel wins over `mask`; with neither,
/// non-black pixels form the mask.
pub fn decode_instance(png: &[u8], mask: Option<&[u8]>) -> animator_core::Result<InstanceImage> {
    let img = image::load_from_memory_with_format(png, image::ImageFormat::Png)?;
    if img.color().has_alpha() {
        let rgba = img.to_rgba8();
        let (w, h) = (rgba.width() as usize, rgba.height() as usize);
        let rgb = Array3::from_shape_fn((h, w, 3), |(y, x, c)| from_u8(rgba.get_pixel(x as u32, y as u32)[c]));
        let alpha = Array2::from_shape_fn((h, w), |(y, x)| rgba.get_pixel(x as u32, y as u32)[3] >= 128);
        return InstanceImage::with_mask(rgb, alpha);
    }
    let rgb = decode_png(png)?;
    match mask {
        Some(m) => InstanceImage::with_mask(rgb, decode_mask_png(m)?),
        None => Ok(InstanceImage::from_rgb(rgb)),
    }
}

pub fn decode_inline_instances(
    list: &[InlineInstance],
    field: &str,
) -> Result<Vec<(String, InstanceImage)>, Rejection> {
    list.iter()
        .enumerate()
        .map(|(i, inst)| {
            let png = decode_base64(&format!("{field}[{i}].png"), &inst.png)?;
            let mask = match &inst.mask_png {
                Some(m) => Some(decode_base64(&format!("{field}[{i}].mask_png"), m)?),
                None => None,
            };
            let image = decode_instance(&png, mask.as_deref())
                .map_err(|e| Rejection::new(format!("{field}[{i}]"), e.to_string()))?;
            Ok((inst.id.clone(), image))
        })
        .collect()
}

pub fn decode_frame(field: &str, text: &str) -> Result<Frame, Rejection> {
    let bytes = decode_base64(field, text)?;
    decode_png(&bytes).map_err(|e| Rejection::new(field, e.to_string()))
}

/// Resolves the canvas background from inline bytes or `background_path`.
pub fn resolve_canvas(
    mut canvas: CanvasSpec,
    background_png: Option<&str>,
    root: &Path,
) -> Result<CanvasSpec, Rejection> {
    if let Some(b64) = background_png {
        canvas.background = Some(decode_frame("background_png", b64)?);
    } else {
        canvas
            .resolve_background(root)
            .map_err(|e| Rejection::new("canvas.background_path", e.to_string()))?;
    }
    Ok(canvas)
}

/// Decodes everything except the instances, which may come from a store.
pub fn decode_job(req: &InferRequest, root: &Path) -> Result<InferJob, Rejection> {
    let canvas = resolve_canvas(req.canvas.clone(), req.background_png.as_deref(), root)?;
    let sketches = match &req.sketches {
        SketchSource::Path(p) => {
            let path = root.join(p);
            read_frame_dir(&path).map_err(|e| Rejection::new("sketches.path", e.to_string()))?
        }
        SketchSource::Frames(list) => {
            if list.is_empty() {
                return Err(Rejection::new("sketches.frames", "at least one frame is required"));
            }
            let frames = list
                .iter()
                .enumerate()
                .map(|(t, f)| decode_frame(&format!("sketches.frames[{t}]"), f))
                .collect::<Result<Vec<_>, _>>()?;
            PixelVideo::from_frames(&frames).map_err(|e| Rejection::new("sketches.frames", e.to_string()))?
        }
    };
    Ok(InferJob {
        canvas,
        sketches,
        caption: req.caption.clone(),
        overrides: req.weight_overrides.clone(),
        seed: req.seed,
        steps: req.steps,
    })
}

pub fn encode_frames(video: &PixelVideo) -> animator_core::Result<Vec<String>> {
    video
        .to_frames()
        .iter()
        .map(|f| Ok(encode_base64(&encode_png(f)?)))
        .collect()
}

/// Parses a document, reporting the failing field path.
pub fn parse_document<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, Rejection> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Rejection {
            path: (path != ".").then_some(path),
            message: e.into_inner().to_string(),
        }
    })
}
