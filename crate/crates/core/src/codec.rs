//! Deterministic latent codec.
//!
//! A lossless space-to-depth rearrangement stands in for a learned video
//! autoencoder: every `f × f` pixel block of a frame becomes one latent cell
//! with `3·f²` channels. There is no temporal compression.

use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{invalid, Error, Result};

/// Default spatial downsample factor.
pub const DEFAULT_FACTOR: usize = 4;

/// Temporal compression of the codec. Frames map one-to-one onto latent frames.
pub const TEMPORAL_FACTOR: usize = 1;

/// An `H × W × 3` image with values in `[0, 1]`.
pub type Frame = Array3<f32>;

/// A `T × H × W × 3` clip with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVideo {
    pub data: Array4<f32>,
    /// Frames per second. Metadata only.
    pub frame_rate: f32,
}

impl PixelVideo {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let (t, _, _, c) = data.dim();
        if t == 0 {
            return Err(invalid("video must have at least one frame"));
        }
        if c != 3 {
            return Err(Error::ShapeMismatch {
                axis: "channels".into(),
                expected: 3,
                actual: c,
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            data,
            frame_rate: 8.0,
        })
    }

    /// Builds a clip from individual frames of identical shape.
    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| invalid("video must have at least one frame"))?;
        let (h, w, c) = first.dim();
        let mut data = Array4::zeros((frames.len(), h, w, c));
        for (t, f) in frames.iter().enumerate() {
            if f.dim() != (h, w, c) {
                return Err(invalid(format!(
                    "frame {t} has shape {:?}, expected {:?}",
                    f.dim(),
                    (h, w, c)
                )));
            }
            data.index_axis_mut(Axis(0), t).assign(f);
        }
        Self::new(data)
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), t)
    }

    pub fn to_frames(&self) -> Vec<Frame> {
        self.data.outer_iter().map(|f| f.to_owned()).collect()
    }
}

/// Latent clip: `T' × H' × W' × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub data: Array4<f32>,
    pub scale_factor: usize,
}

impl LatentVideo {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }

    /// Number of latent cells, i.e. tokens at patch size 1.
    pub fn cells(&self) -> usize {
        let (t, h, w, _) = self.data.dim();
        t * h * w
    }

    /// Row-major `(cells, channels)` copy of the latent.
    pub fn to_token_rows(&self) -> Vec<f32> {
        self.data.iter().copied().collect()
    }

    pub fn from_token_rows(
        rows: Vec<f32>,
        dims: (usize, usize, usize, usize),
        scale_factor: usize,
    ) -> Result<Self> {
        let data = Array4::from_shape_vec(dims, rows)
            .map_err(|e| invalid(format!("latent rows do not fit {dims:?}: {e}")))?;
        Ok(Self { data, scale_factor })
    }
}

/// Space-to-depth codec with downsample factor `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpaceToDepth {
    factor: usize,
}

impl Default for SpaceToDepth {
    fn default() -> Self {
        Self::new(DEFAULT_FACTOR)
    }
}

impl SpaceToDepth {
    pub fn new(factor: usize) -> Self {
        assert!(factor >= 1, "codec factor must be positive");
        Self { factor }
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Latent channel count for RGB input.
    pub fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let f = self.factor;
        if h % f != 0 {
            return Err(Error::NotDivisible {
                axis: "height",
                len: h,
                factor: f,
            });
        }
        if w % f != 0 {
            return Err(Error::NotDivisible {
                axis: "width",
                len: w,
                factor: f,
            });
        }
        Ok(())
    }

    pub fn encode(&self, video: &PixelVideo) -> Result<LatentVideo> {
        let (t, h, w, c) = video.data.dim();
        self.check_spatial(h, w)?;
        let f = self.factor;
        let (hl, wl) = (h / f, w / f);
        let mut out = Array4::zeros((t, hl, wl, c * f * f));
        for ((ti, y, x, ch), v) in video.data.indexed_iter() {
            let (i, di) = (y / f, y % f);
            let (j, dj) = (x / f, x % f);
            out[[ti, i, j, ch * f * f + di * f + dj]] = *v;
        }
        Ok(LatentVideo {
            data: out,
            scale_factor: f,
        })
    }

    pub fn decode(&self, latent: &LatentVideo) -> Result<PixelVideo> {
        let f = self.factor;
        let (t, hl, wl, d) = latent.data.dim();
        if d % (f * f) != 0 {
            return Err(Error::NotDivisible {
                axis: "channels",
                len: d,
                factor: f * f,
            });
        }
        let c = d / (f * f);
        let mut out = Array4::zeros((t, hl * f, wl * f, c));
        for ((ti, i, j, k), v) in latent.data.indexed_iter() {
            let (ch, r) = (k / (f * f), k % (f * f));
            let (di, dj) = (r / f, r % f);
            out[[ti, i * f + di, j * f + dj, ch]] = *v;
        }
        Ok(PixelVideo {
            data: out,
            frame_rate: 8.0,
        })
    }

    /// Encodes a single image as a one-frame latent.
    pub fn encode_image(&self, image: &Frame) -> Result<LatentVideo> {
        let data = image.clone().insert_axis(Axis(0));
        let (h, w) = (image.dim().0, image.dim().1);
        self.check_spatial(h, w)?;
        self.encode(&PixelVideo {
            data,
            frame_rate: 8.0,
        })
    }
}

/// Zero-pads an image on the bottom/right so both sides are multiples of `f`.
pub fn pad_to_multiple(image: &Frame, f: usize) -> Frame {
    let (h, w, c) = image.dim();
    let (hp, wp) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
    if (hp, wp) == (h, w) {
        return image.clone();
    }
    let mut out = Array3::zeros((hp, wp, c));
    out.slice_mut(ndarray::s![..h, ..w, ..]).assign(image);
    out
}
