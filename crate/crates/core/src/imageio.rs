//! 8-bit PNG reading and writing for frames and masks.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::codec::Frame;
use crate::error::Result;

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

pub fn frame_to_image(frame: &Frame) -> RgbImage {
    let (h, w, _) = frame.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            to_u8(frame[[y, x, 0]]),
            to_u8(frame[[y, x, 1]]),
            to_u8(frame[[y, x, 2]]),
        ])
    })
}

pub fn image_to_frame(img: &RgbImage) -> Frame {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        from_u8(img.get_pixel(x as u32, y as u32)[c])
    })
}

pub fn write_rgb(path: &Path, frame: &Frame) -> Result<()> {
    frame_to_image(frame).save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

pub fn read_rgb(path: &Path) -> Result<Frame> {
    Ok(image_to_frame(&image::open(path)?.to_rgb8()))
}

pub fn write_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

pub fn encode_png(frame: &Frame) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    frame_to_image(frame).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Frame> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    Ok(image_to_frame(&img.to_rgb8()))
}

/// Decodes a PNG mask (any non-dark pixel counts as inside).
pub fn decode_mask_png(bytes: &[u8]) -> Result<Array2<bool>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}
