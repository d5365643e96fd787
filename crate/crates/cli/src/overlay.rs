use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{ensure, Result};
use cipa_core::Tensor;

pub const TRUE_POSITIVE: [u8; 3] = [0, 255, 0];
pub const FALSE_POSITIVE: [u8; 3] = [255, 0, 0];
pub const FALSE_NEGATIVE: [u8; 3] = [0, 0, 255];

/// RGB pixels: the grey `[0, 255]` base where prediction and truth agree on
/// background, the confusion colours elsewhere.
pub fn overlay_pixels(base: &Tensor<f32>, pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<Vec<u8>> {
    ensure!(
        base.shape() == pred.shape() && pred.shape() == truth.shape(),
        "overlay planes differ in shape: {:?}, {:?}, {:?}",
        base.shape(),
        pred.shape(),
        truth.shape()
    );
    let mut rgb = Vec::with_capacity(base.numel() * 3);
    for ((&b, &p), &t) in base.data().iter().zip(pred.data()).zip(truth.data()) {
        let px = match (p == 1.0, t == 1.0) {
            (true, true) => TRUE_POSITIVE,
            (true, false) => FALSE_POSITIVE,
            (false, true) => FALSE_NEGATIVE,
            (false, false) => [b.clamp(0.0, 255.0).round() as u8; 3],
        };
        rgb.extend_from_slice(&px);
    }
    Ok(rgb)
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(rgb)?;
    Ok(())
}

pub fn write_mask_png(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = mask.data().iter().map(|&v| if v == 1.0 { 255 } else { 0 }).collect();
    enc.write_header()?.write_image_data(&data)?;
    Ok(())
}
