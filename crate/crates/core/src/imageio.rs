//! Image exchange: 8-bit RGB PNG (lossy quantization) and MTEN (lossless).
//! Images are `[H, W, 3]` tensors with values in `[0, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mten;
use crate::tensor::Tensor;

pub fn check_image(t: &Tensor<f32>) -> Result<()> {
    if t.rank() != 3 || t.shape()[2] != 3 {
        return Err(Error::Dims(format!(
            "image must be [H, W, 3], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

pub fn write_png(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    check_image(img)?;
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let file = File::create(path.as_ref())?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Missing {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    let mut data = Vec::with_capacity(h * w * 3);
    for px in bytes.chunks_exact(channels) {
        match channels {
            1 | 2 => data.extend([px[0]; 3].iter().map(|&b| b as f32 / 255.0)),
            _ => data.extend(px[..3].iter().map(|&b| b as f32 / 255.0)),
        }
    }
    Tensor::new(vec![h, w, 3], data)
}

/// Read an image from `.png` or `.mten` by extension.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path)?,
        _ => mten::read(path)?,
    };
    check_image(&img)?;
    Ok(img)
}
