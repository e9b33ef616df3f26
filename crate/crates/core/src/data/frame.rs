//! Frame decoding, resizing, and pixel normalization.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{CrclError, Result};
use crate::tensor::Tensor;

/// An 8-bit interleaved image as decoded from disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(CrclError::Image(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, channels: 3, data })
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| CrclError::io(path, e))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder
            .read_info()
            .map_err(|e| CrclError::Image(format!("{}: {e}", path.display())))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| CrclError::Image(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| CrclError::Image(format!("{}: {e}", path.display())))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(CrclError::Image(format!("{}: expected 8-bit samples", path.display())));
        }
        let channels = info.color_type.samples();
        buf.truncate(info.width as usize * info.height as usize * channels);
        Ok(Self { width: info.width as usize, height: info.height as usize, channels, data: buf })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => return Err(CrclError::Image(format!("cannot encode {c}-channel image"))),
        };
        let file = File::create(path).map_err(|e| CrclError::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| CrclError::Image(format!("{}: {e}", path.display())))?;
        writer
            .write_image_data(&self.data)
            .map_err(|e| CrclError::Image(format!("{}: {e}", path.display())))?;
        writer
            .finish()
            .map_err(|e| CrclError::Image(format!("{}: {e}", path.display())))?;
        Ok(())
    }
}

/// A preprocessed square frame, channels-first `[3, size, size]`, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pixels: Tensor,
}

impl Frame {
    pub fn from_tensor(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
            return Err(CrclError::Shape(format!("frame must be [3, S, S], got {s:?}")));
        }
        if pixels.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(CrclError::InvalidArgument("frame pixels outside [-1, 1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }
}

/// Bilinear resize to `size × size` (half-pixel centres, edge clamping) followed
/// by the linear map `[0, 255] → [-1, 1]`.
pub fn preprocess(raw: &RawImage, size: usize) -> Result<Frame> {
    if raw.channels != 3 {
        return Err(CrclError::Image(format!("expected RGB input, got {} channels", raw.channels)));
    }
    if raw.width == 0 || raw.height == 0 || size == 0 {
        return Err(CrclError::Image("empty image".into()));
    }
    let mut out = vec![0.0; 3 * size * size];
    let sy = raw.height as f64 / size as f64;
    let sx = raw.width as f64 / size as f64;
    let taps = |o: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    for oy in 0..size {
        let (y0, y1, fy) = taps(oy, sy, raw.height);
        for ox in 0..size {
            let (x0, x1, fx) = taps(ox, sx, raw.width);
            for c in 0..3 {
                let px = |y: usize, x: usize| raw.data[(y * raw.width + x) * 3 + c] as f64;
                let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                let bot = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                out[(c * size + oy) * size + ox] = (v / 127.5 - 1.0).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(Frame { pixels: Tensor::from_parts(vec![3, size, size], out) })
}
