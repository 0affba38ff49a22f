//! Binary PPM (P6) images and letterboxing into the square network input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("image dimensions must be positive, got {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }
}

fn ferr<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    })
}

/// Parses a binary PPM with maxval 255.
pub fn parse_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return ferr(0, "not a binary PPM: expected magic \"P6\"");
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments
        let ws_start = pos;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos == ws_start {
            return ferr(pos, format!("expected whitespace before {name}"));
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return ferr(start, format!("expected decimal {name}"));
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                offset: start as u64,
                msg: format!("{name} out of range"),
            })?;
        fields[i] = v;
        if v == 0 {
            return ferr(start, format!("{name} must be positive"));
        }
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return ferr(pos - 3.min(pos), format!("only maxval 255 is supported, got {maxval}"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return ferr(pos, "expected a single whitespace byte before pixel data"),
    }
    let need = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| Error::Format {
            offset: pos as u64,
            msg: format!("{w}x{h} image is too large"),
        })?;
    let have = bytes.len() - pos;
    if have < need {
        return ferr(
            bytes.len(),
            format!("pixel data truncated: {w}x{h} needs {need} bytes, found {have}"),
        );
    }
    if have > need {
        return ferr(pos + need, format!("{} unexpected bytes after pixel data", have - need));
    }
    RgbImage::new(w, h, bytes[pos..].to_vec())
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(path: impl AsRef<std::path::Path>) -> Result<RgbImage> {
    let p = path.as_ref();
    let bytes = std::fs::read(p).map_err(|e| Error::Input(format!("cannot open {}: {e}", p.display())))?;
    parse_ppm(&bytes)
}

/// Mapping between source-image pixels and letterboxed network-input pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: usize,
    pub pad_y: usize,
    pub new_w: usize,
    pub new_h: usize,
    pub src_w: usize,
    pub src_h: usize,
    pub target: usize,
}

impl LetterboxTransform {
    pub fn new(src_w: usize, src_h: usize, target: usize) -> Result<Self> {
        if src_w == 0 || src_h == 0 || target == 0 {
            return Err(Error::Input(format!(
                "cannot letterbox a {src_w}x{src_h} image into {target}"
            )));
        }
        let scale = (target as f64 / src_h as f64).min(target as f64 / src_w as f64);
        let new_w = ((src_w as f64 * scale).round() as usize).clamp(1, target);
        let new_h = ((src_h as f64 * scale).round() as usize).clamp(1, target);
        Ok(LetterboxTransform {
            scale,
            pad_x: (target - new_w) / 2,
            pad_y: (target - new_h) / 2,
            new_w,
            new_h,
            src_w,
            src_h,
            target,
        })
    }

    pub fn forward_point(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_x as f64, y * self.scale + self.pad_y as f64)
    }

    pub fn inverse_point(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x as f64) / self.scale, (y - self.pad_y as f64) / self.scale)
    }
}

pub const PAD_VALUE: f32 = 114.0 / 255.0;

/// Aspect-preserving bilinear resize into a `target` square padded with 114/255.
pub fn letterbox(img: &RgbImage, target: usize) -> Result<(Tensor<f32>, LetterboxTransform)> {
    let t = LetterboxTransform::new(img.width, img.height, target)?;
    let mut out = Tensor::filled(1, 3, target, target, PAD_VALUE)?;
    let sx = img.width as f64 / t.new_w as f64;
    let sy = img.height as f64 / t.new_h as f64;
    let identity = t.new_w == img.width && t.new_h == img.height;
    // per-axis sample positions and weights
    let axis = |n: usize, src: usize, s: f64| -> Vec<(usize, usize, f32)> {
        (0..n)
            .map(|i| {
                let f = ((i as f64 + 0.5) * s - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = f.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (f - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = axis(t.new_w, img.width, sx);
    let ys = axis(t.new_h, img.height, sy);
    for c in 0..3 {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v = if identity {
                    img.get(ox, oy, c) as f32
                } else {
                    let a = img.get(x0, y0, c) as f32;
                    let b = img.get(x1, y0, c) as f32;
                    let d = img.get(x0, y1, c) as f32;
                    let e = img.get(x1, y1, c) as f32;
                    let top = a + (b - a) * fx;
                    let bot = d + (e - d) * fx;
                    top + (bot - top) * fy
                };
                out.set(0, c, oy + t.pad_y, ox + t.pad_x, v / 255.0);
            }
        }
    }
    Ok((out, t))
}
