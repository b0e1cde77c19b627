//! Binary NetPBM (P5 grayscale, P6 RGB) reading and writing.

use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    /// Skips whitespace and `#` comments between header fields.
    fn skip_blank(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_blank();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                offset: start,
                detail: format!("{what} out of range"),
            })
    }
}

/// Decodes a P5/P6 image into a `C×H×W` array scaled to [0, 1], where `C` is
/// 1 for P5 and 3 for P6.
pub fn decode(bytes: &[u8]) -> Result<Array> {
    let mut c = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.fail("not a binary NetPBM file (expected P5 or P6)")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(c.fail(format!("empty image {width}×{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(c.fail(format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.fail("expected a single whitespace byte before the raster")),
    }
    let sample = if maxval < 256 { 1 } else { 2 };
    let count = channels * width * height;
    let raster = &bytes[c.pos..];
    if raster.len() < count * sample {
        return Err(Error::Format {
            offset: bytes.len(),
            detail: format!("raster truncated: {} of {} bytes", raster.len(), count * sample),
        });
    }
    let scale = maxval as f64;
    let mut data = vec![0.0; count];
    for i in 0..count {
        let v = if sample == 1 {
            raster[i] as usize
        } else {
            (raster[2 * i] as usize) << 8 | raster[2 * i + 1] as usize
        };
        if v > maxval {
            return Err(Error::Format {
                offset: c.pos + i * sample,
                detail: format!("sample {v} exceeds maxval {maxval}"),
            });
        }
        // interleaved HWC → planar CHW
        let (pixel, ch) = (i / channels, i % channels);
        data[ch * width * height + pixel] = v as f64 / scale;
    }
    Array::new(vec![channels, height, width], data)
}

/// Encodes a `C×H×W` array (C = 1 or 3) as 8-bit P5/P6.
pub fn encode(image: &Array) -> Result<Vec<u8>> {
    let (channels, height, width) = match *image.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => return Err(Error::dim("encode_netpbm", format!("shape {:?}", image.shape()))),
    };
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    let plane = width * height;
    for pixel in 0..plane {
        for ch in 0..channels {
            let v = image.data()[ch * plane + pixel];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Array> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { offset, detail } => Error::Format {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn write(path: &Path, image: &Array) -> Result<()> {
    std::fs::write(path, encode(image)?).map_err(|e| Error::io(path, e))
}

/// Bilinear resize of a `C×H×W` image using pixel-centre alignment.
pub fn resize_bilinear(image: &Array, height: usize, width: usize) -> Result<Array> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] if h > 0 && w > 0 => (c, h, w),
        _ => return Err(Error::dim("resize", format!("shape {:?}", image.shape()))),
    };
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(height, h);
    let xs = axis(width, w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * height * width);
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    Array::new(vec![c, height, width], out)
}

/// Converts to the requested channel count: grayscale is replicated to RGB,
/// RGB is averaged to grayscale.
pub fn to_channels(image: Array, channels: usize) -> Result<Array> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::dim("to_channels", format!("shape {:?}", image.shape()))),
    };
    let plane = h * w;
    match (c, channels) {
        (a, b) if a == b => Ok(image),
        (1, 3) => {
            let d = image.data();
            Array::new(vec![3, h, w], [d, d, d].concat())
        }
        (3, 1) => {
            let d = image.data();
            let gray = (0..plane).map(|i| (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0).collect();
            Array::new(vec![1, h, w], gray)
        }
        _ => Err(Error::Config(format!("cannot convert {c} channels to {channels}"))),
    }
}
