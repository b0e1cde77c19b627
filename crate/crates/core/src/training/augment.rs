//! Random geometric augmentation of `C×H×W` images. Pixels that fall
//! outside the source after a transform are zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip: f64,
    pub vflip: f64,
    pub shift: f64,
    pub rotate: f64,
    pub scale: f64,
    /// Largest shift as a fraction of the side.
    pub max_shift: f64,
    /// Bound of the small-angle rotation, degrees.
    pub max_angle: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.5,
            shift: 0.5,
            rotate: 0.5,
            scale: 0.5,
            max_shift: 0.125,
            max_angle: 15.0,
            scale_range: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            hflip: 0.0,
            vflip: 0.0,
            shift: 0.0,
            rotate: 0.0,
            scale: 0.0,
            ..Self::default()
        }
    }

    pub fn is_disabled(&self) -> bool {
        [self.hflip, self.vflip, self.shift, self.rotate, self.scale]
            .iter()
            .all(|&p| p <= 0.0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Remaps every output pixel through `src(y, x)`; `None` means zero.
fn remap(img: &[f64], d: Dims, src: impl Fn(usize, usize) -> Option<(usize, usize)>) -> Vec<f64> {
    let plane = d.h * d.w;
    let mut out = vec![0.0; img.len()];
    for y in 0..d.h {
        for x in 0..d.w {
            if let Some((sy, sx)) = src(y, x) {
                for ch in 0..d.c {
                    out[ch * plane + y * d.w + x] = img[ch * plane + sy * d.w + sx];
                }
            }
        }
    }
    out
}

pub fn hflip(img: &[f64], d: Dims) -> Vec<f64> {
    remap(img, d, |y, x| Some((y, d.w - 1 - x)))
}

pub fn vflip(img: &[f64], d: Dims) -> Vec<f64> {
    remap(img, d, |y, x| Some((d.h - 1 - y, x)))
}

pub fn shift(img: &[f64], d: Dims, dy: isize, dx: isize) -> Vec<f64> {
    remap(img, d, |y, x| {
        let sy = y as isize - dy;
        let sx = x as isize - dx;
        ((0..d.h as isize).contains(&sy) && (0..d.w as isize).contains(&sx)).then_some((sy as usize, sx as usize))
    })
}

/// Nearest-neighbour affine map about the image centre: the output pixel at
/// offset `u` from the centre samples the source at `m·u`.
fn affine(img: &[f64], d: Dims, m: [[f64; 2]; 2]) -> Vec<f64> {
    let cy = (d.h as f64 - 1.0) / 2.0;
    let cx = (d.w as f64 - 1.0) / 2.0;
    remap(img, d, |y, x| {
        let (uy, ux) = (y as f64 - cy, x as f64 - cx);
        let sy = (m[0][0] * uy + m[0][1] * ux + cy).round();
        let sx = (m[1][0] * uy + m[1][1] * ux + cx).round();
        (sy >= 0.0 && sx >= 0.0 && sy < d.h as f64 && sx < d.w as f64).then_some((sy as usize, sx as usize))
    })
}

/// Rotation by `degrees` counter-clockwise.
pub fn rotate(img: &[f64], d: Dims, degrees: f64) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    // snap the exact quarter turns so they are pure permutations
    let snap = |v: f64| if (v - v.round()).abs() < 1e-12 { v.round() } else { v };
    let (s, c) = (snap(s), snap(c));
    affine(img, d, [[c, -s], [s, c]])
}

/// Zoom by `factor` about the centre; factors above 1 crop, below 1 pad.
pub fn scale(img: &[f64], d: Dims, factor: f64) -> Vec<f64> {
    let inv = 1.0 / factor;
    affine(img, d, [[inv, 0.0], [0.0, inv]])
}

/// Applies each enabled transform independently with its probability.
pub fn augment<R: Rng>(img: &[f64], d: Dims, cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let mut out = img.to_vec();
    if rng.gen::<f64>() < cfg.hflip {
        out = hflip(&out, d);
    }
    if rng.gen::<f64>() < cfg.vflip {
        out = vflip(&out, d);
    }
    if rng.gen::<f64>() < cfg.shift {
        let my = (cfg.max_shift * d.h as f64).floor() as isize;
        let mx = (cfg.max_shift * d.w as f64).floor() as isize;
        let dy = rng.gen_range(-my..=my);
        let dx = rng.gen_range(-mx..=mx);
        out = shift(&out, d, dy, dx);
    }
    if rng.gen::<f64>() < cfg.rotate {
        let angle = match rng.gen_range(0..3) {
            0 => 90.0,
            1 => -90.0,
            _ => rng.gen_range(-cfg.max_angle..=cfg.max_angle),
        };
        out = rotate(&out, d, angle);
    }
    if rng.gen::<f64>() < cfg.scale {
        let (lo, hi) = cfg.scale_range;
        out = scale(&out, d, rng.gen_range(lo..=hi));
    }
    out
}
