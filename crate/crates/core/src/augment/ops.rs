//! Grayscale image transformations of the strong-augmentation registry.
//!
//! Every op takes a magnitude `m` in `[0, 1]` (the normalized bin index) and
//! returns an image of the same shape with intensities in `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    AutoContrast,
    Brightness,
    Color,
    Contrast,
    Cutout,
    Equalize,
    Invert,
    Identity,
    Posterize,
    Rescale,
    Rotate,
    Sharpness,
    ShearX,
    ShearY,
    Smooth,
    Solarize,
    TranslateX,
    TranslateY,
}

impl Op {
    pub const ALL: [Op; 18] = [
        Op::AutoContrast,
        Op::Brightness,
        Op::Color,
        Op::Contrast,
        Op::Cutout,
        Op::Equalize,
        Op::Invert,
        Op::Identity,
        Op::Posterize,
        Op::Rescale,
        Op::Rotate,
        Op::Sharpness,
        Op::ShearX,
        Op::ShearY,
        Op::Smooth,
        Op::Solarize,
        Op::TranslateX,
        Op::TranslateY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Op::AutoContrast => "autocontrast",
            Op::Brightness => "brightness",
            Op::Color => "color",
            Op::Contrast => "contrast",
            Op::Cutout => "cutout",
            Op::Equalize => "equalize",
            Op::Invert => "invert",
            Op::Identity => "identity",
            Op::Posterize => "posterize",
            Op::Rescale => "rescale",
            Op::Rotate => "rotate",
            Op::Sharpness => "sharpness",
            Op::ShearX => "shear_x",
            Op::ShearY => "shear_y",
            Op::Smooth => "smooth",
            Op::Solarize => "solarize",
            Op::TranslateX => "translate_x",
            Op::TranslateY => "translate_y",
        }
    }

    pub fn apply(self, img: &Array2<f32>, m: f32) -> Array2<f32> {
        let m = m.clamp(0.0, 1.0);
        let out = match self {
            Op::AutoContrast => blend(img, &autocontrast(img), m),
            Op::Brightness => img.mapv(|v| v * (0.1 + 1.9 * m)),
            Op::Color => toward_mean(img, 0.1 + 0.9 * m),
            Op::Contrast => toward_mean(img, 0.1 + 1.9 * m),
            Op::Cutout => {
                let side = img.nrows();
                let size = (m * (side / 4) as f32).round() as usize;
                let at = (side - size) / 2;
                fill_square(img, at, at, size, CUTOUT_FILL)
            }
            Op::Equalize => blend(img, &equalize(img), m),
            Op::Invert => blend(img, &img.mapv(|v| 1.0 - v), m),
            Op::Identity => img.clone(),
            Op::Posterize => {
                let levels = (1u32 << (1 + (m * 7.0).round() as u32)) as f32 - 1.0;
                img.mapv(|v| (v * levels).round() / levels)
            }
            Op::Rescale => {
                let z = 1.0 + 0.5 * m;
                let (h, w) = img.dim();
                let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
                warp(img, |y, x| (cy + (y - cy) / z, cx + (x - cx) / z))
            }
            Op::Rotate => rotate180(img),
            Op::Sharpness => {
                let s = smooth3(img);
                let f = 0.1 + 1.9 * m;
                ndarray::Zip::from(&s).and(img).map_collect(|&s, &x| s + f * (x - s))
            }
            Op::ShearX => {
                let k = (2.0 * m - 1.0) * MAX_SHEAR;
                let cy = (img.nrows() as f32 - 1.0) / 2.0;
                warp(img, |y, x| (y, x + k * (y - cy)))
            }
            Op::ShearY => {
                let k = (2.0 * m - 1.0) * MAX_SHEAR;
                let cx = (img.ncols() as f32 - 1.0) / 2.0;
                warp(img, |y, x| (y + k * (x - cx), x))
            }
            Op::Smooth => blend(img, &smooth3(img), m),
            Op::Solarize => {
                let t = 1.0 - m;
                img.mapv(|v| if v >= t { 1.0 - v } else { v })
            }
            Op::TranslateX => {
                let d = (2.0 * m - 1.0) * MAX_TRANSLATE * img.ncols() as f32;
                warp(img, |y, x| (y, x - d))
            }
            Op::TranslateY => {
                let d = (2.0 * m - 1.0) * MAX_TRANSLATE * img.nrows() as f32;
                warp(img, |y, x| (y - d, x))
            }
        };
        out.mapv(|v| v.clamp(0.0, 1.0))
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Op {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Op::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown augmentation op {s:?}")))
    }
}

pub const CUTOUT_FILL: f32 = 0.5;
const MAX_SHEAR: f32 = 0.3;
/// Defects are rendered at least side/8 away from the border; a shift of at
/// most side/8 keeps their centre inside the frame.
const MAX_TRANSLATE: f32 = 0.125;

fn blend(a: &Array2<f32>, b: &Array2<f32>, t: f32) -> Array2<f32> {
    ndarray::Zip::from(a).and(b).map_collect(|&a, &b| a + t * (b - a))
}

fn toward_mean(img: &Array2<f32>, factor: f32) -> Array2<f32> {
    let mean = img.mean().unwrap_or(0.0);
    img.mapv(|v| mean + factor * (v - mean))
}

fn autocontrast(img: &Array2<f32>) -> Array2<f32> {
    let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo < 1e-6 {
        return img.clone();
    }
    img.mapv(|v| (v - lo) / (hi - lo))
}

fn equalize(img: &Array2<f32>) -> Array2<f32> {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    let mut hist = [0usize; 256];
    for &v in img {
        hist[q(v)] += 1;
    }
    let n = img.len();
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (i, h) in hist.iter().enumerate() {
        acc += h;
        cdf[i] = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return img.clone();
    }
    img.mapv(|v| (cdf[q(v)] - cdf_min) as f32 / (n - cdf_min) as f32)
}

pub(crate) fn rotate180(img: &Array2<f32>) -> Array2<f32> {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(0));
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}

pub(crate) fn mirror(img: &Array2<f32>) -> Array2<f32> {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}

/// 3x3 smoothing kernel `[1 1 1; 1 5 1; 1 1 1] / 13` with replicated borders.
fn smooth3(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 4.0 * img[[y, x]];
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                acc += img[[yy, xx]];
            }
        }
        acc / 13.0
    })
}

/// Inverse-mapped bilinear resampling with replicated borders.
fn warp(img: &Array2<f32>, src: impl Fn(f32, f32) -> (f32, f32)) -> Array2<f32> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = src(y as f32, x as f32);
        let sy = sy.clamp(0.0, (h - 1) as f32);
        let sx = sx.clamp(0.0, (w - 1) as f32);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
        let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
        let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

pub(crate) fn fill_square(img: &Array2<f32>, y0: usize, x0: usize, size: usize, value: f32) -> Array2<f32> {
    let mut out = img.clone();
    out.slice_mut(ndarray::s![y0..y0 + size, x0..x0 + size]).fill(value);
    out
}
