//! Differentiable multi-scale SSIM on `(N, 1, H, W)` batches in [0,1].

use defectda_tensor::{Conv2dOpts, Elem, Var};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const WINDOW: usize = 7;
pub const SIGMA: f64 = 1.5;
pub const MIN_SIDE: usize = 32;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
/// Per-scale exponents of the five-scale reference pyramid.
pub const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Lower clamp on the contrast-structure factors before exponentiation.
pub const CS_FLOOR: f64 = 1e-6;

/// Scale count for an image side: 3 from 64 up, 2 at 32.
pub fn num_scales(side: usize) -> Result<usize> {
    match side {
        s if s < MIN_SIDE => Err(Error::InvalidSide(s)),
        s if s < 64 => Ok(2),
        _ => Ok(3),
    }
}

/// Exponents for `m` scales, renormalized to sum to one.
pub fn scale_weights(m: usize) -> Vec<f64> {
    let w = &SCALE_WEIGHTS[..m];
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps() -> Vec<f64> {
    let c = (WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn window<T: Elem>() -> Var<T> {
    let g = gaussian_taps();
    let w = ArrayD::from_shape_fn(IxDyn(&[1, 1, WINDOW, WINDOW]), |ix| T::of(g[ix[2]] * g[ix[3]]));
    Var::constant(w)
}

/// Per-image (luminance * cs, cs) means over the valid window positions.
fn ssim_parts<T: Elem>(x: &Var<T>, y: &Var<T>, win: &Var<T>) -> (Var<T>, Var<T>) {
    let blur = |v: &Var<T>| v.conv2d(win, None, Conv2dOpts::new(1, 0, 1));
    let (c1, c2) = (T::of(K1 * K1), T::of(K2 * K2));
    let two = T::of(2.0);
    let (mx, my) = (blur(x), blur(y));
    let (mx2, my2, mxy) = (mx.square(), my.square(), mx.mul(&my));
    let sx = blur(&x.square()).sub(&mx2);
    let sy = blur(&y.square()).sub(&my2);
    let sxy = blur(&x.mul(y)).sub(&mxy);
    let lum = mxy.mul_scalar(two).add_scalar(c1).div(&mx2.add(&my2).add_scalar(c1));
    let cs = sxy.mul_scalar(two).add_scalar(c2).div(&sx.add(&sy).add_scalar(c2));
    let per_image = |m: &Var<T>| m.mean_axes(&[1, 2, 3], false);
    (per_image(&lum.mul(&cs)), per_image(&cs))
}

/// Batch-mean MS-SSIM. Each per-scale factor is clamped to `[CS_FLOOR, 1]`
/// so fractional exponents stay defined.
pub fn ms_ssim<T: Elem>(x: &Var<T>, y: &Var<T>) -> Result<Var<T>> {
    if x.shape() != y.shape() || x.ndim() != 4 || x.shape()[1] != 1 {
        return Err(Error::InvalidArgument(format!(
            "ms_ssim expects equal (N,1,H,W) shapes, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let side = x.shape()[2].min(x.shape()[3]);
    let m = num_scales(side)?;
    let weights = scale_weights(m);
    let win = window::<T>();
    let (lo, hi) = (T::of(CS_FLOOR), T::one());
    let (mut x, mut y) = (x.clone(), y.clone());
    let mut acc: Option<Var<T>> = None;
    for (j, &w) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_parts(&x, &y, &win);
        let factor = if j + 1 == m { ssim } else { cs };
        let term = factor.clamp(lo, hi).powf(T::of(w));
        acc = Some(match acc {
            Some(a) => a.mul(&term),
            None => term,
        });
        if j + 1 < m {
            x = x.avg_pool2d(2);
            y = y.avg_pool2d(2);
        }
    }
    Ok(acc.expect("at least one scale").mean())
}
