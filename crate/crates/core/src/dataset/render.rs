//! Procedural SEM-like renderers: one background per domain, one defect per class.
//!
//! All size parameters are given for a 128-pixel image and scaled linearly
//! (areas quadratically) to the requested side.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub(crate) fn render<R: Rng>(domain: u8, class: u8, side: usize, rng: &mut R) -> Array2<f32> {
    let mut img = match domain {
        0 => plain_background(side, rng),
        1 => striped_background(side, rng),
        _ => rectangle_background(side, rng),
    };
    if class == 0 {
        add_particle(&mut img, rng);
    } else {
        add_point(&mut img, rng);
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

fn scale(side: usize) -> f32 {
    side as f32 / 128.0
}

fn white_noise<R: Rng>(side: usize, sigma: f32, rng: &mut R) -> Array2<f32> {
    let normal = Normal::new(0.0f32, sigma).unwrap();
    Array2::from_shape_simple_fn((side, side), || normal.sample(rng))
}

/// Separable box filter with clamped borders.
pub(crate) fn box_blur(img: &Array2<f32>, radius: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    let norm = 1.0 / (2 * radius + 1) as f32;
    let r = radius as isize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                acc += img[[y, xx]];
            }
            tmp[[y, x]] = acc * norm;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                acc += tmp[[yy, x]];
            }
            out[[y, x]] = acc * norm;
        }
    }
    out
}

fn base_level<R: Rng>(rng: &mut R) -> f32 {
    rng.random_range(0.30..0.40)
}

/// Domain 0: low-amplitude low-pass noise.
fn plain_background<R: Rng>(side: usize, rng: &mut R) -> Array2<f32> {
    let base = base_level(rng);
    let radius = ((2.0 * scale(side)).round() as usize).max(1);
    let coarse = box_blur(&white_noise(side, 1.0, rng), radius);
    let std = (coarse.mapv(|v| v * v).mean().unwrap()).sqrt().max(1e-6);
    let fine = white_noise(side, 0.012, rng);
    coarse.mapv(|v| base + 0.03 * v / std) + fine
}

/// Domain 1: sinusoidal horizontal stripes.
fn striped_background<R: Rng>(side: usize, rng: &mut R) -> Array2<f32> {
    let base = base_level(rng);
    let amp = rng.random_range(0.02..0.09f32);
    let period = (rng.random_range(6.0..12.0f32) * scale(side)).max(3.0);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let noise = white_noise(side, 0.015, rng);
    Array2::from_shape_fn((side, side), |(y, x)| {
        base + amp * (std::f32::consts::TAU * y as f32 / period + phase).sin() + noise[[y, x]]
    })
}

/// Domain 2: overlapping rectangles of random size, position and contrast.
fn rectangle_background<R: Rng>(side: usize, rng: &mut R) -> Array2<f32> {
    let base = base_level(rng);
    let mut img = white_noise(side, 0.015, rng);
    img.mapv_inplace(|v| v + base);
    let n = rng.random_range(4..=9);
    for _ in 0..n {
        let w = rng.random_range(side / 10..=side / 2).max(2);
        let h = rng.random_range(side / 10..=side / 2).max(2);
        let x0 = rng.random_range(0..=side - w);
        let y0 = rng.random_range(0..=side - h);
        let mag = rng.random_range(0.04..0.09f32);
        let delta = if rng.random_bool(0.5) { mag } else { -mag };
        img.slice_mut(ndarray::s![y0..y0 + h, x0..x0 + w])
            .mapv_inplace(|v| v + delta);
    }
    img
}

fn defect_center<R: Rng>(side: usize, rng: &mut R) -> (usize, usize) {
    let m = side / 8;
    (rng.random_range(m..side - m), rng.random_range(m..side - m))
}

/// Particle: a 4-connected random-walk blob of 30–200 pixels (at side 128).
fn add_particle<R: Rng>(img: &mut Array2<f32>, rng: &mut R) {
    let side = img.nrows();
    let k = scale(side);
    let target = ((rng.random_range(30.0..=200.0f32) * k * k).round() as usize).max(3);
    let offset = rng.random_range(0.35..0.55f32);
    let (mut x, mut y) = defect_center(side, rng);
    let mut mask = Array2::from_elem((side, side), false);
    let mut count = 0;
    let mut budget = target * 200;
    while count < target && budget > 0 {
        budget -= 1;
        if !mask[[y, x]] {
            mask[[y, x]] = true;
            count += 1;
        }
        match rng.random_range(0..4) {
            0 => x += 1,
            1 => x = x.saturating_sub(1),
            2 => y += 1,
            _ => y = y.saturating_sub(1),
        }
        x = x.clamp(1, side - 2);
        y = y.clamp(1, side - 2);
    }
    for ((y, x), &on) in mask.indexed_iter() {
        if on {
            img[[y, x]] += offset * rng.random_range(0.9..=1.0f32);
        }
    }
}

/// Point: a Gaussian spot of radius 3–9 pixels (at side 128), sigma = radius / 3.
fn add_point<R: Rng>(img: &mut Array2<f32>, rng: &mut R) {
    let side = img.nrows();
    let radius = rng.random_range(3.0..=9.0f32) * scale(side);
    let sigma = radius / 3.0;
    let amp = rng.random_range(0.35..0.55f32);
    let (cx, cy) = defect_center(side, rng);
    let (cx, cy) = (cx as f32 + rng.random::<f32>(), cy as f32 + rng.random::<f32>());
    let reach = radius.ceil() as isize + 1;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let (px, py) = (cx as isize + dx, cy as isize + dy);
            if px < 0 || py < 0 || px >= side as isize || py >= side as isize {
                continue;
            }
            let d2 = (px as f32 - cx).powi(2) + (py as f32 - cy).powi(2);
            if d2 <= radius * radius {
                img[[py as usize, px as usize]] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_blur_preserves_constants() {
        let img = Array2::from_elem((9, 9), 0.3f32);
        let b = box_blur(&img, 2);
        assert!(b.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn rendered_images_are_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 0..3 {
            for c in 0..2 {
                let img = render(d, c, 32, &mut rng);
                assert_eq!(img.dim(), (32, 32));
                assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
