//! Weak (mirror) and strong (CTAugment + Cutout) augmentation.

mod ops;

use std::fmt::Write as _;

use defectda_tensor::par;
use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};
use rand::Rng;

pub use ops::{Op, CUTOUT_FILL};

use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_MIRROR_P: f64 = 0.5;
pub const DEFAULT_BINS: usize = 17;
pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_FLOOR: f64 = 0.05;
/// Number of registry ops sampled per strong view.
pub const OPS_PER_SAMPLE: usize = 2;

/// Mirrors the image left-right with probability `p`.
pub fn weak_augment<R: Rng>(img: &Array2<f32>, p: f64, rng: &mut R) -> Array2<f32> {
    if rng.random_bool(p) {
        ops::mirror(img)
    } else {
        img.clone()
    }
}

/// Fills one `side/4` square, fully inside the image, with mid-gray.
pub fn cutout<R: Rng>(img: &Array2<f32>, rng: &mut R) -> Result<Array2<f32>> {
    let (y, x, size) = cutout_square(img.nrows(), rng)?;
    Ok(ops::fill_square(img, y, x, size, CUTOUT_FILL))
}

/// Top-left corner and edge length of a random cutout square.
pub fn cutout_square<R: Rng>(side: usize, rng: &mut R) -> Result<(usize, usize, usize)> {
    if side < 4 || side % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "cutout needs a side divisible by 4, got {side}"
        )));
    }
    let size = side / 4;
    Ok((rng.random_range(0..=side - size), rng.random_range(0..=side - size), size))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AppliedOp {
    pub op: Op,
    /// Magnitude bin; `None` for the fixed trailing Cutout.
    pub bin: Option<usize>,
}

/// Learned magnitude-bin weights per registry op.
#[derive(Clone, Debug, PartialEq)]
pub struct CtAugment {
    ops: Vec<Op>,
    weights: Vec<Vec<f64>>,
    pub decay: f64,
    pub floor: f64,
}

impl Default for CtAugment {
    fn default() -> Self {
        CtAugment::new(Op::ALL.to_vec(), DEFAULT_BINS, DEFAULT_DECAY, DEFAULT_FLOOR)
    }
}

impl CtAugment {
    /// Uniform state: every bin weight starts at 1.
    pub fn new(ops: Vec<Op>, bins: usize, decay: f64, floor: f64) -> Self {
        let weights = vec![vec![1.0; bins.max(1)]; ops.len()];
        CtAugment { ops, weights, decay, floor }
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn bins(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn weights(&self, op: Op) -> Option<&[f64]> {
        let i = self.ops.iter().position(|&o| o == op)?;
        Some(&self.weights[i])
    }

    fn magnitude(&self, bin: usize) -> f32 {
        let bins = self.bins();
        if bins <= 1 {
            0.5
        } else {
            bin as f32 / (bins - 1) as f32
        }
    }

    /// Draws a bin proportionally to its weight among bins at or above the
    /// floor; falls back to a uniform draw when every bin is below it.
    fn sample_bin<R: Rng>(&self, op_idx: usize, rng: &mut R) -> usize {
        let w = &self.weights[op_idx];
        let total: f64 = w.iter().filter(|&&v| v >= self.floor).sum();
        if total <= 0.0 {
            return rng.random_range(0..w.len());
        }
        let mut u = rng.random::<f64>() * total;
        let mut last = 0;
        for (b, &v) in w.iter().enumerate() {
            if v < self.floor {
                continue;
            }
            last = b;
            if u < v {
                return b;
            }
            u -= v;
        }
        last
    }

    /// Applies two uniformly chosen registry ops, then Cutout.
    pub fn strong_augment<R: Rng>(&self, img: &Array2<f32>, rng: &mut R) -> Result<(Array2<f32>, Vec<AppliedOp>)> {
        if self.ops.is_empty() {
            return Err(Error::InvalidArgument("augmentation registry is empty".into()));
        }
        let mut out = img.clone();
        let mut applied = Vec::with_capacity(OPS_PER_SAMPLE + 1);
        for _ in 0..OPS_PER_SAMPLE {
            let i = rng.random_range(0..self.ops.len());
            let bin = self.sample_bin(i, rng);
            out = self.ops[i].apply(&out, self.magnitude(bin));
            applied.push(AppliedOp { op: self.ops[i], bin: Some(bin) });
        }
        out = cutout(&out, rng)?;
        applied.push(AppliedOp { op: Op::Cutout, bin: None });
        Ok((out, applied))
    }

    /// `w <- decay * w + (1 - decay) * match_score` for every applied (op, bin).
    pub fn update(&mut self, applied: &[AppliedOp], match_score: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&match_score) {
            return Err(Error::InvalidArgument(format!(
                "match score must lie in [0, 1], got {match_score}"
            )));
        }
        for a in applied {
            let (Some(bin), Some(i)) = (a.bin, self.ops.iter().position(|&o| o == a.op)) else {
                continue;
            };
            let w = &mut self.weights[i][bin];
            *w = self.decay * *w + (1.0 - self.decay) * match_score;
        }
        Ok(())
    }

    /// Plain-text `op,bin_index,weight` table.
    pub fn to_table(&self) -> String {
        let mut s = String::from("op,bin_index,weight\n");
        for (op, w) in self.ops.iter().zip(&self.weights) {
            for (b, v) in w.iter().enumerate() {
                let _ = writeln!(s, "{op},{b},{v}");
            }
        }
        s
    }

    pub fn from_table(text: &str, decay: f64, floor: f64) -> Result<Self> {
        let bad = |msg: String| Error::InvalidArgument(format!("augment state: {msg}"));
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("op,bin_index,weight") {
            return Err(bad("missing header".into()));
        }
        let mut ops: Vec<Op> = Vec::new();
        let mut weights: Vec<Vec<f64>> = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(format!("bad row {line:?}")));
            }
            let op: Op = f[0].trim().parse()?;
            let bin: usize = f[1].trim().parse().map_err(|_| bad(format!("bad bin in {line:?}")))?;
            let w: f64 = f[2].trim().parse().map_err(|_| bad(format!("bad weight in {line:?}")))?;
            if !(0.0..=1.0).contains(&w) {
                return Err(bad(format!("weight {w} outside [0, 1]")));
            }
            let i = match ops.iter().position(|&o| o == op) {
                Some(i) => i,
                None => {
                    ops.push(op);
                    weights.push(Vec::new());
                    ops.len() - 1
                }
            };
            if bin != weights[i].len() {
                return Err(bad(format!("bins of {op} out of order")));
            }
            weights[i].push(w);
        }
        if weights.iter().any(|w| w.len() != weights[0].len()) {
            return Err(bad("ops have different bin counts".into()));
        }
        Ok(CtAugment { ops, weights, decay, floor })
    }
}

/// Weak and strong views of a batch plus the ops used for each strong view.
pub struct AugmentedBatch {
    pub weak: ArrayD<f32>,
    pub strong: ArrayD<f32>,
    pub applied: Vec<Vec<AppliedOp>>,
}

/// Augments `images` (each `side*side`) in parallel. Image `i` draws from a
/// stream keyed by `(key, i)`, so the result is independent of the execution
/// mode. The strong view is built on top of the weak (mirrored) view.
pub fn augment_batch(
    side: usize,
    images: &[&[f32]],
    state: &CtAugment,
    mirror_p: f64,
    key: &[u64],
) -> Result<AugmentedBatch> {
    let views = par::map_range(par::default_exec(), images.len(), |i| {
        let mut parts = key.to_vec();
        parts.push(i as u64);
        let mut rng = seed::rng(&parts);
        let img = ArrayView2::from_shape((side, side), images[i]).expect("image size").to_owned();
        let weak = weak_augment(&img, mirror_p, &mut rng);
        let strong = state.strong_augment(&weak, &mut rng);
        strong.map(|(s, a)| (weak, s, a))
    });
    let n = images.len();
    let mut weak = Vec::with_capacity(n * side * side);
    let mut strong = Vec::with_capacity(n * side * side);
    let mut applied = Vec::with_capacity(n);
    for v in views {
        let (w, s, a) = v?;
        weak.extend(w.iter());
        strong.extend(s.iter());
        applied.push(a);
    }
    let shape = IxDyn(&[n, 1, side, side]);
    Ok(AugmentedBatch {
        weak: ArrayD::from_shape_vec(shape.clone(), weak).expect("batch size"),
        strong: ArrayD::from_shape_vec(shape, strong).expect("batch size"),
        applied,
    })
}

/// Mirrors each image with probability `p`; image `i` uses stream `(key, i)`.
pub fn weak_batch(side: usize, images: &[&[f32]], p: f64, key: &[u64]) -> ArrayD<f32> {
    let views = par::map_range(par::default_exec(), images.len(), |i| {
        let mut parts = key.to_vec();
        parts.push(i as u64);
        let img = ArrayView2::from_shape((side, side), images[i]).expect("image size").to_owned();
        weak_augment(&img, p, &mut seed::rng(&parts))
    });
    let mut data = Vec::with_capacity(images.len() * side * side);
    for v in &views {
        data.extend(v.iter());
    }
    ArrayD::from_shape_vec(IxDyn(&[images.len(), 1, side, side]), data).expect("batch size")
}
