//! Synthetic three-domain, two-class defect dataset.
//!
//! Class 0 is a foreign particle (irregular bright blob), class 1 is a point
//! impurity (small Gaussian dot). Domains differ only in their background:
//! plain noise, horizontal stripes, or random rectangles.

pub(crate) mod io;
mod render;
mod scenario;

use std::fmt;
use std::str::FromStr;

use defectda_tensor::par;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;

pub use io::{load_dataset, save_dataset, ManifestRow, MANIFEST_HEADER};
pub(crate) use scenario::proportional;
pub use scenario::{
    make_scenario, Mode, ScenarioData, ScenarioSpec, SealedLabels, UnlabeledSet,
};

use crate::error::{Error, Result};
use crate::seed::{self, tag};

pub const DEFAULT_SIDE: usize = 128;
pub const NUM_DOMAINS: u8 = 3;
pub const NUM_CLASSES: usize = 2;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["particle", "point"];
/// Per-domain `[particle, point]` counts of the reference data.
pub const DEFAULT_COUNTS: [[usize; 2]; 3] = [[1706, 1516], [639, 503], [577, 1196]];
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Array2<f32>,
    pub label: u8,
    pub domain: u8,
    pub split: Split,
    /// Position within its class, used for file naming.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: u8,
    pub seed: u64,
    pub side: usize,
    pub images: Vec<LabeledImage>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for im in &self.images {
            c[im.label as usize] += 1;
        }
        c
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledImage> {
        self.images.iter().filter(move |im| im.split == split)
    }

    pub fn labeled_set(&self, split: Split) -> LabeledSet {
        LabeledSet::from_images(self.side, self.split(split))
    }
}

pub fn validate_side(side: usize) -> Result<()> {
    if side < 32 || !side.is_power_of_two() {
        return Err(Error::InvalidSide(side));
    }
    Ok(())
}

pub fn validate_domain(domain: u8) -> Result<()> {
    if domain >= NUM_DOMAINS {
        return Err(Error::InvalidDomain(domain));
    }
    Ok(())
}

/// Renders `counts[0]` particles followed by `counts[1]` points.
///
/// Every image has its own random stream keyed by `(seed, domain, class,
/// index)`, so the result does not depend on the execution mode.
pub fn generate_domain(domain: u8, counts: [usize; 2], seed: u64, side: usize) -> Result<DomainDataset> {
    validate_domain(domain)?;
    validate_side(side)?;
    if counts.contains(&0) {
        return Err(Error::InvalidArgument(format!("class counts must be positive, got {counts:?}")));
    }
    let total = counts[0] + counts[1];
    let images = par::map_range(par::default_exec(), total, |i| {
        let (label, index) = if i < counts[0] { (0u8, i) } else { (1u8, i - counts[0]) };
        let mut rng = seed::rng(&[tag::GENERATE, seed, domain as u64, label as u64, index as u64]);
        LabeledImage {
            pixels: render::render(domain, label, side, &mut rng),
            label,
            domain,
            split: Split::Train,
            index,
        }
    });
    Ok(DomainDataset { domain, seed, side, images })
}

/// Stratified train/test split: `round(test_fraction * n_c)` images of each
/// class are tagged `test`, the rest `train`.
pub fn split_dataset(mut ds: DomainDataset, test_fraction: f64, seed: u64) -> Result<DomainDataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    for c in 0..NUM_CLASSES as u8 {
        let mut idx: Vec<usize> = (0..ds.images.len()).filter(|&i| ds.images[i].label == c).collect();
        idx.shuffle(&mut seed::rng(&[tag::SPLIT, seed, ds.domain as u64, c as u64]));
        let n_test = (test_fraction * idx.len() as f64).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            ds.images[i].split = if k < n_test { Split::Test } else { Split::Train };
        }
    }
    Ok(ds)
}

/// Images with visible labels, stored contiguously for batching.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub side: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<u8>,
}

impl LabeledSet {
    pub fn new(side: usize) -> Self {
        LabeledSet { side, pixels: Vec::new(), labels: Vec::new() }
    }

    pub fn from_images<'a>(side: usize, images: impl IntoIterator<Item = &'a LabeledImage>) -> Self {
        let mut set = LabeledSet::new(side);
        for im in images {
            set.push(im.pixels.as_slice().expect("standard layout"), im.label);
        }
        set
    }

    pub fn push(&mut self, pixels: &[f32], label: u8) {
        assert_eq!(pixels.len(), self.side * self.side, "image size mismatch");
        self.pixels.extend_from_slice(pixels);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.side * self.side;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        let mut out = LabeledSet::new(self.side);
        for &i in idx {
            out.push(self.image(i), self.labels[i]);
        }
        out
    }

    pub fn extend(&mut self, other: &LabeledSet) {
        assert_eq!(self.side, other.side, "side mismatch");
        self.pixels.extend_from_slice(&other.pixels);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// `(N, 1, side, side)` tensor of the selected images.
    pub fn batch(&self, idx: &[usize]) -> ArrayD<f32> {
        stack(self.side, idx.iter().map(|&i| self.image(i)))
    }
}

/// Stacks equally sized images into an `(N, 1, side, side)` tensor.
pub fn stack<'a>(side: usize, images: impl Iterator<Item = &'a [f32]>) -> ArrayD<f32> {
    let mut data = Vec::new();
    let mut n = 0;
    for im in images {
        data.extend_from_slice(im);
        n += 1;
    }
    ArrayD::from_shape_vec(IxDyn(&[n, 1, side, side]), data).expect("image size mismatch")
}
