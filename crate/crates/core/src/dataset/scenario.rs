use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use rand::seq::SliceRandom;

use super::{stack, DomainDataset, LabeledSet, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::seed::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Uda,
    Ssda,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Uda => "uda",
            Mode::Ssda => "ssda",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uda" => Ok(Mode::Uda),
            "ssda" => Ok(Mode::Ssda),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub source: u8,
    pub target: u8,
    pub mode: Mode,
    pub target_label_fraction: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn uda(source: u8, target: u8, seed: u64) -> Self {
        ScenarioSpec { source, target, mode: Mode::Uda, target_label_fraction: 0.0, seed }
    }

    pub fn ssda(source: u8, target: u8, fraction: f64, seed: u64) -> Self {
        ScenarioSpec { source, target, mode: Mode::Ssda, target_label_fraction: fraction, seed }
    }

    pub fn validate(&self) -> Result<()> {
        super::validate_domain(self.source)?;
        super::validate_domain(self.target)?;
        if self.source == self.target {
            return Err(Error::InvalidArgument(format!(
                "source and target must differ (both {})",
                self.source
            )));
        }
        let f = self.target_label_fraction;
        match self.mode {
            Mode::Uda if f != 0.0 => Err(Error::InvalidArgument(format!(
                "UDA requires target_label_fraction = 0, got {f}"
            ))),
            Mode::Ssda if !(f > 0.0 && f < 1.0) => Err(Error::InvalidArgument(format!(
                "SSDA requires 0 < target_label_fraction < 1, got {f}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        format!("{}:{}->{}", self.mode, self.source, self.target)
    }
}

/// Ground truth for unlabeled target images.
///
/// Training code never needs these labels. Every call to [`SealedLabels::reveal`]
/// is counted so that leakage audits can assert the counter stays at zero.
#[derive(Clone, Debug)]
pub struct SealedLabels {
    labels: Vec<u8>,
    reads: Arc<AtomicUsize>,
}

impl SealedLabels {
    pub fn new(labels: Vec<u8>) -> Self {
        SealedLabels { labels, reads: Arc::new(AtomicUsize::new(0)) }
    }

    pub fn reveal(&self) -> &[u8] {
        self.reads.fetch_add(1, Ordering::SeqCst);
        &self.labels
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }

    /// Shared handle to the read counter; clones of this set share it.
    pub fn counter(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.reads)
    }
}

/// Target images whose labels are sealed.
#[derive(Clone, Debug)]
pub struct UnlabeledSet {
    pub side: usize,
    pixels: Vec<f32>,
    sealed: SealedLabels,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.pixels.len() / (self.side * self.side)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.side * self.side;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn batch(&self, idx: &[usize]) -> ArrayD<f32> {
        stack(self.side, idx.iter().map(|&i| self.image(i)))
    }

    pub fn sealed(&self) -> &SealedLabels {
        &self.sealed
    }
}

/// The SL / TL / TU partition of one scenario plus labeled test sets.
#[derive(Clone, Debug)]
pub struct ScenarioData {
    pub spec: ScenarioSpec,
    pub side: usize,
    pub source_labeled: LabeledSet,
    pub target_labeled: LabeledSet,
    pub target_unlabeled: UnlabeledSet,
    pub source_test: LabeledSet,
    pub target_test: LabeledSet,
}

impl ScenarioData {
    /// `SL ∪ TL`, the labeled pool available to a scenario.
    pub fn all_labeled(&self) -> LabeledSet {
        let mut s = self.source_labeled.clone();
        s.extend(&self.target_labeled);
        s
    }
}

/// Largest-remainder allocation of `total` over classes in proportion to `counts`.
pub(crate) fn proportional(total: usize, counts: [usize; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let n: usize = counts.iter().sum();
    let mut alloc = [0; NUM_CLASSES];
    let mut rem = [(0.0f64, 0usize); NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let ideal = total as f64 * counts[c] as f64 / n as f64;
        alloc[c] = ideal.floor() as usize;
        rem[c] = (ideal - ideal.floor(), c);
    }
    let mut left = total - alloc.iter().sum::<usize>();
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in &rem {
        if left == 0 {
            break;
        }
        if alloc[c] < counts[c] {
            alloc[c] += 1;
            left -= 1;
        }
    }
    alloc
}

pub fn make_scenario(spec: ScenarioSpec, datasets: &[DomainDataset]) -> Result<ScenarioData> {
    spec.validate()?;
    let find = |d: u8| {
        datasets
            .iter()
            .find(|ds| ds.domain == d)
            .ok_or_else(|| Error::InvalidArgument(format!("no dataset for domain {d}")))
    };
    let (src, tgt) = (find(spec.source)?, find(spec.target)?);
    if src.side != tgt.side {
        return Err(Error::InvalidArgument(format!(
            "image sides differ: {} vs {}",
            src.side, tgt.side
        )));
    }
    let side = src.side;
    let target_train: Vec<_> = tgt.split(Split::Train).collect();
    let mut exposed = vec![false; target_train.len()];
    if spec.mode == Mode::Ssda {
        let mut counts = [0; NUM_CLASSES];
        for im in &target_train {
            counts[im.label as usize] += 1;
        }
        let total = (spec.target_label_fraction * target_train.len() as f64).round() as usize;
        let alloc = proportional(total, counts);
        for c in 0..NUM_CLASSES {
            let mut idx: Vec<usize> = (0..target_train.len())
                .filter(|&i| target_train[i].label as usize == c)
                .collect();
            idx.shuffle(&mut seed::rng(&[
                tag::SCENARIO,
                spec.seed,
                spec.source as u64,
                spec.target as u64,
                c as u64,
            ]));
            for &i in &idx[..alloc[c]] {
                exposed[i] = true;
            }
        }
    }
    let mut target_labeled = LabeledSet::new(side);
    let mut tu_pixels = Vec::new();
    let mut tu_labels = Vec::new();
    for (im, &show) in target_train.iter().zip(&exposed) {
        let px = im.pixels.as_slice().expect("standard layout");
        if show {
            target_labeled.push(px, im.label);
        } else {
            tu_pixels.extend_from_slice(px);
            tu_labels.push(im.label);
        }
    }
    Ok(ScenarioData {
        spec,
        side,
        source_labeled: src.labeled_set(Split::Train),
        target_labeled,
        target_unlabeled: UnlabeledSet { side, pixels: tu_pixels, sealed: SealedLabels::new(tu_labels) },
        source_test: src.labeled_set(Split::Test),
        target_test: tgt.labeled_set(Split::Test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportional_allocation_is_exact_and_close() {
        assert_eq!(proportional(10, [50, 50]), [5, 5]);
        assert_eq!(proportional(7, [30, 70]), [2, 5]);
        let a = proportional(5, [1, 99]);
        assert_eq!(a.iter().sum::<usize>(), 5);
        assert_eq!(proportional(0, [3, 4]), [0, 0]);
    }

    #[test]
    fn spec_validation() {
        assert!(ScenarioSpec::uda(0, 0, 1).validate().is_err());
        assert!(ScenarioSpec::uda(0, 1, 1).validate().is_ok());
        assert!(ScenarioSpec::ssda(0, 1, 0.0, 1).validate().is_err());
        assert!(ScenarioSpec::ssda(0, 1, 1.0, 1).validate().is_err());
        let mut s = ScenarioSpec::uda(0, 1, 1);
        s.target_label_fraction = 0.1;
        assert!(s.validate().is_err());
    }
}
