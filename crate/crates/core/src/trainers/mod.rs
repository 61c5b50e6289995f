//! Training procedures: two-phase baseline fine-tuning, offline and online
//! pseudo-labeling, AdaMatch and DBACS.
//!
//! Domain-adaptation methods start from a classifier already trained by
//! [`train_baseline`] on the labeled pool.

mod adamatch;
mod baseline;
mod dbacs;
mod log;
mod pseudo;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;

use crate::augment::{DEFAULT_BINS, DEFAULT_DECAY, DEFAULT_FLOOR, DEFAULT_MIRROR_P};
use crate::dataset::{proportional, LabeledSet, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::losses::{AlphaRamp, LossWeights, DEFAULT_TAU};
use crate::model::{Arch, Classifier, DEFAULT_ALIGNER_WIDTH, DEFAULT_DISCRIMINATOR_WIDTH};
use crate::seed::{self, tag};
use defectda_tensor::Var;

pub use adamatch::{train_adamatch, AdaMatchReport, RunningMean};
pub use baseline::{train_baseline, validation_split, BaselineReport, PhaseReport};
pub use dbacs::{train_dbacs, DbacsEnsemble, DbacsReport, UpdateKind};
pub use log::{LogRecord, TrainLog};
pub use pseudo::{train_offline_pl, train_online_pl, OfflinePlReport, OnlinePlReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Baseline,
    OfflinePl,
    OnlinePl,
    AdaMatch,
    Dbacs,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Baseline, Method::OfflinePl, Method::OnlinePl, Method::AdaMatch, Method::Dbacs];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::OfflinePl => "offline-pl",
            Method::OnlinePl => "online-pl",
            Method::AdaMatch => "adamatch",
            Method::Dbacs => "dbacs",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Samples seen by AdaMatch before the step divisor is applied.
pub const ADAMATCH_BASE_SAMPLES: usize = 1 << 16;
pub const ADAMATCH_STEP_DIVISOR: usize = 8;

/// Every tunable of every trainer. Defaults are the published settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: Arch,
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase2_lr_factor: f64,
    pub patience: usize,
    pub val_fraction: f64,
    /// Freeze the backbone in phase 1 and its front half afterwards.
    /// Without pretrained weights a desk run may train everything instead.
    pub freeze_backbone: bool,
    /// Mirror augmentation for supervised batches.
    pub mirror_p: f64,

    pub tau: f64,
    /// Unlabeled samples per labeled sample in a batch.
    pub ratio: usize,
    pub pl_iterations: usize,
    pub pl_epochs: usize,
    pub pl_lr: f64,
    pub alpha: AlphaRamp,

    pub adamatch_lr: f64,
    pub adamatch_weight_decay: f64,
    pub adamatch_batch: usize,
    pub adamatch_steps: usize,
    pub adamatch_window: usize,
    pub ct_bins: usize,
    pub ct_decay: f64,
    pub ct_floor: f64,

    pub dbacs_lr: f64,
    pub dbacs_batch: usize,
    pub dbacs_epochs: usize,
    pub r_adv: usize,
    pub loss_weights: LossWeights,
    pub aligner_width: usize,
    pub discriminator_width: usize,
    /// Save DBACS checkpoints every this many epochs (0 = only the last).
    pub checkpoint_every: usize,
    /// Root for `runs/<run_id>/...` checkpoint directories.
    pub run_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::SmallCnn,
            seed: 0,
            batch_size: 32,
            lr: 1e-4,
            phase1_epochs: 30,
            phase2_epochs: 20,
            phase2_lr_factor: 0.1,
            patience: 5,
            val_fraction: 0.2,
            freeze_backbone: true,
            mirror_p: DEFAULT_MIRROR_P,
            tau: DEFAULT_TAU,
            ratio: 3,
            pl_iterations: 10,
            pl_epochs: 10,
            pl_lr: 1e-4,
            alpha: AlphaRamp::default(),
            adamatch_lr: 2e-4,
            adamatch_weight_decay: 1e-3,
            adamatch_batch: 64,
            adamatch_steps: ADAMATCH_BASE_SAMPLES / 64 / ADAMATCH_STEP_DIVISOR,
            adamatch_window: 32,
            ct_bins: DEFAULT_BINS,
            ct_decay: DEFAULT_DECAY,
            ct_floor: DEFAULT_FLOOR,
            dbacs_lr: 5e-5,
            dbacs_batch: 64,
            dbacs_epochs: 300,
            r_adv: 2,
            loss_weights: LossWeights::default(),
            aligner_width: DEFAULT_ALIGNER_WIDTH,
            discriminator_width: DEFAULT_DISCRIMINATOR_WIDTH,
            checkpoint_every: 50,
            run_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (k, v) in [
            ("lr", self.lr),
            ("pl_lr", self.pl_lr),
            ("adamatch_lr", self.adamatch_lr),
            ("dbacs_lr", self.dbacs_lr),
            ("phase2_lr_factor", self.phase2_lr_factor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{k} must be > 0, got {v}"));
            }
        }
        for (k, v) in [
            ("batch_size", self.batch_size),
            ("ratio", self.ratio),
            ("pl_iterations", self.pl_iterations),
            ("adamatch_batch", self.adamatch_batch),
            ("adamatch_window", self.adamatch_window),
            ("dbacs_batch", self.dbacs_batch),
            ("r_adv", self.r_adv),
            ("ct_bins", self.ct_bins),
            ("aligner_width", self.aligner_width),
            ("discriminator_width", self.discriminator_width),
        ] {
            if v == 0 {
                return bad(format!("{k} must be a positive integer"));
            }
        }
        if self.batch_size < 2 || self.adamatch_batch < 2 || self.dbacs_batch < 2 {
            return bad("batch sizes must be at least 2 for batch normalization".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.mirror_p) {
            return bad(format!("mirror_p must be in [0, 1], got {}", self.mirror_p));
        }
        if self.adamatch_weight_decay < 0.0 {
            return bad("adamatch_weight_decay must be >= 0".into());
        }
        let a = self.alpha;
        if !(a.alpha_max >= 0.0 && 0.0 <= a.t1 && a.t1 < a.t2 && a.t2 <= 1.0) {
            return bad(format!("alpha ramp needs 0 <= t1 < t2 <= 1 and alpha_max >= 0, got {a:?}"));
        }
        self.loss_weights.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Classifier with parameters drawn from the `INIT` stream of this seed.
    pub fn build_classifier(&self, side: usize) -> Result<Classifier<f32>> {
        Classifier::build(self.arch, side, NUM_CLASSES, &mut seed::rng(&[tag::INIT, self.seed, 0]))
    }
}

/// Shuffled index batches covering `0..n`. A trailing batch smaller than 2
/// is merged into the previous one so batch statistics stay defined.
pub(crate) fn epoch_batches(n: usize, batch: usize, key: &[u64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(key));
    let mut out: Vec<Vec<usize>> = idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// Endless stream of shuffled indices over `0..n`, reshuffled per pass.
pub(crate) struct Cycler {
    n: usize,
    key: Vec<u64>,
    pass: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    pub(crate) fn new(n: usize, key: &[u64]) -> Self {
        Cycler { n, key: key.to_vec(), pass: 0, order: Vec::new(), pos: 0 }
    }

    pub(crate) fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.n == 0 {
            return out;
        }
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                let mut key = self.key.clone();
                key.push(self.pass);
                self.order.shuffle(&mut seed::rng(&key));
                self.pass += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mean eval-mode cross entropy over `idx` of `set`, computed in chunks.
pub(crate) fn eval_loss(c: &Classifier<f32>, set: &LabeledSet, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    for chunk in idx.chunks(128) {
        let x = Var::constant(set.batch(chunk));
        let labels: Vec<u8> = chunk.iter().map(|&i| set.labels[i]).collect();
        let ce = crate::losses::cross_entropy(&c.logits(&x, false), &labels).expect("valid labels");
        total += ce.item() as f64 * chunk.len() as f64;
    }
    total / idx.len() as f64
}

/// Eval-mode class probabilities for a stacked `(N,1,s,s)` batch.
pub fn predict_probs(c: &Classifier<f32>, images: &ArrayD<f32>) -> Array2<f32> {
    c.predict(images, 128)
}

/// Labeled images keyed by their mirror stream; identity when `p == 0`.
pub(crate) fn supervised_batch(set: &LabeledSet, idx: &[usize], p: f64, key: &[u64]) -> ArrayD<f32> {
    if p == 0.0 {
        return set.batch(idx);
    }
    let imgs: Vec<&[f32]> = idx.iter().map(|&i| set.image(i)).collect();
    crate::augment::weak_batch(set.side, &imgs, p, key)
}

pub(crate) fn stratified_take(labels: &[u8], total: usize, key: &[u64]) -> Vec<usize> {
    let mut counts = [0usize; NUM_CLASSES];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let alloc = proportional(total, counts);
    let mut out = Vec::with_capacity(total);
    for (c, &k) in alloc.iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] as usize == c).collect();
        let mut parts = key.to_vec();
        parts.push(c as u64);
        idx.shuffle(&mut seed::rng(&parts));
        out.extend_from_slice(&idx[..k]);
    }
    out.sort_unstable();
    out
}
