//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Unknown keys, duplicate keys and unparsable values are
//! errors. The canonical form lists every key (defaults included) in sorted
//! order with normalized values; its SHA-256 is the config hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dataset::{Mode, DEFAULT_SIDE, DEFAULT_TEST_FRACTION};
use crate::error::{io_err, Error, Result};
use crate::model::Arch;
use crate::trainers::{Method, TrainConfig};

/// A source/target domain pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pair {
    pub source: u8,
    pub target: u8,
}

impl FromStr for Pair {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("->")
            .or_else(|| s.split_once('-'))
            .ok_or_else(|| Error::Config(format!("pair {s:?} must look like 0->1")))?;
        let p = |v: &str| v.trim().parse::<u8>().map_err(|_| Error::Config(format!("bad domain in pair {s:?}")));
        Ok(Pair { source: p(a)?, target: p(b)? })
    }
}

impl std::fmt::Display for Pair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}->{}", self.source, self.target)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Directory with `domain_<d>` subdirectories written by `generate`.
    /// When unset, domains are generated in memory.
    pub data_dir: Option<PathBuf>,
    pub side: usize,
    /// Images per class per domain for in-memory generation; 0 keeps the
    /// reference counts.
    pub images_per_class: usize,
    pub data_seed: u64,
    pub test_fraction: f64,
    pub source: u8,
    pub target: u8,
    pub mode: Mode,
    pub target_label_fraction: f64,
    pub seeds: Vec<u64>,
    pub archs: Vec<Arch>,
    pub methods: Vec<Method>,
    /// Matrix pairs; empty means every ordered pair of distinct domains.
    pub pairs: Vec<Pair>,
    pub results: PathBuf,
    pub deterministic: bool,
    pub log_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data_dir: None,
            side: DEFAULT_SIDE,
            images_per_class: 0,
            data_seed: 0,
            test_fraction: DEFAULT_TEST_FRACTION,
            source: 0,
            target: 1,
            mode: Mode::Uda,
            target_label_fraction: 0.05,
            seeds: vec![0, 1, 2],
            archs: vec![Arch::SmallCnn],
            methods: Method::ALL.to_vec(),
            pairs: Vec::new(),
            results: PathBuf::from("results"),
            deterministic: true,
            log_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

/// Every accepted key, sorted.
pub const KEYS: &[&str] = &[
    "adamatch_batch",
    "adamatch_lr",
    "adamatch_steps",
    "adamatch_weight_decay",
    "adamatch_window",
    "aligner_width",
    "alpha_max",
    "alpha_t1",
    "alpha_t2",
    "archs",
    "batch_size",
    "checkpoint_every",
    "ct_bins",
    "ct_decay",
    "ct_floor",
    "data_dir",
    "data_seed",
    "dbacs_batch",
    "dbacs_epochs",
    "dbacs_lr",
    "deterministic",
    "discriminator_width",
    "freeze_backbone",
    "images_per_class",
    "lambda_adv",
    "lambda_cc",
    "lambda_cyc",
    "lambda_fm",
    "lambda_id",
    "log_dir",
    "lr",
    "methods",
    "mirror_p",
    "mode",
    "pairs",
    "patience",
    "phase1_epochs",
    "phase2_epochs",
    "phase2_lr_factor",
    "pl_epochs",
    "pl_iterations",
    "pl_lr",
    "r_adv",
    "ratio",
    "results",
    "run_dir",
    "seeds",
    "side",
    "source",
    "target",
    "target_label_fraction",
    "tau",
    "test_fraction",
    "val_fraction",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "adamatch_batch" => t.adamatch_batch = parse(key, v)?,
            "adamatch_lr" => t.adamatch_lr = parse(key, v)?,
            "adamatch_steps" => t.adamatch_steps = parse(key, v)?,
            "adamatch_weight_decay" => t.adamatch_weight_decay = parse(key, v)?,
            "adamatch_window" => t.adamatch_window = parse(key, v)?,
            "aligner_width" => t.aligner_width = parse(key, v)?,
            "alpha_max" => t.alpha.alpha_max = parse(key, v)?,
            "alpha_t1" => t.alpha.t1 = parse(key, v)?,
            "alpha_t2" => t.alpha.t2 = parse(key, v)?,
            "archs" => self.archs = parse_list(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "ct_bins" => t.ct_bins = parse(key, v)?,
            "ct_decay" => t.ct_decay = parse(key, v)?,
            "ct_floor" => t.ct_floor = parse(key, v)?,
            "data_dir" => self.data_dir = opt_path(v),
            "data_seed" => self.data_seed = parse(key, v)?,
            "dbacs_batch" => t.dbacs_batch = parse(key, v)?,
            "dbacs_epochs" => t.dbacs_epochs = parse(key, v)?,
            "dbacs_lr" => t.dbacs_lr = parse(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "discriminator_width" => t.discriminator_width = parse(key, v)?,
            "freeze_backbone" => t.freeze_backbone = parse_bool(key, v)?,
            "images_per_class" => self.images_per_class = parse(key, v)?,
            "lambda_adv" => t.loss_weights.adv = parse(key, v)?,
            "lambda_cc" => t.loss_weights.cc = parse(key, v)?,
            "lambda_cyc" => t.loss_weights.cyc = parse(key, v)?,
            "lambda_fm" => t.loss_weights.fm = parse(key, v)?,
            "lambda_id" => t.loss_weights.id = parse(key, v)?,
            "log_dir" => self.log_dir = opt_path(v),
            "lr" => t.lr = parse(key, v)?,
            "methods" => self.methods = parse_list(key, v)?,
            "mirror_p" => t.mirror_p = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "pairs" => self.pairs = parse_list(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "phase1_epochs" => t.phase1_epochs = parse(key, v)?,
            "phase2_epochs" => t.phase2_epochs = parse(key, v)?,
            "phase2_lr_factor" => t.phase2_lr_factor = parse(key, v)?,
            "pl_epochs" => t.pl_epochs = parse(key, v)?,
            "pl_iterations" => t.pl_iterations = parse(key, v)?,
            "pl_lr" => t.pl_lr = parse(key, v)?,
            "r_adv" => t.r_adv = parse(key, v)?,
            "ratio" => t.ratio = parse(key, v)?,
            "results" => self.results = PathBuf::from(v),
            "run_dir" => t.run_dir = opt_path(v),
            "seeds" => self.seeds = parse_list(key, v)?,
            "side" => self.side = parse(key, v)?,
            "source" => self.source = parse(key, v)?,
            "target" => self.target = parse(key, v)?,
            "target_label_fraction" => self.target_label_fraction = parse(key, v)?,
            "tau" => t.tau = parse(key, v)?,
            "test_fraction" => self.test_fraction = parse(key, v)?,
            "val_fraction" => t.val_fraction = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let w = &t.loss_weights;
        Some(match key {
            "adamatch_batch" => t.adamatch_batch.to_string(),
            "adamatch_lr" => t.adamatch_lr.to_string(),
            "adamatch_steps" => t.adamatch_steps.to_string(),
            "adamatch_weight_decay" => t.adamatch_weight_decay.to_string(),
            "adamatch_window" => t.adamatch_window.to_string(),
            "aligner_width" => t.aligner_width.to_string(),
            "alpha_max" => t.alpha.alpha_max.to_string(),
            "alpha_t1" => t.alpha.t1.to_string(),
            "alpha_t2" => t.alpha.t2.to_string(),
            "archs" => join(&self.archs),
            "batch_size" => t.batch_size.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "ct_bins" => t.ct_bins.to_string(),
            "ct_decay" => t.ct_decay.to_string(),
            "ct_floor" => t.ct_floor.to_string(),
            "data_dir" => show_path(&self.data_dir),
            "data_seed" => self.data_seed.to_string(),
            "dbacs_batch" => t.dbacs_batch.to_string(),
            "dbacs_epochs" => t.dbacs_epochs.to_string(),
            "dbacs_lr" => t.dbacs_lr.to_string(),
            "deterministic" => self.deterministic.to_string(),
            "discriminator_width" => t.discriminator_width.to_string(),
            "freeze_backbone" => t.freeze_backbone.to_string(),
            "images_per_class" => self.images_per_class.to_string(),
            "lambda_adv" => w.adv.to_string(),
            "lambda_cc" => w.cc.to_string(),
            "lambda_cyc" => w.cyc.to_string(),
            "lambda_fm" => w.fm.to_string(),
            "lambda_id" => w.id.to_string(),
            "log_dir" => show_path(&self.log_dir),
            "lr" => t.lr.to_string(),
            "methods" => join(&self.methods),
            "mirror_p" => t.mirror_p.to_string(),
            "mode" => self.mode.to_string(),
            "pairs" => join(&self.pairs),
            "patience" => t.patience.to_string(),
            "phase1_epochs" => t.phase1_epochs.to_string(),
            "phase2_epochs" => t.phase2_epochs.to_string(),
            "phase2_lr_factor" => t.phase2_lr_factor.to_string(),
            "pl_epochs" => t.pl_epochs.to_string(),
            "pl_iterations" => t.pl_iterations.to_string(),
            "pl_lr" => t.pl_lr.to_string(),
            "r_adv" => t.r_adv.to_string(),
            "ratio" => t.ratio.to_string(),
            "results" => self.results.display().to_string(),
            "run_dir" => show_path(&t.run_dir),
            "seeds" => join(&self.seeds),
            "side" => self.side.to_string(),
            "source" => self.source.to_string(),
            "target" => self.target.to_string(),
            "target_label_fraction" => self.target_label_fraction.to_string(),
            "tau" => t.tau.to_string(),
            "test_fraction" => self.test_fraction.to_string(),
            "val_fraction" => t.val_fraction.to_string(),
            _ => return None,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), n + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        crate::dataset::validate_side(self.side)?;
        if self.seeds.is_empty() || self.archs.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("seeds, archs and methods must be nonempty".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction must be in (0, 1), got {}", self.test_fraction)));
        }
        if !(0.0..=1.0).contains(&self.target_label_fraction) {
            return Err(Error::Config("target_label_fraction must be in [0, 1]".into()));
        }
        for p in &self.pairs {
            if p.source == p.target || p.source > 2 || p.target > 2 {
                return Err(Error::Config(format!("invalid pair {p}")));
            }
        }
        Ok(())
    }

    /// Every key with its normalized value, sorted by key.
    pub fn canonical(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// The matrix pairs, or all ordered pairs of distinct domains.
    pub fn matrix_pairs(&self) -> Vec<Pair> {
        if !self.pairs.is_empty() {
            return self.pairs.clone();
        }
        let mut v = Vec::new();
        for s in 0..3 {
            for t in 0..3 {
                if s != t {
                    v.push(Pair { source: s, target: t });
                }
            }
        }
        v
    }
}
