use defectda_tensor::{Adam, AdamConfig, Var};

use super::{epoch_batches, Cycler, eval_loss, stratified_take, supervised_batch, TrainConfig, TrainLog};
use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::model::{Classifier, Module, Snapshot};
use crate::seed::tag;

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    pub lr: f64,
    pub epochs_run: usize,
    /// Validation loss before the first epoch, then after each epoch.
    pub val_losses: Vec<f64>,
    /// Index into `val_losses` of the restored state.
    pub best_index: usize,
    pub stopped_early: bool,
}

impl PhaseReport {
    pub fn best_val_loss(&self) -> f64 {
        self.val_losses.get(self.best_index).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineReport {
    pub train_size: usize,
    pub val_size: usize,
    pub phase1: PhaseReport,
    pub phase2: PhaseReport,
    pub steps: u64,
}

/// Stratified `(train, val)` index split with `round(fraction * n)` images
/// held out for validation.
pub fn validation_split(labels: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = (fraction * labels.len() as f64).round() as usize;
    let val = stratified_take(labels, n_val, &[tag::VALIDATION, seed]);
    let mut is_val = vec![false; labels.len()];
    for &i in &val {
        is_val[i] = true;
    }
    let train = (0..labels.len()).filter(|&i| !is_val[i]).collect();
    (train, val)
}

pub(crate) struct PhaseCtx<'a> {
    pub set: &'a LabeledSet,
    pub train_idx: &'a [usize],
    /// Validation images are `val_idx` of `val_set`.
    pub val_set: &'a LabeledSet,
    pub val_idx: &'a [usize],
    pub cfg: &'a TrainConfig,
    /// Distinguishes the RNG streams of separate phases and runs.
    pub stream: u64,
    pub total_steps: u64,
    /// Pseudo-labeled images mixed in at up to `ratio` per labeled image.
    pub extra: Option<(&'a LabeledSet, usize)>,
}

/// Supervised epochs with early stopping on validation loss; restores the
/// best trained epoch before returning. The starting state's loss is
/// recorded but is not a candidate.
pub(crate) fn run_phase(
    c: &Classifier<f32>,
    ctx: &PhaseCtx<'_>,
    epochs: usize,
    lr: f64,
    log: &mut TrainLog,
    step: &mut u64,
) -> Result<PhaseReport> {
    let cfg = ctx.cfg;
    let params = c.params();
    let mut opt = Adam::new(AdamConfig { lr, ..Default::default() });
    let early = !ctx.val_idx.is_empty();
    let mut val_losses = Vec::with_capacity(epochs + 1);
    let mut best = Snapshot::take(c);
    let mut best_index = 0;
    let mut wait = 0;
    let mut stopped_early = false;
    if early {
        val_losses.push(eval_loss(c, ctx.val_set, ctx.val_idx));
    }
    let mut epochs_run = 0;
    let mut extra_cycler = ctx.extra.map(|(e, _)| Cycler::new(e.len(), &[tag::SHUFFLE, cfg.seed, ctx.stream, u64::MAX]));
    for epoch in 0..epochs {
        let key = [tag::SHUFFLE, cfg.seed, ctx.stream, epoch as u64];
        for (b, local) in epoch_batches(ctx.train_idx.len(), cfg.batch_size, &key).iter().enumerate() {
            let idx: Vec<usize> = local.iter().map(|&i| ctx.train_idx[i]).collect();
            let aug_key = [tag::AUGMENT, cfg.seed, ctx.stream, epoch as u64, b as u64];
            let mut x = supervised_batch(ctx.set, &idx, cfg.mirror_p, &aug_key);
            let mut labels: Vec<u8> = idx.iter().map(|&i| ctx.set.labels[i]).collect();
            if let (Some((extra, ratio)), Some(cy)) = (ctx.extra, extra_cycler.as_mut()) {
                let ei = cy.take((ratio * idx.len()).min(extra.len()));
                if !ei.is_empty() {
                    let mut k = aug_key.to_vec();
                    k.push(1);
                    let xe = supervised_batch(extra, &ei, cfg.mirror_p, &k);
                    x = ndarray::concatenate(ndarray::Axis(0), &[x.view(), xe.view()]).expect("same image shape");
                    labels.extend(ei.iter().map(|&i| extra.labels[i]));
                }
            }
            let x = Var::constant(x);
            let loss = cross_entropy(&c.logits(&x, true), &labels)?;
            let value = loss.item() as f64;
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite loss at step {step}")));
            }
            opt.step(&params, &loss.backward());
            *step += 1;
            log.record(*step, "ce", value, lr, *step as f64 / ctx.total_steps.max(1) as f64);
        }
        epochs_run += 1;
        if !early {
            continue;
        }
        let v = eval_loss(c, ctx.val_set, ctx.val_idx);
        log.record(*step, "val_loss", v, lr, *step as f64 / ctx.total_steps.max(1) as f64);
        val_losses.push(v);
        if best_index == 0 || v < val_losses[best_index] {
            best_index = val_losses.len() - 1;
            best = Snapshot::take(c);
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience.max(1) {
                stopped_early = true;
                break;
            }
        }
    }
    if early {
        best.restore(c);
    }
    Ok(PhaseReport { lr, epochs_run, val_losses, best_index, stopped_early })
}

pub(crate) fn check_labeled(set: &LabeledSet) -> Result<()> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("labeled training data is empty".into()));
    }
    if set.class_counts().iter().filter(|&&k| k > 0).count() < 2 {
        return Err(Error::InvalidArgument("labeled training data contains a single class".into()));
    }
    Ok(())
}

/// Two-phase fine-tuning: phase 1 trains adapter and head with the backbone
/// frozen, phase 2 also trains the back half of the backbone at `lr` scaled
/// by `phase2_lr_factor`. Each phase early-stops on validation loss.
pub fn train_baseline(c: &Classifier<f32>, set: &LabeledSet, cfg: &TrainConfig, log: &mut TrainLog) -> Result<BaselineReport> {
    cfg.validate()?;
    check_labeled(set)?;
    let (train_idx, val_idx) = validation_split(&set.labels, cfg.val_fraction, cfg.seed);
    if train_idx.len() < 2 {
        return Err(Error::InvalidArgument("fewer than 2 training images after the validation split".into()));
    }
    let per_epoch = train_idx.len().div_ceil(cfg.batch_size) as u64;
    let ctx = |stream| PhaseCtx {
        set,
        train_idx: &train_idx,
        val_set: set,
        val_idx: &val_idx,
        cfg,
        stream,
        total_steps: per_epoch * (cfg.phase1_epochs + cfg.phase2_epochs) as u64,
        extra: None,
    };
    let mut step = 0;
    if cfg.freeze_backbone {
        c.prepare_phase1();
    } else {
        c.set_frozen(false);
    }
    let phase1 = run_phase(c, &ctx(1), cfg.phase1_epochs, cfg.lr, log, &mut step)?;
    if cfg.freeze_backbone {
        c.prepare_phase2();
    }
    let phase2 = run_phase(c, &ctx(2), cfg.phase2_epochs, cfg.lr * cfg.phase2_lr_factor, log, &mut step)?;
    Ok(BaselineReport { train_size: train_idx.len(), val_size: val_idx.len(), phase1, phase2, steps: step })
}

/// Trainable set used by every method that continues from a baseline.
pub(crate) fn prepare_adaptation(c: &Classifier<f32>, cfg: &TrainConfig) {
    if cfg.freeze_backbone {
        c.prepare_phase2();
    } else {
        c.set_frozen(false);
    }
}
