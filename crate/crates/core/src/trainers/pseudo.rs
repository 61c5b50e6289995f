use defectda_tensor::{Adam, AdamConfig, Var};
use ndarray::{concatenate, Array2, Axis, Ix2};

use super::baseline::{check_labeled, prepare_adaptation, run_phase, validation_split, PhaseCtx, PhaseReport};
use super::{supervised_batch, Cycler, TrainConfig, TrainLog};
use crate::dataset::{LabeledSet, ScenarioData};
use crate::error::{Error, Result};
use crate::losses::{online_pl_loss, pseudo_label};
use crate::model::{Classifier, Module, Snapshot};
use crate::seed::tag;

#[derive(Clone, Debug, PartialEq)]
pub struct OfflinePlReport {
    /// Iterations that selected at least one sample and retrained.
    pub iterations: usize,
    /// Selected count per pseudo-labeling round (the last may be 0).
    pub selected: Vec<usize>,
    /// Lowest confidence among the selected samples, per round.
    pub min_selected_confidence: Vec<f64>,
    pub stopped_early: bool,
    pub phases: Vec<PhaseReport>,
}

/// Offline self-training. Each round pseudo-labels every unlabeled target
/// image with the current model, keeps those at or above `tau`, restores the
/// starting weights and retrains on the labeled pool plus the selection.
/// A round that selects nothing ends training with the current model.
pub fn train_offline_pl(c: &Classifier<f32>, data: &ScenarioData, cfg: &TrainConfig, log: &mut TrainLog) -> Result<OfflinePlReport> {
    cfg.validate()?;
    let labeled = data.all_labeled();
    check_labeled(&labeled)?;
    let (train_idx, val_idx) = validation_split(&labeled.labels, cfg.val_fraction, cfg.seed);
    let tu = &data.target_unlabeled;
    let all: Vec<usize> = (0..tu.len()).collect();
    let tu_images = tu.batch(&all);
    let warm = Snapshot::take(c);
    let per_epoch = train_idx.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = per_epoch * (cfg.pl_epochs * cfg.pl_iterations) as u64;

    let mut report = OfflinePlReport {
        iterations: 0,
        selected: Vec::new(),
        min_selected_confidence: Vec::new(),
        stopped_early: false,
        phases: Vec::new(),
    };
    let mut step = 0;
    for it in 0..cfg.pl_iterations {
        let pl = if tu.is_empty() { None } else { Some(pseudo_label(&c.predict(&tu_images, 128), cfg.tau)) };
        let mut pseudo = LabeledSet::new(data.side);
        let mut min_conf = f64::NAN;
        if let Some(pl) = &pl {
            for i in (0..tu.len()).filter(|&i| pl.mask[i]) {
                pseudo.push(tu.image(i), pl.labels[i]);
                min_conf = if min_conf.is_nan() { pl.confidences[i] } else { min_conf.min(pl.confidences[i]) };
            }
        }
        report.selected.push(pseudo.len());
        report.min_selected_confidence.push(min_conf);
        log.record(step, "selected", pseudo.len() as f64, cfg.pl_lr, step as f64 / total_steps.max(1) as f64);
        if pseudo.is_empty() {
            report.stopped_early = true;
            break;
        }
        // Validation covers the round's whole training pool: the labeled
        // hold-out plus a stratified hold-out of the pseudo-labeled images.
        let (p_train, p_val) = validation_split(&pseudo.labels, cfg.val_fraction, cfg.seed ^ (it as u64 + 1));
        let mut val_set = labeled.subset(&val_idx);
        val_set.extend(&pseudo.subset(&p_val));
        let all_val: Vec<usize> = (0..val_set.len()).collect();
        let pseudo_train = pseudo.subset(&p_train);
        warm.restore(c);
        prepare_adaptation(c, cfg);
        let ctx = PhaseCtx {
            set: &labeled,
            train_idx: &train_idx,
            val_set: &val_set,
            val_idx: &all_val,
            cfg,
            stream: 100 + it as u64,
            total_steps,
            extra: (!pseudo_train.is_empty()).then_some((&pseudo_train, cfg.ratio)),
        };
        report.phases.push(run_phase(c, &ctx, cfg.pl_epochs, cfg.pl_lr, log, &mut step)?);
        report.iterations += 1;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlinePlReport {
    pub steps: usize,
    pub mean_mask_rate: f64,
    pub final_alpha: f64,
    /// `(labeled, unlabeled)` images in the first mini-batch.
    pub first_batch: (usize, usize),
}

/// Online pseudo-labeling: every step pseudo-labels its own unlabeled
/// mini-batch and weights that loss by the ramp `α(t)`.
pub fn train_online_pl(c: &Classifier<f32>, data: &ScenarioData, cfg: &TrainConfig, log: &mut TrainLog) -> Result<OnlinePlReport> {
    cfg.validate()?;
    let labeled = data.all_labeled();
    check_labeled(&labeled)?;
    let tu = &data.target_unlabeled;
    if tu.is_empty() {
        return Err(Error::InvalidArgument("no unlabeled target images".into()));
    }
    prepare_adaptation(c, cfg);
    let params = c.params();
    let mut opt = Adam::new(AdamConfig { lr: cfg.pl_lr, ..Default::default() });
    let b = cfg.batch_size;
    let total = cfg.pl_epochs * labeled.len().div_ceil(b);
    let mut lab = Cycler::new(labeled.len(), &[tag::SHUFFLE, cfg.seed, 200]);
    let mut unl = Cycler::new(tu.len(), &[tag::SHUFFLE, cfg.seed, 201]);
    let mut mask_sum = 0.0;
    let mut alpha = 0.0;
    let mut first_batch = (0, 0);
    for t in 0..total {
        let li = lab.take(b);
        let ui = unl.take(cfg.ratio * b);
        if t == 0 {
            first_batch = (li.len(), ui.len());
        }
        let key = [tag::AUGMENT, cfg.seed, 200, t as u64];
        let xs = supervised_batch(&labeled, &li, cfg.mirror_p, &key);
        let imgs: Vec<&[f32]> = ui.iter().map(|&i| tu.image(i)).collect();
        let xt = crate::augment::weak_batch(tu.side, &imgs, cfg.mirror_p, &[tag::AUGMENT, cfg.seed, 201, t as u64]);
        let x = Var::constant(concatenate(Axis(0), &[xs.view(), xt.view()]).expect("same image shape"));
        let z = c.logits(&x, true);
        let zs = z.narrow(0, 0, li.len());
        let zt = z.narrow(0, li.len(), ui.len());
        let probs: Array2<f32> = zt.softmax().value().clone().into_dimensionality::<Ix2>().expect("rank 2");
        let pl = pseudo_label(&probs, cfg.tau);
        alpha = cfg.alpha.alpha(t, total)?;
        let labels: Vec<u8> = li.iter().map(|&i| labeled.labels[i]).collect();
        let loss = online_pl_loss(&zs, &labels, &zt, &pl, alpha)?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {t}")));
        }
        opt.step(&params, &loss.backward());
        let rate = pl.selected() as f64 / ui.len() as f64;
        mask_sum += rate;
        let tt = (t + 1) as f64 / total as f64;
        log.record(t as u64 + 1, "loss", value, cfg.pl_lr, tt);
        log.record(t as u64 + 1, "alpha", alpha, cfg.pl_lr, tt);
        log.record(t as u64 + 1, "mask_rate", rate, cfg.pl_lr, tt);
    }
    Ok(OnlinePlReport {
        steps: total,
        mean_mask_rate: if total == 0 { 0.0 } else { mask_sum / total as f64 },
        final_alpha: alpha,
        first_batch,
    })
}
