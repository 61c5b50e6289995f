use std::collections::VecDeque;

use defectda_tensor::{Adam, AdamConfig, Var};
use ndarray::{concatenate, Array1, Array2, ArrayD, Axis, Ix2};

use super::baseline::{check_labeled, prepare_adaptation};
use super::{Cycler, TrainConfig, TrainLog};
use crate::augment::{augment_batch, CtAugment, Op};
use crate::dataset::ScenarioData;
use crate::error::{Error, Result};
use crate::losses::{
    adamatch_confidence_mask, adamatch_losses, class_expectation, distribution_alignment, mu_warmup, one_hot,
    random_logit_interpolation,
};
use crate::model::{Classifier, Module};
use crate::seed::{self, tag};

/// Mean of the last `window` pushed vectors.
#[derive(Clone, Debug)]
pub struct RunningMean {
    window: usize,
    buf: VecDeque<Array1<f64>>,
}

impl RunningMean {
    pub fn new(window: usize) -> Self {
        RunningMean { window: window.max(1), buf: VecDeque::new() }
    }

    pub fn push(&mut self, v: Array1<f64>) {
        if self.buf.len() == self.window {
            self.buf.pop_front();
        }
        self.buf.push_back(v);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn value(&self) -> Option<Array1<f64>> {
        let first = self.buf.front()?;
        let mut acc = Array1::zeros(first.len());
        for v in &self.buf {
            acc += v;
        }
        Some(acc / self.buf.len() as f64)
    }
}

pub struct AdaMatchReport {
    pub steps: usize,
    pub mean_mask_rate: f64,
    pub final_mu: f64,
    pub ct: CtAugment,
    /// `(labeled, unlabeled)` images in the first mini-batch.
    pub first_batch: (usize, usize),
}

fn rows(v: &Var<f32>) -> Array2<f32> {
    v.softmax().value().clone().into_dimensionality::<Ix2>().expect("rank 2")
}

fn hard_labels(p: &Array2<f32>) -> Vec<u8> {
    p.rows()
        .into_iter()
        .map(|r| if r[1] > r[0] { 1 } else { 0 })
        .collect()
}

/// AdaMatch: weak/strong views of labeled and unlabeled batches, random
/// logit interpolation between a joint and a labeled-only forward pass,
/// distribution alignment of target pseudo-labels, a relative confidence
/// mask and a warmed-up target loss. CTAugment bins are updated from how
/// well the strong labeled views are classified.
pub fn train_adamatch(c: &Classifier<f32>, data: &ScenarioData, cfg: &TrainConfig, log: &mut TrainLog) -> Result<AdaMatchReport> {
    cfg.validate()?;
    let labeled = data.all_labeled();
    check_labeled(&labeled)?;
    let tu = &data.target_unlabeled;
    if tu.is_empty() {
        return Err(Error::InvalidArgument("no unlabeled target images".into()));
    }
    prepare_adaptation(c, cfg);
    let params = c.params();
    let lr = cfg.adamatch_lr;
    let mut opt = Adam::new(AdamConfig { lr, weight_decay: cfg.adamatch_weight_decay, ..Default::default() });
    let mut ct = CtAugment::new(Op::ALL.to_vec(), cfg.ct_bins, cfg.ct_decay, cfg.ct_floor);
    let (b, u) = (cfg.adamatch_batch, cfg.ratio * cfg.adamatch_batch);
    let total = cfg.adamatch_steps;
    let mut lab = Cycler::new(labeled.len(), &[tag::SHUFFLE, cfg.seed, 300]);
    let mut unl = Cycler::new(tu.len(), &[tag::SHUFFLE, cfg.seed, 301]);
    let mut mean_sl = RunningMean::new(cfg.adamatch_window);
    let mut mean_tu = RunningMean::new(cfg.adamatch_window);
    let (mut mask_sum, mut mu) = (0.0, 0.0);
    let side = data.side;

    let mut first_batch = (0, 0);
    for t in 0..total {
        let li = lab.take(b);
        let ui = unl.take(u);
        let (nb, nu) = (li.len(), ui.len());
        if t == 0 {
            first_batch = (nb, nu);
        }
        let lab_imgs: Vec<&[f32]> = li.iter().map(|&i| labeled.image(i)).collect();
        let tu_imgs: Vec<&[f32]> = ui.iter().map(|&i| tu.image(i)).collect();
        let a_sl = augment_batch(side, &lab_imgs, &ct, cfg.mirror_p, &[tag::AUGMENT, cfg.seed, 300, t as u64])?;
        let a_tu = augment_batch(side, &tu_imgs, &ct, cfg.mirror_p, &[tag::AUGMENT, cfg.seed, 301, t as u64])?;
        let cat = |parts: &[&ArrayD<f32>]| {
            let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
            concatenate(Axis(0), &views).expect("same image shape")
        };
        let x_all = Var::constant(cat(&[&a_sl.weak, &a_sl.strong, &a_tu.weak, &a_tu.strong]));
        let x_sl = Var::constant(cat(&[&a_sl.weak, &a_sl.strong]));

        let z_joint = c.logits(&x_all, true);
        let z_sl_only = c.logits(&x_sl, true);
        let z_sl_joint = z_joint.narrow(0, 0, 2 * nb);
        let z_tu = z_joint.narrow(0, 2 * nb, 2 * nu);
        let z_sl = random_logit_interpolation(&z_sl_joint, &z_sl_only, &mut seed::rng(&[tag::INTERP, cfg.seed, t as u64]))?;
        let (z_sl_w, z_sl_s) = (z_sl.narrow(0, 0, nb), z_sl.narrow(0, nb, nb));
        let (z_tu_w, z_tu_s) = (z_tu.narrow(0, 0, nu), z_tu.narrow(0, nu, nu));

        let p_sl_w = rows(&z_sl_w);
        let p_tu_w = rows(&z_tu_w);
        mean_sl.push(class_expectation(&p_sl_w));
        mean_tu.push(class_expectation(&p_tu_w));
        let aligned = distribution_alignment(&p_tu_w, &mean_sl.value().unwrap(), &mean_tu.value().unwrap())?;
        let (mask, threshold) = adamatch_confidence_mask(&aligned, &p_sl_w, cfg.tau)?;
        let pseudo: Array2<f32> = one_hot(&hard_labels(&aligned), 2).into_dimensionality().expect("rank 2");
        mu = mu_warmup(t, total)?;
        let labels: Vec<u8> = li.iter().map(|&i| labeled.labels[i]).collect();
        let losses = adamatch_losses(&z_sl_w, &z_sl_s, &labels, &z_tu_s, &pseudo, &mask, mu)?;
        let value = losses.total.item() as f64;
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {t}")));
        }
        opt.step(&params, &losses.total.backward());

        let p_sl_s = rows(&z_sl_s);
        for (i, applied) in a_sl.applied.iter().enumerate() {
            let y = labels[i] as usize;
            let l1: f64 = (0..2).map(|k| (p_sl_s[[i, k]] as f64 - if k == y { 1.0 } else { 0.0 }).abs()).sum();
            ct.update(applied, (1.0 - 0.5 * l1).clamp(0.0, 1.0))?;
        }

        let rate = mask.iter().filter(|&&m| m).count() as f64 / nu as f64;
        mask_sum += rate;
        let (s, tt) = (t as u64 + 1, (t + 1) as f64 / total as f64);
        log.record(s, "source", losses.source.item() as f64, lr, tt);
        log.record(s, "target", losses.target.item() as f64, lr, tt);
        log.record(s, "total", value, lr, tt);
        log.record(s, "mu", mu, lr, tt);
        log.record(s, "threshold", threshold, lr, tt);
        log.record(s, "mask_rate", rate, lr, tt);
    }
    Ok(AdaMatchReport {
        steps: total,
        mean_mask_rate: if total == 0 { 0.0 } else { mask_sum / total as f64 },
        final_mu: mu,
        ct,
        first_batch,
    })
}
