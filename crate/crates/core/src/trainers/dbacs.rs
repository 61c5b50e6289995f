use std::path::PathBuf;

use defectda_tensor::{Adam, AdamConfig, Var};
use ndarray::{concatenate, ArrayD, Axis};

use super::{Cycler, TrainConfig, TrainLog};
use crate::dataset::{stack, Mode, ScenarioData};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, cycle_loss, dbacs_classifier_loss, dbacs_final_loss, feature_matching_loss, identity_loss,
    msssim_loss, DbacsTerms,
};
use crate::model::{checkpoint, Aligner, Classifier, Direction, Discriminator, Module};
use crate::seed::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateKind {
    Discriminator,
    Aligner,
}

impl UpdateKind {
    pub fn symbol(self) -> char {
        match self {
            UpdateKind::Discriminator => 'D',
            UpdateKind::Aligner => 'A',
        }
    }
}

/// Aligners `F` (target to source) and `G` (source to target) with their
/// discriminators `D_A` (source domain) and `D_B` (target domain).
pub struct DbacsEnsemble {
    pub f: Aligner<f32>,
    pub g: Aligner<f32>,
    pub d_a: Discriminator<f32>,
    pub d_b: Discriminator<f32>,
}

impl DbacsEnsemble {
    pub fn build(side: usize, cfg: &TrainConfig) -> Result<Self> {
        let r = |k: u64| seed::rng(&[tag::INIT, cfg.seed, 10 + k]);
        Ok(DbacsEnsemble {
            f: Aligner::build(Direction::TargetToSource, side, cfg.aligner_width, &mut r(0))?,
            g: Aligner::build(Direction::SourceToTarget, side, cfg.aligner_width, &mut r(1))?,
            d_a: Discriminator::build(side, cfg.discriminator_width, &mut r(2))?,
            d_b: Discriminator::build(side, cfg.discriminator_width, &mut r(3))?,
        })
    }

    fn aligner_params(&self) -> Vec<defectda_tensor::Param<f32>> {
        let mut p = self.f.params();
        p.extend(self.g.params());
        p
    }

    fn discriminator_params(&self) -> Vec<defectda_tensor::Param<f32>> {
        let mut p = self.d_a.params();
        p.extend(self.d_b.params());
        p
    }

    fn map_chunks(images: &ArrayD<f32>, f: impl Fn(&Var<f32>) -> Var<f32>) -> ArrayD<f32> {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + 64).min(n);
            let x = Var::constant(images.slice_axis(Axis(0), (start..end).into()).to_owned());
            parts.push(f(&x).value().clone());
            start = end;
        }
        if parts.is_empty() {
            return images.clone();
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views).expect("same image shape")
    }

    /// `F(x)`: target images mapped to the source style.
    pub fn align(&self, images: &ArrayD<f32>) -> ArrayD<f32> {
        Self::map_chunks(images, |x| self.f.forward(x))
    }

    /// `G(F(x))`: the target cycle.
    pub fn cycle_target(&self, images: &ArrayD<f32>) -> ArrayD<f32> {
        Self::map_chunks(images, |x| self.g.forward(&self.f.forward(x)))
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        let side = self.f.input_side;
        checkpoint::save(&self.f, &dir.join("F"), "aligner-target_to_source", side)?;
        checkpoint::save(&self.g, &dir.join("G"), "aligner-source_to_target", side)?;
        checkpoint::save(&self.d_a, &dir.join("D_A"), "discriminator", side)?;
        checkpoint::save(&self.d_b, &dir.join("D_B"), "discriminator", side)?;
        Ok(())
    }

    pub fn load(&self, dir: &std::path::Path) -> Result<()> {
        let side = self.f.input_side;
        checkpoint::load(&self.f, &dir.join("F"), "aligner-target_to_source", side)?;
        checkpoint::load(&self.g, &dir.join("G"), "aligner-source_to_target", side)?;
        checkpoint::load(&self.d_a, &dir.join("D_A"), "discriminator", side)?;
        checkpoint::load(&self.d_b, &dir.join("D_B"), "discriminator", side)?;
        Ok(())
    }
}

pub struct DbacsReport {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    /// Every parameter update in order.
    pub updates: Vec<UpdateKind>,
    pub classifier_checksum_before: String,
    pub classifier_checksum_after: String,
    pub checkpoints: Vec<PathBuf>,
}

impl DbacsReport {
    pub fn update_string(&self) -> String {
        self.updates.iter().map(|u| u.symbol()).collect()
    }
}

fn set_phase(ens: &DbacsEnsemble, kind: UpdateKind) {
    let d = kind == UpdateKind::Discriminator;
    for p in ens.discriminator_params() {
        p.set_trainable(d);
    }
    for p in ens.aligner_params() {
        p.set_trainable(!d);
    }
}

/// Alternating adversarial training: per iteration `r_adv` discriminator
/// steps on the adversarial terms, then one aligner step on the full
/// weighted loss (with the classifier term only in SSDA). The classifier
/// must be frozen and stays bit-identical.
pub fn train_dbacs(
    f_cc: &Classifier<f32>,
    data: &ScenarioData,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<(DbacsEnsemble, DbacsReport)> {
    cfg.validate()?;
    if !f_cc.is_frozen() {
        return Err(Error::ClassifierNotFrozen);
    }
    let before = f_cc.checksum();
    let side = data.side;
    let ens = DbacsEnsemble::build(side, cfg)?;

    let src = &data.source_labeled;
    let (tl, tu) = (&data.target_labeled, &data.target_unlabeled);
    let n_target = tl.len() + tu.len();
    if src.is_empty() || n_target == 0 {
        return Err(Error::InvalidArgument("DBACS needs source and target training images".into()));
    }
    let target_image = |i: usize| if i < tl.len() { tl.image(i) } else { tu.image(i - tl.len()) };
    let use_cc = data.spec.mode == Mode::Ssda && !tl.is_empty() && cfg.loss_weights.cc > 0.0;

    let b = cfg.dbacs_batch;
    let iters = n_target.div_ceil(b);
    let total = (cfg.dbacs_epochs * iters).max(1);
    let lr = cfg.dbacs_lr;
    let mut opt_d = Adam::new(AdamConfig { lr, ..Default::default() });
    let mut opt_a = Adam::new(AdamConfig { lr, ..Default::default() });
    let (d_params, a_params) = (ens.discriminator_params(), ens.aligner_params());
    let mut src_cy = Cycler::new(src.len(), &[tag::SHUFFLE, cfg.seed, 400]);
    let mut tgt_cy = Cycler::new(n_target, &[tag::SHUFFLE, cfg.seed, 401]);
    let mut tl_cy = Cycler::new(tl.len(), &[tag::SHUFFLE, cfg.seed, 402]);
    let w = cfg.loss_weights;

    let mut report = DbacsReport {
        epochs: cfg.dbacs_epochs,
        iterations_per_epoch: iters,
        updates: Vec::with_capacity(total * (cfg.r_adv + 1)),
        classifier_checksum_before: before.clone(),
        classifier_checksum_after: String::new(),
        checkpoints: Vec::new(),
    };
    let mut next_batches = || {
        let xs = src.batch(&src_cy.take(b));
        let xt = stack(side, tgt_cy.take(b).into_iter().map(target_image));
        (Var::constant(xs), Var::constant(xt))
    };
    let mut step = 0u64;
    for epoch in 0..cfg.dbacs_epochs {
        for _ in 0..iters {
            let tt = step as f64 / total as f64;
            set_phase(&ens, UpdateKind::Discriminator);
            for _ in 0..cfg.r_adv {
                let (xs, xt) = next_batches();
                let ft = ens.f.forward(&xt).detach();
                let gs = ens.g.forward(&xs).detach();
                let adv_s = adversarial_loss(&ens.d_a.forward(&xs).prob, &ens.d_a.forward(&ft).prob);
                let adv_t = adversarial_loss(&ens.d_b.forward(&xt).prob, &ens.d_b.forward(&gs).prob);
                let adv = adv_s.add(&adv_t);
                opt_d.step(&d_params, &adv.neg().backward());
                report.updates.push(UpdateKind::Discriminator);
                log.record(step, "d_adv", adv.item() as f64, lr, tt);
            }

            set_phase(&ens, UpdateKind::Aligner);
            let (xs, xt) = next_batches();
            let ft = ens.f.forward(&xt);
            let gs = ens.g.forward(&xs);
            let (da_real, da_fake) = (ens.d_a.forward(&xs), ens.d_a.forward(&ft));
            let (db_real, db_fake) = (ens.d_b.forward(&xt), ens.d_b.forward(&gs));
            let adv = adversarial_loss(&da_real.prob, &da_fake.prob).add(&adversarial_loss(&db_real.prob, &db_fake.prob));
            let (cyc_s, cyc_t) = (ens.f.forward(&gs), ens.g.forward(&ft));
            let cyc = cycle_loss(&xs, &cyc_s, &xt, &cyc_t);
            let ssim = msssim_loss(&xs, &cyc_s, &xt, &cyc_t)?;
            let id = if w.id > 0.0 {
                identity_loss(&xs, &ens.f.forward(&xs), &xt, &ens.g.forward(&xt))
            } else {
                Var::scalar(0.0)
            };
            let fm = if w.fm > 0.0 {
                feature_matching_loss(&da_real.taps, &da_fake.taps)?.add(&feature_matching_loss(&db_real.taps, &db_fake.taps)?)
            } else {
                Var::scalar(0.0)
            };
            let cc = if use_cc {
                let ti = tl_cy.take(b.min(tl.len()));
                let labels: Vec<u8> = ti.iter().map(|&i| tl.labels[i]).collect();
                let aligned = ens.f.forward(&Var::constant(tl.batch(&ti)));
                dbacs_classifier_loss(f_cc, Some(&aligned), &labels)?
            } else {
                dbacs_classifier_loss(f_cc, None, &[])?
            };
            let terms = DbacsTerms { cc, adv, cyc, ssim, id, fm };
            let total_loss = dbacs_final_loss(&w, &terms)?;
            let value = total_loss.item() as f64;
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite DBACS loss at step {step}")));
            }
            opt_a.step(&a_params, &total_loss.backward());
            report.updates.push(UpdateKind::Aligner);
            for (name, v) in [
                ("final", &total_loss),
                ("cc", &terms.cc),
                ("adv", &terms.adv),
                ("cyc", &terms.cyc),
                ("ssim", &terms.ssim),
                ("id", &terms.id),
                ("fm", &terms.fm),
            ] {
                log.record(step, name, v.item() as f64, lr, tt);
            }
            step += 1;
        }
        let last = epoch + 1 == cfg.dbacs_epochs;
        let due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
        if let (Some(root), true) = (&cfg.run_dir, last || due) {
            let dir = root.join("runs").join(log.run_id()).join(format!("ckpt_{}", epoch + 1));
            ens.save(&dir)?;
            report.checkpoints.push(dir);
        }
    }
    for p in ens.discriminator_params().into_iter().chain(ens.aligner_params()) {
        p.set_trainable(true);
    }
    let after = f_cc.checksum();
    if after != before {
        return Err(Error::Training("frozen classifier changed during DBACS training".into()));
    }
    report.classifier_checksum_after = after;
    Ok((ens, report))
}
