//! Loss terms and pseudo-label rules for every training method.
//!
//! Classifier losses take logits unless the name says otherwise. Image-space
//! losses take already computed network outputs so they can be tested with
//! hand-built tensors.

pub mod ssim;

use defectda_tensor::{Elem, Var};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Classifier;

pub use ssim::ms_ssim;

/// Floor applied inside every `log` of the adversarial loss.
pub const LOG_CLAMP: f64 = 1e-7;
/// Confidence threshold for pseudo-labels.
pub const DEFAULT_TAU: f64 = 0.9;
/// Floor on class expectations in distribution alignment.
pub const ALIGN_EPS: f64 = 1e-6;
const PROB_FLOOR: f64 = 1e-12;

fn check_labels(labels: &[u8], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{classes}")));
    }
    Ok(())
}

pub fn one_hot<T: Elem>(labels: &[u8], classes: usize) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(&[labels.len(), classes]), |ix| {
        if labels[ix[0]] as usize == ix[1] {
            T::one()
        } else {
            T::zero()
        }
    })
}

fn batch_dims<T: Elem>(z: &Var<T>) -> Result<(usize, usize)> {
    match z.shape() {
        [n, c] if *n > 0 => Ok((*n, *c)),
        s => Err(Error::InvalidArgument(format!("expected a nonempty (batch, classes) tensor, got {s:?}"))),
    }
}

/// Per-sample `-Σ target · log_softmax(z)`, shape `(N,)`.
fn soft_ce_per_sample<T: Elem>(logits: &Var<T>, targets: ArrayD<T>) -> Var<T> {
    logits.log_softmax().mul(&Var::constant(targets)).sum_axes(&[1], false).neg()
}

/// Mean categorical cross entropy of logits against hard labels.
pub fn cross_entropy<T: Elem>(logits: &Var<T>, labels: &[u8]) -> Result<Var<T>> {
    let (n, c) = batch_dims(logits)?;
    check_labels(labels, n, c)?;
    Ok(soft_ce_per_sample(logits, one_hot(labels, c)).mean())
}

/// Mean categorical cross entropy of probability rows against hard labels.
pub fn cross_entropy_probs<T: Elem>(probs: &Var<T>, labels: &[u8]) -> Result<Var<T>> {
    let (n, c) = batch_dims(probs)?;
    check_labels(labels, n, c)?;
    let logp = probs.clamp(T::of(PROB_FLOOR), T::one()).ln();
    Ok(logp.mul(&Var::constant(one_hot(labels, c))).sum_axes(&[1], false).neg().mean())
}

/// `mean_i mask_i · CE(z_i, target_i)`, averaged over the whole batch so an
/// all-zero mask gives exactly 0. Targets are constants (no gradient).
pub fn masked_soft_cross_entropy<T: Elem>(logits: &Var<T>, targets: &Array2<T>, mask: &[bool]) -> Result<Var<T>> {
    let (n, c) = batch_dims(logits)?;
    if targets.dim() != (n, c) || mask.len() != n {
        return Err(Error::InvalidArgument("targets/mask do not match the logits batch".into()));
    }
    let m = ArrayD::from_shape_fn(IxDyn(&[n]), |ix| if mask[ix[0]] { T::one() } else { T::zero() });
    let ce = soft_ce_per_sample(logits, targets.clone().into_dyn());
    Ok(ce.mul(&Var::constant(m)).mean())
}

/// Supervised loss of the frozen classifier on aligned labeled target
/// images. Zero when there are none (UDA).
pub fn dbacs_classifier_loss<T: Elem>(f_cc: &Classifier<T>, aligned_tl: Option<&Var<T>>, labels: &[u8]) -> Result<Var<T>> {
    if !f_cc.is_frozen() {
        return Err(Error::ClassifierNotFrozen);
    }
    match aligned_tl {
        None => Ok(Var::scalar(T::zero())),
        Some(x) if x.shape()[0] == 0 => Ok(Var::scalar(T::zero())),
        Some(x) => cross_entropy(&f_cc.logits(x, false), labels),
    }
}

/// `mean log(1 − D(fake)) + mean log D(real)` with both arguments floored.
/// Discriminators ascend this value, aligners descend it.
pub fn adversarial_loss<T: Elem>(d_real: &Var<T>, d_fake: &Var<T>) -> Var<T> {
    let (lo, hi) = (T::of(LOG_CLAMP), T::one());
    let fake = d_fake.rsub_scalar(T::one()).clamp(lo, hi).ln().mean();
    let real = d_real.clamp(lo, hi).ln().mean();
    fake.add(&real)
}

/// Mean absolute difference.
pub fn l1<T: Elem>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    a.sub(b).abs().mean()
}

/// `L1(F(G(x_S)), x_S) + L1(G(F(x_T)), x_T)`.
pub fn cycle_loss<T: Elem>(x_s: &Var<T>, cycled_s: &Var<T>, x_t: &Var<T>, cycled_t: &Var<T>) -> Var<T> {
    l1(cycled_s, x_s).add(&l1(cycled_t, x_t))
}

/// `L1(F(x_S), x_S) + L1(G(x_T), x_T)`.
pub fn identity_loss<T: Elem>(x_s: &Var<T>, f_of_s: &Var<T>, x_t: &Var<T>, g_of_t: &Var<T>) -> Var<T> {
    l1(f_of_s, x_s).add(&l1(g_of_t, x_t))
}

/// `(1 − ms_ssim(cycled_S, x_S)) + (1 − ms_ssim(cycled_T, x_T))`.
pub fn msssim_loss<T: Elem>(x_s: &Var<T>, cycled_s: &Var<T>, x_t: &Var<T>, cycled_t: &Var<T>) -> Result<Var<T>> {
    let a = ms_ssim(cycled_s, x_s)?.rsub_scalar(T::one());
    let b = ms_ssim(cycled_t, x_t)?.rsub_scalar(T::one());
    Ok(a.add(&b))
}

/// Mean over the hidden layers (the output tap is excluded) of the squared
/// L2 distance between batch-mean activations of real and aligned inputs.
pub fn feature_matching_loss<T: Elem>(real_taps: &[Var<T>], aligned_taps: &[Var<T>]) -> Result<Var<T>> {
    if real_taps.len() != aligned_taps.len() || real_taps.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "feature matching needs matching tap lists with at least one hidden layer, got {} and {}",
            real_taps.len(),
            aligned_taps.len()
        )));
    }
    let hidden = real_taps.len() - 1;
    let mut total: Option<Var<T>> = None;
    for (r, a) in real_taps[..hidden].iter().zip(&aligned_taps[..hidden]) {
        let d = r.mean_axes(&[0], false).sub(&a.mean_axes(&[0], false)).square().sum();
        total = Some(match total {
            Some(t) => t.add(&d),
            None => d,
        });
    }
    Ok(total.unwrap().mul_scalar(T::of(1.0 / hidden as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cc: f64,
    pub adv: f64,
    pub cyc: f64,
    pub id: f64,
    pub fm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cc: 1.0, adv: 0.5, cyc: 0.3, id: 0.2, fm: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [("cc", self.cc), ("adv", self.adv), ("cyc", self.cyc), ("id", self.id), ("fm", self.fm)];
        match all.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            Some((k, v)) => Err(Error::InvalidArgument(format!("loss weight lambda_{k} = {v} must be >= 0"))),
            None => Ok(()),
        }
    }
}

/// The individual DBACS terms, each already summed over both directions.
pub struct DbacsTerms<T: Elem> {
    pub cc: Var<T>,
    pub adv: Var<T>,
    pub cyc: Var<T>,
    pub ssim: Var<T>,
    pub id: Var<T>,
    pub fm: Var<T>,
}

/// `λ_cc L_cc + λ_adv L_adv + λ_cyc (L_cyc + L_ssim) + λ_id L_id + λ_fm L_fm`.
/// Terms with a zero weight are left out of the graph entirely.
pub fn dbacs_final_loss<T: Elem>(w: &LossWeights, t: &DbacsTerms<T>) -> Result<Var<T>> {
    w.validate()?;
    let parts = [
        (w.cc, t.cc.clone()),
        (w.adv, t.adv.clone()),
        (w.cyc, t.cyc.add(&t.ssim)),
        (w.id, t.id.clone()),
        (w.fm, t.fm.clone()),
    ];
    Ok(parts
        .into_iter()
        .filter(|(l, _)| *l != 0.0)
        .map(|(l, v)| v.mul_scalar(T::of(l)))
        .reduce(|a, b| a.add(&b))
        .unwrap_or_else(|| Var::scalar(T::zero())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    pub labels: Vec<u8>,
    pub confidences: Vec<f64>,
    pub mask: Vec<bool>,
    pub threshold_used: f64,
}

impl PseudoLabelBatch {
    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn argmax_row<T: Elem>(row: ndarray::ArrayView1<'_, T>) -> (u8, f64) {
    let mut best = (0u8, f64::NEG_INFINITY);
    for (k, &v) in row.iter().enumerate() {
        if v.as_f64() > best.1 {
            best = (k as u8, v.as_f64());
        }
    }
    best
}

/// Hard pseudo-labels with an inclusive absolute threshold.
pub fn pseudo_label<T: Elem>(probs: &Array2<T>, tau: f64) -> PseudoLabelBatch {
    let (labels, confidences): (Vec<u8>, Vec<f64>) = probs.axis_iter(Axis(0)).map(argmax_row).unzip();
    let mask = confidences.iter().map(|&c| c >= tau).collect();
    PseudoLabelBatch { labels, confidences, mask, threshold_used: tau }
}

/// Linear ramp schedule for the online pseudo-label weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaRamp {
    pub alpha_max: f64,
    /// Ramp start as a fraction of T.
    pub t1: f64,
    /// Ramp end as a fraction of T.
    pub t2: f64,
}

impl Default for AlphaRamp {
    fn default() -> Self {
        AlphaRamp { alpha_max: 1.0, t1: 0.2, t2: 0.6 }
    }
}

impl AlphaRamp {
    pub fn alpha(&self, t: usize, total: usize) -> Result<f64> {
        if total == 0 {
            return Err(Error::InvalidArgument("total steps T must be positive".into()));
        }
        let (t, total) = (t as f64, total as f64);
        let (t1, t2) = (self.t1 * total, self.t2 * total);
        Ok(if t < t1 {
            0.0
        } else if t < t2 {
            self.alpha_max * (t - t1) / (t2 - t1)
        } else {
            self.alpha_max
        })
    }
}

/// `CE(f(x_S), y_S) + α(t) · masked CE(f(x_T), ŷ_T)`.
pub fn online_pl_loss<T: Elem>(
    source_logits: &Var<T>,
    source_labels: &[u8],
    target_logits: &Var<T>,
    pseudo: &PseudoLabelBatch,
    alpha: f64,
) -> Result<Var<T>> {
    let sup = cross_entropy(source_logits, source_labels)?;
    if alpha == 0.0 || pseudo.selected() == 0 {
        return Ok(sup);
    }
    let (_, c) = batch_dims(target_logits)?;
    let targets = one_hot::<T>(&pseudo.labels, c).into_dimensionality().expect("rank 2");
    let unsup = masked_soft_cross_entropy(target_logits, &targets, &pseudo.mask)?;
    Ok(sup.add(&unsup.mul_scalar(T::of(alpha))))
}

/// Warm-up `μ(t) = 0.5 − cos(min(π, 2πt/T)) / 2`.
pub fn mu_warmup(t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("total steps T must be positive".into()));
    }
    let arg = (2.0 * std::f64::consts::PI * t as f64 / total as f64).min(std::f64::consts::PI);
    Ok(0.5 - arg.cos() / 2.0)
}

/// `λ ⊙ z1 + (1 − λ) ⊙ z2` for a given elementwise `λ`.
pub fn interpolate_logits<T: Elem>(z1: &Var<T>, z2: &Var<T>, lambda: ArrayD<T>) -> Result<Var<T>> {
    if z1.shape() != z2.shape() || lambda.shape() != z1.shape() {
        return Err(Error::InvalidArgument(format!(
            "logit shapes differ: {:?}, {:?}, lambda {:?}",
            z1.shape(),
            z2.shape(),
            lambda.shape()
        )));
    }
    let lam = Var::constant(lambda);
    Ok(z2.add(&lam.mul(&z1.sub(z2))))
}

/// Random logit interpolation with `λ ~ U(0,1)` drawn per entry.
pub fn random_logit_interpolation<T: Elem, R: Rng + ?Sized>(z1: &Var<T>, z2: &Var<T>, rng: &mut R) -> Result<Var<T>> {
    let lambda = ArrayD::from_shape_simple_fn(IxDyn(z1.shape()), || T::of(rng.random::<f64>()));
    interpolate_logits(z1, z2, lambda)
}

/// Column means of a probability batch.
pub fn class_expectation<T: Elem>(probs: &Array2<T>) -> Array1<f64> {
    probs.mapv(|v| v.as_f64()).mean_axis(Axis(0)).expect("nonempty batch")
}

/// `normalize(ŷ ⊙ E[ŷ_SL] / E[ŷ_TU])` with both expectations floored at
/// [`ALIGN_EPS`].
pub fn distribution_alignment<T: Elem>(probs_tu: &Array2<T>, mean_sl: &Array1<f64>, mean_tu: &Array1<f64>) -> Result<Array2<T>> {
    let c = probs_tu.ncols();
    if mean_sl.len() != c || mean_tu.len() != c {
        return Err(Error::InvalidArgument("class expectation length mismatch".into()));
    }
    let ratio: Vec<f64> = (0..c).map(|k| mean_sl[k].max(ALIGN_EPS) / mean_tu[k].max(ALIGN_EPS)).collect();
    let mut out = Array2::zeros(probs_tu.raw_dim());
    for (mut o, row) in out.axis_iter_mut(Axis(0)).zip(probs_tu.axis_iter(Axis(0))) {
        let scaled: Vec<f64> = row.iter().zip(&ratio).map(|(&p, r)| p.as_f64() * r).collect();
        let s: f64 = scaled.iter().sum();
        for (k, v) in scaled.into_iter().enumerate() {
            o[k] = T::of(if s > 0.0 { v / s } else { 1.0 / c as f64 });
        }
    }
    Ok(out)
}

/// Relative threshold `τ · mean_j max(ŷ_SL,j)`; returns the mask and the
/// effective threshold.
pub fn adamatch_confidence_mask<T: Elem>(probs_tu: &Array2<T>, probs_sl: &Array2<T>, tau: f64) -> Result<(Vec<bool>, f64)> {
    if probs_sl.nrows() == 0 {
        return Err(Error::InvalidArgument("empty source batch".into()));
    }
    let src_conf: f64 =
        probs_sl.axis_iter(Axis(0)).map(|r| argmax_row(r).1).sum::<f64>() / probs_sl.nrows() as f64;
    let threshold = tau * src_conf;
    let mask = probs_tu.axis_iter(Axis(0)).map(|r| argmax_row(r).1 >= threshold).collect();
    Ok((mask, threshold))
}

pub struct AdaMatchLosses<T: Elem> {
    pub source: Var<T>,
    pub target: Var<T>,
    pub total: Var<T>,
}

/// `L_source = CE(weak) + CE(strong)` on labeled source logits,
/// `L_target = masked CE(strong target logits, pseudo-labels)`,
/// `L_final = L_source + μ L_target`. Pseudo-labels are constants.
pub fn adamatch_losses<T: Elem>(
    sl_weak_logits: &Var<T>,
    sl_strong_logits: &Var<T>,
    labels: &[u8],
    tu_strong_logits: &Var<T>,
    pseudo_labels: &Array2<T>,
    mask: &[bool],
    mu: f64,
) -> Result<AdaMatchLosses<T>> {
    let source = cross_entropy(sl_weak_logits, labels)?.add(&cross_entropy(sl_strong_logits, labels)?);
    let target = masked_soft_cross_entropy(tu_strong_logits, pseudo_labels, mask)?;
    let total = source.add(&target.mul_scalar(T::of(mu)));
    Ok(AdaMatchLosses { source, target, total })
}

/// Accuracy of argmax predictions.
pub fn accuracy<T: Elem>(probs: &Array2<T>, labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = probs
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(r, &l)| argmax_row(*r).0 == l)
        .count();
    hits as f64 / labels.len() as f64
}
