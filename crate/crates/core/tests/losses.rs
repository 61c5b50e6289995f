use approx::assert_abs_diff_eq;
use defectda::losses::ssim::{gaussian_taps, num_scales, scale_weights, CS_FLOOR, K1, K2, WINDOW};
use defectda::losses::*;
use defectda::model::{Arch, Classifier};
use defectda::tensor::gradcheck::check_params;
use defectda::tensor::{Adam, AdamConfig, Param, Var};
use defectda::Error;
use ndarray::{arr1, arr2, Array2, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn v2(rows: &[[f64; 2]]) -> Var<f64> {
    Var::constant(arr2(rows).into_dyn())
}

fn images(n: usize, side: usize, seed: u64) -> ArrayD<f64> {
    let mut r = rng(seed);
    ArrayD::from_shape_simple_fn(IxDyn(&[n, 1, side, side]), || r.random_range(0.05..0.95))
}

fn constant_images(n: usize, side: usize, v: f64) -> Var<f64> {
    Var::constant(ArrayD::from_elem(IxDyn(&[n, 1, side, side]), v))
}

#[test]
fn cross_entropy_reference_values() {
    let uniform = v2(&[[0.0, 0.0], [3.0, 3.0]]);
    assert_abs_diff_eq!(cross_entropy(&uniform, &[0, 1]).unwrap().item(), std::f64::consts::LN_2, epsilon = 1e-12);
    let probs = v2(&[[1.0, 0.0], [0.0, 1.0]]);
    assert_abs_diff_eq!(cross_entropy_probs(&probs, &[0, 1]).unwrap().item(), 0.0, epsilon = 1e-12);
    let half = v2(&[[0.5, 0.5]]);
    assert_abs_diff_eq!(cross_entropy_probs(&half, &[1]).unwrap().item(), std::f64::consts::LN_2, epsilon = 1e-12);

    let z = v2(&[[1.0, -2.0], [0.3, 0.1], [-1.0, 2.5]]);
    let labels = [0u8, 1, 1];
    let per: f64 = (0..3)
        .map(|i| {
            let row = [z.value()[[i, 0]], z.value()[[i, 1]]];
            let lse = (row[0].exp() + row[1].exp()).ln();
            lse - row[labels[i] as usize]
        })
        .sum::<f64>()
        / 3.0;
    assert_abs_diff_eq!(cross_entropy(&z, &labels).unwrap().item(), per, epsilon = 1e-12);
    assert!(matches!(cross_entropy(&z, &[0, 2, 1]), Err(Error::InvalidArgument(_))));
    assert!(matches!(cross_entropy(&z, &[0, 1]), Err(Error::InvalidArgument(_))));
}

#[test]
fn adversarial_loss_reference_values() {
    let half = Var::constant(ArrayD::from_elem(IxDyn(&[4, 1]), 0.5));
    assert_abs_diff_eq!(adversarial_loss(&half, &half).item(), -1.3863, epsilon = 1e-4);
    let ones = Var::constant(ArrayD::from_elem(IxDyn(&[4, 1]), 1.0));
    let zeros = Var::constant(ArrayD::from_elem(IxDyn(&[4, 1]), 0.0));
    assert_abs_diff_eq!(adversarial_loss(&ones, &zeros).item(), 0.0, epsilon = 1e-6);
    // worst case is bounded by the clamp
    assert!(adversarial_loss(&zeros, &ones).item() >= 2.0 * (LOG_CLAMP).ln() - 1e-9);
    // role symmetry: the target-side loss is the same formula with domains swapped
    let a = Var::constant(arr2(&[[0.2], [0.7]]).into_dyn());
    let b = Var::constant(arr2(&[[0.4], [0.9]]).into_dyn());
    let s = adversarial_loss(&a, &b).item();
    let direct = ((1.0f64 - 0.4).ln() + (1.0f64 - 0.9).ln()) / 2.0 + (0.2f64.ln() + 0.7f64.ln()) / 2.0;
    assert_abs_diff_eq!(s, direct, epsilon = 1e-12);
}

#[test]
fn cycle_and_identity_hand_values() {
    let x = constant_images(2, 8, 0.5);
    let cyc = constant_images(2, 8, 0.7);
    assert_abs_diff_eq!(cycle_loss(&x, &cyc, &x, &x).item(), 0.2, epsilon = 1e-12);
    assert_abs_diff_eq!(cycle_loss(&x, &x, &cyc, &cyc).item(), 0.0, epsilon = 1e-12);
    let q = constant_images(2, 8, 0.25);
    let inv = constant_images(2, 8, 0.75);
    assert_abs_diff_eq!(l1(&inv, &q).item(), 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(identity_loss(&q, &inv, &q, &q).item(), 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(identity_loss(&q, &q, &q, &q).item(), 0.0, epsilon = 1e-12);
}

#[test]
fn image_losses_are_nonnegative_under_fuzzing() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let a = Var::constant(ArrayD::from_shape_simple_fn(IxDyn(&[2, 1, 4, 4]), || r.random::<f64>()));
        let b = Var::constant(ArrayD::from_shape_simple_fn(IxDyn(&[2, 1, 4, 4]), || r.random::<f64>()));
        assert!(cycle_loss(&a, &b, &b, &a).item() >= 0.0);
        assert!(identity_loss(&a, &b, &a, &b).item() >= 0.0);
        let taps = |x: &Var<f64>| vec![x.clone(), x.mean_axes(&[1, 2, 3], false)];
        assert!(feature_matching_loss(&taps(&a), &taps(&b)).unwrap().item() >= 0.0);
    }
}

/// Direct scalar MS-SSIM with explicit loops, independent of the tensor ops.
fn ms_ssim_oracle(x: &ArrayD<f64>, y: &ArrayD<f64>) -> f64 {
    let g = gaussian_taps();
    let n = x.shape()[0];
    let side = x.shape()[2];
    let m = num_scales(side).unwrap();
    let w = scale_weights(m);
    let mut total = 0.0;
    for b in 0..n {
        let mut a: Vec<Vec<f64>> = (0..side).map(|i| (0..side).map(|j| x[[b, 0, i, j]]).collect()).collect();
        let mut c: Vec<Vec<f64>> = (0..side).map(|i| (0..side).map(|j| y[[b, 0, i, j]]).collect()).collect();
        let mut value = 1.0;
        for (s, &ws) in w.iter().enumerate() {
            let h = a.len();
            let out = h - WINDOW + 1;
            let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
            for i in 0..out {
                for j in 0..out {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for u in 0..WINDOW {
                        for v in 0..WINDOW {
                            let k = g[u] * g[v];
                            let (p, q) = (a[i + u][j + v], c[i + u][j + v]);
                            mx += k * p;
                            my += k * q;
                            xx += k * p * p;
                            yy += k * q * q;
                            xy += k * p * q;
                        }
                    }
                    let (c1, c2) = (K1 * K1, K2 * K2);
                    let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    let cs = (2.0 * (xy - mx * my) + c2) / ((xx - mx * mx) + (yy - my * my) + c2);
                    ssim_sum += l * cs;
                    cs_sum += cs;
                }
            }
            let cnt = (out * out) as f64;
            let f = if s + 1 == m { ssim_sum / cnt } else { cs_sum / cnt };
            value *= f.clamp(CS_FLOOR, 1.0).powf(ws);
            if s + 1 < m {
                let half = |z: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                    (0..h / 2)
                        .map(|i| {
                            (0..h / 2)
                                .map(|j| (z[2 * i][2 * j] + z[2 * i + 1][2 * j] + z[2 * i][2 * j + 1] + z[2 * i + 1][2 * j + 1]) / 4.0)
                                .collect()
                        })
                        .collect()
                };
                a = half(&a);
                c = half(&c);
            }
        }
        total += value;
    }
    total / n as f64
}

#[test]
fn ms_ssim_matches_direct_evaluation() {
    let mut r = rng(2);
    for k in 0..10 {
        let side = if k % 2 == 0 { 32 } else { 64 };
        let x = images(1, side, 100 + k);
        // correlated pair so the value is not near the clamp
        let y = x.mapv(|v| (0.7 * v + 0.3 * r.random::<f64>()).clamp(0.0, 1.0));
        let got = ms_ssim(&Var::constant(x.clone()), &Var::constant(y.clone())).unwrap().item();
        let want = ms_ssim_oracle(&x, &y);
        assert_abs_diff_eq!(got, want, epsilon = 1e-4);
    }
}

#[test]
fn msssim_loss_zero_on_identity_and_monotone_in_noise() {
    let x = Var::constant(images(2, 32, 3));
    assert_abs_diff_eq!(msssim_loss(&x, &x, &x, &x).unwrap().item(), 0.0, epsilon = 1e-9);
    let base = images(2, 64, 4).mapv(|v| 0.3 + 0.4 * v);
    let mut noise_rng = rng(5);
    let unit: ArrayD<f64> = ArrayD::from_shape_simple_fn(IxDyn(base.shape()), || {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut noise_rng)
    });
    let xb = Var::constant(base.clone());
    let mut last = 0.0;
    for sigma in [0.05, 0.1, 0.2] {
        let noisy = Var::constant((&base + &unit.mapv(|z| z * sigma)).mapv(|v| v.clamp(0.0, 1.0)));
        let loss = msssim_loss(&xb, &noisy, &xb, &xb).unwrap().item();
        assert!(loss > last, "sigma {sigma}: {loss} <= {last}");
        assert!(loss <= 2.0);
        last = loss;
    }
    let small = constant_images(1, 16, 0.5);
    assert!(matches!(msssim_loss(&small, &small, &small, &small), Err(Error::InvalidSide(16))));
}

#[test]
fn feature_matching_hand_computed_single_layer() {
    // a_1(x) = x · W with W = [[1, 0], [2, -1]], then an output logit.
    let w = Var::constant(arr2(&[[1.0, 0.0], [2.0, -1.0]]).into_dyn());
    let real = v2(&[[1.0, 2.0], [3.0, 0.0]]);
    let fake = v2(&[[0.0, 1.0], [1.0, 1.0]]);
    let taps = |x: &Var<f64>, out_w: f64| {
        let a1 = x.matmul(&w);
        let out = a1.sum_axes(&[1], true).mul_scalar(out_w);
        vec![a1, out]
    };
    // mean a1(real) = mean([5,-2],[3,0]) = [4,-1]; mean a1(fake) = mean([2,-1],[3,-1]) = [2.5,-1]
    let want = (4.0f64 - 2.5).powi(2);
    let got = feature_matching_loss(&taps(&real, 1.0), &taps(&fake, 1.0)).unwrap().item();
    assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    let perturbed = feature_matching_loss(&taps(&real, 7.0), &taps(&fake, -3.0)).unwrap().item();
    assert_abs_diff_eq!(perturbed, want, epsilon = 1e-12);
    assert_abs_diff_eq!(feature_matching_loss(&taps(&real, 1.0), &taps(&real, 1.0)).unwrap().item(), 0.0);
    assert!(feature_matching_loss(&taps(&real, 1.0)[..1], &taps(&fake, 1.0)[..1]).is_err());
}

fn terms(vals: [f64; 6]) -> DbacsTerms<f64> {
    let s = |v| Var::scalar(v);
    DbacsTerms { cc: s(vals[0]), adv: s(vals[1]), cyc: s(vals[2]), ssim: s(vals[3]), id: s(vals[4]), fm: s(vals[5]) }
}

#[test]
fn final_loss_reference_and_weight_rules() {
    let w = LossWeights::default();
    assert_eq!((w.cc, w.adv, w.cyc, w.id, w.fm), (1.0, 0.5, 0.3, 0.2, 0.0));
    // 1 + 0.5*2 + 0.3*(3 + 4) + 0.2*5 + 0*6
    assert_abs_diff_eq!(dbacs_final_loss(&w, &terms([1., 2., 3., 4., 5., 6.])).unwrap().item(), 5.1, epsilon = 1e-12);
    assert_abs_diff_eq!(dbacs_final_loss(&w, &terms([1., 2., 3., 4., 5., -60.])).unwrap().item(), 5.1, epsilon = 1e-12);
    let zero = LossWeights { cc: 0.0, adv: 0.0, cyc: 0.0, id: 0.0, fm: 0.0 };
    assert_eq!(dbacs_final_loss(&zero, &terms([1., 2., 3., 4., 5., 6.])).unwrap().item(), 0.0);
    let neg = LossWeights { adv: -0.1, ..w };
    assert!(dbacs_final_loss(&neg, &terms([0.; 6])).is_err());
}

proptest! {
    #[test]
    fn final_loss_is_the_exact_weighted_sum(
        t in prop::array::uniform6(-100.0f64..100.0),
        l in prop::array::uniform5(0.0f64..3.0),
    ) {
        let w = LossWeights { cc: l[0], adv: l[1], cyc: l[2], id: l[3], fm: l[4] };
        let want = l[0] * t[0] + l[1] * t[1] + l[2] * (t[2] + t[3]) + l[3] * t[4] + l[4] * t[5];
        let got = dbacs_final_loss(&w, &terms(t)).unwrap().item();
        prop_assert!((got - want).abs() <= 1e-6);
    }

    #[test]
    fn pseudo_label_mask_is_sound(p in prop::collection::vec(0u32..=20, 1..30), tau_num in 1u32..20) {
        // rational-valued probabilities k/20 and thresholds m/20
        let probs = Array2::from_shape_fn((p.len(), 2), |(i, k)| {
            let a = p[i] as f64 / 20.0;
            if k == 0 { a } else { 1.0 - a }
        });
        let tau = tau_num as f64 / 20.0;
        let pl = pseudo_label(&probs, tau);
        for i in 0..p.len() {
            let conf = probs[[i, 0]].max(probs[[i, 1]]);
            prop_assert_eq!(pl.mask[i], conf >= tau);
            prop_assert_eq!(pl.confidences[i], conf);
            prop_assert_eq!(probs[[i, pl.labels[i] as usize]], conf);
        }
    }

    #[test]
    fn adamatch_mask_is_sound(tu in prop::collection::vec(0u32..=10, 1..20), sl in prop::collection::vec(0u32..=10, 1..20)) {
        let mk = |v: &[u32]| Array2::from_shape_fn((v.len(), 2), |(i, k)| {
            let a = v[i] as f64 / 10.0;
            if k == 0 { a } else { 1.0 - a }
        });
        let (ptu, psl) = (mk(&tu), mk(&sl));
        let (mask, thr) = adamatch_confidence_mask(&ptu, &psl, 0.9).unwrap();
        let mean_src = psl.rows().into_iter().map(|r| r[0].max(r[1])).sum::<f64>() / sl.len() as f64;
        prop_assert!((thr - 0.9 * mean_src).abs() < 1e-12);
        for (i, r) in ptu.rows().into_iter().enumerate() {
            prop_assert_eq!(mask[i], r[0].max(r[1]) >= thr);
        }
    }

    #[test]
    fn interpolation_stays_between_inputs(a in prop::collection::vec(-10.0f64..10.0, 8), b in prop::collection::vec(-10.0f64..10.0, 8), seed: u64) {
        let z1 = Var::constant(ArrayD::from_shape_vec(IxDyn(&[4, 2]), a.clone()).unwrap());
        let z2 = Var::constant(ArrayD::from_shape_vec(IxDyn(&[4, 2]), b.clone()).unwrap());
        let z = random_logit_interpolation(&z1, &z2, &mut rng(seed)).unwrap();
        for (i, &v) in z.value().iter().enumerate() {
            prop_assert!(v >= a[i].min(b[i]) - 1e-12 && v <= a[i].max(b[i]) + 1e-12);
        }
    }

    #[test]
    fn distribution_alignment_rows_sum_to_one(p in prop::collection::vec(0.0f64..=1.0, 1..40), r0 in 0.0f64..1.0, r1 in 0.0f64..1.0) {
        let probs = Array2::from_shape_fn((p.len(), 2), |(i, k)| if k == 0 { p[i] } else { 1.0 - p[i] });
        let out = distribution_alignment(&probs, &arr1(&[r0, 1.0 - r0]), &arr1(&[r1, 1.0 - r1])).unwrap();
        for row in out.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn pseudo_label_examples() {
    let p = arr2(&[[0.95, 0.05], [0.6, 0.4], [0.9, 0.1], [0.02, 0.98]]);
    let pl = pseudo_label(&p, DEFAULT_TAU);
    assert_eq!(pl.labels, vec![0, 0, 0, 1]);
    assert_eq!(pl.mask, vec![true, false, true, true]);
    assert_eq!(pl.threshold_used, 0.9);
    assert_eq!(pl.selected(), 3);
}

#[test]
fn alpha_ramp_and_online_loss() {
    let ramp = AlphaRamp::default();
    let total = 1000;
    assert_eq!(ramp.alpha(0, total).unwrap(), 0.0);
    assert_eq!(ramp.alpha(600, total).unwrap(), 1.0);
    assert_eq!(ramp.alpha(999, total).unwrap(), 1.0);
    assert_abs_diff_eq!(ramp.alpha(400, total).unwrap(), 0.5, epsilon = 1e-12);
    let mut prev = 0.0;
    for k in 0..100 {
        let a = ramp.alpha(k * total / 100, total).unwrap();
        assert!(a >= prev);
        prev = a;
    }
    assert!(ramp.alpha(0, 0).is_err());

    let zs = v2(&[[1.0, -1.0], [0.2, 0.4]]);
    let zt = v2(&[[3.0, -3.0], [-0.5, 0.5]]);
    let pl = pseudo_label(&zt.softmax().value().clone().into_dimensionality().unwrap(), 0.9);
    assert_eq!(pl.mask, vec![true, false]);
    let sup = cross_entropy(&zs, &[0, 1]).unwrap().item();
    assert_abs_diff_eq!(online_pl_loss(&zs, &[0, 1], &zt, &pl, 0.0).unwrap().item(), sup, epsilon = 1e-12);
    let ce0 = (1.0 + (-6.0f64).exp()).ln();
    let want = sup + 0.5 * ce0 / 2.0;
    assert_abs_diff_eq!(online_pl_loss(&zs, &[0, 1], &zt, &pl, 0.5).unwrap().item(), want, epsilon = 1e-12);
}

#[test]
fn mu_warmup_shape() {
    assert_eq!(mu_warmup(0, 128).unwrap(), 0.0);
    assert_abs_diff_eq!(mu_warmup(32, 128).unwrap(), 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(mu_warmup(64, 128).unwrap(), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(mu_warmup(128, 128).unwrap(), 1.0, epsilon = 1e-12);
    assert!(mu_warmup(1, 0).is_err());
}

#[test]
fn interpolation_examples() {
    let z1 = v2(&[[2.0, 0.0]]);
    let z2 = v2(&[[0.0, 2.0]]);
    let at = |l: f64| interpolate_logits(&z1, &z2, ArrayD::from_elem(IxDyn(&[1, 2]), l)).unwrap();
    assert_eq!(at(0.0).value(), z2.value());
    assert_eq!(at(1.0).value(), z1.value());
    assert_eq!(at(0.5).to_vec(), vec![1.0, 1.0]);
    assert!(interpolate_logits(&z1, &v2(&[[0.0, 1.0], [1.0, 0.0]]), ArrayD::zeros(IxDyn(&[1, 2]))).is_err());
}

#[test]
fn distribution_alignment_examples() {
    let p = arr2(&[[0.5, 0.5], [0.8, 0.2]]);
    let e = arr1(&[0.3, 0.7]);
    assert_eq!(distribution_alignment(&p, &e, &e).unwrap(), p);
    let out = distribution_alignment(&arr2(&[[0.5, 0.5]]), &arr1(&[0.5, 0.25]), &arr1(&[0.25, 0.25])).unwrap();
    assert_abs_diff_eq!(out[[0, 0]], 2.0 / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(out[[0, 1]], 1.0 / 3.0, epsilon = 1e-12);
    // zero expectations are floored instead of dividing by zero
    let floored = distribution_alignment(&p, &arr1(&[0.0, 1.0]), &arr1(&[0.0, 1.0])).unwrap();
    assert!(floored.iter().all(|v: &f64| v.is_finite()));
}

#[test]
fn adamatch_mask_examples() {
    let src = arr2(&[[0.8, 0.2], [0.2, 0.8]]);
    let (m, thr) = adamatch_confidence_mask(&arr2(&[[0.75, 0.25], [0.5, 0.5]]), &src, 0.9).unwrap();
    assert_abs_diff_eq!(thr, 0.72, epsilon = 1e-12);
    assert_eq!(m, vec![true, false]);
    let sure = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
    let (_, thr) = adamatch_confidence_mask(&src, &sure, 0.9).unwrap();
    assert_abs_diff_eq!(thr, 0.9, epsilon = 1e-12);
    assert!(adamatch_confidence_mask(&src, &Array2::<f64>::zeros((0, 2)), 0.9).is_err());
}

#[test]
fn adamatch_losses_contracts() {
    let w = v2(&[[1.0, 0.0], [0.0, 1.0]]);
    let s = v2(&[[0.5, 0.1], [0.3, 0.2]]);
    let tu_leaf = Var::<f64>::leaf(arr2(&[[0.3, 0.9], [1.2, -0.4]]).into_dyn());
    let pseudo: Array2<f64> = tu_leaf.softmax().value().clone().into_dimensionality().unwrap();
    let labels = [0u8, 1];
    let off = adamatch_losses(&w, &s, &labels, &tu_leaf, &pseudo, &[false, false], 1.0).unwrap();
    assert_eq!(off.target.item(), 0.0);
    assert_eq!(off.total.item(), off.source.item());
    let src = cross_entropy(&w, &labels).unwrap().item() + cross_entropy(&s, &labels).unwrap().item();
    assert_abs_diff_eq!(off.source.item(), src, epsilon = 1e-12);
    let on = adamatch_losses(&w, &s, &labels, &tu_leaf, &pseudo, &[true, true], 0.0).unwrap();
    assert_eq!(on.total.item(), on.source.item());
    assert!(on.target.item() > 0.0);

    // pseudo-labels are detached: the only gradient path to the target
    // logits is the strong-view branch, identical for any pseudo-label values
    let other = pseudo.mapv(|v| 1.0 - v);
    let l2 = adamatch_losses(&w, &s, &labels, &tu_leaf, &other, &[true, true], 1.0).unwrap();
    assert_ne!(l2.target.item(), on.target.item());
    let g = l2.total.backward();
    let grad = g.get(&tu_leaf).unwrap();
    let soft = tu_leaf.softmax().value().clone();
    for i in 0..2 {
        for k in 0..2 {
            let want = (soft[[i, k]] - other[[i, k]]) / 2.0;
            assert_abs_diff_eq!(grad[[i, k]], want, epsilon = 1e-12);
        }
    }
}

#[test]
fn classifier_loss_requires_frozen_and_is_zero_without_labels() {
    let c = Classifier::<f32>::build(Arch::SmallCnn, 32, 2, &mut rng(6)).unwrap();
    let x = Var::constant(ArrayD::from_elem(IxDyn(&[2, 1, 32, 32]), 0.5f32));
    assert!(matches!(dbacs_classifier_loss(&c, Some(&x), &[0, 1]), Err(Error::ClassifierNotFrozen)));
    c.set_frozen(true);
    assert_eq!(dbacs_classifier_loss(&c, None, &[]).unwrap().item(), 0.0);

    // a head that is certain of class 0 makes the loss vanish on class-0 labels
    c.head.bias.set_value(ndarray::arr1(&[40.0f32, -40.0]).into_dyn());
    let shape = c.head.weight.value().shape().to_vec();
    c.head.weight.set_value(ArrayD::zeros(IxDyn(&shape)));
    let l = dbacs_classifier_loss(&c, Some(&x), &[0, 0]).unwrap();
    assert!(l.item() < 1e-6);

    // gradient reaches the input (the aligner side) and the classifier does not move
    let aligner_param = Param::new("shift", ArrayD::from_elem(IxDyn(&[1, 1, 32, 32]), 0.5f32));
    let before = defectda::model::Module::checksum(&c);
    c.head.bias.set_value(ndarray::arr1(&[0.3f32, -0.2]).into_dyn());
    let before_step = defectda::model::Module::checksum(&c);
    assert_ne!(before, before_step);
    let aligned = aligner_param.var().add(&Var::constant(ArrayD::zeros(IxDyn(&[2, 1, 32, 32]))));
    let loss = dbacs_classifier_loss(&c, Some(&aligned), &[1, 1]).unwrap();
    let g = loss.backward();
    assert!(g.param(&aligner_param).is_some());
    let mut params = defectda::model::Module::params(&c);
    params.push(aligner_param.clone());
    Adam::new(AdamConfig::default()).step(&params, &g);
    assert_eq!(defectda::model::Module::checksum(&c), before_step);
}

// ----- gradient checks on 16-parameter toy networks -----

const TOL: f64 = 1e-3;
const H: f64 = 1e-5;

fn param(shape: &[usize], seed: u64, scale: f64) -> Param<f64> {
    let mut r = rng(seed);
    Param::new("toy", ArrayD::from_shape_simple_fn(IxDyn(shape), || r.random_range(-scale..scale)))
}

/// 8 features -> 2 logits, 16 weights.
fn toy_logits(p: &Param<f64>, x: &ArrayD<f64>) -> Var<f64> {
    Var::constant(x.clone()).matmul(&p.var())
}

/// Residual aligner with a 4x4 tile of 16 logit offsets.
fn toy_aligner(p: &Param<f64>, x: &Var<f64>) -> Var<f64> {
    let side = x.shape()[2];
    let xc = x.clamp(1e-4, 1.0 - 1e-4);
    let logit = xc.ln().sub(&xc.rsub_scalar(1.0).ln());
    logit.add(&p.var().upsample_nearest(side / 4)).sigmoid()
}

/// One hidden tap then a scalar logit, 16 weights as a 4x4 tile.
fn toy_disc(p: &Param<f64>, x: &Var<f64>) -> Vec<Var<f64>> {
    let side = x.shape()[2];
    let a1 = x.mul(&p.var().upsample_nearest(side / 4)).leaky_relu(0.2);
    let out = a1.mean_axes(&[1, 2, 3], false).reshape(&[x.shape()[0], 1]).mul_scalar(4.0);
    vec![a1, out]
}

fn feats(n: usize, seed: u64) -> ArrayD<f64> {
    let mut r = rng(seed);
    ArrayD::from_shape_simple_fn(IxDyn(&[n, 8]), || r.random_range(-1.0..1.0))
}

fn assert_grad(name: &str, seed: u64, p: &Param<f64>, f: impl Fn() -> Var<f64>) {
    let gc = check_params(std::slice::from_ref(p), f, H);
    assert!(gc.passes(TOL), "{name} seed {seed}: rel error {}", gc.rel_error);
}

#[test]
fn gradient_checks_classifier_terms() {
    for seed in 0..5 {
        let p = param(&[8, 2], seed, 1.0);
        let x = feats(6, seed + 10);
        let labels = [0u8, 1, 1, 0, 1, 0];
        assert_grad("cross_entropy", seed, &p, || cross_entropy(&toy_logits(&p, &x), &labels).unwrap());
        assert_grad("cross_entropy_probs", seed, &p, || {
            cross_entropy_probs(&toy_logits(&p, &x).softmax(), &labels).unwrap()
        });
        let targets: Array2<f64> = Array2::from_shape_fn((6, 2), |(i, k)| if (i + k) % 3 == 0 { 0.8 } else { 0.2 });
        let mask = [true, false, true, true, false, true];
        assert_grad("masked_soft_ce", seed, &p, || {
            masked_soft_cross_entropy(&toy_logits(&p, &x), &targets, &mask).unwrap()
        });
        let pl = pseudo_label(&targets, 0.5);
        assert_grad("online_pl", seed, &p, || {
            let z = toy_logits(&p, &x);
            online_pl_loss(&z.narrow(0, 0, 3), &labels[..3], &z.narrow(0, 3, 3), &PseudoLabelBatch {
                labels: pl.labels[3..].to_vec(),
                confidences: pl.confidences[3..].to_vec(),
                mask: vec![true, true, false],
                threshold_used: 0.5,
            }, 0.7)
            .unwrap()
        });
        let lam = ArrayD::from_shape_fn(IxDyn(&[3, 2]), |ix| 0.1 + 0.15 * (ix[0] * 2 + ix[1]) as f64);
        assert_grad("adamatch", seed, &p, || {
            let z = toy_logits(&p, &x);
            let (zw, zs) = (z.narrow(0, 0, 3), z.narrow(0, 3, 3));
            let zi = interpolate_logits(&zw, &zs, lam.clone()).unwrap();
            let tgt = targets.slice(ndarray::s![0..3, ..]).to_owned();
            adamatch_losses(&zi, &zs, &labels[..3], &zw, &tgt, &[true, false, true], 0.6).unwrap().total
        });
    }
}

#[test]
fn gradient_checks_image_terms() {
    for seed in 0..5 {
        let side = 32;
        let xs = Var::constant(images(2, side, seed + 20));
        let xt = Var::constant(images(2, side, seed + 30));
        let pf = param(&[1, 1, 4, 4], seed, 0.5);
        assert_grad("cycle", seed, &pf, || {
            cycle_loss(&xs, &toy_aligner(&pf, &toy_aligner(&pf, &xs)), &xt, &toy_aligner(&pf, &xt))
        });
        assert_grad("identity", seed, &pf, || identity_loss(&xs, &toy_aligner(&pf, &xs), &xt, &xt));
        assert_grad("ms_ssim", seed, &pf, || {
            msssim_loss(&xs, &toy_aligner(&pf, &xs), &xt, &toy_aligner(&pf, &xt)).unwrap()
        });

        let pd = param(&[1, 1, 4, 4], seed + 40, 1.0);
        let prob = |x: &Var<f64>| toy_disc(&pd, x)[1].sigmoid();
        assert_grad("adversarial/disc", seed, &pd, || adversarial_loss(&prob(&xs), &prob(&toy_aligner(&pf, &xt))));
        assert_grad("adversarial/aligner", seed, &pf, || {
            adversarial_loss(&prob(&xs), &prob(&toy_aligner(&pf, &xt)))
        });
        assert_grad("feature_matching", seed, &pf, || {
            feature_matching_loss(&toy_disc(&pd, &xs), &toy_disc(&pd, &toy_aligner(&pf, &xt))).unwrap()
        });
        let w = LossWeights { fm: 0.25, ..Default::default() };
        assert_grad("final", seed, &pf, || {
            let ft = toy_aligner(&pf, &xt);
            let t = DbacsTerms {
                cc: Var::scalar(0.0),
                adv: adversarial_loss(&prob(&xs), &prob(&ft)),
                cyc: cycle_loss(&xs, &toy_aligner(&pf, &xs), &xt, &ft),
                ssim: msssim_loss(&xs, &toy_aligner(&pf, &xs), &xt, &ft).unwrap(),
                id: identity_loss(&xs, &toy_aligner(&pf, &xs), &xt, &xt),
                fm: feature_matching_loss(&toy_disc(&pd, &xs), &toy_disc(&pd, &ft)).unwrap(),
            };
            dbacs_final_loss(&w, &t).unwrap()
        });
    }
}
