use defectda::dataset::{generate_domain, make_scenario, split_dataset, DomainDataset, ScenarioData, ScenarioSpec};
use defectda::model::{Classifier, Module};
use defectda::tensor::par::{self, Exec};
use defectda::trainers::*;
use defectda::Error;
use proptest::prelude::*;

const SIDE: usize = 32;

fn domains(per_class: usize) -> Vec<DomainDataset> {
    (0..3u8)
        .map(|d| split_dataset(generate_domain(d, [per_class, per_class], 7, SIDE).unwrap(), 0.2, 7).unwrap())
        .collect()
}

fn uda(per_class: usize) -> ScenarioData {
    make_scenario(ScenarioSpec::uda(0, 1, 3), &domains(per_class)).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        phase1_epochs: 2,
        phase2_epochs: 1,
        lr: 1e-3,
        freeze_backbone: false,
        pl_iterations: 2,
        pl_epochs: 1,
        pl_lr: 1e-3,
        adamatch_batch: 8,
        adamatch_steps: 3,
        dbacs_batch: 4,
        dbacs_epochs: 1,
        aligner_width: 4,
        discriminator_width: 4,
        ..Default::default()
    }
}

fn trained(data: &ScenarioData, cfg: &TrainConfig) -> Classifier<f32> {
    let c = cfg.build_classifier(SIDE).unwrap();
    train_baseline(&c, &data.source_labeled, cfg, &mut TrainLog::memory("t")).unwrap();
    c
}

#[test]
fn phase_two_runs_at_a_tenth_of_the_base_rate() {
    let data = uda(12);
    let cfg = TrainConfig { batch_size: 8, phase1_epochs: 1, phase2_epochs: 1, ..Default::default() };
    let c = cfg.build_classifier(SIDE).unwrap();
    let rep = train_baseline(&c, &data.source_labeled, &cfg, &mut TrainLog::memory("t")).unwrap();
    assert_eq!(rep.phase1.lr, 1e-4);
    assert!((rep.phase2.lr - 1e-5).abs() < 1e-12);
    // 24 labeled train images per domain after the 20% test split.
    let n = data.source_labeled.len();
    assert_eq!(rep.val_size, (0.2 * n as f64).round() as usize);
    assert_eq!(rep.train_size + rep.val_size, n);
}

proptest! {
    #[test]
    fn validation_split_is_stratified(labels in prop::collection::vec(0u8..2, 10..200), seed in any::<u64>()) {
        let (train, val) = validation_split(&labels, 0.2, seed);
        let n = labels.len();
        prop_assert_eq!(val.len(), (0.2 * n as f64).round() as usize);
        prop_assert_eq!(train.len() + val.len(), n);
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&val) {
            prop_assert!(!seen[i]);
            seen[i] = true;
        }
        for c in 0..2u8 {
            let total = labels.iter().filter(|&&l| l == c).count() as f64;
            let held = val.iter().filter(|&&i| labels[i] == c).count() as f64;
            prop_assert!((held - 0.2 * total).abs() <= 1.0, "class {} held {} of {}", c, held, total);
        }
    }
}

#[test]
fn early_stopping_restores_the_best_checkpoint() {
    let data = uda(16);
    let cfg = TrainConfig { lr: 3e-2, phase1_epochs: 6, phase2_epochs: 4, patience: 2, ..quick() };
    let c = cfg.build_classifier(SIDE).unwrap();
    let set = &data.source_labeled;
    let rep = train_baseline(&c, set, &cfg, &mut TrainLog::memory("t")).unwrap();
    for phase in [&rep.phase1, &rep.phase2] {
        let best = phase.best_val_loss();
        assert!(phase.val_losses[phase.best_index..].iter().all(|&v| best <= v));
        assert_eq!(phase.val_losses.len(), phase.epochs_run + 1);
    }
    // The final state is the restored phase-2 checkpoint.
    let (_, val) = validation_split(&set.labels, cfg.val_fraction, cfg.seed);
    let probs = predict_probs(&c, &set.batch(&val));
    let ce: f64 = val
        .iter()
        .enumerate()
        .map(|(k, &i)| -(probs[[k, set.labels[i] as usize]] as f64).max(1e-7).ln())
        .sum::<f64>()
        / val.len() as f64;
    assert!((ce - rep.phase2.best_val_loss()).abs() < 1e-4, "{ce} vs {}", rep.phase2.best_val_loss());
}

#[test]
fn offline_pl_with_unreachable_threshold_stops_at_first_round() {
    let data = uda(12);
    let cfg = TrainConfig { tau: 1.0, ..quick() };
    let c = cfg.build_classifier(SIDE).unwrap();
    let before = c.checksum();
    let rep = train_offline_pl(&c, &data, &cfg, &mut TrainLog::memory("t")).unwrap();
    assert_eq!(rep.selected, vec![0]);
    assert_eq!(rep.iterations, 0);
    assert!(rep.stopped_early);
    assert_eq!(c.checksum(), before);
}

#[test]
fn offline_pl_selects_only_confident_samples() {
    let data = uda(16);
    // With two classes every argmax clears 0.5, so the first round keeps all.
    let cfg = TrainConfig { tau: 0.5, ..quick() };
    let c = trained(&data, &cfg);
    let rep = train_offline_pl(&c, &data, &cfg, &mut TrainLog::memory("t")).unwrap();
    assert_eq!(rep.selected[0], data.target_unlabeled.len());
    for (&n, &m) in rep.selected.iter().zip(&rep.min_selected_confidence) {
        assert!(n <= data.target_unlabeled.len());
        if n > 0 {
            assert!(m >= cfg.tau, "selected confidence {m} below tau");
        }
    }
}

#[test]
fn online_pl_ramps_from_zero_with_one_to_three_batches() {
    let data = uda(16);
    let cfg = quick();
    let c = trained(&data, &cfg);
    let mut log = TrainLog::memory("t");
    let rep = train_online_pl(&c, &data, &cfg, &mut log).unwrap();
    assert_eq!(rep.first_batch, (8, 24));
    let alpha = log.values("alpha");
    assert_eq!(alpha.len(), rep.steps);
    assert_eq!(alpha[0], 0.0);
    assert!(alpha.windows(2).all(|w| w[0] <= w[1]));
    let n_lab = data.all_labeled().len();
    assert_eq!(rep.steps, cfg.pl_epochs * n_lab.div_ceil(cfg.batch_size));
}

#[test]
fn adamatch_batches_and_warmup() {
    let data = uda(16);
    let cfg = TrainConfig { ratio: 3, ..quick() };
    let c = trained(&data, &cfg);
    let mut log = TrainLog::memory("t");
    let rep = train_adamatch(&c, &data, &cfg, &mut log).unwrap();
    assert_eq!(rep.first_batch, (8, 24));
    assert_eq!(rep.steps, 3);
    let mu = log.values("mu");
    assert_eq!(mu[0], 0.0);
    assert!(log.values("total").iter().all(|v| v.is_finite()));
    assert!(log.values("mask_rate").iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn running_mean_starts_at_first_value_and_forgets_old_ones() {
    let mut m = RunningMean::new(3);
    assert!(m.value().is_none());
    m.push(ndarray::arr1(&[0.2, 0.8]));
    assert_eq!(m.value().unwrap(), ndarray::arr1(&[0.2, 0.8]));
    for v in [0.4, 0.6, 0.8] {
        m.push(ndarray::arr1(&[v, 1.0 - v]));
    }
    assert_eq!(m.len(), 3);
    let v = m.value().unwrap();
    assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.4).abs() < 1e-12);
}

#[test]
fn dbacs_alternates_and_leaves_classifier_untouched() {
    let data = uda(8);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { dbacs_epochs: 2, checkpoint_every: 1, run_dir: Some(dir.path().to_path_buf()), ..quick() };
    let c = cfg.build_classifier(SIDE).unwrap();
    c.set_frozen(true);
    let before = c.checksum();
    let mut log = TrainLog::memory("dbacs-test");
    let (_, rep) = train_dbacs(&c, &data, &cfg, &mut log).unwrap();
    let s = rep.update_string();
    let n_target = data.target_labeled.len() + data.target_unlabeled.len();
    assert_eq!(rep.iterations_per_epoch, n_target.div_ceil(cfg.dbacs_batch));
    assert_eq!(s.len(), 3 * rep.iterations_per_epoch * cfg.dbacs_epochs);
    assert!(s.as_bytes().chunks(3).all(|ch| ch == b"DDA"), "{s}");
    assert_eq!(rep.classifier_checksum_before, before);
    assert_eq!(rep.classifier_checksum_after, before);
    assert_eq!(c.checksum(), before);
    // UDA: the classifier term is identically zero.
    assert!(log.values("cc").iter().all(|&v| v == 0.0));
    for e in 1..=2 {
        let ck = dir.path().join("runs/dbacs-test").join(format!("ckpt_{e}"));
        for sub in ["F", "G", "D_A", "D_B"] {
            assert!(ck.join(sub).join("weights.bin").is_file(), "{}", ck.display());
        }
    }
}

#[test]
fn dbacs_uses_target_labels_in_ssda() {
    let spec = ScenarioSpec::ssda(0, 1, 0.25, 3);
    let data = make_scenario(spec, &domains(8)).unwrap();
    assert!(!data.target_labeled.is_empty());
    let cfg = quick();
    let c = cfg.build_classifier(SIDE).unwrap();
    c.set_frozen(true);
    let mut log = TrainLog::memory("t");
    train_dbacs(&c, &data, &cfg, &mut log).unwrap();
    assert!(log.values("cc").iter().all(|&v| v > 0.0));
}

#[test]
fn dbacs_rejects_trainable_classifier() {
    let data = uda(8);
    let cfg = quick();
    let c = cfg.build_classifier(SIDE).unwrap();
    c.set_frozen(false);
    let r = train_dbacs(&c, &data, &cfg, &mut TrainLog::memory("t"));
    assert!(matches!(r, Err(Error::ClassifierNotFrozen)));
}

#[test]
fn uda_training_never_reads_sealed_labels() {
    let data = uda(12);
    let cfg = quick();
    let c = trained(&data, &cfg);
    let mut log = TrainLog::memory("t");
    train_offline_pl(&c, &data, &TrainConfig { tau: 0.5, ..cfg.clone() }, &mut log).unwrap();
    train_online_pl(&c, &data, &cfg, &mut log).unwrap();
    train_adamatch(&c, &data, &cfg, &mut log).unwrap();
    c.set_frozen(true);
    train_dbacs(&c, &data, &cfg, &mut log).unwrap();
    assert_eq!(data.target_unlabeled.sealed().read_count(), 0);
}

#[test]
fn identical_runs_are_bit_identical() {
    par::set_default_exec(Exec::Sequential);
    let data = uda(12);
    let cfg = quick();
    let run = || {
        let c = cfg.build_classifier(SIDE).unwrap();
        let mut log = TrainLog::memory("t");
        train_baseline(&c, &data.source_labeled, &cfg, &mut log).unwrap();
        train_online_pl(&c, &data, &cfg, &mut log).unwrap();
        let values: Vec<f64> = log.records().iter().map(|r| r.value).collect();
        (c.checksum(), values)
    };
    let (a, b) = (run(), run());
    par::set_default_exec(Exec::Parallel);
    assert_eq!(a, b);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = uda(8);
    let c = quick().build_classifier(SIDE).unwrap();
    for cfg in [
        TrainConfig { batch_size: 0, ..quick() },
        TrainConfig { tau: 0.0, ..quick() },
        TrainConfig { val_fraction: 1.0, ..quick() },
    ] {
        let r = train_baseline(&c, &data.source_labeled, &cfg, &mut TrainLog::memory("t"));
        assert!(matches!(r, Err(Error::Config(_))), "{r:?}");
    }
}
