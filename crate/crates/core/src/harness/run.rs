//! Scenario execution: baselines, adaptation methods and evaluation.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use defectda_tensor::{par, Var};
use ndarray::{Array2, Axis};

use super::config::RunConfig;
use super::results::{ResultsRow, ResultsStore, RowKind};
use crate::dataset::{
    generate_domain, load_dataset, make_scenario, split_dataset, DomainDataset, LabeledSet, Mode, ScenarioData,
    ScenarioSpec, Split, DEFAULT_COUNTS, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::model::{Aligner, Arch, Classifier, Module, Snapshot};
use crate::trainers::{
    train_adamatch, train_baseline, train_dbacs, train_offline_pl, train_online_pl, Method, TrainConfig, TrainLog,
};

const EVAL_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean per-class recall over the classes present in the test set.
    pub balanced_accuracy: f64,
}

/// Eval-mode top-1 accuracy on `test`, optionally mapping the images through
/// `aligner` first.
pub fn evaluate(c: &Classifier<f32>, test: &LabeledSet, aligner: Option<&Aligner<f32>>) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut images = test.batch(&idx);
    if let Some(f) = aligner {
        let mut parts = Vec::new();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let x = Var::constant(test.batch(chunk));
            parts.push(f.forward(&x).value().clone());
        }
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        images = ndarray::concatenate(Axis(0), &views).expect("aligned chunks share a shape");
    }
    Ok(score(&c.predict(&images, EVAL_CHUNK), &test.labels))
}

fn score(probs: &Array2<f32>, labels: &[u8]) -> Evaluation {
    let mut hit = [0usize; NUM_CLASSES];
    let mut count = [0usize; NUM_CLASSES];
    for (row, &l) in probs.rows().into_iter().zip(labels) {
        let pred = if row[1] > row[0] { 1 } else { 0 };
        count[l as usize] += 1;
        hit[l as usize] += (pred == l as usize) as usize;
    }
    let present: Vec<f64> = (0..NUM_CLASSES)
        .filter(|&c| count[c] > 0)
        .map(|c| hit[c] as f64 / count[c] as f64)
        .collect();
    Evaluation {
        accuracy: hit.iter().sum::<usize>() as f64 / labels.len() as f64,
        balanced_accuracy: present.iter().sum::<f64>() / present.len() as f64,
    }
}

/// Which labeled pool a cached baseline was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Pool {
    Domain(u8),
    /// Source train split plus the scenario's labeled target images.
    Mixed { source: u8, target: u8 },
}

/// Runs scenarios for one configuration, caching trained baselines so that
/// every method of a cell warm-starts from the same weights.
pub struct Runner {
    cfg: RunConfig,
    hash: String,
    domains: Vec<Option<DomainDataset>>,
    baselines: HashMap<(Pool, Arch, u64), Snapshot<f32>>,
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.deterministic {
            par::set_default_exec(par::Exec::Sequential);
        }
        let hash = cfg.hash();
        Ok(Runner { cfg, hash, domains: vec![None, None, None], baselines: HashMap::new() })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    /// Loads domain `d` from `data_dir/domain_<d>` or generates it.
    pub fn domain(&mut self, d: u8) -> Result<&DomainDataset> {
        crate::dataset::validate_domain(d)?;
        if self.domains[d as usize].is_none() {
            let ds = match &self.cfg.data_dir {
                Some(dir) => {
                    let ds = load_dataset(&dir.join(format!("domain_{d}")))?;
                    if ds.side != self.cfg.side {
                        return Err(Error::Config(format!(
                            "domain {d} in {} has side {}, config says {}",
                            dir.display(),
                            ds.side,
                            self.cfg.side
                        )));
                    }
                    ds
                }
                None => {
                    let n = self.cfg.images_per_class;
                    let counts = if n > 0 { [n, n] } else { DEFAULT_COUNTS[d as usize] };
                    let ds = generate_domain(d, counts, self.cfg.data_seed, self.cfg.side)?;
                    split_dataset(ds, self.cfg.test_fraction, self.cfg.data_seed)?
                }
            };
            self.domains[d as usize] = Some(ds);
        }
        Ok(self.domains[d as usize].as_ref().expect("just filled"))
    }

    pub fn spec(&self, source: u8, target: u8, mode: Mode, seed: u64) -> ScenarioSpec {
        match mode {
            Mode::Uda => ScenarioSpec::uda(source, target, seed),
            Mode::Ssda => ScenarioSpec::ssda(source, target, self.cfg.target_label_fraction, seed),
        }
    }

    pub fn scenario(&mut self, spec: ScenarioSpec) -> Result<ScenarioData> {
        spec.validate()?;
        let src = self.domain(spec.source)?.clone();
        let tgt = self.domain(spec.target)?.clone();
        make_scenario(spec, &[src, tgt])
    }

    pub fn train_config(&self, arch: Arch, seed: u64) -> TrainConfig {
        TrainConfig { arch, seed, ..self.cfg.train.clone() }
    }

    fn log(&self, run_id: &str) -> Result<TrainLog> {
        match &self.cfg.log_dir {
            Some(dir) => TrainLog::to_file(run_id, &dir.join(format!("{run_id}.jsonl"))),
            None => Ok(TrainLog::memory(run_id)),
        }
    }

    fn run_id(&self, spec: &ScenarioSpec, kind: RowKind, arch: Arch) -> String {
        let kind = serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        format!(
            "{}-{}to{}-{kind}-{arch}-seed{}-{}",
            spec.mode,
            spec.source,
            spec.target,
            spec.seed,
            &self.hash[..8]
        )
    }

    /// A classifier trained by the baseline trainer on `pool`, from cache when
    /// possible. Returned unfrozen.
    fn baseline(&mut self, pool: Pool, data: &ScenarioData, arch: Arch, seed: u64) -> Result<Classifier<f32>> {
        let cfg = self.train_config(arch, seed);
        let c = cfg.build_classifier(data.side)?;
        if let Some(s) = self.baselines.get(&(pool, arch, seed)) {
            s.restore(&c);
            c.set_frozen(false);
            return Ok(c);
        }
        let set = match pool {
            Pool::Domain(d) if d == data.spec.source => data.source_labeled.clone(),
            Pool::Domain(d) => self.domain(d)?.labeled_set(Split::Train),
            Pool::Mixed { .. } => data.all_labeled(),
        };
        let id = format!("baseline-{}-{arch}-seed{seed}-{}", pool_name(pool), &self.hash[..8]);
        let mut log = self.log(&id)?;
        train_baseline(&c, &set, &cfg, &mut log)?;
        self.baselines.insert((pool, arch, seed), Snapshot::take(&c));
        c.set_frozen(false);
        Ok(c)
    }

    /// Classifier used as the lower limit and as the DA warm start.
    pub fn lower_limit(&mut self, data: &ScenarioData, arch: Arch, seed: u64) -> Result<Classifier<f32>> {
        let s = data.spec;
        let pool = match s.mode {
            Mode::Uda => Pool::Domain(s.source),
            Mode::Ssda => Pool::Mixed { source: s.source, target: s.target },
        };
        self.baseline(pool, data, arch, seed)
    }

    /// Baseline trained on the labeled source split only.
    pub fn source_classifier(&mut self, data: &ScenarioData, arch: Arch, seed: u64) -> Result<Classifier<f32>> {
        self.baseline(Pool::Domain(data.spec.source), data, arch, seed)
    }

    pub fn oracle(&mut self, data: &ScenarioData, arch: Arch, seed: u64) -> Result<Classifier<f32>> {
        self.baseline(Pool::Domain(data.spec.target), data, arch, seed)
    }

    /// Trains and evaluates one cell. Training failures become rows with an
    /// error tag; invalid arguments are returned as errors.
    pub fn run_scenario(&mut self, spec: ScenarioSpec, kind: RowKind, arch: Arch) -> Result<ResultsRow> {
        let data = self.scenario(spec)?;
        let start = Instant::now();
        let outcome = self.train_and_evaluate(&data, kind, arch);
        let mut row = ResultsRow {
            mode: spec.mode,
            source: spec.source,
            target: spec.target,
            target_label_fraction: spec.target_label_fraction,
            method: kind,
            arch: arch.to_string(),
            seed: spec.seed,
            accuracy: None,
            balanced_accuracy: None,
            runtime_seconds: 0.0,
            config_hash: self.hash.clone(),
            used_aligner: kind == RowKind::Dbacs,
            checksum: None,
            error: None,
        };
        match outcome {
            Ok((eval, checksum)) => {
                row.accuracy = Some(eval.accuracy);
                row.balanced_accuracy = Some(eval.balanced_accuracy);
                row.checksum = Some(checksum);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row.runtime_seconds = start.elapsed().as_secs_f64();
        Ok(row)
    }

    fn train_and_evaluate(&mut self, data: &ScenarioData, kind: RowKind, arch: Arch) -> Result<(Evaluation, String)> {
        let seed = data.spec.seed;
        let cfg = self.train_config(arch, seed);
        let run_id = self.run_id(&data.spec, kind, arch);
        let test = &data.target_test;
        let c = match kind {
            RowKind::LowerLimit => self.lower_limit(data, arch, seed)?,
            RowKind::Oracle => self.oracle(data, arch, seed)?,
            RowKind::Dbacs => {
                let f_cc = self.source_classifier(data, arch, seed)?;
                f_cc.set_frozen(true);
                let mut log = self.log(&run_id)?;
                let (ens, _) = train_dbacs(&f_cc, data, &TrainConfig { run_dir: self.run_dir(), ..cfg }, &mut log)?;
                return Ok((evaluate(&f_cc, test, Some(&ens.f))?, f_cc.checksum()));
            }
            RowKind::OfflinePl | RowKind::OnlinePl | RowKind::AdaMatch => {
                let c = self.lower_limit(data, arch, seed)?;
                let mut log = self.log(&run_id)?;
                match kind {
                    RowKind::OfflinePl => drop(train_offline_pl(&c, data, &cfg, &mut log)?),
                    RowKind::OnlinePl => drop(train_online_pl(&c, data, &cfg, &mut log)?),
                    _ => drop(train_adamatch(&c, data, &cfg, &mut log)?),
                }
                c
            }
        };
        Ok((evaluate(&c, test, None)?, c.checksum()))
    }

    fn run_dir(&self) -> Option<PathBuf> {
        self.cfg.train.run_dir.clone()
    }
}

fn pool_name(p: Pool) -> String {
    match p {
        Pool::Domain(d) => format!("domain{d}"),
        Pool::Mixed { source, target } => format!("mixed{source}to{target}"),
    }
}

/// Result rows a method contributes to a table.
pub fn row_kinds(method: Method) -> &'static [RowKind] {
    match method {
        Method::Baseline => &[RowKind::LowerLimit, RowKind::Oracle],
        Method::OfflinePl => &[RowKind::OfflinePl],
        Method::OnlinePl => &[RowKind::OnlinePl],
        Method::AdaMatch => &[RowKind::AdaMatch],
        Method::Dbacs => &[RowKind::Dbacs],
    }
}

#[derive(Clone, Debug, Default)]
pub struct MatrixSummary {
    pub written: Vec<ResultsRow>,
    /// Cells already present in the store under this config hash.
    pub skipped: usize,
}

/// Runs every (pair, arch, seed, method) cell of the configuration in
/// `mode`, appending each row as soon as it is done. Cells already stored
/// under the same config hash are skipped unless `force`.
pub fn run_matrix(
    runner: &mut Runner,
    mode: Mode,
    store: &ResultsStore,
    force: bool,
    mut progress: impl FnMut(&ResultsRow),
) -> Result<MatrixSummary> {
    let cfg = runner.config().clone();
    let mut summary = MatrixSummary::default();
    for pair in cfg.matrix_pairs() {
        for &arch in &cfg.archs {
            for &seed in &cfg.seeds {
                let spec = runner.spec(pair.source, pair.target, mode, seed);
                for &method in &cfg.methods {
                    for &kind in row_kinds(method) {
                        let probe = ResultsRow {
                            mode,
                            source: pair.source,
                            target: pair.target,
                            target_label_fraction: spec.target_label_fraction,
                            method: kind,
                            arch: arch.to_string(),
                            seed,
                            accuracy: None,
                            balanced_accuracy: None,
                            runtime_seconds: 0.0,
                            config_hash: runner.config_hash().to_string(),
                            used_aligner: false,
                            checksum: None,
                            error: None,
                        };
                        if !force && store.contains(&probe.key())? {
                            summary.skipped += 1;
                            continue;
                        }
                        let row = runner.run_scenario(spec, kind, arch)?;
                        store.append(&row, force)?;
                        progress(&row);
                        summary.written.push(row);
                    }
                }
            }
        }
    }
    Ok(summary)
}
