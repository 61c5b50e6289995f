use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use defectda::dataset::{generate_domain, save_dataset, split_dataset, Mode, DEFAULT_COUNTS, DEFAULT_SIDE};
use defectda::harness::{
    build_tables, read_rows, render, row_kinds, run_matrix, Format, ResultsRow, ResultsStore, Runner, RunConfig,
};
use defectda::trainers::Method;

#[derive(Parser)]
#[command(name = "defectda", version, about = "Domain adaptation benchmark for defect image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic domain to PNG files plus a manifest.
    Generate {
        /// 0, 1, 2 or all
        #[arg(long)]
        domain: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SIDE)]
        side: usize,
        /// Images per class; the reference counts when omitted.
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Train and evaluate one method on the configured source/target pair.
    Train {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        config: PathBuf,
        /// Replace rows already stored under the same config hash.
        #[arg(long)]
        force: bool,
    },
    /// Run every configured pair, arch, seed and method.
    Matrix {
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Print accuracy tables from a results directory.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "md")]
        format: Format,
        /// Also write one file per table into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_row(r: &ResultsRow) {
    match (r.accuracy, &r.error) {
        (Some(a), _) => println!(
            "{} {}->{} {:<11} {:<14} seed {:<3} acc {:.4}  ({:.1}s)",
            r.mode,
            r.source,
            r.target,
            r.method.label(),
            r.arch,
            r.seed,
            a,
            r.runtime_seconds
        ),
        (None, e) => println!(
            "{} {}->{} {:<11} {:<14} seed {:<3} FAILED: {}",
            r.mode,
            r.source,
            r.target,
            r.method.label(),
            r.arch,
            r.seed,
            e.as_deref().unwrap_or("unknown error")
        ),
    }
}

fn generate(domain: &str, out: PathBuf, seed: u64, side: usize, per_class: Option<usize>, test_fraction: f64) -> Result<()> {
    let domains: Vec<u8> = match domain {
        "all" => vec![0, 1, 2],
        d => vec![d.parse().with_context(|| format!("invalid domain {d:?}"))?],
    };
    for d in domains {
        let counts = match per_class {
            Some(n) => [n, n],
            None => *DEFAULT_COUNTS.get(d as usize).with_context(|| format!("invalid domain {d}"))?,
        };
        let ds = split_dataset(generate_domain(d, counts, seed, side)?, test_fraction, seed)?;
        let dir = out.join(format!("domain_{d}"));
        save_dataset(&ds, &dir).with_context(|| format!("writing {}", dir.display()))?;
        println!("domain {d}: {} images -> {}", ds.len(), dir.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { domain, out, seed, side, per_class, test_fraction } => {
            generate(&domain, out, seed, side, per_class, test_fraction)
        }
        Command::Train { method, config, force } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let store = ResultsStore::open(&cfg.results)?;
            let (source, target, mode) = (cfg.source, cfg.target, cfg.mode);
            let (archs, seeds) = (cfg.archs.clone(), cfg.seeds.clone());
            let mut runner = Runner::new(cfg)?;
            let mut failed = 0;
            for &arch in &archs {
                for &seed in &seeds {
                    let spec = runner.spec(source, target, mode, seed);
                    for &kind in row_kinds(method) {
                        let row = runner.run_scenario(spec, kind, arch)?;
                        store.append(&row, force)?;
                        failed += row.accuracy.is_none() as usize;
                        print_row(&row);
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} run(s) failed; see the error field in {}", store.path().display());
            }
            Ok(())
        }
        Command::Matrix { mode, config, force } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            cfg.mode = mode;
            let store = ResultsStore::open(&cfg.results)?;
            let mut runner = Runner::new(cfg)?;
            let summary = run_matrix(&mut runner, mode, &store, force, print_row)?;
            println!(
                "{} row(s) written, {} already present, results in {}",
                summary.written.len(),
                summary.skipped,
                store.path().display()
            );
            Ok(())
        }
        Command::Report { results, format, out } => {
            let store = ResultsStore::open(&results)?;
            let rows = read_rows(&store.path())?;
            let tables = build_tables(&rows)?;
            print!("{}", render(&tables, format));
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                for t in &tables {
                    let (ext, text) = match format {
                        Format::Csv => ("csv", t.to_csv()),
                        Format::Markdown => ("md", t.to_markdown()),
                    };
                    let path = dir.join(format!("{}.{ext}", t.file_stem()));
                    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
                }
            }
            Ok(())
        }
    }
}
