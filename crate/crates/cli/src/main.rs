//! `nodelearn` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input (config, grid, arguments, refused
//! overwrite), 2 fault while running or writing results.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::Value;

use nodelearn::config::{self, ScenarioConfig};
use nodelearn::datagen::{self, Sample};
use nodelearn::engine::{self, Engine, Provenance};
use nodelearn::metrics;
use nodelearn::Error;

mod sweep;

const OUT_ENV: &str = "NODELEARN_OUT";

#[derive(Parser, Debug)]
#[command(name = "nodelearn", version, about = "Tick-synchronous simulator for on-device collaborative learning")]
struct Cli {
    /// -v prints progress, -vv also keeps packet payloads in packets.jsonl.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a config without running it.
    Validate {
        config: PathBuf,
        /// Report unknown keys as warnings instead of errors.
        #[arg(long)]
        lax: bool,
    },
    /// Run one scenario and write its artifacts.
    Run {
        config: PathBuf,
        /// Output directory; defaults to $NODELEARN_OUT/<name> or runs/<name>.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Override the config seed (recorded in the manifest).
        #[arg(long)]
        seed: Option<u64>,
        /// Replace a completed run directory.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        lax: bool,
    },
    /// Run a parameter grid times a seed list, one directory per cell.
    Sweep {
        config: PathBuf,
        /// JSON file: {"grid": {"dotted.path": [values...]}, "seeds": [..]}.
        #[arg(long)]
        grid: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        lax: bool,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Summarise run directories (searched recursively) as mean ± std.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Print CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
    /// Export the scenario's generated data as CSV files.
    GenData {
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Ticks of per-node stream to export; defaults to the config's ticks.
        #[arg(long)]
        ticks: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lax: bool,
    },
}

/// Failure tagged with its exit code.
#[derive(Debug)]
pub(crate) enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub(crate) fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Runtime(m) => m,
        }
    }
}

pub(crate) fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

pub(crate) fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let verbose = cli.verbose;
    match cli.command {
        Command::Validate { config, lax } => {
            let cfg = prepare(&config, !lax, None)?;
            println!("ok: {} ({} nodes, {} ticks, {})", cfg.name, cfg.node_count, cfg.ticks, regime_name(&cfg));
            Ok(())
        }
        Command::Run {
            config,
            out,
            seed,
            force,
            lax,
        } => {
            let cfg = prepare(&config, !lax, seed)?;
            let dir = out.unwrap_or_else(|| default_root().join(&cfg.name));
            claim_dir(&dir, force)?;
            let prov = Provenance {
                config_path: Some(config),
                seed_overridden: seed.is_some(),
            };
            run_one(cfg, &dir, &prov, verbose)?;
            println!("{}", absolute(&dir).display());
            Ok(())
        }
        Command::Sweep {
            config,
            grid,
            out,
            force,
            lax,
            jobs,
        } => {
            let base = prepare(&config, !lax, None)?;
            let spec = sweep::load_grid(&grid)?;
            let cells = sweep::expand(&base, &spec)?;
            let root = out.unwrap_or_else(|| default_root().join(&base.name));
            for c in &cells {
                claim_dir(&root.join(&c.rel_dir), force)?;
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.unwrap_or(0))
                .build()
                .map_err(runtime)?;
            let progress = Mutex::new(());
            let results: Vec<(PathBuf, Result<(), Failure>)> = pool.install(|| {
                cells
                    .par_iter()
                    .map(|c| {
                        let dir = root.join(&c.rel_dir);
                        let prov = Provenance {
                            config_path: Some(config.clone()),
                            seed_overridden: c.seed_overridden,
                        };
                        let r = run_one(c.config.clone(), &dir, &prov, 0);
                        let _guard = progress.lock().unwrap_or_else(|p| p.into_inner());
                        match &r {
                            Ok(()) => eprintln!("done {}", c.rel_dir.display()),
                            Err(f) => eprintln!("FAILED {}: {}", c.rel_dir.display(), f.message()),
                        }
                        (c.rel_dir.clone(), r)
                    })
                    .collect()
            });
            let failed = sweep::write_summary(&root, &results)?;
            println!("{} runs, {} failed, under {}", results.len(), failed, absolute(&root).display());
            if failed > 0 {
                Err(Failure::Runtime(format!("{failed} sweep cells failed; see sweep.json")))
            } else {
                Ok(())
            }
        }
        Command::Report { dirs, csv } => {
            let mut runs = Vec::new();
            for d in &dirs {
                find_runs(d, &mut runs);
            }
            if runs.is_empty() {
                return Err(Failure::Invalid("no run directories found".into()));
            }
            let rep = metrics::report(&runs);
            for m in &rep.missing {
                eprintln!("missing or unreadable: {}", m.display());
            }
            if csv {
                print!("{}", rep.to_csv());
            } else {
                print!("{}", rep.to_table());
            }
            Ok(())
        }
        Command::GenData {
            config,
            out,
            ticks,
            seed,
            lax,
        } => {
            let cfg = prepare(&config, !lax, seed)?;
            gen_data(&cfg, &out, ticks.unwrap_or(cfg.ticks))?;
            println!("{}", absolute(&out).display());
            Ok(())
        }
    }
}

fn regime_name(cfg: &ScenarioConfig) -> String {
    serde_json::to_value(cfg.regime)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn default_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Load, apply the seed override and build an engine once, so that
/// validation and running share one code path.
pub(crate) fn prepare(path: &Path, strict: bool, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let loaded = config::load_config(path, strict).map_err(invalid)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let mut cfg = loaded.config;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    check(&cfg)?;
    Ok(cfg)
}

pub(crate) fn check(cfg: &ScenarioConfig) -> Result<(), Failure> {
    Engine::new(cfg.clone()).map(drop).map_err(invalid)
}

fn is_completed(dir: &Path) -> bool {
    std::fs::read_to_string(dir.join("manifest.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| v.get("completed").and_then(Value::as_bool))
        .unwrap_or(false)
}

/// Create `dir`, refusing to clobber a completed run unless forced.
fn claim_dir(dir: &Path, force: bool) -> Result<(), Failure> {
    if is_completed(dir) {
        if !force {
            return Err(Failure::Invalid(format!(
                "{} holds a completed run; pass --force to replace it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| runtime(Error::io(dir, e)))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| runtime(Error::io(dir, e)))
}

fn run_one(cfg: ScenarioConfig, dir: &Path, prov: &Provenance, verbose: u8) -> Result<(), Failure> {
    let mut engine = Engine::new(cfg).map_err(invalid)?.with_packet_payloads(verbose >= 2);
    while !engine.is_done() {
        engine.step().map_err(runtime)?;
        if verbose >= 1 {
            if let Some(p) = engine.state().records.last().filter(|r| r.tick + 1 == engine.state().tick) {
                let acc = p.accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
                eprintln!("tick {:>6}  accuracy {acc}  energy {:.4} J  bytes {}", p.tick, p.energy_j, p.bytes_tx);
            }
        }
    }
    engine::write_outputs(dir, &engine, prov).map_err(runtime)?;
    Ok(())
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) {
    if dir.join("manifest.json").is_file() || dir.join("metrics.csv").is_file() {
        out.push(dir.to_path_buf());
        return;
    }
    let Ok(entries) = std::fs::read_dir(dir) else {
        out.push(dir.to_path_buf());
        return;
    };
    let mut subdirs: Vec<PathBuf> = entries.flatten().map(|e| e.path()).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    for d in subdirs {
        find_runs(&d, out);
    }
}

/// Write `test.csv`, `probe.csv` and one `node-<i>.csv` per node holding
/// the samples that node draws over `ticks` ticks, drift included.
fn gen_data(cfg: &ScenarioConfig, out: &Path, ticks: u64) -> Result<(), Failure> {
    let resolved = config::resolve(cfg).map_err(invalid)?;
    std::fs::create_dir_all(out).map_err(|e| runtime(Error::io(out, e)))?;
    let mut spec = resolved.spec.clone();
    let write = |name: String, samples: &[Sample]| -> Result<(), Failure> {
        datagen::write_csv_dataset(&out.join(name), samples).map(drop).map_err(runtime)
    };
    write("test.csv".into(), &datagen::test_set(&spec, cfg.data.test_size, 0))?;
    write("probe.csv".into(), &datagen::probe_set(&spec, cfg.data.probe_size))?;
    let mut streams: Vec<Vec<Sample>> = vec![Vec::new(); cfg.node_count];
    for t in 0..ticks {
        if spec.drift.first().is_some_and(|e| e.tick == t) {
            spec = datagen::inject_drift(&spec, t).map_err(runtime)?;
        }
        for (i, setup) in resolved.nodes.iter().enumerate() {
            streams[i].extend(datagen::node_batch(&spec, i, t, setup.training.batch_size));
        }
    }
    for (i, s) in streams.iter().enumerate() {
        write(format!("node-{i}.csv"), s)?;
    }
    Ok(())
}
