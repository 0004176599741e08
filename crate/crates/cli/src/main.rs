//! `subliminal`: run teacher/student noise-distillation experiments from
//! TOML configs.
//!
//! Exit codes: 0 success, 2 invalid input (config, data, empty report dir),
//! 3 failure during compute.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn, LevelFilter};
use subliminal::data::{fetch_dataset, DatasetKind, FetchOptions, Manifest, DATA_ROOT_ENV};
use subliminal::engine::export::{export_figures, write_theory_tables};
use subliminal::engine::sweep::{load_records, run_sweep, write_record, write_results, SweepOptions};
use subliminal::engine::{
    build_pair, distill_student, evaluate_run, load_teacher, prepare_student, save_teacher, train_teacher, Axis,
    ExperimentConfig, Lab, RunRecord, RunStatus,
};
use subliminal::Error;

#[derive(Parser)]
#[command(
    name = "subliminal",
    version,
    about = "Teacher/student transfer through noise-only distillation"
)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Run this seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train teachers and write checkpoints.
    TrainTeacher(ConfigArgs),
    /// Distill a student from a saved teacher checkpoint.
    Distill {
        #[command(flatten)]
        args: ConfigArgs,
        /// Checkpoint written by `train-teacher`.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Teacher training, distillation and evaluation for each seed.
    Run(ConfigArgs),
    /// Every grid point of the config's sweep axes times every seed; resumable.
    Sweep {
        #[command(flatten)]
        args: ConfigArgs,
        /// Runs in parallel.
        #[arg(short, long, default_value_t = 1)]
        jobs: usize,
        /// Extra or replacement axis, `name=v1,v2,...` (values parsed as JSON when possible).
        #[arg(long = "axis")]
        axes: Vec<String>,
        /// Comma-separated seeds overriding the config.
        #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
        seeds: Option<Vec<u64>>,
    },
    /// Theory-vs-measurement tables from a directory of run records.
    Theory {
        #[arg(short, long)]
        reports: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// One tidy CSV per figure tag from a directory of run records.
    Export {
        #[arg(short, long)]
        reports: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Download and verify dataset files listed in a manifest.
    FetchData {
        #[arg(long, default_value = "configs/data_manifest.toml")]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "mnist")]
        dataset: DatasetArg,
        /// Data root (default: $SUBLIMINAL_DATA_ROOT, then ./data).
        #[arg(long)]
        root: Option<PathBuf>,
        /// Base URL tried before the manifest URLs (repeatable).
        #[arg(long = "mirror")]
        mirrors: Vec<String>,
        /// Accept files whose checksum is not pinned in the manifest.
        #[arg(long)]
        allow_unpinned: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DatasetArg {
    Mnist,
    EmnistBalanced,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Mnist => DatasetKind::Mnist,
            DatasetArg::EmnistBalanced => DatasetKind::EmnistBalanced,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Data(_) | Error::Format { .. } | Error::Parameter(_) | Error::Structural(_) => 2,
        _ => 3,
    }
}

fn init_logging(cli: &Cli) {
    let default = match (&cli.command, cli.quiet, cli.verbose) {
        (_, true, _) => LevelFilter::Warn,
        (_, _, v) if v >= 2 => LevelFilter::Debug,
        (_, _, 1) => LevelFilter::Info,
        (Command::Sweep { .. }, _, _) => LevelFilter::Warn,
        _ => LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(default)
        .parse_env("SUBLIMINAL_LOG")
        .format(|buf, record| writeln!(buf, "level={} {}", record.level(), record.args()))
        .init();
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let cfg = ExperimentConfig::load(path)?;
    if cfg.name.is_empty() {
        let mut cfg = cfg;
        cfg.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        return Ok(cfg);
    }
    Ok(cfg)
}

fn seeds(cfg: &ExperimentConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone())
}

fn parse_axis(spec: &str) -> Result<Axis, Error> {
    let bad = || {
        Error::Config(vec![subliminal::FieldError::new(
            "--axis",
            format!("expected name=v1,v2,..., got {spec:?}"),
        )])
    };
    let (name, values) = spec.split_once('=').ok_or_else(bad)?;
    if name.is_empty() || values.is_empty() {
        return Err(bad());
    }
    let values = values
        .split(',')
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string())))
        .collect();
    Ok(Axis {
        name: name.to_string(),
        values,
    })
}

fn record(
    cfg: &ExperimentConfig,
    seed: u64,
    result: Result<subliminal::engine::RunReport, Error>,
) -> (RunRecord, Option<Error>) {
    let (status, error, report, err) = match result {
        Ok(r) => (RunStatus::Ok, None, Some(r), None),
        Err(e) => (RunStatus::Error, Some(e.to_string()), None, Some(e)),
    };
    let rec = RunRecord {
        config_hash: cfg.hash(),
        seed,
        axes: Default::default(),
        status,
        error,
        config: cfg.clone(),
        report,
    };
    (rec, err)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli);
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::TrainTeacher(a) => {
            let cfg = load_config(&a.config)?;
            let lab = Lab::without_teacher_cache();
            let data = lab.dataset(&cfg.data)?;
            for seed in seeds(&cfg, a.seed) {
                let (teacher, _) = build_pair(&cfg, seed)?;
                let trained = train_teacher(&cfg, seed, teacher, &data.train, &data.test)?;
                let path = save_teacher(&a.out, &cfg, seed, &trained)?;
                info!("wrote path={} test_acc={:.5}", path.display(), trained.test_acc());
            }
            Ok(())
        }
        Command::Distill { args, teacher } => {
            let cfg = load_config(&args.config)?;
            let data = Lab::new().dataset(&cfg.data)?;
            let (trained, seed) = load_teacher(&teacher, &cfg, &data.test)?;
            if args.seed.is_some_and(|s| s != seed) {
                return Err(Error::Parameter(format!("checkpoint was trained with seed {seed}")));
            }
            let started = std::time::Instant::now();
            let result = (|| {
                let (_, student) = build_pair(&cfg, seed)?;
                let prepared = prepare_student(&cfg, seed, student, &trained)?;
                let distilled = distill_student(&cfg, seed, prepared, &trained)?;
                let mut report = evaluate_run(&cfg, seed, &trained, &distilled, &data.test)?;
                report.wall_time_s = started.elapsed().as_secs_f64();
                Ok(report)
            })();
            finish_runs(&args.out, vec![record(&cfg, seed, result)])
        }
        Command::Run(a) => {
            let cfg = load_config(&a.config)?;
            if !cfg.sweep.axes.is_empty() {
                warn!("config has sweep axes; `run` uses the base config only");
            }
            let lab = Lab::new();
            lab.dataset(&cfg.data)?;
            let results = seeds(&cfg, a.seed)
                .into_iter()
                .map(|seed| record(&cfg, seed, lab.run(&cfg, seed)))
                .collect();
            finish_runs(&a.out, results)
        }
        Command::Sweep {
            args,
            jobs,
            axes,
            seeds: seed_list,
        } => {
            let mut cfg = load_config(&args.config)?;
            for spec in &axes {
                let axis = parse_axis(spec)?;
                cfg.sweep.axes.retain(|a| a.name != axis.name);
                cfg.sweep.axes.push(axis);
            }
            cfg.validate()?;
            subliminal::engine::sweep::expand(&cfg)?;
            cfg.data.check_available()?;
            let opts = SweepOptions {
                jobs,
                seeds: seed_list.or(args.seed.map(|s| vec![s])),
            };
            let summary = run_sweep(&Lab::new(), &cfg, &args.out, &opts)?;
            eprintln!(
                "sweep executed={} skipped={} failed={} out={}",
                summary.executed,
                summary.skipped,
                summary.failed,
                args.out.display()
            );
            if summary.failed > 0 {
                return Err(Error::Training {
                    phase: "sweep",
                    epoch: 0,
                    message: format!("{} runs failed; see results.csv", summary.failed),
                });
            }
            Ok(())
        }
        Command::Theory { reports, out } => {
            let records = nonempty_records(&reports)?;
            let written = write_theory_tables(&records, &out)?;
            if written.is_empty() {
                return Err(Error::Data(format!(
                    "no aux-perturbation sweeps or post-hoc probes under {}",
                    reports.display()
                )));
            }
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Export { reports, out } => {
            let records = nonempty_records(&reports)?;
            for p in export_figures(&records, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::FetchData {
            manifest,
            dataset,
            root,
            mirrors,
            allow_unpinned,
        } => {
            let manifest = Manifest::load(&manifest)?;
            let kind = DatasetKind::from(dataset);
            let root = root
                .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("data"));
            let dir = root.join(kind.dir_name());
            let opts = FetchOptions {
                mirrors,
                allow_unpinned,
            };
            let name = match kind {
                DatasetKind::Mnist => "mnist",
                DatasetKind::EmnistBalanced => "emnist_balanced",
            };
            for p in fetch_dataset(&manifest, name, &dir, &opts)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn nonempty_records(dir: &Path) -> Result<Vec<RunRecord>, Error> {
    let records = load_records(dir)?;
    if records.is_empty() {
        return Err(Error::Data(format!("no run records under {}", dir.display())));
    }
    Ok(records)
}

/// Writes each record plus `results.csv`; the first run error decides the exit code.
fn finish_runs(out: &Path, results: Vec<(RunRecord, Option<Error>)>) -> Result<(), Error> {
    let runs = out.join("runs");
    let mut first_err = None;
    for (rec, err) in results {
        let path = write_record(&runs, &rec)?;
        match &rec.report {
            Some(r) => println!(
                "seed={} teacher_acc={:.5} student_acc={:.5} record={}",
                rec.seed,
                r.teacher_acc,
                r.student_acc,
                path.display()
            ),
            None => eprintln!("seed={} error={}", rec.seed, rec.error.as_deref().unwrap_or("")),
        }
        if first_err.is_none() {
            first_err = err;
        }
    }
    write_results(out)?;
    first_err.map_or(Ok(()), Err)
}
