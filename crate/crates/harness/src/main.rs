use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use segxfer::dataforge::save_dataset;
use segxfer::engine::Graph;
use segxfer::nets::{load_checkpoint, save_checkpoint, TrainMeta};
use segxfer::trainer::{evaluate, Task};
use segxfer_harness::config::{ExperimentConfig, Framework, TaskKind};
use segxfer_harness::error::{HarnessError, Result};
use segxfer_harness::experiment::{backbone_file, run_sweep, Experiment};
use segxfer_harness::report::{emit_report, emit_summary, read_records, RECORDS_FILE};

/// Segmentation-pretrained features for scarce-label classification on
/// synthetic phantoms.
#[derive(Parser)]
#[command(name = "segxfer", version)]
struct Cli {
    /// Experiment configuration (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent sweep cells; overrides the configuration.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Cell {
    #[arg(long)]
    framework: Framework,
    /// Training samples per class.
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    repetition: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the classification pool and pretraining sets as .tds files.
    Gen,
    /// Pretrain a MANUAL or THRESHOLD backbone and save its checkpoint.
    Pretrain {
        #[arg(long)]
        framework: Framework,
    },
    /// Train and evaluate one framework on one split.
    Train {
        #[command(flatten)]
        cell: Cell,
    },
    /// Evaluate a saved classifier on the test split of its cell.
    Eval {
        #[command(flatten)]
        cell: Cell,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Backbone checkpoint; defaults to the one in the output directory.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Run the full framework x samples x repetition grid and write reports.
    Sweep,
    /// Rebuild aggregate CSV and charts from an existing records file.
    Report {
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::defaults(TaskKind::Level),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| {
        HarnessError::Core(segxfer::Error::Io {
            path: cfg.out.clone(),
            source: e,
        })
    })?;
    Ok(&cfg.out)
}

fn cell_name(c: &Cell) -> String {
    format!("{}-n{}-r{}", c.framework.name().to_ascii_lowercase(), c.samples, c.repetition)
}

fn print_report(report: &segxfer::metrics::MetricsReport) {
    println!("{}", report.csv_header());
    println!("{}", report.csv_row());
}

fn saved_backbone(exp: &Experiment, framework: Framework, path: &Path) -> Result<Graph<f32>> {
    let (mut g, _) = load_checkpoint::<f32>(&exp.backbone_arch(framework)?, path)?;
    g.set_frozen(true);
    Ok(g)
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Report { records } = &cli.command {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("results"));
        let path = records.clone().unwrap_or_else(|| out.join(RECORDS_FILE));
        for p in emit_summary(&read_records(&path)?, &out)? {
            println!("{}", p.display());
        }
        return Ok(());
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Gen => {
            let exp = Experiment::prepare(&cfg)?;
            let dir = out_dir(&cfg)?;
            save_dataset(&dir.join("pool.tds"), &exp.pool)?;
            save_dataset(&dir.join("pretrain.tds"), &exp.pretrain)?;
            if cfg.frameworks.contains(&Framework::Threshold) {
                save_dataset(&dir.join("pretrain-threshold.tds"), &exp.pretraining_set(Framework::Threshold)?)?;
            }
            println!("{} pool images, {} pretraining images in {}", exp.pool.len(), exp.pretrain.len(), dir.display());
        }
        Command::Pretrain { framework } => {
            let exp = Experiment::prepare(&cfg)?;
            let dir = out_dir(&cfg)?;
            let (g, trace) = exp.pretrain_backbone(*framework)?;
            let path = dir.join(backbone_file(*framework));
            let meta = TrainMeta {
                epoch: cfg.pretrain.epochs as u32,
                seed: exp.backbone_seed(*framework),
            };
            save_checkpoint(&path, &exp.backbone_arch(*framework)?, &g, meta)?;
            let trace_path = path.with_extension("loss.csv");
            std::fs::write(&trace_path, trace.csv()).map_err(|e| segxfer::Error::Io {
                path: trace_path.clone(),
                source: e,
            })?;
            println!("{}", path.display());
        }
        Command::Train { cell } => {
            let exp = Experiment::prepare(&cfg)?;
            let dir = out_dir(&cfg)?;
            let mut backbone = match cell.framework {
                Framework::Scratch => None,
                f => Some(exp.backbone_cached(f, &dir.join(backbone_file(f)))?),
            };
            let (mut model, trace) =
                exp.train_classifier(cell.framework, cell.samples, cell.repetition, backbone.as_mut())?;
            let name = cell_name(cell);
            let meta = TrainMeta {
                epoch: cfg.classifier.epochs as u32,
                seed: exp.train_seed(cell.framework, cell.samples, cell.repetition),
            };
            save_checkpoint(&dir.join(format!("classifier-{name}.ckpt")), &exp.classifier_arch(cell.framework), &model, meta)?;
            let loss = dir.join(format!("classifier-{name}.loss.csv"));
            std::fs::write(&loss, trace.csv()).map_err(|e| segxfer::Error::Io { path: loss.clone(), source: e })?;
            let (_, test, _, _) = exp.cell_split(cell.samples, cell.repetition)?;
            print_report(&evaluate(&mut model, backbone.as_mut(), &test, Task::Classification)?);
        }
        Command::Eval { cell, checkpoint, backbone } => {
            let exp = Experiment::prepare(&cfg)?;
            let (mut model, _) = load_checkpoint::<f32>(&exp.classifier_arch(cell.framework), checkpoint)?;
            let mut bb = match cell.framework {
                Framework::Scratch => None,
                f => {
                    let p = backbone.clone().unwrap_or_else(|| cfg.out.join(backbone_file(f)));
                    Some(saved_backbone(&exp, f, &p)?)
                }
            };
            let (_, test, _, _) = exp.cell_split(cell.samples, cell.repetition)?;
            print_report(&evaluate(&mut model, bb.as_mut(), &test, Task::Classification)?);
        }
        Command::Sweep => {
            let result = run_sweep(&cfg)?;
            for p in emit_report(&result, out_dir(&cfg)?)? {
                println!("{}", p.display());
            }
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
