//! `tsgan <command>`: synthetic data, teacher pretraining, training,
//! evaluation and reports. Every command writes its resolved configuration
//! and the tool version into `--out` and touches nothing else.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tsgan_core::datasets::{Dataset, Split};
use tsgan_core::eval::{evaluate, ir_to_ir_r1, MetricsTable};
use tsgan_core::image::Modality;
use tsgan_core::trainer::{pretrain_teacher, TsGan};

use crate::checkpoint::{load_generators, load_student, load_teacher, restore_training, teacher_archive, Archive, KIND_TRAINING};
use crate::config_file::{parse_protocol, RunConfig};
use crate::error::{CliError, Result};
use crate::fit::{fit, FitOptions};
use crate::loss_log::{LogLine, LossLog};
use crate::manifest::{export_dataset, MANIFEST_NAME};
use crate::png_io::write_png;
use crate::report::{generation_grid, retrieval_grid};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const VERSION_FILE: &str = "VERSION";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const METRICS_REPORT: &str = "metrics.txt";
pub const METRICS_TABLE: &str = "metrics_table.txt";
/// Environment variable holding the log filter, e.g. `info`.
pub const LOG_ENV: &str = "TSGAN_LOG";

#[derive(Debug, Parser)]
#[command(name = "tsgan", version, about = "Teacher-student GAN for RGB-infrared person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace every seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic training and held-out splits as PNGs plus manifests.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the IR-only baseline and freeze it into the teacher.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Train TS-GAN; resumes when --checkpoint is a training checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint written by pretrain-teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Training checkpoint to resume from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cells as mode,shot (repeatable); defaults to the configured list.
        #[arg(long)]
        protocol: Vec<String>,
        /// Re-rank distances with k-reciprocal encoding.
        #[arg(long)]
        rerank: bool,
        /// Gallery resamplings per cell.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Full metrics table with and without re-ranking, plus image grids.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
    },
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::SynthData { common } => synth_data(&common),
        Command::PretrainTeacher { common } => pretrain(&common),
        Command::Train {
            common,
            teacher,
            checkpoint,
        } => train(&common, teacher.as_deref(), checkpoint.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            protocol,
            rerank,
            trials,
        } => eval(&common, &checkpoint, &protocol, rerank, trials),
        Command::Report {
            common,
            checkpoint,
            trials,
        } => report(&common, &checkpoint, trials),
    }
}

/// Load and resolve the configuration, create `out` and record both the
/// configuration and the version there.
fn prepare(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    let out = &common.out;
    fs::create_dir_all(out).map_err(CliError::io(out))?;
    write(&out.join(RESOLVED_CONFIG), &cfg.to_toml())?;
    write(&out.join(VERSION_FILE), &format!("tsgan {VERSION}\n"))?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(CliError::io(path))
}

fn synth_data(common: &Common) -> Result<()> {
    let cfg = prepare(common)?;
    for (name, split) in [("train", Split::Train), ("test", Split::Test)] {
        let ds = tsgan_core::datasets::generate_synthetic_split(&cfg.synthetic, split)?;
        let dir = common.out.join(name);
        export_dataset(&ds, &dir)?;
        log::info!("{} images in {}", ds.len(), dir.join(MANIFEST_NAME).display());
    }
    Ok(())
}

fn pretrain(common: &Common) -> Result<()> {
    let cfg = prepare(common)?;
    let train = cfg.train_dataset()?;
    let pt = pretrain_teacher(&train.restrict(Modality::Ir)?, &cfg.train)?;
    let mut log = LossLog::create(&common.out.join("teacher.log"))?;
    for r in &pt.reports {
        log.write(&LogLine::Report(r.clone()))?;
    }
    log.flush()?;
    teacher_archive(&pt.baseline, &cfg.train).save(&common.out.join(TEACHER_CHECKPOINT))?;
    let test = cfg.test_dataset()?;
    let r1 = ir_to_ir_r1(&pt.baseline, &test)?;
    log::info!("teacher baseline IR-to-IR R1 {r1:.4}");
    write(&common.out.join("teacher_report.txt"), &format!("ir_to_ir_r1={r1}\n"))
}

fn train(common: &Common, teacher: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let teacher = teacher.ok_or_else(|| {
        CliError::Config("missing field `teacher`: train needs the frozen teacher from pretrain-teacher (--teacher <teacher.ckpt>)".into())
    })?;
    let cfg = prepare(common)?;
    let train = cfg.train_dataset()?;
    let test = cfg.test_dataset()?;
    let (teacher, _) = load_teacher(&Archive::load(teacher)?, &cfg.train.network)?;
    let mut run = match checkpoint {
        Some(path) => {
            let run = restore_training(&Archive::load(path)?, &cfg.train)?;
            if run.models.teacher.params()? != teacher.params()? {
                return Err(CliError::Config("--teacher differs from the teacher the checkpoint was trained with".into()));
            }
            run
        }
        None => TsGan::new(cfg.train.clone(), train.num_identities(), teacher)?,
    };
    let opts = FitOptions {
        stop_at_step: None,
        eval_trials: cfg.eval.trials,
    };
    let summary = fit(&mut run, &train, Some(&test), &common.out, &opts)?;
    log::info!("trained steps {}..{}; {}", summary.first_step, summary.end_step, summary.checkpoint.display());
    Ok(())
}

fn student_and_test(cfg: &RunConfig, checkpoint: &Path) -> Result<(tsgan_core::networks::StudentBackbone, Dataset, Archive)> {
    let archive = Archive::load(checkpoint)?;
    if archive.kind != KIND_TRAINING {
        return Err(CliError::Config(format!("{} is a {} checkpoint; eval needs a training checkpoint", checkpoint.display(), archive.kind)));
    }
    Ok((load_student(&archive)?, cfg.test_dataset()?, archive))
}

fn write_table(out: &Path, table: &MetricsTable) -> Result<()> {
    write(&out.join(METRICS_REPORT), &table.to_report())?;
    write(&out.join(METRICS_TABLE), &table.render())
}

fn eval(common: &Common, checkpoint: &Path, protocols: &[String], rerank: bool, trials: Option<usize>) -> Result<()> {
    let mut cfg = prepare(common)?;
    if let Some(t) = trials {
        cfg.eval.trials = t;
    }
    if !protocols.is_empty() {
        // comma-joined pairs may also arrive as one list: all-search,single,indoor-search,multi
        let mut cells = Vec::new();
        for p in protocols {
            let parts: Vec<&str> = p.split(',').map(str::trim).collect();
            if parts.len() % 2 != 0 {
                return Err(CliError::Config(format!("protocol {p:?}: expected mode,shot pairs")));
            }
            for pair in parts.chunks(2) {
                let cell = pair.join(",");
                parse_protocol(&cell)?;
                cells.push(cell);
            }
        }
        cfg.eval.protocols = cells;
    }
    let (net, test, _) = student_and_test(&cfg, checkpoint)?;
    let table = evaluate(&net, &test, &cfg.protocols(rerank)?, cfg.train.seed)?;
    write_table(&common.out, &table)
}

fn report(common: &Common, checkpoint: &Path, trials: Option<usize>) -> Result<()> {
    let mut cfg = prepare(common)?;
    if let Some(t) = trials {
        cfg.eval.trials = t;
    }
    let (net, test, archive) = student_and_test(&cfg, checkpoint)?;
    let mut protocols = cfg.protocols(false)?;
    protocols.extend(cfg.protocols(true)?);
    let table = evaluate(&net, &test, &protocols, cfg.train.seed)?;
    write_table(&common.out, &table)?;
    let first = &protocols[0];
    write_png(
        &common.out.join("retrieval_grid.png"),
        &retrieval_grid(&net, &test, first, cfg.train.seed, cfg.eval.grid_queries)?,
    )?;
    let (gen_ir, gen_rgb) = load_generators(&archive)?;
    write_png(
        &common.out.join("generation_grid.png"),
        &generation_grid(&gen_ir, &gen_rgb, &test, cfg.eval.grid_queries)?,
    )
}
