//! The epoch loop around `TsGan::step_on`: loss log, periodic checkpoints,
//! evaluation snapshots and resumption.

use std::fs;
use std::path::{Path, PathBuf};

use tsgan_core::datasets::Dataset;
use tsgan_core::eval::cross_modality_r1;
use tsgan_core::trainer::TsGan;

use crate::checkpoint::training_archive;
use crate::error::{CliError, Result};
use crate::loss_log::{LogLine, LossLog};

pub const LOSS_LOG: &str = "loss.log";
pub const EVAL_LOG: &str = "eval.log";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Leave the loop (after checkpointing) once this many steps have run in
    /// total; simulates an interruption.
    pub stop_at_step: Option<u64>,
    /// Gallery resamplings of each evaluation snapshot.
    pub eval_trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub first_step: u64,
    pub end_step: u64,
    pub finished: bool,
    /// Last archive written.
    pub checkpoint: PathBuf,
    /// `(global step, cross-modality R1)` per snapshot.
    pub snapshots: Vec<(u64, f64)>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step-{step:06}.ckpt"))
}

/// Train `run` from its current global step to `epochs × steps-per-epoch`.
/// A run at step 0 starts a fresh log; otherwise the log in `out_dir` is
/// cut back to the resume point and continued.
pub fn fit(run: &mut TsGan, train: &Dataset, eval: Option<&Dataset>, out_dir: &Path, opts: &FitOptions) -> Result<FitSummary> {
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(CliError::io(&ckpt_dir))?;
    let spe = run.steps_per_epoch(train) as u64;
    if spe == 0 {
        return Err(CliError::Data("dataset is too small for a single batch".into()));
    }
    let cfg = run.config().clone();
    let total = cfg.epochs as u64 * spe;
    let first_step = run.global_step();
    let log_path = out_dir.join(LOSS_LOG);
    let mut log = if first_step == 0 {
        LossLog::create(&log_path)?
    } else {
        LossLog::resume(&log_path, first_step, spe)?
    };
    let schedule = run.schedule();
    let mut summary = FitSummary {
        first_step,
        end_step: first_step,
        finished: false,
        checkpoint: PathBuf::new(),
        snapshots: Vec::new(),
    };

    let outcome = (|| -> Result<()> {
        while run.global_step() < total {
            let step = run.global_step();
            if opts.stop_at_step.is_some_and(|s| step >= s) {
                summary.checkpoint = checkpoint_path(out_dir, step);
                training_archive(run).save(&summary.checkpoint)?;
                return Ok(());
            }
            let epoch = (step / spe) as usize;
            if step % spe == 0 {
                log.write(&LogLine::Epoch {
                    epoch,
                    lr: schedule.lr_at(epoch)?,
                })?;
            }
            let report = run.step_on(train)?;
            log.write(&LogLine::Report(report))?;
            let done = run.global_step();
            if done % spe == 0 && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && done < total {
                log.flush()?;
                summary.checkpoint = checkpoint_path(out_dir, done);
                training_archive(run).save(&summary.checkpoint)?;
                if let Some(ds) = eval {
                    snapshot(run, ds, out_dir, opts, &mut summary)?;
                }
            }
        }
        summary.finished = true;
        log.flush()?;
        summary.checkpoint = out_dir.join(FINAL_CHECKPOINT);
        training_archive(run).save(&summary.checkpoint)?;
        if let Some(ds) = eval {
            snapshot(run, ds, out_dir, opts, &mut summary)?;
        }
        Ok(())
    })();
    // whatever happened, the lines already produced reach the disk
    let flushed = log.flush();
    summary.end_step = run.global_step();
    outcome?;
    flushed?;
    Ok(summary)
}

fn snapshot(run: &TsGan, ds: &Dataset, out_dir: &Path, opts: &FitOptions, summary: &mut FitSummary) -> Result<()> {
    let step = run.global_step();
    let r1 = cross_modality_r1(&run.models.student, ds, opts.eval_trials.max(1), run.config().seed)?;
    log::info!("step {step}: cross-modality R1 {r1:.4}");
    summary.snapshots.push((step, r1));
    let path = out_dir.join(EVAL_LOG);
    let mut text = if step > 0 && path.exists() {
        fs::read_to_string(&path).map_err(CliError::io(&path))?
    } else {
        String::new()
    };
    // a resumed run rewrites snapshots it is about to repeat
    text = text
        .lines()
        .filter(|l| l.split_whitespace().next().and_then(|f| f.strip_prefix("step=")).and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step))
        .map(|l| format!("{l}\n"))
        .collect();
    text += &format!("step={step} r1={r1}\n");
    fs::write(&path, text).map_err(CliError::io(&path))
}
