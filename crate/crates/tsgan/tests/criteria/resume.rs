//! Identical seeds give identical loss logs, and a run interrupted mid-epoch
//! and resumed from its checkpoint reproduces the uninterrupted reports.

use std::fs;
use std::path::Path;

use tsgan::checkpoint::{restore_training, Archive};
use tsgan::fit::{fit, FitOptions, LOSS_LOG};
use tsgan::loss_log::read_reports;
use tsgan_core::config::Variant;
use tsgan_core::datasets::{generate_synthetic, Dataset, SyntheticConfig};
use tsgan_core::image::Modality;
use tsgan_core::losses::LossReport;
use tsgan_core::trainer::{pretrain_teacher, TsGan};
use tsgan_core::TrainConfig;

pub const RESUME_TOL: f64 = 1e-10;
/// Interruption point: inside the second epoch.
const STOP_AT: u64 = 3;

fn setup() -> (TrainConfig, Dataset) {
    let data = generate_synthetic(&SyntheticConfig {
        n_identities: 4,
        images_per_identity_per_modality: 4,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut cfg = TrainConfig::default().with_batch(2, 4);
    cfg.variant = Variant::full();
    cfg.epochs = 3;
    cfg.warmup_epochs = 1;
    cfg.decay_epochs = vec![2];
    cfg.checkpoint_every = 1;
    cfg.teacher_steps = 5;
    cfg.seed = 17;
    (cfg, data)
}

fn fresh(cfg: &TrainConfig, data: &Dataset) -> TsGan {
    let teacher = pretrain_teacher(&data.restrict(Modality::Ir).unwrap(), cfg).unwrap().teacher;
    TsGan::new(cfg.clone(), data.num_identities(), teacher).unwrap()
}

fn uninterrupted(dir: &Path) -> Vec<LossReport> {
    let (cfg, data) = setup();
    let summary = fit(&mut fresh(&cfg, &data), &data, None, dir, &FitOptions::default()).unwrap();
    assert!(summary.finished);
    read_reports(&dir.join(LOSS_LOG)).unwrap()
}

pub fn identical_seeds_give_identical_loss_logs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    uninterrupted(a.path());
    uninterrupted(b.path());
    let read = |d: &Path| fs::read(d.join(LOSS_LOG)).unwrap();
    let log = read(a.path());
    assert!(!log.is_empty());
    assert_eq!(log, read(b.path()));
}

pub fn resume_reproduces_the_uninterrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let expected = uninterrupted(a.path());

    let (cfg, data) = setup();
    let opts = FitOptions {
        stop_at_step: Some(STOP_AT),
        ..FitOptions::default()
    };
    let cut = fit(&mut fresh(&cfg, &data), &data, None, b.path(), &opts).unwrap();
    assert!(!cut.finished);
    assert_eq!(cut.end_step, STOP_AT);
    // a fresh process: only the checkpoint and the log survive
    let mut run = restore_training(&Archive::load(&cut.checkpoint).unwrap(), &cfg).unwrap();
    assert_eq!(run.global_step(), STOP_AT);
    assert!(fit(&mut run, &data, None, b.path(), &FitOptions::default()).unwrap().finished);

    let resumed = read_reports(&b.path().join(LOSS_LOG)).unwrap();
    assert_eq!(resumed.len(), expected.len());
    for (r, e) in resumed.iter().zip(&expected) {
        assert_eq!((r.step, r.epoch), (e.step, e.epoch));
        assert!((r.lr - e.lr).abs() <= RESUME_TOL, "step {}: lr {} vs {}", e.step, r.lr, e.lr);
        assert_eq!(r.entries().len(), e.entries().len(), "step {}", e.step);
        for ((kr, vr), (ke, ve)) in r.entries().iter().zip(e.entries()) {
            assert_eq!(kr, ke);
            assert!((vr - ve).abs() <= RESUME_TOL, "step {} {ke}: {vr} vs {ve}", e.step);
        }
    }
}
