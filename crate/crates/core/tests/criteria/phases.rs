//! Fifty steps on the tiny preset: each phase moves only the parameter sets
//! of its own optimizer and the teacher never changes.

use tsgan_core::config::{TrainConfig, Variant};
use tsgan_core::datasets::{generate_synthetic, pk_sample, SyntheticConfig};
use tsgan_core::image::Modality;
use tsgan_core::losses::LossReport;
use tsgan_core::seed::{self, Stream};
use tsgan_core::trainer::{pretrain_teacher, Phase, TsGan};
use tsgan_core::Tensor;

const STEPS: u64 = 50;

fn snapshot(run: &TsGan) -> Vec<(&'static str, Vec<Tensor>)> {
    run.named_param_sets()
        .into_iter()
        .map(|(name, ps)| (name, ps.values().iter().chain(ps.buffers()).cloned().collect()))
        .collect()
}

fn owned(phase: Phase) -> &'static [&'static str] {
    match phase {
        Phase::Generator => &["gen_ir", "gen_rgb"],
        Phase::Backbone => &["student"],
        Phase::Discriminator => &["disc_ir", "disc_rgb"],
    }
}

pub fn phases_touch_only_their_own_networks_for_fifty_steps() {
    let data = generate_synthetic(&SyntheticConfig {
        n_identities: 4,
        images_per_identity_per_modality: 4,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut cfg = TrainConfig::default().with_batch(2, 4);
    cfg.input_height = 32;
    cfg.input_width = 16;
    cfg.teacher_steps = 5;
    cfg.variant = Variant::full();
    let teacher = pretrain_teacher(&data.restrict(Modality::Ir).unwrap(), &cfg).unwrap().teacher;
    let frozen = teacher.params().unwrap().clone();
    let mut run = TsGan::new(cfg.clone(), data.num_identities(), teacher).unwrap();

    for step in 0..STEPS {
        let batch = pk_sample(&data, cfg.layout(), &mut seed::rng(cfg.seed, Stream::Sampling, &[step])).unwrap();
        let mut report = LossReport::new(step, 0, cfg.base_lr);
        for phase in [Phase::Generator, Phase::Backbone, Phase::Discriminator] {
            let before = snapshot(&run);
            match phase {
                Phase::Generator => run.phase_generator(&batch, cfg.base_lr, &mut report),
                Phase::Backbone => run.phase_backbone(&batch, cfg.base_lr, &mut report),
                Phase::Discriminator => run.phase_discriminator(&batch, cfg.base_lr, &mut report),
            }
            .unwrap();
            for ((name, a), (_, b)) in before.iter().zip(snapshot(&run)) {
                let moved = *a != b;
                assert_eq!(moved, owned(phase).contains(name), "step {step} {phase:?}: {name} moved={moved}");
            }
        }
        assert_eq!(run.models.teacher.params().unwrap(), &frozen, "teacher changed at step {step}");
        run.set_global_step(step + 1);
    }
    for (name, opt) in [
        ("generator", &run.optimizers.generator),
        ("backbone", &run.optimizers.backbone),
        ("discriminator", &run.optimizers.discriminator),
    ] {
        assert_eq!(opt.steps_taken(), STEPS, "{name}");
    }
}
