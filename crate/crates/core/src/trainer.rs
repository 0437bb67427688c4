//! IR teacher pretraining and the three-phase alternating TS-GAN update.
//!
//! One step runs, in order: a generator phase stepping only `O_G`
//! (`G_I`, `G_R`), a backbone phase stepping only `O_B` (student), and a
//! discriminator phase stepping only `O_D` (`D_I`, `D_R`). Networks outside
//! the active phase enter the graph as constants, so no gradient reaches
//! them. The teacher belongs to no optimizer.

use alloc::format;
use alloc::vec::Vec;

use crate::config::{DiscriminatorKind, TrainConfig, TsLosses};
use crate::datasets::{pk_sample, sample_modality, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::image::{ImageBatch, Modality};
use crate::losses::{self, LossReport, MismatchedPair, TsInputs};
use crate::networks::{encoder_input, Discriminator, Generator, StudentBackbone, TeacherEncoder};
use crate::nn::{Binding, NormMode, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::schedule::LrSchedule;
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

/// Every network of the framework.
#[derive(Debug, Clone)]
pub struct Models {
    pub student: StudentBackbone,
    pub teacher: TeacherEncoder,
    /// `G_I`: RGB to IR.
    pub gen_ir: Generator,
    /// `G_R`: IR to RGB.
    pub gen_rgb: Generator,
    /// `D_I`: joint or ordinary, per the variant.
    pub disc_ir: Discriminator,
    /// `D_R`: ordinary, on RGB images.
    pub disc_rgb: Discriminator,
}

/// Optimizers of the three phases over disjoint parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    /// `O_G` over `[G_I, G_R]`.
    pub generator: Adam,
    /// `O_B` over `[student]`.
    pub backbone: Adam,
    /// `O_D` over `[D_I, D_R]`.
    pub discriminator: Adam,
}

/// Which optimizer a phase steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Generator,
    Backbone,
    Discriminator,
}

pub fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
        grad_clip: cfg.grad_clip,
    }
}

/// Model, optimizer and step state of one training run.
#[derive(Debug, Clone)]
pub struct TsGan {
    config: TrainConfig,
    pub models: Models,
    pub optimizers: Optimizers,
    global_step: u64,
}

/// Generated images of one batch, as constants.
struct Generated {
    fake_ir: Tensor,
    fake_rgb: Tensor,
}

fn check_finite(report: &LossReport) -> Result<()> {
    if report.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss(alloc::boxed::Box::new(report.clone())))
    }
}

fn assert_no_grads(b: &Binding<'_>, grads: &Gradients) {
    debug_assert!(
        b.vars().iter().all(|&v| grads.get(v).is_none()),
        "gradient reached a network outside the active phase"
    );
}

impl TsGan {
    /// Fresh networks drawn from the configured seed.
    pub fn new(config: TrainConfig, num_classes: usize, teacher: TeacherEncoder) -> Result<Self> {
        config.validate()?;
        if config.variant.needs_teacher() && !teacher.is_ready() {
            return Err(Error::TeacherNotReady);
        }
        let net = &config.network;
        let init = |k: u64| seed::rng(config.seed, Stream::Init, &[k]);
        let student = StudentBackbone::new(net, num_classes, &mut init(0));
        let gen_ir = Generator::new(net, Modality::Rgb, Modality::Ir, &mut init(1));
        let gen_rgb = Generator::new(net, Modality::Ir, Modality::Rgb, &mut init(2));
        let disc_ir = match config.variant.discriminator {
            DiscriminatorKind::Joint => Discriminator::joint(net, &mut init(3)),
            DiscriminatorKind::Ordinary => Discriminator::ordinary(net, 1, &mut init(3)),
        };
        let disc_rgb = Discriminator::ordinary(net, 3, &mut init(4));
        let adam = adam_config(&config);
        let optimizers = Optimizers {
            generator: Adam::new(adam, &[gen_ir.params(), gen_rgb.params()]),
            backbone: Adam::new(adam, &[student.params()]),
            discriminator: Adam::new(adam, &[disc_ir.params(), disc_rgb.params()]),
        };
        Ok(Self {
            config,
            models: Models {
                student,
                teacher,
                gen_ir,
                gen_rgb,
                disc_ir,
                disc_rgb,
            },
            optimizers,
            global_step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn set_global_step(&mut self, step: u64) {
        self.global_step = step;
    }

    /// Parameter sets owned by a phase's optimizer.
    pub fn phase_params(&self, phase: Phase) -> Vec<&ParamSet> {
        let m = &self.models;
        match phase {
            Phase::Generator => alloc::vec![m.gen_ir.params(), m.gen_rgb.params()],
            Phase::Backbone => alloc::vec![m.student.params()],
            Phase::Discriminator => alloc::vec![m.disc_ir.params(), m.disc_rgb.params()],
        }
    }

    /// Every named parameter set, teacher included when loaded.
    pub fn named_param_sets(&self) -> Vec<(&'static str, &ParamSet)> {
        let m = &self.models;
        let mut out = alloc::vec![
            ("student", m.student.params()),
            ("gen_ir", m.gen_ir.params()),
            ("gen_rgb", m.gen_rgb.params()),
            ("disc_ir", m.disc_ir.params()),
            ("disc_rgb", m.disc_rgb.params()),
        ];
        if let Ok(t) = m.teacher.params() {
            out.push(("teacher", t));
        }
        out
    }

    pub fn param_set_mut(&mut self, name: &str) -> Option<&mut ParamSet> {
        let m = &mut self.models;
        Some(match name {
            "student" => m.student.params_mut(),
            "gen_ir" => m.gen_ir.params_mut(),
            "gen_rgb" => m.gen_rgb.params_mut(),
            "disc_ir" => m.disc_ir.params_mut(),
            "disc_rgb" => m.disc_rgb.params_mut(),
            _ => return None,
        })
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::from_config(&self.config)
    }

    fn check_batch(&self, batch: &ImageBatch) -> Result<()> {
        let n = batch.layout.per_modality();
        let (h, w) = self.config.resolution();
        if batch.layout != self.config.layout() {
            return Err(Error::Contract(format!(
                "batch layout {:?} differs from configured {:?}",
                batch.layout,
                self.config.layout()
            )));
        }
        if batch.rgb.shape() != [n, 3, h, w] || batch.ir.shape() != [n, 1, h, w] || batch.labels.len() != n {
            return Err(Error::shape(
                "train_step",
                format!("rgb {:?}, ir {:?}, {} labels", batch.rgb.shape(), batch.ir.shape(), batch.labels.len()),
            ));
        }
        Ok(())
    }

    fn generate(&self, batch: &ImageBatch) -> Result<Generated> {
        let mut g = Graph::new();
        let x_r = g.constant(batch.rgb.clone());
        let x_i = g.constant(batch.ir.clone());
        let bi = self.models.gen_ir.params().bind(&mut g, false, NormMode::Eval);
        let fake_ir = self.models.gen_ir.forward(&mut g, &bi, x_r)?;
        let br = self.models.gen_rgb.params().bind(&mut g, false, NormMode::Eval);
        let fake_rgb = self.models.gen_rgb.forward(&mut g, &br, x_i)?;
        Ok(Generated {
            fake_ir: g.value(fake_ir).clone(),
            fake_rgb: g.value(fake_rgb).clone(),
        })
    }

    /// Student former-encoder maps with batch statistics, as constants and
    /// without touching the running statistics.
    fn student_maps_constant(&self, g: &mut Graph, images: &[Var]) -> Result<Vec<Var>> {
        let inputs = images
            .iter()
            .map(|&x| encoder_input(g, x))
            .collect::<Result<Vec<_>>>()?;
        let x = g.concat_batch(&inputs)?;
        let net = &self.models.student;
        let mut b = net.params().bind(g, false, NormMode::Train);
        let f = net.former(g, &mut b, x)?;
        let mut out = Vec::with_capacity(images.len());
        let mut start = 0;
        for &img in images {
            let n = g.value(img).shape()[0];
            out.push(g.slice_batch(f, start, n)?);
            start += n;
        }
        Ok(out)
    }

    /// Phase 1: update `G_I` and `G_R` with `L_G = adv_I + adv_R + ω·cyc`.
    pub fn phase_generator(&mut self, batch: &ImageBatch, lr: f64, report: &mut LossReport) -> Result<()> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let m = &self.models;
        let mut g = Graph::new();
        let x_r = g.constant(batch.rgb.clone());
        let x_i = g.constant(batch.ir.clone());
        let bi = m.gen_ir.params().bind(&mut g, true, NormMode::Train);
        let br = m.gen_rgb.params().bind(&mut g, true, NormMode::Train);
        let fake_ir = m.gen_ir.forward(&mut g, &bi, x_r)?;
        let rec_rgb = m.gen_rgb.forward(&mut g, &br, fake_ir)?;
        let fake_rgb = m.gen_rgb.forward(&mut g, &br, x_i)?;
        let rec_ir = m.gen_ir.forward(&mut g, &bi, fake_rgb)?;

        let d_ir = m.disc_ir.params().bind(&mut g, false, NormMode::Train);
        let fmap = match m.disc_ir.kind() {
            DiscriminatorKind::Joint => Some(self.student_maps_constant(&mut g, &[fake_ir])?[0]),
            DiscriminatorKind::Ordinary => None,
        };
        let p_fake_ir = m.disc_ir.forward(&mut g, &d_ir, fake_ir, fmap)?;
        let adv_ir = losses::gen_adv_loss(&mut g, p_fake_ir)?;
        let d_rgb = m.disc_rgb.params().bind(&mut g, false, NormMode::Train);
        let p_fake_rgb = m.disc_rgb.forward(&mut g, &d_rgb, fake_rgb, None)?;
        let adv_rgb = losses::gen_adv_loss(&mut g, p_fake_rgb)?;
        let cyc = losses::cycle_loss(&mut g, rec_rgb, x_r, rec_ir, x_i)?;
        let adv = g.add(adv_ir, adv_rgb)?;
        let total = losses::gen_total(&mut g, adv, cyc, cfg.omega)?;

        report.push("g_adv", g.value(adv_ir).item());
        report.push("g_adv_rgb", g.value(adv_rgb).item());
        report.push("cyc", g.value(cyc).item());
        report.push("g_total", g.value(total).item());
        check_finite(report)?;

        let grads = g.backward(total)?;
        assert_no_grads(&d_ir, &grads);
        assert_no_grads(&d_rgb, &grads);
        let gs = [bi.grads(&grads), br.grads(&grads)];
        drop((bi, br, d_ir, d_rgb));
        let models = &mut self.models;
        self.optimizers.generator.step(
            &mut [models.gen_ir.params_mut(), models.gen_rgb.params_mut()],
            &gs,
            lr,
        )
    }

    /// Phase 2: update the student with `L_ReID + L_TS`.
    pub fn phase_backbone(&mut self, batch: &ImageBatch, lr: f64, report: &mut LossReport) -> Result<()> {
        self.check_batch(batch)?;
        let generated = if self.config.variant.gan { Some(self.generate(batch)?) } else { None };
        self.backbone_with(batch, generated.as_ref(), lr, report)
    }

    fn backbone_with(
        &mut self,
        batch: &ImageBatch,
        generated: Option<&Generated>,
        lr: f64,
        report: &mut LossReport,
    ) -> Result<()> {
        let cfg = &self.config;
        let variant = cfg.variant;
        let m = &self.models;
        let n = batch.layout.per_modality();
        let mut g = Graph::new();
        let x_r = g.constant(batch.rgb.clone());
        let x_i = g.constant(batch.ir.clone());
        let fake = generated.map(|gen| g.constant(gen.fake_ir.clone()));

        let mut inputs = alloc::vec![x_r, encoder_input(&mut g, x_i)?];
        if let Some(f) = fake {
            inputs.push(encoder_input(&mut g, f)?);
        }
        let x = g.concat_batch(&inputs)?;
        let mut b = m.student.params().bind(&mut g, true, NormMode::Train);
        let fmap = m.student.former(&mut g, &mut b, x)?;
        let f_r = g.slice_batch(fmap, 0, n)?;
        let f_i = g.slice_batch(fmap, n, n)?;
        let f_fake = match fake {
            Some(_) => Some(g.slice_batch(fmap, 2 * n, n)?),
            None => None,
        };
        let pooled = if cfg.reid_includes_fake && fake.is_some() { 3 * n } else { 2 * n };
        let reid_maps = if pooled == 3 * n { fmap } else { g.slice_batch(fmap, 0, 2 * n)? };
        let emb = m.student.latter(&mut g, &mut b, reid_maps)?;
        let logits = m.student.classify(&mut g, &b, emb)?;
        let mut labels = Vec::with_capacity(pooled);
        for _ in 0..pooled / n {
            labels.extend_from_slice(&batch.labels);
        }
        let id = losses::id_loss(&mut g, logits, &labels, cfg.label_smoothing)?;
        let tri = losses::triplet_loss(&mut g, emb, &labels, cfg.margin)?;

        let mut d_bind = None;
        let gan = match (variant.joint(), fake, f_fake) {
            (true, Some(fake), Some(f_fake)) => {
                let d = m.disc_ir.params().bind(&mut g, false, NormMode::Train);
                let mut probs = Vec::with_capacity(3);
                for pair in MismatchedPair::ALL {
                    let (img_fake, map_fake) = pair.sources();
                    let img = if img_fake { fake } else { x_i };
                    let map = if map_fake { f_fake } else { f_i };
                    probs.push(m.disc_ir.forward(&mut g, &d, img, Some(map))?);
                }
                d_bind = Some(d);
                Some(losses::reid_gan_loss(&mut g, &probs)?)
            }
            _ => None,
        };
        let reid = losses::reid_total(
            &mut g,
            id,
            tri,
            gan,
            (cfg.lambda_id, cfg.lambda_triplet, cfg.lambda_gan),
        )?;

        let ts = match (variant.ts_losses, generated, f_fake) {
            (TsLosses::None, _, _) => None,
            (which, Some(gen), Some(f_fake)) => {
                let teacher = &m.teacher;
                let t_i = teacher.features(&mut g, x_i)?;
                let fake_t = g.constant(gen.fake_ir.clone());
                let t_fake = teacher.features(&mut g, fake_t)?;
                let terms = losses::ts_losses(
                    &mut g,
                    &TsInputs {
                        teacher_real_ir: t_i,
                        teacher_fake_ir: t_fake,
                        student_real_ir: f_i,
                        student_fake_ir: f_fake,
                        student_rgb: f_r,
                    },
                )?;
                let total = losses::ts_total(&mut g, &terms, cfg.alpha_cross_domain, cfg.alpha_same_domain, which)?;
                Some((terms, total))
            }
            _ => return Err(Error::Contract("teacher-student losses need generated images".into())),
        };

        let total = match ts.as_ref().and_then(|(_, t)| *t) {
            Some(t) => g.add(reid, t)?,
            None => reid,
        };

        report.push("reid_id", g.value(id).item());
        report.push("reid_tri", g.value(tri).item());
        if let Some(gan) = gan {
            report.push("reid_gan", g.value(gan).item());
        }
        report.push("reid_total", g.value(reid).item());
        if let Some((terms, t)) = &ts {
            report.push("ts_real_ir", g.value(terms.real_ir).item());
            report.push("ts_fake_ir", g.value(terms.fake_ir).item());
            report.push("ts_cd", g.value(terms.cross_domain).item());
            if let Some(t) = t {
                report.push("ts_total", g.value(*t).item());
            }
        }
        report.push("backbone_total", g.value(total).item());
        check_finite(report)?;

        let grads = g.backward(total)?;
        if let Some(d) = &d_bind {
            assert_no_grads(d, &grads);
        }
        let gs = [b.grads(&grads)];
        let updates = b.into_updates();
        drop(d_bind);
        let momentum = cfg.bn_momentum;
        let student = self.models.student.params_mut();
        self.optimizers.backbone.step(&mut [&mut *student], &gs, lr)?;
        student.commit_stats(&updates, momentum);
        Ok(())
    }

    /// Phase 3: update `D_I` and `D_R` on fresh, constant feature maps.
    pub fn phase_discriminator(&mut self, batch: &ImageBatch, lr: f64, report: &mut LossReport) -> Result<()> {
        self.check_batch(batch)?;
        let gen = self.generate(batch)?;
        self.discriminator_with(batch, gen, lr, report)
    }

    fn discriminator_with(&mut self, batch: &ImageBatch, gen: Generated, lr: f64, report: &mut LossReport) -> Result<()> {
        let m = &self.models;
        let mut g = Graph::new();
        let x_r = g.constant(batch.rgb.clone());
        let x_i = g.constant(batch.ir.clone());
        let fake = g.constant(gen.fake_ir);
        let fake_rgb = g.constant(gen.fake_rgb);

        let bd = m.disc_ir.params().bind(&mut g, true, NormMode::Train);
        let (real, negatives) = match m.disc_ir.kind() {
            DiscriminatorKind::Joint => {
                let maps = self.student_maps_constant(&mut g, &[x_i, fake])?;
                let (f_i, f_fake) = (maps[0], maps[1]);
                let real = m.disc_ir.forward(&mut g, &bd, x_i, Some(f_i))?;
                let mut negatives = Vec::with_capacity(3);
                for pair in MismatchedPair::ALL {
                    let (img_fake, map_fake) = pair.sources();
                    let img = if img_fake { fake } else { x_i };
                    let map = if map_fake { f_fake } else { f_i };
                    negatives.push(m.disc_ir.forward(&mut g, &bd, img, Some(map))?);
                }
                (real, negatives)
            }
            DiscriminatorKind::Ordinary => {
                let real = m.disc_ir.forward(&mut g, &bd, x_i, None)?;
                let neg = m.disc_ir.forward(&mut g, &bd, fake, None)?;
                (real, alloc::vec![neg])
            }
        };
        let d_ir = losses::disc_loss(&mut g, real, &negatives)?;
        let d_real = losses::neg_log_mean(&mut g, real)?;
        let mut fake_terms = Vec::with_capacity(negatives.len());
        for &p in &negatives {
            fake_terms.push((losses::neg_log1m_mean(&mut g, p)?, 1.0 / negatives.len() as f64));
        }
        let d_fake = g.weighted_sum(&fake_terms)?;

        let br = m.disc_rgb.params().bind(&mut g, true, NormMode::Train);
        let real_rgb = m.disc_rgb.forward(&mut g, &br, x_r, None)?;
        let fake_rgb_p = m.disc_rgb.forward(&mut g, &br, fake_rgb, None)?;
        let d_rgb = losses::disc_loss(&mut g, real_rgb, &[fake_rgb_p])?;
        let total = g.add(d_ir, d_rgb)?;

        report.push("d_real", g.value(d_real).item());
        report.push("d_fake", g.value(d_fake).item());
        report.push("d_total", g.value(d_ir).item());
        report.push("d_rgb", g.value(d_rgb).item());
        check_finite(report)?;

        let grads = g.backward(total)?;
        let gs = [bd.grads(&grads), br.grads(&grads)];
        drop((bd, br));
        let models = &mut self.models;
        self.optimizers.discriminator.step(
            &mut [models.disc_ir.params_mut(), models.disc_rgb.params_mut()],
            &gs,
            lr,
        )
    }

    /// All phases of one step at rate `lr`. Without the generator the
    /// backbone phase runs alone. The generators are fixed after phase 1,
    /// so phases 2 and 3 share one set of generated images.
    pub fn train_step(&mut self, batch: &ImageBatch, epoch: usize, lr: f64) -> Result<LossReport> {
        self.check_batch(batch)?;
        let mut report = LossReport::new(self.global_step, epoch, lr);
        if self.config.variant.gan {
            self.phase_generator(batch, lr, &mut report)?;
            let gen = self.generate(batch)?;
            self.backbone_with(batch, Some(&gen), lr, &mut report)?;
            self.discriminator_with(batch, gen, lr, &mut report)?;
        } else {
            self.backbone_with(batch, None, lr, &mut report)?;
        }
        self.global_step += 1;
        Ok(report)
    }

    /// Epoch length on `dataset`, honouring the configured override.
    pub fn steps_per_epoch(&self, dataset: &Dataset) -> usize {
        self.config
            .steps_per_epoch
            .unwrap_or_else(|| dataset.steps_per_epoch(self.config.layout()))
    }

    /// Sample the batch of the current global step and run it. The batch
    /// depends only on the seed and the step, so a resumed run draws the
    /// same batches.
    pub fn step_on(&mut self, dataset: &Dataset) -> Result<LossReport> {
        let spe = self.steps_per_epoch(dataset) as u64;
        let epoch = (self.global_step / spe) as usize;
        let lr = self.schedule().lr_at(epoch)?;
        let mut rng = seed::rng(self.config.seed, Stream::Sampling, &[self.global_step]);
        let batch = pk_sample(dataset, self.config.layout(), &mut rng)?;
        self.train_step(&batch, epoch, lr)
    }
}

/// Result of IR-only baseline training.
#[derive(Debug, Clone)]
pub struct PretrainedTeacher {
    pub teacher: TeacherEncoder,
    pub baseline: StudentBackbone,
    pub reports: Vec<LossReport>,
}

/// Train a full baseline on IR images with identity and triplet losses and
/// freeze it into a teacher. Each step draws `K` identities with `2·P`
/// images each, matching the paired batch size.
pub fn pretrain_teacher(ir_dataset: &Dataset, cfg: &TrainConfig) -> Result<PretrainedTeacher> {
    cfg.validate()?;
    if ir_dataset.count(Modality::Rgb) > 0 {
        return Err(Error::Validation(format!(
            "teacher pretraining takes IR images only; found {} RGB images",
            ir_dataset.count(Modality::Rgb)
        )));
    }
    let mut baseline = StudentBackbone::new(
        &cfg.network,
        ir_dataset.num_identities(),
        // same draw as the student, standing in for a shared pretrained start
        &mut seed::rng(cfg.seed, Stream::Init, &[0]),
    );
    let mut opt = Adam::new(adam_config(cfg), &[baseline.params()]);
    let mut reports = Vec::with_capacity(cfg.teacher_steps);
    for step in 0..cfg.teacher_steps {
        let mut rng = seed::rng(cfg.seed, Stream::Teacher, &[1, step as u64]);
        let (images, labels) = sample_modality(ir_dataset, Modality::Ir, 2 * cfg.p, cfg.k, &mut rng)?;
        let mut g = Graph::new();
        let x = g.constant(images);
        let x = encoder_input(&mut g, x)?;
        let mut b = baseline.params().bind(&mut g, true, NormMode::Train);
        let out = baseline.forward(&mut g, &mut b, x)?;
        let id = losses::id_loss(&mut g, out.logits, &labels, cfg.label_smoothing)?;
        let tri = losses::triplet_loss(&mut g, out.embedding, &labels, cfg.margin)?;
        let total = g.weighted_sum(&[(id, cfg.lambda_id), (tri, cfg.lambda_triplet)])?;
        let mut report = LossReport::new(step as u64, 0, cfg.teacher_lr);
        report.push("reid_id", g.value(id).item());
        report.push("reid_tri", g.value(tri).item());
        report.push("teacher_total", g.value(total).item());
        check_finite(&report)?;
        let grads = g.backward(total)?;
        let gs = [b.grads(&grads)];
        let updates = b.into_updates();
        let ps = baseline.params_mut();
        opt.step(&mut [&mut *ps], &gs, cfg.teacher_lr)?;
        ps.commit_stats(&updates, cfg.bn_momentum);
        reports.push(report);
    }
    Ok(PretrainedTeacher {
        teacher: TeacherEncoder::from_baseline(&baseline)?,
        baseline,
        reports,
    })
}
