//! Training configuration and network presets.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::BatchLayout;

/// Which discriminator judges the fake IR images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscriminatorKind {
    /// Scores (IR image, feature map) pairs.
    Joint,
    /// Scores IR images alone.
    Ordinary,
}

/// Which teacher-student feature losses are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TsLosses {
    None,
    /// Only the cross-domain term (student RGB vs teacher fake IR).
    CrossDomain,
    All,
}

/// Ablation switches. [`Variant::full`] is the complete model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    /// Train the RGB↔IR generators and discriminators (phases 1 and 3).
    pub gan: bool,
    pub discriminator: DiscriminatorKind,
    pub ts_losses: TsLosses,
}

impl Default for Variant {
    fn default() -> Self {
        Self::full()
    }
}

impl Variant {
    /// Student backbone alone: identity and triplet losses on real images.
    pub fn backbone_only() -> Self {
        Self {
            gan: false,
            discriminator: DiscriminatorKind::Ordinary,
            ts_losses: TsLosses::None,
        }
    }

    pub fn ordinary_single_ts() -> Self {
        Self {
            gan: true,
            discriminator: DiscriminatorKind::Ordinary,
            ts_losses: TsLosses::CrossDomain,
        }
    }

    pub fn ordinary_all_ts() -> Self {
        Self {
            gan: true,
            discriminator: DiscriminatorKind::Ordinary,
            ts_losses: TsLosses::All,
        }
    }

    pub fn full() -> Self {
        Self {
            gan: true,
            discriminator: DiscriminatorKind::Joint,
            ts_losses: TsLosses::All,
        }
    }

    pub fn needs_teacher(&self) -> bool {
        self.ts_losses != TsLosses::None
    }

    pub fn joint(&self) -> bool {
        self.gan && self.discriminator == DiscriminatorKind::Joint
    }
}

/// Widths and depths of every network. Stage strides are fixed at 2/2/2/1
/// behind a stride-1 stem, so the former encoder downsamples by 8.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub stem_width: usize,
    pub stage_widths: [usize; 4],
    pub stage_blocks: [usize; 4],
    /// Generator widths: full-resolution, after one and after two downsamplings.
    pub generator_widths: [usize; 3],
    pub generator_res_blocks: usize,
    /// Image-branch widths of the discriminators, one per stride-2 convolution.
    pub disc_image_widths: [usize; 3],
    pub disc_feature_width: usize,
    pub disc_head_width: usize,
}

pub const STAGE_STRIDES: [usize; 4] = [2, 2, 2, 1];

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl NetworkConfig {
    pub fn tiny() -> Self {
        Self {
            stem_width: 16,
            stage_widths: [16, 32, 64, 128],
            stage_blocks: [1, 1, 1, 1],
            generator_widths: [8, 16, 32],
            generator_res_blocks: 2,
            disc_image_widths: [8, 16, 32],
            disc_feature_width: 32,
            disc_head_width: 32,
        }
    }

    /// ResNet-50 stage widths and depths (basic residual blocks).
    pub fn full() -> Self {
        Self {
            stem_width: 64,
            stage_widths: [256, 512, 1024, 2048],
            stage_blocks: [3, 4, 6, 3],
            generator_widths: [64, 128, 256],
            generator_res_blocks: 6,
            disc_image_widths: [64, 128, 256],
            disc_feature_width: 256,
            disc_head_width: 256,
        }
    }

    /// Spatial downsampling of the former encoder.
    pub fn former_stride(&self) -> usize {
        STAGE_STRIDES[..3].iter().product()
    }

    pub fn embedding_dim(&self) -> usize {
        self.stage_widths[3]
    }

    pub fn feature_channels(&self) -> usize {
        self.stage_widths[2]
    }
}

/// Every hyperparameter of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// RGB-IR pairs per identity in a batch.
    pub p: usize,
    /// Identities per batch.
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides the dataset-derived epoch length when set.
    pub steps_per_epoch: Option<usize>,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    /// Triplet margin `m`.
    pub margin: f64,
    /// Label smoothing `ε`.
    pub label_smoothing: f64,
    pub lambda_id: f64,
    pub lambda_triplet: f64,
    pub lambda_gan: f64,
    /// Cycle-consistency weight `ω`.
    pub omega: f64,
    pub alpha_cross_domain: f64,
    pub alpha_same_domain: f64,
    /// Let generated IR embeddings join the identity and triplet pools.
    pub reid_includes_fake: bool,
    pub embedding_dim: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub bn_momentum: f64,
    pub seed: u64,
    pub variant: Variant,
    pub network: NetworkConfig,
    /// Optimisation steps for IR-only teacher pretraining.
    pub teacher_steps: usize,
    pub teacher_lr: f64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let network = NetworkConfig::tiny();
        Self {
            p: 4,
            k: 8,
            batch_size: 64,
            epochs: 120,
            steps_per_epoch: None,
            base_lr: 0.00035,
            warmup_epochs: 10,
            decay_epochs: vec![40, 70],
            decay_factor: 0.3,
            weight_decay: 0.0005,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            margin: 0.3,
            label_smoothing: 0.1,
            lambda_id: 3.0,
            lambda_triplet: 1.0,
            lambda_gan: 0.1,
            omega: 10.0,
            alpha_cross_domain: 0.006,
            alpha_same_domain: 0.003,
            reid_includes_fake: false,
            embedding_dim: network.embedding_dim(),
            input_height: 32,
            input_width: 16,
            bn_momentum: 0.1,
            seed: 0,
            variant: Variant::full(),
            network,
            teacher_steps: 200,
            teacher_lr: 0.00035,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn layout(&self) -> BatchLayout {
        BatchLayout {
            p: self.p,
            k: self.k,
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.input_height, self.input_width)
    }

    /// Set `p` and `k` and keep `batch_size` consistent.
    pub fn with_batch(mut self, p: usize, k: usize) -> Self {
        self.p = p;
        self.k = k;
        self.batch_size = 2 * p * k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.p == 0 || self.k == 0 {
            return fail(format!("p and k must be positive (p={}, k={})", self.p, self.k));
        }
        if self.batch_size != 2 * self.p * self.k {
            return fail(format!(
                "batch_size {} must equal 2·p·k = {}",
                self.batch_size,
                2 * self.p * self.k
            ));
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} not in [0, 1)", self.label_smoothing));
        }
        if !(self.margin > 0.0) {
            return fail(format!("margin {} must be positive", self.margin));
        }
        let weights = [
            ("lambda_id", self.lambda_id),
            ("lambda_triplet", self.lambda_triplet),
            ("lambda_gan", self.lambda_gan),
            ("omega", self.omega),
            ("alpha_cross_domain", self.alpha_cross_domain),
            ("alpha_same_domain", self.alpha_same_domain),
            ("weight_decay", self.weight_decay),
        ];
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return fail(format!("{name} must be a finite non-negative weight, got {w}"));
            }
        }
        if !(self.base_lr > 0.0) || !(self.decay_factor > 0.0) {
            return fail("base_lr and decay_factor must be positive".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!(
                "decay_epochs {:?} must be strictly increasing",
                self.decay_epochs
            ));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return fail(format!(
                "decay_epochs {:?} must lie below epochs = {}",
                self.decay_epochs, self.epochs
            ));
        }
        if self.embedding_dim != self.network.embedding_dim() {
            return fail(format!(
                "embedding_dim {} must equal the last stage width {}",
                self.embedding_dim,
                self.network.embedding_dim()
            ));
        }
        let s = self.network.former_stride();
        if self.input_height % s != 0 || self.input_width % s != 0 || self.input_height == 0 {
            return fail(format!(
                "input resolution {}x{} must be a positive multiple of {s}",
                self.input_height, self.input_width
            ));
        }
        if self.steps_per_epoch == Some(0) {
            return fail("steps_per_epoch must be positive when set".into());
        }
        if self.variant.needs_teacher() && !self.variant.gan {
            return fail("teacher-student losses need generated IR images (variant.gan = true)".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail("bn_momentum must lie in [0, 1]".into());
        }
        Ok(())
    }
}
