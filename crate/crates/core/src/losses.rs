//! Loss terms of the three training phases, built on the autograd graph.
//!
//! Discriminator outputs enter every adversarial term as probabilities and
//! pass through a logarithm clamped at [`LOG_EPS`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::config::TsLosses;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Floor applied inside every `log` of a discriminator probability.
pub const LOG_EPS: f64 = 1e-7;

/// Label-smoothed targets `[n, classes]`: the true class gets
/// `1 - (N-1)ε/N`, every other class `ε/N`.
pub fn soft_labels(labels: &[usize], num_classes: usize, eps: f64) -> Result<Tensor> {
    if num_classes == 0 {
        return Err(Error::Empty("soft_labels classes"));
    }
    let n = num_classes as f64;
    let off = eps / n;
    let on = 1.0 - (n - 1.0) * eps / n;
    let mut data = alloc::vec![off; labels.len() * num_classes];
    for (row, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Index {
                what: "identity label",
                index: y,
                len: num_classes,
            });
        }
        data[row * num_classes + y] = on;
    }
    Tensor::new(&[labels.len(), num_classes], data)
}

/// Label-smoothed identity cross-entropy, averaged over the batch.
pub fn id_loss(g: &mut Graph, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let (_, classes) = g.value(logits).dims2()?;
    let targets = soft_labels(labels, classes, eps)?;
    g.soft_cross_entropy(logits, &targets)
}

/// Batch-hard triplet loss, averaged over anchors.
pub fn triplet_loss(g: &mut Graph, embeddings: Var, labels: &[usize], margin: f64) -> Result<Var> {
    g.batch_hard_triplet(embeddings, labels, margin)
}

/// `-mean log D` over a batch of probabilities.
pub fn neg_log_mean(g: &mut Graph, prob: Var) -> Result<Var> {
    let l = g.log_clamped(prob, LOG_EPS);
    let m = g.mean_all(l)?;
    Ok(g.scale(m, -1.0))
}

/// `-mean log(1 - D)` over a batch of probabilities.
pub fn neg_log1m_mean(g: &mut Graph, prob: Var) -> Result<Var> {
    let l = g.log1m_clamped(prob, LOG_EPS);
    let m = g.mean_all(l)?;
    Ok(g.scale(m, -1.0))
}

/// Generator adversarial term: `-mean log D(fake)`.
pub fn gen_adv_loss(g: &mut Graph, d_fake: Var) -> Result<Var> {
    neg_log_mean(g, d_fake)
}

/// Discriminator loss: real pairs scored toward 1, every negative set toward
/// 0, the negative sets weighted equally.
pub fn disc_loss(g: &mut Graph, d_real: Var, d_negatives: &[Var]) -> Result<Var> {
    if d_negatives.is_empty() {
        return Err(Error::Empty("disc_loss negatives"));
    }
    let mut terms = Vec::with_capacity(d_negatives.len() + 1);
    terms.push((neg_log_mean(g, d_real)?, 1.0));
    let w = 1.0 / d_negatives.len() as f64;
    for &d in d_negatives {
        terms.push((neg_log1m_mean(g, d)?, w));
    }
    g.weighted_sum(&terms)
}

/// Backbone-side joint adversarial term: every mismatched pair scored toward
/// real, the pair sets weighted equally.
pub fn reid_gan_loss(g: &mut Graph, d_negatives: &[Var]) -> Result<Var> {
    if d_negatives.is_empty() {
        return Err(Error::Empty("reid_gan_loss negatives"));
    }
    let w = 1.0 / d_negatives.len() as f64;
    let mut terms = Vec::with_capacity(d_negatives.len());
    for &d in d_negatives {
        terms.push((neg_log_mean(g, d)?, w));
    }
    g.weighted_sum(&terms)
}

/// `mean|G_R(G_I(x_rgb)) - x_rgb| + mean|G_I(G_R(x_ir)) - x_ir|`.
pub fn cycle_loss(
    g: &mut Graph,
    rgb_reconstructed: Var,
    rgb: Var,
    ir_reconstructed: Var,
    ir: Var,
) -> Result<Var> {
    let a = g.l1(rgb_reconstructed, rgb)?;
    let b = g.l1(ir_reconstructed, ir)?;
    g.add(a, b)
}

/// `adv + ω·cyc`.
pub fn gen_total(g: &mut Graph, adv: Var, cyc: Var, omega: f64) -> Result<Var> {
    g.weighted_sum(&[(adv, 1.0), (cyc, omega)])
}

/// The three mismatched (image, feature map) pair sets a joint discriminator
/// must reject. Each names which image and which feature map are paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MismatchedPair {
    /// Fake IR image with its own feature map.
    FakeFake,
    /// Fake IR image with the real IR feature map of the same row.
    FakeReal,
    /// Real IR image with the fake IR feature map of the same row.
    RealFake,
}

impl MismatchedPair {
    pub const ALL: [MismatchedPair; 3] = [Self::FakeFake, Self::FakeReal, Self::RealFake];

    /// `(image is fake, feature map is of the fake)`.
    pub fn sources(self) -> (bool, bool) {
        match self {
            Self::FakeFake => (true, true),
            Self::FakeReal => (true, false),
            Self::RealFake => (false, true),
        }
    }
}

/// Feature maps `[n, C, H', W']` entering the teacher-student terms.
#[derive(Debug, Clone, Copy)]
pub struct TsInputs {
    pub teacher_real_ir: Var,
    pub teacher_fake_ir: Var,
    pub student_real_ir: Var,
    pub student_fake_ir: Var,
    pub student_rgb: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct TsTerms {
    pub real_ir: Var,
    pub fake_ir: Var,
    pub cross_domain: Var,
}

/// Element-mean squared distances between teacher and student feature maps.
pub fn ts_losses(g: &mut Graph, x: &TsInputs) -> Result<TsTerms> {
    Ok(TsTerms {
        real_ir: g.mse(x.teacher_real_ir, x.student_real_ir)?,
        fake_ir: g.mse(x.teacher_fake_ir, x.student_fake_ir)?,
        cross_domain: g.mse(x.teacher_fake_ir, x.student_rgb)?,
    })
}

/// `α_c·CD + α_s·(RealIR + FakeIR)`, or `α_c·CD` alone for
/// [`TsLosses::CrossDomain`].
pub fn ts_total(
    g: &mut Graph,
    t: &TsTerms,
    alpha_cross: f64,
    alpha_same: f64,
    which: TsLosses,
) -> Result<Option<Var>> {
    match which {
        TsLosses::None => Ok(None),
        TsLosses::CrossDomain => Ok(Some(g.scale(t.cross_domain, alpha_cross))),
        TsLosses::All => Ok(Some(g.weighted_sum(&[
            (t.cross_domain, alpha_cross),
            (t.real_ir, alpha_same),
            (t.fake_ir, alpha_same),
        ])?)),
    }
}

/// `λ₁·ID + λ₂·Tri (+ λ₃·GAN)`.
pub fn reid_total(
    g: &mut Graph,
    id: Var,
    triplet: Var,
    gan: Option<Var>,
    (l1, l2, l3): (f64, f64, f64),
) -> Result<Var> {
    let mut terms = alloc::vec![(id, l1), (triplet, l2)];
    if let Some(gan) = gan {
        terms.push((gan, l3));
    }
    g.weighted_sum(&terms)
}

/// Scalar loss values of one training step, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    entries: Vec<(String, f64)>,
}

impl LossReport {
    pub fn new(step: u64, epoch: usize, lr: f64) -> Self {
        Self {
            step,
            epoch,
            lr,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, value: f64) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn all_finite(&self) -> bool {
        self.lr.is_finite() && self.entries.iter().all(|(_, v)| v.is_finite())
    }

    /// `step=… epoch=… lr=… key=value …` with shortest round-trip floats.
    pub fn to_line(&self) -> String {
        let mut s = format!("step={} epoch={} lr={}", self.step, self.epoch, self.lr);
        for (k, v) in &self.entries {
            let _ = write!(s, " {k}={v}");
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Validation(format!("loss log line: {what}: {line:?}"));
        let mut report = LossReport::default();
        let mut seen = [false; 3];
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad("missing '='"))?;
            match k {
                "step" => {
                    report.step = v.parse().map_err(|_| bad("step"))?;
                    seen[0] = true;
                }
                "epoch" => {
                    report.epoch = v.parse().map_err(|_| bad("epoch"))?;
                    seen[1] = true;
                }
                "lr" => {
                    report.lr = v.parse().map_err(|_| bad("lr"))?;
                    seen[2] = true;
                }
                _ => {
                    let v: f64 = v.parse().map_err(|_| bad(k))?;
                    report.push(k, v);
                }
            }
        }
        if seen.contains(&false) {
            return Err(bad("missing step, epoch or lr"));
        }
        Ok(report)
    }
}
