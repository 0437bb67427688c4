//! Student backbone, frozen IR teacher, modality generators and
//! discriminators.

mod backbone;
mod discriminator;
mod generator;

pub use backbone::{encoder_input, StudentBackbone, StudentOutputs, ENCODER_CHANNELS};
pub use discriminator::Discriminator;
pub use generator::{Generator, GAN_INIT_STD};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{NormMode, ParamSet};

/// Frozen IR-only former encoder that guides the student.
///
/// It starts uninitialized and becomes usable once built from an IR
/// baseline. It always runs with running statistics and never receives
/// gradients.
#[derive(Debug, Clone, Default)]
pub struct TeacherEncoder {
    net: Option<StudentBackbone>,
}

impl TeacherEncoder {
    pub fn uninitialized() -> Self {
        Self { net: None }
    }

    /// Freeze a copy of an IR-trained baseline.
    pub fn from_baseline(baseline: &StudentBackbone) -> Result<Self> {
        let mut net = baseline.clone();
        net.params_mut().copy_matching(baseline.params())?;
        Ok(Self { net: Some(net) })
    }

    pub fn is_ready(&self) -> bool {
        self.net.is_some()
    }

    pub fn params(&self) -> Result<&ParamSet> {
        self.baseline().map(StudentBackbone::params)
    }

    /// The frozen baseline, classifier included.
    pub fn baseline(&self) -> Result<&StudentBackbone> {
        self.net.as_ref().ok_or(Error::TeacherNotReady)
    }

    /// Feature map of a 1-channel IR batch, as a graph constant.
    pub fn features(&self, g: &mut Graph, ir: Var) -> Result<Var> {
        let net = self.net.as_ref().ok_or(Error::TeacherNotReady)?;
        let (_, c, _, _) = g.value(ir).dims4()?;
        if c != 1 {
            return Err(Error::ModalityMismatch {
                expected: "IR",
                actual: "3-channel",
            });
        }
        let x = encoder_input(g, ir)?;
        let mut b = net.params().bind(g, false, NormMode::Eval);
        let f = net.former(g, &mut b, x)?;
        Ok(g.detach(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DiscriminatorKind, NetworkConfig};
    use crate::image::Modality;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            stem_width: 4,
            stage_widths: [4, 8, 8, 16],
            generator_widths: [4, 4, 8],
            disc_image_widths: [4, 4, 8],
            disc_feature_width: 4,
            disc_head_width: 4,
            ..NetworkConfig::tiny()
        }
    }

    #[test]
    fn backbone_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = StudentBackbone::new(&tiny(), 5, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[2, 3, 16, 8], &mut rng));
        let mut b = net.params().bind(&mut g, true, NormMode::Train);
        let out = net.forward(&mut g, &mut b, x).unwrap();
        assert_eq!(g.value(out.feature_map).shape(), &[2, 8, 2, 1]);
        assert_eq!(g.value(out.embedding).shape(), &[2, 16]);
        assert_eq!(g.value(out.logits).shape(), &[2, 5]);
        assert!(!b.into_updates().is_empty());
    }

    #[test]
    fn eval_mode_is_independent_of_batch_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = StudentBackbone::new(&tiny(), 3, &mut rng);
        let x = rand_tensor(&[4, 3, 16, 8], &mut rng);
        let embed = |t: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let mut b = net.params().bind(&mut g, false, NormMode::Eval);
            let out = net.forward(&mut g, &mut b, v).unwrap();
            assert!(b.into_updates().is_empty());
            g.value(out.embedding).clone()
        };
        let whole = embed(x.clone());
        let head = embed(x.slice_outer(0, 1).unwrap());
        let tail = embed(x.slice_outer(1, 3).unwrap());
        let joined = Tensor::concat_outer(&[&head, &tail]).unwrap();
        assert!(whole.max_abs_diff(&joined) < 1e-12);
    }

    #[test]
    fn generator_starts_as_fixed_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 3, 8, 8], &mut rng);
        let gi = Generator::new(&tiny(), Modality::Rgb, Modality::Ir, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let b = gi.params().bind(&mut g, true, NormMode::Train);
        let y = gi.forward(&mut g, &b, xv).unwrap();
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[2, 1, 8, 8]);
        for n in 0..2 {
            for p in 0..64 {
                let mean = (0..3).map(|c| x.data()[n * 192 + c * 64 + p]).sum::<f64>() / 3.0;
                assert!((yv.data()[n * 64 + p] - mean.tanh()).abs() < 1e-12);
            }
        }

        let gr = Generator::new(&tiny(), Modality::Ir, Modality::Rgb, &mut rng);
        let mut g = Graph::new();
        let ir = g.constant(Tensor::full(&[1, 1, 4, 4], 0.5));
        let b = gr.params().bind(&mut g, true, NormMode::Train);
        let back = gr.forward(&mut g, &b, ir).unwrap();
        assert_eq!(g.value(back).shape(), &[1, 3, 4, 4]);
        assert!(g.value(back).data().iter().all(|&v| (v - 0.5f64.tanh()).abs() < 1e-12));
        let rgb = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(matches!(gr.forward(&mut g, &b, rgb), Err(Error::ModalityMismatch { .. })));
    }

    #[test]
    fn discriminators_start_at_one_half_and_check_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny();
        let joint = Discriminator::joint(&cfg, &mut rng);
        let ordinary = Discriminator::ordinary(&cfg, 1, &mut rng);
        assert_eq!(joint.kind(), DiscriminatorKind::Joint);
        let mut g = Graph::new();
        let img = g.constant(rand_tensor(&[2, 1, 16, 8], &mut rng));
        let fmap = g.constant(rand_tensor(&[2, 8, 2, 1], &mut rng));
        let bj = joint.params().bind(&mut g, true, NormMode::Train);
        let p = joint.forward(&mut g, &bj, img, Some(fmap)).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 1]);
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
        assert!(joint.forward(&mut g, &bj, img, None).is_err());
        let bo = ordinary.params().bind(&mut g, true, NormMode::Train);
        let q = ordinary.forward(&mut g, &bo, img, None).unwrap();
        assert!(g.value(q).data().iter().all(|&v| v == 0.5));
        assert!(ordinary.forward(&mut g, &bo, img, Some(fmap)).is_err());
        let small = g.constant(rand_tensor(&[2, 8, 1, 1], &mut rng));
        assert!(joint.forward(&mut g, &bj, img, Some(small)).is_err());
    }

    #[test]
    fn teacher_lifecycle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let ir = g.constant(rand_tensor(&[2, 1, 16, 8], &mut rng));
        let rgb = g.constant(rand_tensor(&[2, 3, 16, 8], &mut rng));
        let t = TeacherEncoder::uninitialized();
        assert!(matches!(t.features(&mut g, ir), Err(Error::TeacherNotReady)));
        let base = StudentBackbone::new(&tiny(), 3, &mut rng);
        let t = TeacherEncoder::from_baseline(&base).unwrap();
        assert_eq!(t.params().unwrap(), base.params());
        let f = t.features(&mut g, ir).unwrap();
        assert!(!g.requires_grad(f));
        assert_eq!(g.value(f).shape(), &[2, 8, 2, 1]);
        assert!(matches!(t.features(&mut g, rgb), Err(Error::ModalityMismatch { .. })));
    }
}
