//! Central finite-difference checks of every loss and every network on the
//! tiny preset, at 20 random coordinates per checked tensor group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsgan_core::config::{NetworkConfig, TsLosses};
use tsgan_core::image::Modality;
use tsgan_core::losses::{self, TsInputs};
use tsgan_core::networks::{encoder_input, Discriminator, Generator, StudentBackbone};
use tsgan_core::nn::{Binding, NormMode, ParamSet};
use tsgan_core::{Graph, Tensor, Var};

const STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely against it.
const FLOOR: f64 = 1e-6;
const COORDS: usize = 20;
/// Coordinates whose finite differences at `STEP` and `STEP / 2` disagree by
/// more than this straddle a ReLU kink and are redrawn.
const KINK_TOL: f64 = 1e-4;
/// Redraws allowed per checked tensor group.
const MAX_REDRAWS: usize = 20;

type Forward<'a> = dyn Fn(&mut Graph, &mut Binding<'_>, &[Var]) -> Var + 'a;

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Scalar objective: the forward output against a fixed random target.
fn objective(g: &mut Graph, out: Var, target: &Tensor) -> Var {
    if g.value(out).len() == 1 {
        return out;
    }
    let t = g.constant(target.clone());
    g.mse(out, t).unwrap()
}

/// Checks `COORDS` parameter coordinates (tensor drawn uniformly, then an
/// element) and `COORDS` coordinates of every input.
fn check(name: &str, params: &ParamSet, inputs: &[Tensor], mode: NormMode, forward: &Forward<'_>, rng: &mut ChaCha8Rng) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let mut b = params.bind(&mut g, true, mode);
    let out = forward(&mut g, &mut b, &vars);
    let target = random(rng, g.value(out).shape(), -1.0, 1.0);
    let loss = objective(&mut g, out, &target);
    let grads = g.backward(loss).unwrap();
    let param_grads = b.grads(&grads);

    let eval = |ps: &ParamSet, xs: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let mut b = ps.bind(&mut g, false, mode);
        let out = forward(&mut g, &mut b, &vs);
        let loss = objective(&mut g, out, &target);
        g.value(loss).item()
    };
    // Central differences at STEP and STEP / 2; None at a kink.
    let numeric = |f: &dyn Fn(f64) -> f64| {
        let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
        let (full, half) = (d(STEP), d(STEP / 2.0));
        (rel_err(full, half) <= KINK_TOL).then_some(full)
    };
    let mut worst: f64 = 0.0;
    let mut redraws = 0;
    let mut verify = |what: String, analytic: f64, numeric: Option<f64>| -> bool {
        let Some(numeric) = numeric else {
            redraws += 1;
            assert!(redraws <= MAX_REDRAWS, "{name}: too many coordinates on kinks");
            return false;
        };
        let e = rel_err(analytic, numeric);
        worst = worst.max(e);
        assert!(e <= REL_TOL, "{name}: {what} analytic {analytic:e} numeric {numeric:e} (relative {e:e})");
        true
    };
    let mut checked = 0;
    while !params.is_empty() && checked < COORDS {
        let t = rng.random_range(0..params.len());
        let i = rng.random_range(0..params.values()[t].len());
        let f = |h: f64| {
            let mut ps = params.clone();
            ps.values_mut()[t].data_mut()[i] += h;
            eval(&ps, inputs)
        };
        if verify(format!("parameter {} [{i}]", params.names()[t]), param_grads[t].data()[i], numeric(&f)) {
            checked += 1;
        }
    }
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut checked = 0;
        while checked < COORDS {
            let i = rng.random_range(0..x.len());
            let f = |h: f64| {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] += h;
                eval(params, &xs)
            };
            if verify(format!("input {k} [{i}]"), analytic.data()[i], numeric(&f)) {
                checked += 1;
            }
        }
    }
    println!("{name}: worst relative error {worst:.2e}, {redraws} kink redraws");
}

/// Shift every parameter off its initial value so zero-initialised layers
/// pass gradients.
fn jitter(ps: &mut ParamSet, rng: &mut impl Rng) {
    for t in ps.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

fn tiny() -> NetworkConfig {
    NetworkConfig::tiny()
}

pub fn student_backbone_in_both_norm_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let net = StudentBackbone::new(&tiny(), 5, &mut rng);
    let mut ps = net.params().clone();
    jitter(&mut ps, &mut rng);
    let x = random(&mut rng, &[4, 3, 16, 8], -1.0, 1.0);
    let forward = |g: &mut Graph, b: &mut Binding<'_>, v: &[Var]| {
        let out = net.forward(g, b, v[0]).unwrap();
        let parts: Vec<(Var, f64)> = [out.feature_map, out.embedding, out.logits]
            .into_iter()
            .map(|o| {
                let t = fixed_target(g, o);
                (g.mse(o, t).unwrap(), 1.0)
            })
            .collect();
        g.weighted_sum(&parts).unwrap()
    };
    check("student (train)", &ps, &[x.clone()], NormMode::Train, &forward, &mut rng);
    check("student (eval, teacher path)", &ps, &[x], NormMode::Eval, &forward, &mut rng);
}

/// A fixed constant shaped like `v`.
fn fixed_target(g: &mut Graph, v: Var) -> Var {
    let shape = g.value(v).shape().to_vec();
    g.constant(Tensor::from_fn(&shape, |i| ((i * 7 % 5) as f64 - 2.0) * 0.3))
}

pub fn student_former_latter_and_classifier_pieces() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let net = StudentBackbone::new(&tiny(), 4, &mut rng);
    let mut ps = net.params().clone();
    jitter(&mut ps, &mut rng);
    let ir = random(&mut rng, &[4, 1, 16, 8], -1.0, 1.0);
    let former = |g: &mut Graph, b: &mut Binding<'_>, v: &[Var]| {
        let x = encoder_input(g, v[0]).unwrap();
        net.former(g, b, x).unwrap()
    };
    check("student former on IR", &ps, &[ir.clone()], NormMode::Train, &former, &mut rng);
    let fmap = random(&mut rng, &[4, 64, 2, 1], -1.0, 1.0);
    let latter = |g: &mut Graph, b: &mut Binding<'_>, v: &[Var]| {
        let e = net.latter(g, b, v[0]).unwrap();
        net.classify(g, b, e).unwrap()
    };
    check("student latter + classifier", &ps, &[fmap], NormMode::Train, &latter, &mut rng);
}

pub fn generators_in_both_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (src, dst) in [(Modality::Rgb, Modality::Ir), (Modality::Ir, Modality::Rgb)] {
        let net = Generator::new(&tiny(), src, dst, &mut rng);
        let mut ps = net.params().clone();
        jitter(&mut ps, &mut rng);
        let x = random(&mut rng, &[2, src.channels(), 8, 4], -1.0, 1.0);
        let forward = |g: &mut Graph, b: &mut Binding<'_>, v: &[Var]| net.forward(g, b, v[0]).unwrap();
        check(&format!("generator {src}->{dst}"), &ps, &[x], NormMode::Train, &forward, &mut rng);
    }
}

pub fn joint_and_ordinary_discriminators() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let cfg = tiny();
    let joint = Discriminator::joint(&cfg, &mut rng);
    let mut ps = joint.params().clone();
    jitter(&mut ps, &mut rng);
    let img = random(&mut rng, &[3, 1, 16, 8], -1.0, 1.0);
    let fmap = random(&mut rng, &[3, cfg.feature_channels(), 2, 1], -1.0, 1.0);
    let forward = |g: &mut Graph, b: &mut Binding<'_>, v: &[Var]| joint.forward(g, b, v[0], Some(v[1])).unwrap();
    check("joint discriminator", &ps, &[img, fmap], NormMode::Train, &forward, &mut rng);
    for channels in [1, 3] {
        let d = Discriminator::ordinary(&cfg, channels, &mut rng);
        let mut ps = d.params().clone();
        jitter(&mut ps, &mut rng);
        let img = random(&mut rng, &[3, channels, 16, 8], -1.0, 1.0);
        let forward = |g: &mut Graph, b: &mut Binding<'_>, v: &[Var]| d.forward(g, b, v[0], None).unwrap();
        check(&format!("ordinary discriminator ({channels} channels)"), &ps, &[img], NormMode::Train, &forward, &mut rng);
    }
}

pub fn every_loss_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let none = ParamSet::new();
    let mode = NormMode::Train;

    let labels = [0, 1, 2, 0, 1, 2, 3, 3];
    let logits = random(&mut rng, &[8, 4], -2.0, 2.0);
    let f = |g: &mut Graph, _: &mut Binding<'_>, v: &[Var]| losses::id_loss(g, v[0], &labels, 0.1).unwrap();
    check("id_loss", &none, &[logits], mode, &f, &mut rng);

    let emb = random(&mut rng, &[8, 6], -1.0, 1.0);
    let f = |g: &mut Graph, _: &mut Binding<'_>, v: &[Var]| losses::triplet_loss(g, v[0], &labels, 0.3).unwrap();
    check("triplet_loss", &none, &[emb], mode, &f, &mut rng);

    let shapes = [[2, 3, 4, 4], [2, 3, 4, 4], [2, 1, 4, 4], [2, 1, 4, 4]];
    let imgs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, -1.0, 1.0)).collect();
    let f = |g: &mut Graph, _: &mut Binding<'_>, v: &[Var]| losses::cycle_loss(g, v[0], v[1], v[2], v[3]).unwrap();
    check("cycle_loss", &none, &imgs, mode, &f, &mut rng);

    let maps: Vec<Tensor> = (0..5).map(|_| random(&mut rng, &[2, 4, 2, 2], -1.0, 1.0)).collect();
    for which in [TsLosses::CrossDomain, TsLosses::All] {
        let f = |g: &mut Graph, _: &mut Binding<'_>, v: &[Var]| {
            let terms = losses::ts_losses(
                g,
                &TsInputs {
                    teacher_real_ir: v[0],
                    teacher_fake_ir: v[1],
                    student_real_ir: v[2],
                    student_fake_ir: v[3],
                    student_rgb: v[4],
                },
            )
            .unwrap();
            losses::ts_total(g, &terms, 0.006, 0.003, which).unwrap().unwrap()
        };
        check(&format!("ts_losses ({which:?})"), &none, &maps, mode, &f, &mut rng);
    }

    let p: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[6, 1], 0.05, 0.95)).collect();
    let f = |g: &mut Graph, _: &mut Binding<'_>, v: &[Var]| losses::disc_loss(g, v[0], &v[1..]).unwrap();
    check("disc_loss", &none, &p, mode, &f, &mut rng);
    let f = |g: &mut Graph, _: &mut Binding<'_>, v: &[Var]| losses::gen_adv_loss(g, v[0]).unwrap();
    check("gen_adv_loss", &none, &p[..1], mode, &f, &mut rng);
    let f = |g: &mut Graph, _: &mut Binding<'_>, v: &[Var]| losses::reid_gan_loss(g, &v[1..]).unwrap();
    check("reid_gan_loss", &none, &p, mode, &f, &mut rng);

    let scalars: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[1], 0.0, 2.0)).collect();
    let f = |g: &mut Graph, _: &mut Binding<'_>, v: &[Var]| losses::reid_total(g, v[0], v[1], Some(v[2]), (3.0, 1.0, 0.1)).unwrap();
    check("reid_total", &none, &scalars, mode, &f, &mut rng);
    let f = |g: &mut Graph, _: &mut Binding<'_>, v: &[Var]| losses::gen_total(g, v[0], v[1], 10.0).unwrap();
    check("gen_total", &none, &scalars[..2], mode, &f, &mut rng);
}
