//! Every loss against a direct-formula oracle on 100 random fixtures each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsgan_core::config::TsLosses;
use tsgan_core::losses::{self, TsInputs, LOG_EPS};
use tsgan_core::{Graph, Tensor};

const FIXTURES: usize = 100;
const REL_TOL: f64 = 1e-8;

fn close(actual: f64, expected: f64, what: &str) {
    let rel = (actual - expected).abs() / expected.abs().max(1e-300);
    assert!(
        rel <= REL_TOL || (actual - expected).abs() <= 1e-300,
        "{what}: {actual} vs {expected} (relative {rel:e})"
    );
}

fn tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn probs(rng: &mut impl Rng, n: usize) -> Tensor {
    // a few exact 0/1 values exercise the log clamp
    let data = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        })
        .collect();
    Tensor::new(&[n, 1], data).unwrap()
}

fn clamped_ln(x: f64) -> f64 {
    if x < LOG_EPS {
        LOG_EPS.ln()
    } else {
        x.ln()
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Labels of a P×K batch in random order, so every anchor has a positive
/// and a negative.
fn pk_labels(rng: &mut impl Rng, p: usize, k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..k).flat_map(|id| std::iter::repeat_n(id, p)).collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    labels
}

pub fn id_loss_matches_smoothed_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for f in 0..FIXTURES {
        let (n, classes) = (rng.random_range(1..9), rng.random_range(2..12));
        let eps = rng.random_range(0.0..0.3);
        let logits = tensor(&mut rng, &[n, classes], -6.0, 6.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let mut g = Graph::new();
        let x = g.constant(logits.clone());
        let got = losses::id_loss(&mut g, x, &labels, eps).unwrap();
        let got = g.value(got).item();

        let z = logits.data();
        let expected = mean((0..n).map(|i| {
            let row = &z[i * classes..(i + 1) * classes];
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + row.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
            (0..classes)
                .map(|c| {
                    let q = if c == labels[i] {
                        1.0 - (classes as f64 - 1.0) / classes as f64 * eps
                    } else {
                        eps / classes as f64
                    };
                    -q * (row[c] - lse)
                })
                .sum::<f64>()
        }));
        close(got, expected, &format!("id_loss fixture {f}"));
    }
}

pub fn triplet_loss_matches_exhaustive_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for f in 0..FIXTURES {
        let (p, k, d) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(1..7));
        let margin = rng.random_range(0.0..1.0);
        let labels = pk_labels(&mut rng, p, k);
        let n = labels.len();
        let emb = tensor(&mut rng, &[n, d], -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.constant(emb.clone());
        let got = losses::triplet_loss(&mut g, x, &labels, margin).unwrap();
        let got = g.value(got).item();

        let e = emb.data();
        let dist = |a: usize, b: usize| (0..d).map(|j| (e[a * d + j] - e[b * d + j]).powi(2)).sum::<f64>().sqrt();
        // batch-hard per anchor: the worst hinge over every valid (p, n)
        let expected = mean((0..n).map(|a| {
            let mut worst: f64 = 0.0;
            for pos in (0..n).filter(|&j| j != a && labels[j] == labels[a]) {
                for neg in (0..n).filter(|&j| labels[j] != labels[a]) {
                    worst = worst.max(margin + dist(a, pos) - dist(a, neg));
                }
            }
            worst
        }));
        if expected == 0.0 {
            assert_eq!(got, 0.0, "triplet fixture {f}");
        } else {
            close(got, expected, &format!("triplet fixture {f}"));
        }
    }
}

pub fn cycle_loss_matches_mean_absolute_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for f in 0..FIXTURES {
        let (n, h, w) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
        let rgb = tensor(&mut rng, &[n, 3, h, w], -1.0, 1.0);
        let rec_rgb = tensor(&mut rng, &[n, 3, h, w], -1.0, 1.0);
        let ir = tensor(&mut rng, &[n, 1, h, w], -1.0, 1.0);
        let rec_ir = tensor(&mut rng, &[n, 1, h, w], -1.0, 1.0);
        let mut g = Graph::new();
        let vars = [&rec_rgb, &rgb, &rec_ir, &ir].map(|t| g.constant(t.clone()));
        let got = losses::cycle_loss(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();
        let mae = |a: &Tensor, b: &Tensor| mean(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()));
        close(g.value(got).item(), mae(&rec_rgb, &rgb) + mae(&rec_ir, &ir), &format!("cycle fixture {f}"));
    }
}

pub fn ts_losses_match_mean_squared_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for f in 0..FIXTURES {
        let shape = [rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..4)];
        let maps: Vec<Tensor> = (0..5).map(|_| tensor(&mut rng, &shape, -2.0, 2.0)).collect();
        let (ac, as_) = (rng.random_range(0.0..0.1), rng.random_range(0.0..0.1));
        let mut g = Graph::new();
        let v: Vec<_> = maps.iter().map(|t| g.constant(t.clone())).collect();
        let terms = losses::ts_losses(
            &mut g,
            &TsInputs {
                teacher_real_ir: v[0],
                teacher_fake_ir: v[1],
                student_real_ir: v[2],
                student_fake_ir: v[3],
                student_rgb: v[4],
            },
        )
        .unwrap();
        let mse = |a: &Tensor, b: &Tensor| mean(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)));
        let (real, fake, cd) = (mse(&maps[0], &maps[2]), mse(&maps[1], &maps[3]), mse(&maps[1], &maps[4]));
        close(g.value(terms.real_ir).item(), real, &format!("ts real fixture {f}"));
        close(g.value(terms.fake_ir).item(), fake, &format!("ts fake fixture {f}"));
        close(g.value(terms.cross_domain).item(), cd, &format!("ts cd fixture {f}"));
        let all = losses::ts_total(&mut g, &terms, ac, as_, TsLosses::All).unwrap().unwrap();
        close(g.value(all).item(), ac * cd + as_ * (real + fake), &format!("ts total fixture {f}"));
        let single = losses::ts_total(&mut g, &terms, ac, as_, TsLosses::CrossDomain).unwrap().unwrap();
        close(g.value(single).item(), ac * cd, &format!("ts single fixture {f}"));
        assert!(losses::ts_total(&mut g, &terms, ac, as_, TsLosses::None).unwrap().is_none());
    }
}

pub fn adversarial_losses_match_clamped_log_likelihoods() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for f in 0..FIXTURES {
        let n = rng.random_range(1..10);
        let sets = rng.random_range(1..4);
        let real = probs(&mut rng, n);
        let negs: Vec<Tensor> = (0..sets).map(|_| probs(&mut rng, n)).collect();
        let mut g = Graph::new();
        let r = g.constant(real.clone());
        let nv: Vec<_> = negs.iter().map(|t| g.constant(t.clone())).collect();

        let d = losses::disc_loss(&mut g, r, &nv).unwrap();
        let expected_d = -mean(real.data().iter().map(|&p| clamped_ln(p)))
            - negs.iter().map(|t| mean(t.data().iter().map(|&p| clamped_ln(1.0 - p)))).sum::<f64>() / sets as f64;
        close(g.value(d).item(), expected_d, &format!("disc fixture {f}"));

        let adv = losses::gen_adv_loss(&mut g, nv[0]).unwrap();
        close(g.value(adv).item(), -mean(negs[0].data().iter().map(|&p| clamped_ln(p))), &format!("gen adv fixture {f}"));

        let gan = losses::reid_gan_loss(&mut g, &nv).unwrap();
        let expected_gan =
            -negs.iter().map(|t| mean(t.data().iter().map(|&p| clamped_ln(p)))).sum::<f64>() / sets as f64;
        close(g.value(gan).item(), expected_gan, &format!("reid gan fixture {f}"));
    }
}

pub fn weighted_totals_match_their_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for f in 0..FIXTURES {
        let vals: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..5.0)).collect();
        let (l1, l2, l3, omega) = (rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), rng.random_range(0.0..1.0), rng.random_range(0.0..20.0));
        let mut g = Graph::new();
        let v: Vec<_> = vals.iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
        let reid = losses::reid_total(&mut g, v[0], v[1], Some(v[2]), (l1, l2, l3)).unwrap();
        close(g.value(reid).item(), l1 * vals[0] + l2 * vals[1] + l3 * vals[2], &format!("reid total fixture {f}"));
        let reid2 = losses::reid_total(&mut g, v[0], v[1], None, (l1, l2, l3)).unwrap();
        close(g.value(reid2).item(), l1 * vals[0] + l2 * vals[1], &format!("reid total (no gan) fixture {f}"));
        let gen = losses::gen_total(&mut g, v[3], v[4], omega).unwrap();
        close(g.value(gen).item(), vals[3] + omega * vals[4], &format!("gen total fixture {f}"));
    }
}
