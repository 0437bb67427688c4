//! CMC/mAP against a per-query brute-force oracle, and re-ranking at λ = 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsgan_core::eval::{cmc_map, distance_matrix, rerank, ExclusionTable, RerankParams, RetrievalLabels};
use tsgan_core::Tensor;

const INSTANCES: usize = 50;

struct Instance {
    dist: Tensor,
    q_ids: Vec<usize>,
    q_cams: Vec<u32>,
    g_ids: Vec<usize>,
    g_cams: Vec<u32>,
}

fn instance(rng: &mut impl Rng) -> Instance {
    let (nq, ng) = (rng.random_range(1..=50), rng.random_range(1..=200));
    let ids = rng.random_range(1..12);
    // coarse grid so ties occur
    let dist = Tensor::from_fn(&[nq, ng], |_| (rng.random_range(0..40) as f64) * 0.25);
    Instance {
        dist,
        q_ids: (0..nq).map(|_| rng.random_range(0..ids)).collect(),
        q_cams: (0..nq).map(|_| [3, 6][rng.random_range(0..2)]).collect(),
        g_ids: (0..ng).map(|_| rng.random_range(0..ids)).collect(),
        g_cams: (0..ng).map(|_| [1, 2, 4, 5][rng.random_range(0..4)]).collect(),
    }
}

/// Zero-based rank of every correct, non-excluded gallery item of `q`,
/// counted directly: items strictly closer, or equally close with a lower
/// index, that survive exclusion.
fn match_ranks(inst: &Instance, q: usize, excl: &ExclusionTable) -> Vec<usize> {
    let ng = inst.g_ids.len();
    let d = |g: usize| inst.dist.data()[q * ng + g];
    let kept = |g: usize| !excl.excludes(inst.q_cams[q], inst.g_cams[g]);
    let mut ranks: Vec<usize> = (0..ng)
        .filter(|&g| kept(g) && inst.g_ids[g] == inst.q_ids[q])
        .map(|g| (0..ng).filter(|&h| kept(h) && (d(h) < d(g) || (d(h) == d(g) && h < g))).count())
        .collect();
    ranks.sort_unstable();
    ranks
}

pub fn cmc_and_map_match_the_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for n in 0..INSTANCES {
        let inst = instance(&mut rng);
        let excl = if n % 2 == 0 { ExclusionTable::default() } else { ExclusionTable::none() };
        let ng = inst.g_ids.len();
        let labels = RetrievalLabels {
            query_ids: &inst.q_ids,
            query_cams: &inst.q_cams,
            gallery_ids: &inst.g_ids,
            gallery_cams: &inst.g_cams,
        };
        let got = cmc_map(&inst.dist, labels, &excl, ng).unwrap();

        let per_query: Vec<Vec<usize>> = (0..inst.q_ids.len()).map(|q| match_ranks(&inst, q, &excl)).collect();
        let valid: Vec<&Vec<usize>> = per_query.iter().filter(|r| !r.is_empty()).collect();
        assert_eq!(got.valid_queries, valid.len(), "instance {n}");
        assert_eq!(got.dropped_queries, per_query.len() - valid.len(), "instance {n}");
        for k in 1..=ng {
            let hits = valid.iter().filter(|r| r[0] < k).count();
            let expected = if valid.is_empty() { 0.0 } else { hits as f64 / valid.len() as f64 };
            assert_eq!(got.rank(k), expected, "instance {n} rank {k}");
        }
        let ap = |r: &Vec<usize>| r.iter().enumerate().map(|(i, &rank)| (i + 1) as f64 / (rank + 1) as f64).sum::<f64>() / r.len() as f64;
        let expected_map = if valid.is_empty() { 0.0 } else { valid.iter().map(|r| ap(r)).sum::<f64>() / valid.len() as f64 };
        assert_eq!(got.map, expected_map, "instance {n} mAP");
        assert!(got.cmc.windows(2).all(|w| w[0] <= w[1]), "instance {n}: CMC not monotone");
        assert!(got.cmc.iter().all(|&c| (0.0..=1.0).contains(&c)));
    }
}

pub fn rerank_with_full_original_weight_is_the_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for n in 0..INSTANCES {
        let (nq, ng, d) = (rng.random_range(1..=50), rng.random_range(8..=200), rng.random_range(2..8));
        let q = Tensor::from_fn(&[nq, d], |_| rng.random_range(-1.0..1.0));
        let g = Tensor::from_fn(&[ng, d], |_| rng.random_range(-1.0..1.0));
        let d_qg = distance_matrix(&q, &g).unwrap();
        let d_qq = distance_matrix(&q, &q).unwrap();
        let d_gg = distance_matrix(&g, &g).unwrap();
        let k1 = rng.random_range(2..ng.min(21));
        let k2 = rng.random_range(1..k1);
        let out = rerank(&d_qg, &d_qq, &d_gg, RerankParams { k1, k2, lambda: 1.0 }).unwrap();
        assert_eq!(out, d_qg, "instance {n}");
    }
}
