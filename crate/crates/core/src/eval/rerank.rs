//! k-reciprocal re-ranking of a query × gallery distance matrix.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::metrics::ranking;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    /// Weight of the original distance in the blend.
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn validate(&self) -> Result<()> {
        if self.k2 == 0 || self.k1 <= self.k2 {
            return Err(Error::Config(format!("rerank needs k1 > k2 >= 1, got k1={} k2={}", self.k1, self.k2)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("rerank lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Indices among the first `k + 1` neighbours of `i` that also hold `i`
/// among their own first `k + 1` neighbours.
fn reciprocal(order: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    order[i][..(k + 1).min(order[i].len())]
        .iter()
        .copied()
        .filter(|&c| order[c][..(k + 1).min(order[c].len())].contains(&i))
        .collect()
}

/// Sparse row: sorted `(column, weight)`.
type Sparse = Vec<(usize, f64)>;

/// `λ·D_qg + (1-λ)·J`, where `J` is the Jaccard distance between k-reciprocal
/// neighbourhood encodings computed over queries and gallery together.
///
/// Encodings use squared distances scaled by each row's maximum. Each
/// k1-reciprocal set is expanded by the ½·k1-reciprocal sets of its members
/// that overlap it by more than two thirds, weighted by `exp(-d)`, and
/// averaged over the k2 nearest neighbours. The blend uses `D_qg` as given,
/// so `λ = 1` returns it unchanged.
pub fn rerank(d_qg: &Tensor, d_qq: &Tensor, d_gg: &Tensor, params: RerankParams) -> Result<Tensor> {
    params.validate()?;
    let (nq, ng) = d_qg.dims2()?;
    if d_qq.shape() != [nq, nq] || d_gg.shape() != [ng, ng] {
        return Err(Error::shape(
            "rerank",
            format!("qg {:?}, qq {:?}, gg {:?}", d_qg.shape(), d_qq.shape(), d_gg.shape()),
        ));
    }
    if params.k1 >= ng {
        return Err(Error::Config(format!("rerank k1 = {} must be below the gallery size {ng}", params.k1)));
    }
    if !(d_qg.all_finite() && d_qq.all_finite() && d_gg.all_finite()) {
        return Err(Error::NonFinite("rerank distances"));
    }
    let n = nq + ng;
    let raw = |i: usize, j: usize| -> f64 {
        match (i < nq, j < nq) {
            (true, true) => d_qq.data()[i * nq + j],
            (true, false) => d_qg.data()[i * ng + (j - nq)],
            (false, true) => d_qg.data()[j * ng + (i - nq)],
            (false, false) => d_gg.data()[(i - nq) * ng + (j - nq)],
        }
    };
    let mut dist = alloc::vec![0.0; n * n];
    for i in 0..n {
        let row = &mut dist[i * n..(i + 1) * n];
        for (j, v) in row.iter_mut().enumerate() {
            let d = raw(i, j);
            *v = d * d;
        }
        let max = row.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            row.iter_mut().for_each(|v| *v /= max);
        }
    }
    let order: Vec<Vec<usize>> = (0..n).map(|i| ranking(&dist[i * n..(i + 1) * n])).collect();
    let k1 = params.k1;
    let half = (k1 as f64 / 2.0).round() as usize;

    let mut encodings: Vec<Sparse> = Vec::with_capacity(n);
    for i in 0..n {
        let base = reciprocal(&order, i, k1);
        let mut expanded = base.clone();
        for &c in &base {
            let cand = reciprocal(&order, c, half);
            let overlap = cand.iter().filter(|x| base.contains(x)).count();
            if overlap as f64 > 2.0 / 3.0 * cand.len() as f64 {
                expanded.extend(cand);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let weights: Vec<f64> = expanded.iter().map(|&j| Float::exp(-dist[i * n + j])).collect();
        let total: f64 = weights.iter().sum();
        encodings.push(expanded.into_iter().zip(weights).map(|(j, w)| (j, w / total)).collect());
    }

    if params.k2 > 1 {
        let mut expanded = Vec::with_capacity(n);
        for i in 0..n {
            let mut dense = alloc::vec![0.0; n];
            let nbrs = &order[i][..params.k2.min(n)];
            for &j in nbrs {
                for &(c, w) in &encodings[j] {
                    dense[c] += w;
                }
            }
            let m = nbrs.len() as f64;
            expanded.push(
                dense
                    .into_iter()
                    .enumerate()
                    .filter(|&(_, w)| w != 0.0)
                    .map(|(c, w)| (c, w / m))
                    .collect::<Sparse>(),
            );
        }
        encodings = expanded;
    }

    // inverted index: for every column, the rows with a nonzero entry
    let mut inverted: Vec<Sparse> = alloc::vec![Vec::new(); n];
    for (row, enc) in encodings.iter().enumerate() {
        for &(c, w) in enc {
            inverted[c].push((row, w));
        }
    }

    let lambda = params.lambda;
    let mut out = alloc::vec![0.0; nq * ng];
    for q in 0..nq {
        let mut shared = alloc::vec![0.0; n];
        for &(c, wq) in &encodings[q] {
            for &(row, w) in &inverted[c] {
                shared[row] += wq.min(w);
            }
        }
        for g in 0..ng {
            let s = shared[nq + g];
            let jaccard = 1.0 - s / (2.0 - s);
            out[q * ng + g] = lambda * d_qg.data()[q * ng + g] + (1.0 - lambda) * jaccard;
        }
    }
    Tensor::new(&[nq, ng], out)
}
