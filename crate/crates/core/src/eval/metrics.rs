//! CMC and mAP over a query × gallery distance matrix.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gallery cameras ignored for probes from a given camera.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionTable {
    pub rules: BTreeMap<u32, Vec<u32>>,
}

impl Default for ExclusionTable {
    /// Cameras 2 and 3 share a room, so camera-3 probes skip camera 2.
    fn default() -> Self {
        let mut rules = BTreeMap::new();
        rules.insert(3, alloc::vec![2]);
        Self { rules }
    }
}

impl ExclusionTable {
    pub fn none() -> Self {
        Self { rules: BTreeMap::new() }
    }

    pub fn excludes(&self, probe_camera: u32, gallery_camera: u32) -> bool {
        self.rules.get(&probe_camera).is_some_and(|c| c.contains(&gallery_camera))
    }
}

/// Labels of the rows and columns of a distance matrix.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalLabels<'a> {
    pub query_ids: &'a [usize],
    pub query_cams: &'a [u32],
    pub gallery_ids: &'a [usize],
    pub gallery_cams: &'a [u32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmcMap {
    /// `cmc[k]` is the fraction of valid queries whose first match ranks
    /// within the top `k + 1`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub valid_queries: usize,
    /// Queries with no correct match left after exclusion.
    pub dropped_queries: usize,
}

impl CmcMap {
    /// CMC at 1-based rank `k`, saturating beyond the computed depth.
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k.saturating_sub(1)).or(self.cmc.last()).copied().unwrap_or(0.0)
    }
}

/// Gallery order for one query: ascending distance, ties by gallery index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

pub fn cmc_map(dist: &Tensor, labels: RetrievalLabels<'_>, exclusion: &ExclusionTable, max_rank: usize) -> Result<CmcMap> {
    let (nq, ng) = dist.dims2()?;
    if labels.query_ids.len() != nq || labels.query_cams.len() != nq {
        return Err(Error::shape("cmc_map", format!("{nq} queries, {} ids", labels.query_ids.len())));
    }
    if labels.gallery_ids.len() != ng || labels.gallery_cams.len() != ng {
        return Err(Error::shape("cmc_map", format!("{ng} gallery, {} ids", labels.gallery_ids.len())));
    }
    if !dist.all_finite() {
        return Err(Error::NonFinite("distance matrix"));
    }
    let depth = max_rank.max(1);
    let mut hits_at = alloc::vec![0usize; depth];
    let mut ap_sum = 0.0;
    let mut valid = 0;
    for q in 0..nq {
        let row = &dist.data()[q * ng..(q + 1) * ng];
        let mut rank = 0usize;
        let mut hits = 0usize;
        let mut first: Option<usize> = None;
        let mut precision_sum = 0.0;
        for g in ranking(row) {
            if exclusion.excludes(labels.query_cams[q], labels.gallery_cams[g]) {
                continue;
            }
            if labels.gallery_ids[g] == labels.query_ids[q] {
                hits += 1;
                first.get_or_insert(rank);
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
            rank += 1;
        }
        let Some(first) = first else { continue };
        valid += 1;
        ap_sum += precision_sum / hits as f64;
        if first < depth {
            hits_at[first] += 1;
        }
    }
    let mut cmc = Vec::with_capacity(depth);
    let mut acc = 0usize;
    for h in hits_at {
        acc += h;
        cmc.push(if valid == 0 { 0.0 } else { acc as f64 / valid as f64 });
    }
    if nq > valid {
        log::warn!("{} of {nq} queries have no valid gallery match and were dropped", nq - valid);
    }
    Ok(CmcMap {
        cmc,
        map: if valid == 0 { 0.0 } else { ap_sum / valid as f64 },
        valid_queries: valid,
        dropped_queries: nq - valid,
    })
}
