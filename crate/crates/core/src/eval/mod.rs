//! Cross-modality retrieval evaluation.

mod metrics;
mod rerank;

pub use metrics::{cmc_map, ranking, CmcMap, ExclusionTable, RetrievalLabels};
pub use rerank::{rerank, RerankParams};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::datasets::{build_protocol_split, Dataset, SearchMode, Shot};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::PersonImage;
use crate::networks::{StudentBackbone, ENCODER_CHANNELS};
use crate::nn::NormMode;
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

/// Embeddings `[n, d]` of `images` from the backbone in evaluation mode.
/// IR images are channel-replicated. Rows do not depend on `chunk`.
pub fn extract_features(net: &StudentBackbone, images: &[&PersonImage], chunk: usize, normalize: bool) -> Result<Tensor> {
    let d = net.embedding_dim();
    let mut out = Vec::with_capacity(images.len() * d);
    for part in images.chunks(chunk.max(1)) {
        let (h, w) = part[0].resolution();
        let mut data = Vec::with_capacity(part.len() * ENCODER_CHANNELS * h * w);
        for img in part {
            if img.resolution() != (h, w) {
                return Err(Error::shape("extract_features", format!("{:?} vs {:?}", img.resolution(), (h, w))));
            }
            let c = img.modality.channels();
            for ch in 0..ENCODER_CHANNELS {
                let src = if c == 1 { 0 } else { ch };
                data.extend_from_slice(&img.pixels.data()[src * h * w..(src + 1) * h * w]);
            }
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[part.len(), ENCODER_CHANNELS, h, w], data)?);
        let mut b = net.params().bind(&mut g, false, NormMode::Eval);
        let f = net.former(&mut g, &mut b, x)?;
        let e = net.latter(&mut g, &mut b, f)?;
        out.extend_from_slice(g.value(e).data());
    }
    if normalize {
        for row in out.chunks_mut(d) {
            let norm = Float::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    Tensor::new(&[images.len(), d], out)
}

/// Euclidean distances between the rows of `q` `[n_q, d]` and `g` `[n_g, d]`.
pub fn distance_matrix(q: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (nq, d) = q.dims2()?;
    let (ng, dg) = g.dims2()?;
    if d != dg {
        return Err(Error::shape("distance_matrix", format!("dimension {d} vs {dg}")));
    }
    let mut out = Vec::with_capacity(nq * ng);
    for i in 0..nq {
        let a = &q.data()[i * d..(i + 1) * d];
        for j in 0..ng {
            let b = &g.data()[j * d..(j + 1) * d];
            let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            out.push(Float::sqrt(s));
        }
    }
    Tensor::new(&[nq, ng], out)
}

/// One evaluation setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub mode: SearchMode,
    pub shot: Shot,
    pub exclusion: ExclusionTable,
    pub rerank: Option<RerankParams>,
    /// Gallery resamplings averaged into one cell.
    pub trials: usize,
    pub normalize_features: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            mode: SearchMode::AllSearch,
            shot: Shot::Single,
            exclusion: ExclusionTable::default(),
            rerank: None,
            trials: 10,
            normalize_features: false,
        }
    }
}

impl EvalProtocol {
    pub fn new(mode: SearchMode, shot: Shot) -> Self {
        Self {
            mode,
            shot,
            ..Default::default()
        }
    }
}

/// Percentages for one (mode, shot) cell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsCell {
    pub r1: f64,
    pub r10: f64,
    pub r20: f64,
    pub map: f64,
    pub valid_queries: usize,
}

impl MetricsCell {
    pub fn from_cmc(r: &CmcMap) -> Self {
        Self {
            r1: 100.0 * r.rank(1),
            r10: 100.0 * r.rank(10),
            r20: 100.0 * r.rank(20),
            map: 100.0 * r.map,
            valid_queries: r.valid_queries,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub mode: SearchMode,
    pub shot: Shot,
    pub reranked: bool,
    pub outcome: core::result::Result<MetricsCell, String>,
}

/// Evaluated cells, each either metrics or the error that prevented them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub cells: Vec<CellResult>,
}

const COLUMNS: [(SearchMode, Shot); 4] = [
    (SearchMode::AllSearch, Shot::Single),
    (SearchMode::AllSearch, Shot::Multi),
    (SearchMode::IndoorSearch, Shot::Single),
    (SearchMode::IndoorSearch, Shot::Multi),
];

impl MetricsTable {
    pub fn get(&self, mode: SearchMode, shot: Shot, reranked: bool) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.shot == shot && c.reranked == reranked)
    }

    /// Machine-readable `key=value` lines, one per cell.
    pub fn to_report(&self) -> String {
        let mut s = String::new();
        for c in &self.cells {
            let _ = write!(s, "mode={} shot={} rerank={}", c.mode, c.shot, c.reranked);
            match &c.outcome {
                Ok(m) => {
                    let _ = writeln!(
                        s,
                        " r1={} r10={} r20={} map={} queries={}",
                        m.r1, m.r10, m.r20, m.map, m.valid_queries
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, " error={e:?}");
                }
            }
        }
        s
    }

    /// Text table with all-search and indoor-search groups, single- and
    /// multi-shot columns, and R1/R10/R20/mAP in each.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10}| {:^47} | {:^47}", "", "All-Search", "Indoor-Search");
        let _ = writeln!(s, "{:<10}| {:^23}|{:^23} | {:^23}|{:^23}", "", "Single-Shot", "Multi-Shot", "Single-Shot", "Multi-Shot");
        let _ = write!(s, "{:<10}|", "Method");
        for _ in 0..4 {
            let _ = write!(s, " {:>5} {:>5} {:>5} {:>5}|", "R1", "R10", "R20", "mAP");
        }
        s.push('\n');
        for reranked in [false, true] {
            if !self.cells.iter().any(|c| c.reranked == reranked) {
                continue;
            }
            let _ = write!(s, "{:<10}|", if reranked { "rerank" } else { "plain" });
            for (mode, shot) in COLUMNS {
                match self.get(mode, shot, reranked).map(|c| &c.outcome) {
                    Some(Ok(m)) => {
                        let _ = write!(s, " {:>5.1} {:>5.1} {:>5.1} {:>5.1}|", m.r1, m.r10, m.r20, m.map);
                    }
                    Some(Err(_)) => {
                        let _ = write!(s, " {:^23}|", "error");
                    }
                    None => {
                        let _ = write!(s, " {:^23}|", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

fn evaluate_cell(features: &Tensor, dataset: &Dataset, protocol: &EvalProtocol, seed: u64) -> Result<MetricsCell> {
    let trials = protocol.trials.max(1);
    let mut acc = MetricsCell::default();
    let d = features.shape()[1];
    let rows = |idx: &[usize]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(&[idx.len(), d], data)
    };
    for t in 0..trials {
        let mut rng = seed::rng(seed, Stream::Protocol, &[protocol.mode as u64, protocol.shot as u64, t as u64]);
        let split = build_protocol_split(dataset, protocol.mode, protocol.shot, &mut rng)?;
        let q = rows(&split.query)?;
        let g = rows(&split.gallery)?;
        let mut dist = distance_matrix(&q, &g)?;
        if let Some(params) = protocol.rerank {
            dist = rerank(&dist, &distance_matrix(&q, &q)?, &distance_matrix(&g, &g)?, params)?;
        }
        let items = dataset.items();
        let ids = |idx: &[usize]| idx.iter().map(|&i| items[i].identity).collect::<Vec<_>>();
        let cams = |idx: &[usize]| idx.iter().map(|&i| items[i].camera).collect::<Vec<_>>();
        let (qi, qc, gi, gc) = (ids(&split.query), cams(&split.query), ids(&split.gallery), cams(&split.gallery));
        let labels = RetrievalLabels {
            query_ids: &qi,
            query_cams: &qc,
            gallery_ids: &gi,
            gallery_cams: &gc,
        };
        let cell = MetricsCell::from_cmc(&cmc_map(&dist, labels, &protocol.exclusion, 20)?);
        acc.r1 += cell.r1;
        acc.r10 += cell.r10;
        acc.r20 += cell.r20;
        acc.map += cell.map;
        acc.valid_queries += cell.valid_queries;
    }
    let n = trials as f64;
    Ok(MetricsCell {
        r1: acc.r1 / n,
        r10: acc.r10 / n,
        r20: acc.r20 / n,
        map: acc.map / n,
        valid_queries: acc.valid_queries / trials,
    })
}

/// Evaluate every protocol on `dataset` with features from `net`. A cell
/// whose protocol cannot be built records its error; other cells proceed.
pub fn evaluate(net: &StudentBackbone, dataset: &Dataset, protocols: &[EvalProtocol], seed: u64) -> Result<MetricsTable> {
    let images: Vec<&PersonImage> = dataset.items().iter().collect();
    let mut table = MetricsTable::default();
    let mut cache: [Option<Tensor>; 2] = [None, None];
    for protocol in protocols {
        let slot = &mut cache[usize::from(protocol.normalize_features)];
        if slot.is_none() {
            *slot = Some(extract_features(net, &images, 64, protocol.normalize_features)?);
        }
        let features = slot.as_ref().expect("filled above");
        let outcome = evaluate_cell(features, dataset, protocol, seed).map_err(|e| format!("{e}"));
        table.cells.push(CellResult {
            mode: protocol.mode,
            shot: protocol.shot,
            reranked: protocol.rerank.is_some(),
            outcome,
        });
    }
    Ok(table)
}

/// Mean rank-1 fraction over single-shot all-search trials.
pub fn cross_modality_r1(net: &StudentBackbone, dataset: &Dataset, trials: usize, seed: u64) -> Result<f64> {
    let protocol = EvalProtocol {
        trials,
        ..EvalProtocol::default()
    };
    let table = evaluate(net, dataset, &[protocol], seed)?;
    match &table.cells[0].outcome {
        Ok(m) => Ok(m.r1 / 100.0),
        Err(e) => Err(Error::Validation(e.clone())),
    }
}

/// Rank-1 fraction of IR-to-IR retrieval across the two IR cameras: every
/// image of the first camera queries every image of the other.
pub fn ir_to_ir_r1(net: &StudentBackbone, dataset: &Dataset) -> Result<f64> {
    let [qc, gc] = crate::datasets::IR_CAMERAS;
    let pick = |cam: u32| -> Vec<&PersonImage> { dataset.items().iter().filter(|i| i.camera == cam).collect() };
    let (query, gallery) = (pick(qc), pick(gc));
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Validation(format!("IR retrieval needs images from cameras {qc} and {gc}")));
    }
    let qf = extract_features(net, &query, 64, true)?;
    let gf = extract_features(net, &gallery, 64, true)?;
    let dist = distance_matrix(&qf, &gf)?;
    let ids = |v: &[&PersonImage]| -> (Vec<usize>, Vec<u32>) { v.iter().map(|i| (i.identity, i.camera)).unzip() };
    let ((q_ids, q_cams), (g_ids, g_cams)) = (ids(&query), ids(&gallery));
    let labels = RetrievalLabels {
        query_ids: &q_ids,
        query_cams: &q_cams,
        gallery_ids: &g_ids,
        gallery_cams: &g_cams,
    };
    let out = cmc_map(&dist, labels, &ExclusionTable::none(), 1)?;
    if out.valid_queries == 0 {
        return Err(Error::Validation("no IR query has a match in the other IR camera".into()));
    }
    Ok(out.rank(1))
}
