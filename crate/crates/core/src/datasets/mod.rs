//! Labelled image collections, the P×K batch sampler, the synthetic
//! paired-modality generator and the retrieval protocol splits.

mod protocol;
mod synthetic;

pub use protocol::{build_protocol_split, ProtocolSplit, SearchMode, Shot, MULTI_SHOT_IMAGES};
pub use synthetic::{generate_synthetic, generate_synthetic_split, SyntheticConfig};

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{stack, BatchLayout, ImageBatch, Modality, PersonImage, SYNTHETIC_CAMERA};
use crate::tensor::Tensor;

pub const RGB_CAMERAS: [u32; 4] = [1, 2, 4, 5];
pub const IR_CAMERAS: [u32; 2] = [3, 6];

/// Modality recorded by a camera of the six-camera layout.
pub fn camera_modality(camera: u32) -> Result<Modality> {
    if RGB_CAMERAS.contains(&camera) {
        Ok(Modality::Rgb)
    } else if IR_CAMERAS.contains(&camera) {
        Ok(Modality::Ir)
    } else {
        Err(Error::Validation(format!(
            "camera {camera} is neither an RGB camera {RGB_CAMERAS:?} nor an IR camera {IR_CAMERAS:?}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    /// Held-out images before the query/gallery protocol split.
    Test,
    Query,
    Gallery,
}

/// Images of one split plus the table from contiguous identity index to the
/// original identity label.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<PersonImage>,
    identity_table: Vec<u64>,
    split: Split,
}

impl Dataset {
    /// Items must already carry contiguous identities into `identity_table`,
    /// share one resolution, and sit on cameras matching their modality.
    pub fn new(items: Vec<PersonImage>, identity_table: Vec<u64>, split: Split) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("dataset"))?;
        let res = first.resolution();
        for (i, item) in items.iter().enumerate() {
            if item.identity >= identity_table.len() {
                return Err(Error::Index {
                    what: "identity table",
                    index: item.identity,
                    len: identity_table.len(),
                });
            }
            if item.resolution() != res {
                return Err(Error::Validation(format!(
                    "item {i} has resolution {:?}, expected {res:?}",
                    item.resolution()
                )));
            }
            if item.camera != SYNTHETIC_CAMERA && camera_modality(item.camera)? != item.modality {
                return Err(Error::Validation(format!(
                    "item {i}: camera {} does not record {}",
                    item.camera, item.modality
                )));
            }
        }
        Ok(Self {
            items,
            identity_table,
            split,
        })
    }

    /// Build from images labelled with original identities, remapping them to
    /// contiguous indices in ascending label order.
    pub fn from_labelled(labelled: Vec<(u64, PersonImage)>, split: Split) -> Result<Self> {
        let mut table: Vec<u64> = labelled.iter().map(|(l, _)| *l).collect();
        table.sort_unstable();
        table.dedup();
        let items = labelled
            .into_iter()
            .map(|(label, mut img)| {
                img.identity = table.binary_search(&label).unwrap_or_default();
                img
            })
            .collect();
        Self::new(items, table, split)
    }

    pub fn items(&self) -> &[PersonImage] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn identity_table(&self) -> &[u64] {
        &self.identity_table
    }

    pub fn num_identities(&self) -> usize {
        self.identity_table.len()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.items[0].resolution()
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.items.iter().filter(|i| i.modality == modality).count()
    }

    /// Item indices per identity for one modality.
    pub fn by_identity(&self, modality: Modality) -> Vec<Vec<usize>> {
        let mut out = alloc::vec![Vec::new(); self.num_identities()];
        for (i, item) in self.items.iter().enumerate() {
            if item.modality == modality {
                out[item.identity].push(i);
            }
        }
        out
    }

    /// Every identity must have at least `p` images in each modality.
    pub fn check_pair_minimum(&self, p: usize) -> Result<()> {
        for modality in [Modality::Rgb, Modality::Ir] {
            for (id, idx) in self.by_identity(modality).iter().enumerate() {
                if idx.len() < p.max(1) {
                    return Err(Error::Validation(format!(
                        "identity {} has {} {modality} images, needs at least {}",
                        self.identity_table[id],
                        idx.len(),
                        p.max(1)
                    )));
                }
            }
        }
        Ok(())
    }

    /// The images of one modality, keeping the identity table.
    pub fn restrict(&self, modality: Modality) -> Result<Self> {
        let items = self.items.iter().filter(|i| i.modality == modality).cloned().collect();
        Self::new(items, self.identity_table.clone(), self.split)
    }

    /// Subset by item index, in the given order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let items = indices
            .iter()
            .map(|&i| {
                self.items.get(i).cloned().ok_or(Error::Index {
                    what: "dataset item",
                    index: i,
                    len: self.items.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, self.identity_table.clone(), split)
    }

    /// ⌊pairs / (P·K)⌋ batches, at least one, where pairs is the smaller
    /// modality count.
    pub fn steps_per_epoch(&self, layout: BatchLayout) -> usize {
        let pairs = self.count(Modality::Rgb).min(self.count(Modality::Ir));
        (pairs / layout.per_modality()).max(1)
    }
}

fn choose(pool: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if pool.len() >= n {
        index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Draw `k` distinct identities and `p` RGB plus `p` IR images of each.
///
/// Images are drawn without replacement whenever an identity has at least
/// `p` of them. Rows are grouped by identity, and row `i` of the RGB and IR
/// halves share a label.
pub fn pk_sample(dataset: &Dataset, layout: BatchLayout, rng: &mut impl Rng) -> Result<ImageBatch> {
    let BatchLayout { p, k } = layout;
    if p == 0 || k == 0 {
        return Err(Error::Sampling("P and K must be positive".into()));
    }
    let rgb = dataset.by_identity(Modality::Rgb);
    let ir = dataset.by_identity(Modality::Ir);
    let eligible: Vec<usize> = (0..dataset.num_identities())
        .filter(|&i| !rgb[i].is_empty() && !ir[i].is_empty())
        .collect();
    if eligible.len() < k {
        return Err(Error::Sampling(format!(
            "K = {k} identities requested but only {} have both modalities",
            eligible.len()
        )));
    }
    let ids: Vec<usize> = index::sample(rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut labels = Vec::with_capacity(p * k);
    let mut rgb_items = Vec::with_capacity(p * k);
    let mut ir_items = Vec::with_capacity(p * k);
    for &id in &ids {
        labels.extend(core::iter::repeat_n(id, p));
        rgb_items.extend(choose(&rgb[id], p, rng));
        ir_items.extend(choose(&ir[id], p, rng));
    }
    let items = dataset.items();
    let gather = |idx: &[usize]| stack(&idx.iter().map(|&i| &items[i]).collect::<Vec<_>>());
    Ok(ImageBatch {
        rgb: gather(&rgb_items)?,
        ir: gather(&ir_items)?,
        labels,
        rgb_items,
        ir_items,
        layout,
    })
}

/// Draw `k` distinct identities and `per_identity` images of one modality
/// each; returns the stacked images and their labels.
pub fn sample_modality(
    dataset: &Dataset,
    modality: Modality,
    per_identity: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let pools = dataset.by_identity(modality);
    let eligible: Vec<usize> = (0..pools.len()).filter(|&i| !pools[i].is_empty()).collect();
    if eligible.len() < k || k == 0 || per_identity == 0 {
        return Err(Error::Sampling(format!(
            "{k} identities x {per_identity} {modality} images requested, {} identities available",
            eligible.len()
        )));
    }
    let mut labels = Vec::with_capacity(per_identity * k);
    let mut picks = Vec::with_capacity(per_identity * k);
    for i in index::sample(rng, eligible.len(), k) {
        let id = eligible[i];
        labels.extend(core::iter::repeat_n(id, per_identity));
        picks.extend(choose(&pools[id], per_identity, rng));
    }
    let items = dataset.items();
    Ok((stack(&picks.iter().map(|&i| &items[i]).collect::<Vec<_>>())?, labels))
}
