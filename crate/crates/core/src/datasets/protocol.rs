//! Query/gallery splits of the cross-modality retrieval protocol: IR probes
//! against sampled RGB galleries.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, IR_CAMERAS};
use crate::error::{Error, Result};

/// Gallery images per identity and camera in multi-shot mode.
pub const MULTI_SHOT_IMAGES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    AllSearch,
    IndoorSearch,
}

impl SearchMode {
    pub fn gallery_cameras(self) -> &'static [u32] {
        match self {
            SearchMode::AllSearch => &[1, 2, 4, 5],
            SearchMode::IndoorSearch => &[1, 2],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SearchMode::AllSearch => "all-search",
            SearchMode::IndoorSearch => "indoor-search",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [SearchMode::AllSearch, SearchMode::IndoorSearch].into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shot {
    Single,
    Multi,
}

impl Shot {
    /// Images drawn per identity and gallery camera, before capping at what
    /// is available.
    pub fn images(self) -> usize {
        match self {
            Shot::Single => 1,
            Shot::Multi => MULTI_SHOT_IMAGES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Shot::Single => "single",
            Shot::Multi => "multi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Shot::Single, Shot::Multi].into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for Shot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Item indices into the source dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolSplit {
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
    /// Identities with probes but no image on any gallery camera; their
    /// probes are left out of `query`.
    pub dropped_identities: Vec<usize>,
}

/// Every IR-camera image becomes a probe. For each identity and gallery
/// camera, one (single-shot) or up to ten (multi-shot, capped at the
/// available count, without replacement) RGB images join the gallery.
pub fn build_protocol_split(
    dataset: &Dataset,
    mode: SearchMode,
    shot: Shot,
    rng: &mut impl Rng,
) -> Result<ProtocolSplit> {
    let cams = mode.gallery_cameras();
    let n_ids = dataset.num_identities();
    let mut pools = alloc::vec![alloc::vec![Vec::new(); cams.len()]; n_ids];
    let mut probes = alloc::vec![Vec::new(); n_ids];
    for (i, item) in dataset.items().iter().enumerate() {
        if IR_CAMERAS.contains(&item.camera) {
            probes[item.identity].push(i);
        } else if let Some(c) = cams.iter().position(|&c| c == item.camera) {
            pools[item.identity][c].push(i);
        }
    }
    if probes.iter().all(Vec::is_empty) {
        return Err(Error::Validation(format!("no images from IR cameras {IR_CAMERAS:?}")));
    }
    if pools.iter().flatten().all(Vec::is_empty) {
        return Err(Error::Validation(format!("no images from gallery cameras {cams:?} for {mode}")));
    }
    let mut split = ProtocolSplit {
        query: Vec::new(),
        gallery: Vec::new(),
        dropped_identities: Vec::new(),
    };
    for id in 0..n_ids {
        for pool in &pools[id] {
            if pool.is_empty() {
                continue;
            }
            let n = shot.images().min(pool.len());
            let mut chosen: Vec<usize> = index::sample(rng, pool.len(), n).into_iter().map(|j| pool[j]).collect();
            chosen.sort_unstable();
            split.gallery.extend(chosen);
        }
        if probes[id].is_empty() {
            continue;
        }
        if pools[id].iter().all(Vec::is_empty) {
            log::warn!(
                "identity {} has no image on gallery cameras {cams:?}; its probes are excluded",
                dataset.identity_table()[id]
            );
            split.dropped_identities.push(id);
        } else {
            split.query.extend(&probes[id]);
        }
    }
    split.query.sort_unstable();
    split.gallery.sort_unstable();
    Ok(split)
}
