//! Text manifests: one `relative_path<TAB>identity<TAB>camera` record per
//! line, paths relative to the manifest's directory, `#` starts a comment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use tsgan_core::datasets::{camera_modality, Dataset, Split};
use tsgan_core::image::{denormalize, normalize_image};

use crate::error::{CliError, Result};
use crate::png_io::{read_png, write_png, RawImage};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub path: String,
    pub identity: u64,
    pub camera: u32,
}

pub fn parse_manifest(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or_default().trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| CliError::Data(format!("manifest line {}: {what}: {line:?}", n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, identity, camera] = fields[..] else {
            return Err(bad("expected three tab-separated fields"));
        };
        out.push(Record {
            path: path.trim().to_string(),
            identity: identity.trim().parse().map_err(|_| bad("identity is not an integer"))?,
            camera: camera.trim().parse().map_err(|_| bad("camera is not an integer"))?,
        });
    }
    Ok(out)
}

/// Load every image listed in `manifest`. Modality follows the camera;
/// identities are remapped to contiguous indices in ascending label order.
/// A training split must have at least one image of each modality per
/// identity.
pub fn load_dataset(manifest: &Path, split: Split) -> Result<Dataset> {
    if !manifest.is_file() {
        return Err(CliError::Data(format!("missing manifest {}", manifest.display())));
    }
    let text = fs::read_to_string(manifest).map_err(CliError::io(manifest))?;
    let records = parse_manifest(&text)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{}: no records", manifest.display())));
    }
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut labelled = Vec::with_capacity(records.len());
    for r in &records {
        let modality = camera_modality(r.camera)?;
        let path = root.join(&r.path);
        if !path.is_file() {
            return Err(CliError::Data(format!("{}: missing image {}", manifest.display(), path.display())));
        }
        let raw = read_png(&path)?;
        let img = normalize_image(&raw.planar(), (raw.channels, raw.height, raw.width), modality, 0, r.camera)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        labelled.push((r.identity, img));
    }
    let ds = Dataset::from_labelled(labelled, split)?;
    if split == Split::Train {
        ds.check_pair_minimum(1)?;
    }
    Ok(ds)
}

/// Write `dataset` as PNGs plus a manifest under `dir`, keeping the
/// original identity labels. Images are named `<identity>/c<camera>_<n>.png`.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let mut manifest = String::from("# relative_path\tidentity\tcamera\n");
    let mut counters = std::collections::BTreeMap::new();
    for item in dataset.items() {
        let label = dataset.identity_table()[item.identity];
        let n = counters.entry((label, item.camera)).or_insert(0usize);
        let rel = format!("{label:04}/c{}_{:03}.png", item.camera, *n);
        *n += 1;
        let path = dir.join(&rel);
        let parent = path.parent().expect("joined path has a parent");
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
        let (h, w) = item.resolution();
        let planar = denormalize(item.pixels.data());
        write_png(&path, &RawImage::from_planar(item.modality.channels(), h, w, &planar))?;
        let _ = writeln!(manifest, "{rel}\t{label}\t{}", item.camera);
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(CliError::io(&path))
}
