//! The declarative run configuration: a TOML file with `[train]`,
//! `[synthetic]`, `[data]` and `[eval]` sections. Every field has a default,
//! so an empty file describes the tiny synthetic setup.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tsgan_core::datasets::{generate_synthetic_split, Dataset, SearchMode, Shot, Split, SyntheticConfig};
use tsgan_core::eval::{EvalProtocol, ExclusionTable, RerankParams};
use tsgan_core::TrainConfig;

use crate::error::{CliError, Result};
use crate::manifest::load_dataset;

/// Manifest paths; relative paths are resolved against the config file's
/// directory. A missing entry falls back to the synthetic generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Cells as `mode,shot`, e.g. `all-search,single`.
    pub protocols: Vec<String>,
    pub trials: usize,
    pub normalize_features: bool,
    pub rerank: RerankParams,
    /// `[probe camera, excluded gallery camera]` pairs.
    pub exclusion: Vec<[u32; 2]>,
    /// Queries shown in the retrieval grid.
    pub grid_queries: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            protocols: ["all-search,single", "all-search,multi", "indoor-search,single", "indoor-search,multi"]
                .map(String::from)
                .to_vec(),
            trials: 10,
            normalize_features: false,
            rerank: RerankParams::default(),
            exclusion: vec![[3, 2]],
            grid_queries: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub data: DataPaths,
    pub eval: EvalSettings,
}

impl RunConfig {
    /// Parse `path`, resolve relative data paths and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synthetic.validate()?;
        self.eval.rerank.validate()?;
        self.protocols(false)?;
        Ok(())
    }

    /// Replace every seed of the run.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synthetic.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serialises")
    }

    pub fn exclusion(&self) -> ExclusionTable {
        let mut table = ExclusionTable::none();
        for [probe, gallery] in &self.eval.exclusion {
            table.rules.entry(*probe).or_default().push(*gallery);
        }
        table
    }

    /// The configured cells, each with or without re-ranking.
    pub fn protocols(&self, rerank: bool) -> Result<Vec<EvalProtocol>> {
        self.eval
            .protocols
            .iter()
            .map(|s| {
                let mut p = parse_protocol(s)?;
                p.trials = self.eval.trials;
                p.normalize_features = self.eval.normalize_features;
                p.exclusion = self.exclusion();
                p.rerank = rerank.then_some(self.eval.rerank);
                Ok(p)
            })
            .collect()
    }

    pub fn train_dataset(&self) -> Result<Dataset> {
        self.dataset(self.data.train.as_deref(), Split::Train)
    }

    pub fn test_dataset(&self) -> Result<Dataset> {
        self.dataset(self.data.test.as_deref(), Split::Test)
    }

    fn dataset(&self, manifest: Option<&Path>, split: Split) -> Result<Dataset> {
        let ds = match manifest {
            Some(path) => load_dataset(path, split)?,
            None => generate_synthetic_split(&self.synthetic, split)?,
        };
        if ds.resolution() != self.train.resolution() {
            return Err(CliError::Config(format!(
                "{split:?} images are {:?} but train.input_height/input_width is {:?}",
                ds.resolution(),
                self.train.resolution()
            )));
        }
        Ok(ds)
    }
}

/// `mode,shot`, for example `indoor-search,multi`.
pub fn parse_protocol(s: &str) -> Result<EvalProtocol> {
    let bad = || CliError::Config(format!("protocol {s:?}: expected <all-search|indoor-search>,<single|multi>"));
    let (mode, shot) = s.split_once(',').ok_or_else(bad)?;
    let mode = SearchMode::parse(mode.trim()).ok_or_else(bad)?;
    let shot = Shot::parse(shot.trim()).ok_or_else(bad)?;
    Ok(EvalProtocol::new(mode, shot))
}

/// SHA-256 of the canonical TOML form of a training configuration.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let text = toml::to_string(cfg).expect("training configuration serialises");
    hex(&Sha256::digest(text.as_bytes()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_run() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_form_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.variant = tsgan_core::config::Variant::ordinary_single_ts();
        cfg.train.steps_per_epoch = Some(3);
        cfg.data.test = Some("x/manifest.tsv".into());
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(config_hash(&back.train), config_hash(&cfg.train));
    }

    #[test]
    fn nested_sections_override_fields() {
        let cfg = RunConfig::parse(
            "[train]\np = 2\nk = 4\nbatch_size = 16\n[train.variant]\ngan = false\nts_losses = \"none\"\n[train.network]\nstem_width = 8\n",
        )
        .unwrap();
        assert_eq!((cfg.train.p, cfg.train.k, cfg.train.batch_size), (2, 4, 16));
        assert!(!cfg.train.variant.gan);
        assert_eq!(cfg.train.network.stem_width, 8);
    }

    #[test]
    fn invalid_files_are_config_errors() {
        for text in [
            "[train]\nunknown = 1\n",
            "[train]\nbatch_size = 7\n",
            "[eval]\nprotocols = [\"everywhere,single\"]\n",
            "[eval.rerank]\nk1 = 2\nk2 = 2\n",
            "not toml at all",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Config(_))), "{text:?}");
        }
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.alpha_cross_domain = 0.007;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn relative_data_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[data]\ntrain = \"d/manifest.tsv\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.train.unwrap(), dir.path().join("d/manifest.tsv"));
    }
}
