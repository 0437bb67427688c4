//! Checkpoint archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "TSGANCK\0"
//! version  u32      FORMAT_VERSION
//! hlen     u64      header length in bytes
//! header   hlen     JSON: {"kind", "meta": {string: string}, "tensors": [{"name", "shape"}]}
//! payload           f64 values of every tensor, in header order
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! The header is written with sorted metadata keys and no timestamps, so
//! identical contents give identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tsgan_core::config::{NetworkConfig, TrainConfig};
use tsgan_core::image::Modality;
use tsgan_core::networks::{Generator, StudentBackbone, TeacherEncoder};
use tsgan_core::nn::ParamSet;
use tsgan_core::optim::Adam;
use tsgan_core::seed::{self, Stream};
use tsgan_core::trainer::TsGan;
use tsgan_core::Tensor;

use crate::config_file::config_hash;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"TSGANCK\0";
pub const FORMAT_VERSION: u32 = 1;

pub const KIND_TEACHER: &str = "teacher";
pub const KIND_TRAINING: &str = "training";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

/// Named tensors plus string metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(what: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("checkpoint: {what}"))
}

impl Archive {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| corrupt(format!("missing metadata {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?.parse().map_err(|_| corrupt(format!("metadata {key:?} is malformed")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| corrupt(format!("missing tensor {name:?}")))
    }

    pub fn push_set(&mut self, prefix: &str, ps: &ParamSet) {
        for (name, t) in ps.named_tensors() {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    /// Overwrite every tensor of `ps` from `prefix/…` entries; the archive
    /// must hold exactly the set's names.
    pub fn load_set(&self, prefix: &str, ps: &mut ParamSet) -> Result<()> {
        let wanted: Vec<String> = ps.named_tensors().map(|(n, _)| n.to_string()).collect();
        let stored = self.tensors.iter().filter(|(n, _)| n.strip_prefix(prefix).is_some_and(|r| r.starts_with('/'))).count();
        if stored != wanted.len() {
            return Err(corrupt(format!("{prefix}: {stored} tensors stored, network has {}", wanted.len())));
        }
        for name in wanted {
            ps.set_by_name(&name, self.get(&format!("{prefix}/{name}"))?.clone())
                .map_err(|e| corrupt(format!("{prefix}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| Entry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(header.len() + 64 + 8 * self.tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint archive"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("digest mismatch (truncated or modified file)"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("format version {version}, this build reads {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header length"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end]).map_err(corrupt)?;
        let mut payload = body[header_end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data: Vec<f64> = payload.by_ref().take(n).collect();
            if data.len() != n {
                return Err(corrupt(format!("payload ends inside {}", e.name)));
            }
            tensors.push((e.name, Tensor::new(&e.shape, data).map_err(corrupt)?));
        }
        if payload.next().is_some() || (body.len() - header_end) % 8 != 0 {
            return Err(corrupt("trailing payload bytes"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    /// Write through a temporary sibling and rename, so a crash never leaves
    /// a half-written archive under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(CliError::io(&tmp))?;
        fs::rename(&tmp, path).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(CliError::io(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CliError::Config(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }
}

fn placeholder_backbone(network: &NetworkConfig, classes: usize) -> StudentBackbone {
    // every tensor is overwritten from the archive
    StudentBackbone::new(network, classes, &mut seed::rng(0, Stream::Init, &[0]))
}

/// Archive of an IR-pretrained baseline; the teacher is its former encoder.
pub fn teacher_archive(baseline: &StudentBackbone, cfg: &TrainConfig) -> Archive {
    let mut a = Archive::new(KIND_TEACHER);
    a.set_meta("classes", baseline.num_classes());
    a.set_meta("config_hash", config_hash(cfg));
    a.set_meta("network", serde_json::to_string(&cfg.network).expect("network serialises"));
    a.push_set("baseline", baseline.params());
    a
}

/// Rebuild the frozen teacher and the baseline it came from.
pub fn load_teacher(archive: &Archive, network: &NetworkConfig) -> Result<(TeacherEncoder, StudentBackbone)> {
    archive.expect_kind(KIND_TEACHER)?;
    let stored: NetworkConfig = serde_json::from_str(archive.meta("network")?).map_err(corrupt)?;
    if &stored != network {
        return Err(CliError::Config("teacher checkpoint was trained with a different network preset".into()));
    }
    let mut baseline = placeholder_backbone(network, archive.meta_parse("classes")?);
    archive.load_set("baseline", baseline.params_mut())?;
    Ok((TeacherEncoder::from_baseline(&baseline)?, baseline))
}

const OPTIMIZERS: [&str; 3] = ["generator", "backbone", "discriminator"];

fn optimizer<'a>(run: &'a mut TsGan, name: &str) -> &'a mut Adam {
    match name {
        "generator" => &mut run.optimizers.generator,
        "backbone" => &mut run.optimizers.backbone,
        _ => &mut run.optimizers.discriminator,
    }
}

/// Every network, the teacher, optimizer moments and the step counter.
pub fn training_archive(run: &TsGan) -> Archive {
    let cfg = run.config();
    let mut a = Archive::new(KIND_TRAINING);
    a.set_meta("config", toml::to_string(cfg).expect("config serialises"));
    a.set_meta("config_hash", config_hash(cfg));
    a.set_meta("global_step", run.global_step());
    a.set_meta("classes", run.models.student.num_classes());
    if let Ok(t) = run.models.teacher.baseline() {
        a.set_meta("teacher_classes", t.num_classes());
        a.push_set("teacher", t.params());
    }
    for (name, ps) in run.named_param_sets() {
        if name != "teacher" {
            a.push_set(name, ps);
        }
    }
    for (name, opt) in [
        ("generator", &run.optimizers.generator),
        ("backbone", &run.optimizers.backbone),
        ("discriminator", &run.optimizers.discriminator),
    ] {
        let (step, first, second) = opt.state();
        a.set_meta(&format!("optim/{name}/step"), step);
        for (moment, groups) in [("m", first), ("v", second)] {
            for (g, tensors) in groups.iter().enumerate() {
                for (i, t) in tensors.iter().enumerate() {
                    a.tensors.push((format!("optim/{name}/{moment}/{g}/{i}"), t.clone()));
                }
            }
        }
    }
    a
}

/// Rebuild a run from a training archive. `cfg` must hash to the stored
/// configuration.
pub fn restore_training(archive: &Archive, cfg: &TrainConfig) -> Result<TsGan> {
    archive.expect_kind(KIND_TRAINING)?;
    let stored = archive.meta("config_hash")?;
    if stored != config_hash(cfg) {
        return Err(CliError::Config(format!(
            "configuration differs from the one the checkpoint was trained with (hash {stored})"
        )));
    }
    let teacher = if archive.tensors.iter().any(|(n, _)| n.starts_with("teacher/")) {
        let mut baseline = placeholder_backbone(&cfg.network, archive.meta_parse("teacher_classes")?);
        archive.load_set("teacher", baseline.params_mut())?;
        TeacherEncoder::from_baseline(&baseline)?
    } else {
        TeacherEncoder::uninitialized()
    };
    let mut run = TsGan::new(cfg.clone(), archive.meta_parse("classes")?, teacher)?;
    for name in ["student", "gen_ir", "gen_rgb", "disc_ir", "disc_rgb"] {
        archive.load_set(name, run.param_set_mut(name).expect("known set"))?;
    }
    for name in OPTIMIZERS {
        let step: u64 = archive.meta_parse(&format!("optim/{name}/step"))?;
        let opt = optimizer(&mut run, name);
        let (_, first, _) = opt.state();
        let shapes: Vec<usize> = first.iter().map(Vec::len).collect();
        let mut moments = [Vec::new(), Vec::new()];
        for (slot, moment) in moments.iter_mut().zip(["m", "v"]) {
            for (g, &n) in shapes.iter().enumerate() {
                let group = (0..n)
                    .map(|i| archive.get(&format!("optim/{name}/{moment}/{g}/{i}")).cloned())
                    .collect::<Result<Vec<_>>>()?;
                slot.push(group);
            }
        }
        let [first, second] = moments;
        opt.restore(step, first, second)?;
    }
    run.set_global_step(archive.meta_parse("global_step")?);
    Ok(run)
}

/// Training configuration stored in a training archive.
pub fn stored_config(archive: &Archive) -> Result<TrainConfig> {
    archive.expect_kind(KIND_TRAINING)?;
    toml::from_str(archive.meta("config")?).map_err(corrupt)
}

/// The student backbone of a training archive, the only network needed at
/// test time.
pub fn load_student(archive: &Archive) -> Result<StudentBackbone> {
    let cfg = stored_config(archive)?;
    let mut net = placeholder_backbone(&cfg.network, archive.meta_parse("classes")?);
    archive.load_set("student", net.params_mut())?;
    Ok(net)
}

/// `(G_I, G_R)` of a training archive.
pub fn load_generators(archive: &Archive) -> Result<(Generator, Generator)> {
    let cfg = stored_config(archive)?;
    let mut gen_ir = Generator::new(&cfg.network, Modality::Rgb, Modality::Ir, &mut seed::rng(0, Stream::Init, &[1]));
    let mut gen_rgb = Generator::new(&cfg.network, Modality::Ir, Modality::Rgb, &mut seed::rng(0, Stream::Init, &[2]));
    archive.load_set("gen_ir", gen_ir.params_mut())?;
    archive.load_set("gen_rgb", gen_rgb.params_mut())?;
    Ok((gen_ir, gen_rgb))
}
