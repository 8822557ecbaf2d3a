//! Text and binary documents written next to volumes: plans, truths, manifests,
//! run configurations and model checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use ata_core::alignment::AlignmentPlan;
use ata_core::model::{ModelConfig, ModelParams, TrainHyper};
use ata_core::numerics::Tensor;
use ata_core::Permutation;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Per-frame gather maps of a `[T, H, W]` grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDoc {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub perms: Vec<Vec<usize>>,
}

impl PlanDoc {
    pub fn from_perms(h: usize, w: usize, perms: &[Permutation]) -> Self {
        Self {
            t: perms.len(),
            h,
            w,
            perms: perms.iter().map(|p| p.map().to_vec()).collect(),
        }
    }

    pub fn from_plan(h: usize, w: usize, plan: &AlignmentPlan) -> Self {
        Self::from_perms(h, w, plan.perms())
    }

    pub fn to_plan(&self) -> CliResult<AlignmentPlan> {
        if self.perms.len() != self.t {
            return Err(CliError::data(format!(
                "plan lists {} frames, header says {}",
                self.perms.len(),
                self.t
            )));
        }
        if let Some(p) = self.perms.iter().find(|p| p.len() != self.h * self.w) {
            return Err(CliError::data(format!(
                "plan map of length {} on a {}x{} grid",
                p.len(),
                self.h,
                self.w
            )));
        }
        let perms = self
            .perms
            .iter()
            .map(|m| Permutation::new(m.clone()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::data(e.to_string()))?;
        AlignmentPlan::new(perms).map_err(|e| CliError::data(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes") + "\n"
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        serde_json::from_str(&read_text(path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Every file a command produced, with content hashes, sorted by path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn add(&mut self, path: impl Into<String>, bytes: &[u8]) {
        self.files.push(ManifestEntry {
            path: path.into(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
    }

    pub fn write(mut self, dir: &Path) -> CliResult<()> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let text = serde_json::to_string_pretty(&self).expect("plain data serializes") + "\n";
        write_bytes(&dir.join(Self::FILE_NAME), text.as_bytes())
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(Self::FILE_NAME);
        serde_json::from_str(&read_text(&path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory written by `gen motion` or `gen shuffled-motion`.
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

/// TOML run description; relative paths resolve against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainHyper,
    pub data: DataSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg = Self::parse(&read_text(path)?).map_err(|e| e.context(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.dir, &mut cfg.output.metrics, &mut cfg.output.checkpoint] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in values.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Magic, `u32` version, `u64` header length, JSON header, then little-endian `f64` values.
pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParams) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, t) in params.named() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        t.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: config.clone(),
        tensors,
    })
    .expect("plain data serializes");
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> CliResult<(ModelConfig, ModelParams)> {
    let bad = |m: &str| CliError::data(format!("checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("eight bytes")) as usize;
    let header_end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(&e.to_string()))?;
    let payload = &bytes[header_end..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes")))
        .collect();
    let template = ModelParams::init(&header.config).map_err(|e| bad(&e.to_string()))?;
    let expected = template.named();
    if expected.len() != header.tensors.len() {
        return Err(bad("tensor count does not match the configuration"));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    let mut used = 0;
    for ((name, t), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(bad(&format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
        }
        let end = entry
            .offset
            .checked_add(t.numel())
            .filter(|&e| e <= values.len())
            .ok_or_else(|| bad("tensor runs past the payload"))?;
        tensors.push(Tensor::new(entry.shape.clone(), values[entry.offset..end].to_vec()).map_err(|e| bad(&e.to_string()))?);
        used += t.numel();
    }
    if used != values.len() {
        return Err(bad("payload has trailing values"));
    }
    let params = template.with_values(tensors).map_err(|e| bad(&e.to_string()))?;
    Ok((header.config, params))
}
