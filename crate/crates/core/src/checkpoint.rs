//! Checkpoint directories: `manifest.json` plus one binary file per
//! parameter group.
//!
//! Group files hold a sequence of tensors, each written as
//! `u32 name_len, name (utf-8), u32 ndim, u32 dims[ndim], f32 data[prod(dims)]`,
//! all little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::INIT_SCHEME;
use crate::config::ExperimentConfig;
use crate::error::{Result, SgadError};
use crate::metrics::CODE_VERSION;
use crate::model::SgadModel;
use crate::nn::{Parameters, TensorRef};
use crate::trainer::{GradLog, TrainState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    /// Full training state, resumable.
    Training,
    /// Backbone and BMNet only.
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub file: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub code_version: String,
    pub kind: ArtifactKind,
    pub init_scheme: String,
    pub config: ExperimentConfig,
    /// Original indices of the blocks present (fewer than L after pruning).
    pub blocks: Vec<usize>,
    pub epoch: usize,
    pub step: u64,
    pub grad_log: GradLog,
    pub groups: Vec<GroupEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: SgadModel,
    pub velocity: Option<SgadModel>,
}

impl Checkpoint {
    pub fn into_state(self) -> Result<TrainState> {
        let velocity = self
            .velocity
            .ok_or_else(|| SgadError::Checkpoint("artifact has no optimizer state".into()))?;
        Ok(TrainState {
            epoch: self.manifest.epoch,
            step: self.manifest.step,
            model: self.model,
            velocity,
            grad_log: self.manifest.grad_log,
        })
    }
}

fn encode(tensors: &[TensorRef<'_>]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        out.extend((t.name.len() as u32).to_le_bytes());
        out.extend(t.name.as_bytes());
        out.extend((t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in t.data {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SgadError::Checkpoint(format!(
                "{}: truncated at byte {}",
                self.file, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Reads `expected` tensors from `bytes` into `targets`, checking names and shapes.
fn decode_into(bytes: &[u8], file: &str, expected: &[TensorEntry], targets: Vec<&mut Vec<f32>>) -> Result<()> {
    if expected.len() != targets.len() {
        return Err(SgadError::Checkpoint(format!(
            "{file}: {} tensors listed, model has {}",
            expected.len(),
            targets.len()
        )));
    }
    let mut r = Reader { bytes, pos: 0, file };
    for (entry, target) in expected.iter().zip(targets) {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| SgadError::Checkpoint(format!("{file}: tensor name is not utf-8")))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != entry.name || shape != entry.shape {
            return Err(SgadError::Checkpoint(format!(
                "{file}: found {name} {shape:?}, expected {} {:?}",
                entry.name, entry.shape
            )));
        }
        let count: usize = shape.iter().product();
        if count != target.len() {
            return Err(SgadError::Checkpoint(format!(
                "{file}: {name} has {count} values, model expects {}",
                target.len()
            )));
        }
        let raw = r.take(count * 4)?;
        for (dst, chunk) in target.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(SgadError::Checkpoint(format!("{file}: {} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(())
}

fn entries(tensors: &[TensorRef<'_>]) -> Vec<TensorEntry> {
    tensors
        .iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect()
}

fn groups_of(model: &SgadModel) -> Vec<(&'static str, Vec<TensorRef<'_>>)> {
    let mut g = vec![("backbone", model.backbone.tensors()), ("bmnet", model.bmnet.tensors())];
    if let Some(s) = &model.sgnet {
        g.push(("sgnet", s.tensors()));
    }
    g
}

/// Writes a checkpoint directory. An existing directory at `dir` is replaced
/// only after the new one is completely written.
pub fn save(
    dir: &Path,
    config: &ExperimentConfig,
    model: &SgadModel,
    velocity: Option<&SgadModel>,
    epoch: usize,
    step: u64,
    grad_log: &GradLog,
) -> Result<()> {
    let kind = if velocity.is_some() && model.sgnet.is_some() {
        ArtifactKind::Training
    } else {
        ArtifactKind::Inference
    };
    let tmp = PathBuf::from(format!("{}.partial", dir.display()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let mut groups = Vec::new();
    let mut all = groups_of(model);
    if let Some(v) = velocity {
        all.push(("momentum", v.tensors()));
    }
    for (name, tensors) in &all {
        let file = format!("{name}.bin");
        fs::write(tmp.join(&file), encode(tensors))?;
        groups.push(GroupEntry {
            name: name.to_string(),
            file,
            tensors: entries(tensors),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        code_version: CODE_VERSION.to_string(),
        kind,
        init_scheme: INIT_SCHEME.to_string(),
        config: config.clone(),
        blocks: model.backbone.blocks.iter().map(|b| b.config.index).collect(),
        epoch,
        step,
        grad_log: grad_log.clone(),
        groups,
    };
    fs::write(tmp.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn save_state(dir: &Path, config: &ExperimentConfig, state: &TrainState) -> Result<()> {
    save(dir, config, &state.model, Some(&state.velocity), state.epoch, state.step, &state.grad_log)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| SgadError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.format_version != FORMAT_VERSION {
        return Err(SgadError::Checkpoint(format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

/// Model skeleton matching the manifest's architecture, before weights are read.
fn skeleton(m: &Manifest) -> Result<SgadModel> {
    let full = SgadModel::build(&m.config.network)?;
    let l = full.num_blocks();
    if m.blocks.iter().any(|&b| b >= l) || m.blocks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SgadError::Checkpoint(format!("invalid block list {:?}", m.blocks)));
    }
    let removed: Vec<usize> = (0..l).filter(|i| !m.blocks.contains(i)).collect();
    let has_sgnet = m.groups.iter().any(|g| g.name == "sgnet");
    Ok(SgadModel {
        backbone: full.backbone.without_blocks(&removed),
        bmnet: full.bmnet.without_outputs(&removed),
        sgnet: if has_sgnet { full.sgnet } else { None },
    })
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let mut model = skeleton(&manifest)?;
    let mut velocity = None;
    for g in &manifest.groups {
        let bytes = fs::read(dir.join(&g.file))?;
        match g.name.as_str() {
            "backbone" => decode_into(&bytes, &g.file, &g.tensors, model.backbone.tensors_mut())?,
            "bmnet" => decode_into(&bytes, &g.file, &g.tensors, model.bmnet.tensors_mut())?,
            "sgnet" => {
                let s = model.sgnet.as_mut().expect("skeleton has an SGNet when the group exists");
                decode_into(&bytes, &g.file, &g.tensors, s.tensors_mut())?
            }
            "momentum" => {
                let mut v = model.zeros_like();
                decode_into(&bytes, &g.file, &g.tensors, v.tensors_mut())?;
                velocity = Some(v);
            }
            other => return Err(SgadError::Checkpoint(format!("unknown group {other:?}"))),
        }
    }
    Ok(Checkpoint {
        manifest,
        model,
        velocity,
    })
}

/// Total size in bytes of the files in a checkpoint directory.
pub fn artifact_size(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for e in fs::read_dir(dir)? {
        total += e?.metadata()?.len();
    }
    Ok(total)
}
