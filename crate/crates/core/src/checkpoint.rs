//! The `NCNW` weight container.
//!
//! Layout (little-endian): `magic "NCNW" | u16 version | u32 json_len |
//! json metadata | u32 tensor_count | tensors`, where each tensor is
//! `u16 name_len | name | 4 x u32 shape | f64 values`. Tensor names carry a
//! section prefix: `ncn.`, `lsm.`, `adam.m.` or `adam.v.`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{FeatureStage, ToyAnalysis};
use crate::lsmnet::{LsmHead, LsmInit};
use crate::ncn::{NcnConfig, NcnWeights, TrainingMeta};
use crate::nn::{Adam, AdamState, Module};
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NCNW";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not an NCNW checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: [usize; 4], found: [usize; 4] },
    #[error("checkpoint {0} is locked by another writer")]
    Locked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Trained model plus the state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: NcnWeights,
    pub optimizer: Option<Adam>,
    /// Completed epochs in the current phase.
    pub epoch: u32,
    pub seed: u64,
    pub loss_history: Vec<f64>,
    /// Free-form string metadata (e.g. phase name).
    pub notes: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(weights: NcnWeights) -> Self {
        let seed = weights.meta.seed;
        Self {
            weights,
            optimizer: None,
            epoch: 0,
            seed,
            loss_history: Vec::new(),
            notes: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LsmMeta {
    stage: FeatureStage,
    feature_channels: usize,
    latent_channels: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NcnConfig,
    meta: TrainingMeta,
    lsm: Option<LsmMeta>,
    optimizer: Option<OptimizerMeta>,
    epoch: u32,
    seed: u64,
    loss_history: Vec<f64>,
    notes: BTreeMap<String, String>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    for d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let w = &ckpt.weights;
    let header = Header {
        config: w.config,
        meta: w.meta.clone(),
        lsm: w.lsm.as_ref().map(|h| LsmMeta {
            stage: h.stage,
            feature_channels: h.feature_channels(),
            latent_channels: h.latent_channels(),
        }),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerMeta {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
        }),
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        loss_history: ckpt.loss_history.clone(),
        notes: ckpt.notes.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut tensors: Vec<(String, &Tensor)> = w.params().into_iter().map(|(n, t)| (format!("ncn.{n}"), t)).collect();
    if let Some(h) = &w.lsm {
        tensors.extend(h.params().into_iter().map(|(n, t)| (format!("lsm.{n}"), t)));
    }
    if let Some(o) = &ckpt.optimizer {
        let mut names: Vec<&String> = o.state.keys().collect();
        names.sort();
        for n in names {
            let st = &o.state[n];
            tensors.push((format!("adam.m.{n}"), &st.m));
            tensors.push((format!("adam.v.{n}"), &st.v));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (n, t) in tensors {
        push_tensor(&mut out, &n, t);
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.data.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn read_tensors(r: &mut Reader<'_>) -> Result<HashMap<String, Tensor>, CheckpointError> {
    let count = r.u32()? as usize;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(nlen)?).into_owned();
        let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let n = numel(shape);
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.insert(name, Tensor::from_vec(shape, data));
    }
    Ok(tensors)
}

fn assign(into: Vec<(String, &mut Tensor)>, prefix: &str, tensors: &mut HashMap<String, Tensor>) -> Result<(), CheckpointError> {
    for (n, t) in into {
        let key = format!("{prefix}{n}");
        let src = tensors.remove(&key).ok_or_else(|| CheckpointError::MissingTensor(key.clone()))?;
        if src.shape() != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: key,
                expected: t.shape(),
                found: src.shape(),
            });
        }
        *t = src;
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let json_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(json_len)?)?;
    let mut tensors = read_tensors(&mut r)?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Truncated);
    }
    let mut weights = NcnWeights::new(header.config, 0);
    weights.meta = header.meta;
    assign(weights.params_mut(), "ncn.", &mut tensors)?;
    if let Some(l) = header.lsm {
        let mut head = LsmHead::new(l.feature_channels, l.latent_channels, LsmInit::default());
        head.stage = l.stage;
        assign(head.params_mut(), "lsm.", &mut tensors)?;
        weights.lsm = Some(head);
    }
    let optimizer = match header.optimizer {
        Some(o) => {
            let mut adam = Adam::new(o.lr);
            adam.beta1 = o.beta1;
            adam.beta2 = o.beta2;
            adam.eps = o.eps;
            adam.step = o.step;
            let names: Vec<String> = tensors.keys().filter_map(|k| k.strip_prefix("adam.m.").map(str::to_string)).collect();
            for n in names {
                let m = tensors.remove(&format!("adam.m.{n}")).expect("listed");
                let v = tensors
                    .remove(&format!("adam.v.{n}"))
                    .ok_or_else(|| CheckpointError::MissingTensor(format!("adam.v.{n}")))?;
                adam.state.insert(n, AdamState { m, v });
            }
            Some(adam)
        }
        None => None,
    };
    if let Some(name) = tensors.keys().min() {
        return Err(CheckpointError::UnexpectedTensor(name.clone()));
    }
    Ok(Checkpoint {
        weights,
        optimizer,
        epoch: header.epoch,
        seed: header.seed,
        loss_history: header.loss_history,
        notes: header.notes,
    })
}

/// Writes atomically (temp file + rename) while holding `<path>.lock`.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let lock = lock_path(path);
    match OpenOptions::new().write(true).create_new(true).open(&lock) {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(CheckpointError::Locked(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    }
    let tmp = path.with_extension("ncnw.tmp");
    let result = fs::write(&tmp, to_bytes(ckpt)).and_then(|_| fs::rename(&tmp, path));
    let _ = fs::remove_file(&lock);
    result.map_err(Into::into)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

pub const ANALYSIS_MAGIC: [u8; 4] = *b"NCNA";

#[derive(Serialize, Deserialize)]
struct AnalysisHeader {
    num_classes: usize,
    classes: Vec<String>,
}

/// Serializes the bundled detector (`"NCNA"`, then the same layout as a
/// codec checkpoint).
pub fn analysis_to_bytes(model: &ToyAnalysis, classes: &[String]) -> Vec<u8> {
    let header = serde_json::to_vec(&AnalysisHeader {
        num_classes: model.num_classes,
        classes: classes.to_vec(),
    })
    .expect("header serializes");
    let mut out = ANALYSIS_MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (n, t) in params {
        push_tensor(&mut out, &n, t);
    }
    out
}

/// Inverse of [`analysis_to_bytes`]; returns the model and its class names.
pub fn analysis_from_bytes(bytes: &[u8]) -> Result<(ToyAnalysis, Vec<String>), CheckpointError> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != ANALYSIS_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let json_len = r.u32()? as usize;
    let header: AnalysisHeader = serde_json::from_slice(r.take(json_len)?)?;
    let mut tensors = read_tensors(&mut r)?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Truncated);
    }
    let mut model = ToyAnalysis::new(header.num_classes, 0);
    assign(model.params_mut(), "", &mut tensors)?;
    if let Some(name) = tensors.keys().min() {
        return Err(CheckpointError::UnexpectedTensor(name.clone()));
    }
    Ok((model, header.classes))
}

pub fn save_analysis(path: &Path, model: &ToyAnalysis, classes: &[String]) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, analysis_to_bytes(model, classes))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_analysis(path: &Path) -> Result<(ToyAnalysis, Vec<String>), CheckpointError> {
    analysis_from_bytes(&fs::read(path)?)
}

fn lock_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".lock");
    PathBuf::from(s)
}
