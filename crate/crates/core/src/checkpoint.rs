//! Binary checkpoints: a JSON header followed by a checksummed tensor payload.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, the
//! header, then the payload. All integers are little endian. The payload
//! holds student parameters, teacher parameters and both optimizer moments,
//! in that order, each in parameter-table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::encoders::ModelConfig;
use crate::error::{HarmonyError, Result};
use crate::params::ParamStore;
use crate::teacher::TeacherState;
use crate::tensor::Tensor;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 8] = b"HRMNYCKP";
pub const FORMAT_VERSION: u32 = 1;
/// Identifies how per-step random streams are derived, so a checkpoint is
/// never resumed under a different scheme.
pub const RNG_SCHEME: &str = "chacha8-splitmix-v1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    /// Halves the file size; resumed runs are no longer bit-identical.
    F32,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Self::F64 => 8,
            Self::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: RunConfig,
    pub step: u64,
    pub seed: u64,
    pub rng_scheme: String,
    pub precision: Precision,
    pub tensors: Vec<TensorEntry>,
    pub centers: TeacherState,
    pub adam_t: u64,
    pub payload_len: u64,
    pub payload_sha256: String,
}

/// A fully verified checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub model: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub student: Vec<Tensor>,
    pub teacher: Vec<Tensor>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_values(out: &mut Vec<u8>, t: &Tensor, p: Precision) {
    for &v in t.data() {
        match p {
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
}

fn store_values(store: &ParamStore) -> Vec<&Tensor> {
    store.entries().iter().map(|e| &e.value).collect()
}

/// Serializes a training state.
pub fn encode(cfg: &RunConfig, state: &TrainState, precision: Precision) -> Result<Vec<u8>> {
    let b = &state.bundle;
    b.student.ensure_same_layout(&b.teacher)?;
    let tensors: Vec<TensorEntry> = b
        .student
        .entries()
        .iter()
        .map(|e| TensorEntry {
            name: e.name.clone(),
            rows: e.value.rows(),
            cols: e.value.cols(),
        })
        .collect();
    let mut payload = Vec::new();
    let groups = [
        store_values(&b.student),
        store_values(&b.teacher),
        state.optimizer.m.iter().collect(),
        state.optimizer.v.iter().collect(),
    ];
    for g in &groups {
        for t in g {
            push_values(&mut payload, t, precision);
        }
    }
    let header = Header {
        config: cfg.clone(),
        step: state.step,
        seed: cfg.seed,
        rng_scheme: RNG_SCHEME.into(),
        precision,
        tensors,
        centers: state.teacher.clone(),
        adam_t: state.optimizer.t,
        payload_len: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let head = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + head.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_with(path: &Path, cfg: &RunConfig, state: &TrainState, precision: Precision) -> Result<()> {
    let bytes = encode(cfg, state, precision)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarmonyError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| HarmonyError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarmonyError::io(path, e))
}

pub fn save(path: &Path, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    save_with(path, cfg, state, Precision::F64)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| HarmonyError::Checkpoint(format!("truncated file while reading {what}")))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// Parses and verifies every part of a checkpoint before returning it.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut at = 0;
    if take(bytes, &mut at, 8, "magic")? != MAGIC {
        return Err(HarmonyError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(HarmonyError::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let head_len = u64::from_le_bytes(take(bytes, &mut at, 8, "header length")?.try_into().expect("8 bytes"));
    let head = take(bytes, &mut at, head_len as usize, "header")?;
    let header: Header =
        serde_json::from_slice(head).map_err(|e| HarmonyError::Checkpoint(format!("corrupted header: {e}")))?;
    if header.rng_scheme != RNG_SCHEME {
        return Err(HarmonyError::Checkpoint(format!(
            "unknown rng scheme {}",
            header.rng_scheme
        )));
    }
    let payload = &bytes[at..];
    if payload.len() as u64 != header.payload_len {
        return Err(HarmonyError::Checkpoint(format!(
            "payload is {} bytes, header says {} (truncated file)",
            payload.len(),
            header.payload_len
        )));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(HarmonyError::Checkpoint("payload checksum mismatch".into()));
    }
    let w = header.precision.width();
    let scalars: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    if payload.len() != 4 * scalars * w {
        return Err(HarmonyError::Checkpoint(
            "payload size does not match the tensor table".into(),
        ));
    }
    let mut values = payload.chunks_exact(w).map(|c| match header.precision {
        Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
        Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
    });
    let mut group = || -> Vec<Tensor> {
        header
            .tensors
            .iter()
            .map(|t| {
                let data: Vec<f64> = values.by_ref().take(t.rows * t.cols).collect();
                Tensor::from_vec(t.rows, t.cols, data).expect("sized by table")
            })
            .collect()
    };
    let student = group();
    let teacher = group();
    let adam_m = group();
    let adam_v = group();
    Ok(Checkpoint {
        model: header.config.model.clone(),
        seed: header.seed,
        step: header.step,
        header,
        student,
        teacher,
        adam_m,
        adam_v,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| HarmonyError::io(path, e))?;
    decode(&bytes)
}

fn fill(store: &mut ParamStore, values: Vec<Tensor>) {
    let ids: Vec<_> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        *store.get_mut(id) = v;
    }
}

impl Checkpoint {
    /// Writes the saved tensors into a freshly built state of the same
    /// layout. Checks names and shapes of every tensor first.
    pub fn into_state(self, mut state: TrainState) -> Result<TrainState> {
        let entries = state.bundle.student.entries();
        if entries.len() != self.header.tensors.len() {
            return Err(HarmonyError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.header.tensors.len(),
                entries.len()
            )));
        }
        for (e, t) in entries.iter().zip(&self.header.tensors) {
            if e.name != t.name || e.value.shape() != (t.rows, t.cols) {
                return Err(HarmonyError::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    t.name,
                    (t.rows, t.cols),
                    e.name,
                    e.value.shape()
                )));
            }
        }
        let dim = |s: &TeacherState| s.cls_center.values.len();
        if dim(&self.header.centers) != dim(&state.teacher) {
            return Err(HarmonyError::Checkpoint(
                "teacher center width differs from the model".into(),
            ));
        }
        fill(&mut state.bundle.student, self.student);
        fill(&mut state.bundle.teacher, self.teacher);
        state.optimizer.m = self.adam_m;
        state.optimizer.v = self.adam_v;
        state.optimizer.t = self.header.adam_t;
        state.teacher = self.header.centers;
        state.step = self.header.step;
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> (RunConfig, TrainState) {
        let cfg = RunConfig::tiny();
        let mut s = TrainState::new(&cfg).unwrap();
        s.step = 17;
        s.optimizer.t = 17;
        // values whose shortest decimal form needs all 17 digits
        for (i, v) in s.teacher.cls_center.values.iter_mut().enumerate() {
            *v = ((i as f64 + 0.1).sqrt() / 3.0).powi(i as i32 % 7) * 1e-3;
        }
        let id = s.bundle.nets.logit_scale;
        s.bundle.teacher.get_mut(id).set(0, 0, 1.5);
        (cfg, s)
    }

    #[test]
    fn round_trip_restores_everything() {
        let (cfg, s) = state();
        let bytes = encode(&cfg, &s, Precision::F64).unwrap();
        let fresh = TrainState::new(&cfg).unwrap();
        let back = decode(&bytes).unwrap().into_state(fresh).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.optimizer, s.optimizer);
        assert_eq!(back.teacher, s.teacher);
        for (a, b) in back.bundle.teacher.entries().iter().zip(s.bundle.teacher.entries()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn truncated_and_corrupted_files_rejected() {
        let (cfg, s) = state();
        let bytes = encode(&cfg, &s, Precision::F64).unwrap();
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut bad = bytes.clone();
        bad[24] ^= 0xff;
        assert!(matches!(decode(&bad), Err(HarmonyError::Checkpoint(_))));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(decode(&flipped).unwrap_err().to_string().contains("checksum"));
        let mut version = bytes;
        version[8] = 9;
        assert!(decode(&version).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn f32_payload_is_half_size() {
        let (cfg, s) = state();
        let a = encode(&cfg, &s, Precision::F64).unwrap();
        let b = encode(&cfg, &s, Precision::F32).unwrap();
        let scalars = s.bundle.student.num_scalars();
        assert_eq!(a.len() - b.len(), 4 * scalars * 4);
        let back = decode(&b).unwrap();
        let id = s.bundle.nets.logit_scale;
        assert!((back.teacher[id.index()].item() - 1.5).abs() < 1e-6);
    }

    #[test]
    fn layout_mismatch_rejected() {
        let (cfg, s) = state();
        let bytes = encode(&cfg, &s, Precision::F64).unwrap();
        let mut other = cfg.clone();
        other.model.vision_dim = 16;
        other.model.vision_heads = 2;
        let fresh = TrainState::new(&other).unwrap();
        assert!(decode(&bytes).unwrap().into_state(fresh).is_err());
    }
}
