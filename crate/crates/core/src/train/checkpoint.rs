//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header (step, stream
//! cursors, per-model configs, a tensor index of name → dtype/shape/offset),
//! raw little-endian f64 tensor payload, and a trailing SHA-256 over all
//! preceding bytes. The format is documented in the README so other-language
//! readers can parse it.

use super::{AdamState, EmaState, ModelSlot, RunSetup, TrainState};
use crate::dataset::StreamState;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, ParamSnapshot};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 8] = b"STSSLCK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelEntry {
    role: String,
    config: BackboneConfig,
    opt_t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    step: u64,
    ema_decay: f64,
    stream: StreamState,
    models: Vec<ModelEntry>,
    tensors: Vec<TensorEntry>,
}

struct PayloadWriter {
    tensors: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn new() -> Self {
        PayloadWriter { tensors: Vec::new(), bytes: Vec::new() }
    }

    fn push(&mut self, name: String, value: &ArrayD<f64>) {
        let offset = self.bytes.len() as u64;
        for v in value.iter() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.tensors.push(TensorEntry {
            name,
            dtype: "f64".into(),
            shape: value.shape().to_vec(),
            offset,
            byte_len: (value.len() * 8) as u64,
        });
    }

    fn push_snapshot(&mut self, prefix: &str, snapshot: &ParamSnapshot) {
        for (name, value) in snapshot.iter() {
            self.push(format!("{prefix}/{name}"), value);
        }
    }

    fn push_slot(&mut self, role: &str, slot: &ModelSlot) {
        self.push_snapshot(&format!("{role}/params"), &slot.params);
        self.push_snapshot(&format!("{role}/ema"), &slot.ema.shadow);
        for (i, (name, _)) in slot.params.iter().enumerate() {
            self.push(format!("{role}/opt/m/{name}"), &slot.opt.m[i]);
        }
        for (i, (name, _)) in slot.params.iter().enumerate() {
            self.push(format!("{role}/opt/v/{name}"), &slot.opt.v[i]);
        }
    }
}

/// Serialize the full training state. Deterministic: the same state produces
/// byte-identical files.
pub fn save_checkpoint(state: &TrainState, setup: &RunSetup, path: &Path) -> Result<()> {
    let mut payload = PayloadWriter::new();
    let mut models = vec![ModelEntry {
        role: "teacher".into(),
        config: state.teacher.config.clone(),
        opt_t: state.teacher.opt.t,
    }];
    payload.push_slot("teacher", &state.teacher);
    if let Some(student) = &state.student {
        models.push(ModelEntry {
            role: "student".into(),
            config: student.config.clone(),
            opt_t: student.opt.t,
        });
        payload.push_slot("student", student);
    }

    let header = Header {
        format_version: FORMAT_VERSION,
        config_hash: setup.config_hash.clone(),
        step: state.step,
        ema_decay: setup.experiment.train.ema_decay,
        stream: state.stream,
        models,
        tensors: payload.tensors,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Other(e.to_string()))?;

    let mut out = Vec::with_capacity(16 + header_json.len() + payload.bytes.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload.bytes);
    let mut hasher = Sha256::new();
    hasher.update(&out);
    out.extend_from_slice(&hasher.finalize());
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct TensorReader<'a> {
    header: &'a Header,
    payload: &'a [u8],
}

impl<'a> TensorReader<'a> {
    fn read(&self, name: &str) -> Result<ArrayD<f64>> {
        let entry = self
            .header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor {name}")))?;
        if entry.dtype != "f64" {
            return Err(Error::CheckpointFormat(format!(
                "tensor {name} has dtype {}, expected f64",
                entry.dtype
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        let bytes = self
            .payload
            .get(start..end)
            .ok_or_else(|| Error::CheckpointFormat(format!("tensor {name} out of bounds")))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| Error::CheckpointFormat(format!("tensor {name}: {e}")))
    }

    fn read_snapshot(&self, prefix: &str, reference: &BackboneConfig) -> Result<ParamSnapshot> {
        let names = crate::model::expected_param_names(reference)?;
        let mut snap = ParamSnapshot::new();
        for name in &names {
            snap.push(name, self.read(&format!("{prefix}/{name}"))?);
        }
        Ok(snap)
    }

    fn read_slot(&self, role: &str, entry: &ModelEntry, ema_decay: f64) -> Result<ModelSlot> {
        let params = self.read_snapshot(&format!("{role}/params"), &entry.config)?;
        let shadow = self.read_snapshot(&format!("{role}/ema"), &entry.config)?;
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, _) in params.iter() {
            m.push(self.read(&format!("{role}/opt/m/{name}"))?);
        }
        for (name, _) in params.iter() {
            v.push(self.read(&format!("{role}/opt/v/{name}"))?);
        }
        Ok(ModelSlot {
            config: entry.config.clone(),
            params,
            opt: AdamState { m, v, t: entry.opt_t },
            ema: EmaState { decay: ema_decay, shadow },
        })
    }
}

/// Load a checkpoint, verifying the trailing checksum. When `expected` is
/// given, the stored model configs must match the run setup (wrong
/// num_classes, dimensions, or pair/single mode are config-mismatch errors).
/// Returns the state and the stored config hash.
pub fn load_checkpoint(path: &Path, expected: Option<&RunSetup>) -> Result<(TrainState, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 48 || &bytes[..8] != MAGIC {
        return Err(Error::CheckpointFormat("bad magic or truncated file".into()));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let mut hasher = Sha256::new();
    hasher.update(body);
    if hasher.finalize().as_slice() != stored_digest {
        return Err(Error::CheckpointFormat("checksum mismatch (corrupt file)".into()));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > body.len() {
        return Err(Error::CheckpointFormat("header length out of bounds".into()));
    }
    let header: Header = serde_json::from_slice(&body[16..16 + header_len])
        .map_err(|e| Error::CheckpointFormat(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &body[16 + header_len..];
    let reader = TensorReader { header: &header, payload };

    let teacher_entry = header
        .models
        .iter()
        .find(|m| m.role == "teacher")
        .ok_or_else(|| Error::CheckpointFormat("no teacher model in checkpoint".into()))?;
    let student_entry = header.models.iter().find(|m| m.role == "student");

    if let Some(setup) = expected {
        if teacher_entry.config != setup.teacher_config {
            return Err(Error::ConfigMismatch(format!(
                "stored teacher config differs (stored num_classes {}, expected {})",
                teacher_entry.config.num_classes, setup.teacher_config.num_classes
            )));
        }
        match (&setup.student_config, student_entry) {
            (Some(expected_cfg), Some(entry)) => {
                if &entry.config != expected_cfg {
                    return Err(Error::ConfigMismatch("stored student config differs".into()));
                }
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::ConfigMismatch(
                    "checkpoint has no student tensors; it loads only under single_model".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::ConfigMismatch(
                    "checkpoint carries a student but the run is single-model".into(),
                ))
            }
        }
    }

    let teacher = reader.read_slot("teacher", teacher_entry, header.ema_decay)?;
    let student = student_entry
        .map(|e| reader.read_slot("student", e, header.ema_decay))
        .transpose()?;
    Ok((
        TrainState {
            step: header.step,
            teacher,
            student,
            stream: header.stream,
        },
        header.config_hash,
    ))
}
