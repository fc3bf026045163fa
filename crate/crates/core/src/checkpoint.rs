//! Binary checkpoint archive.
//!
//! ```text
//! b"AGANCKPT" | u32 LE version | u64 LE header length | JSON header | f64 LE data
//! ```
//!
//! The header records the configs, counters, sampler position, optimizer
//! step counts, a SHA-256 of the data section and an index of every tensor
//! (name, shape, element offset). Tensors are stored in name order, so
//! writing the same state twice yields identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::hex;
use crate::error::{Error, Result};
use crate::nn::{load_state_dict, state_dict};
use crate::objective::ObjectiveConfig;
use crate::optim::Adam;
use crate::trainer::{ModelConfig, TrainingSchedule, TrainingState};

pub const MAGIC: &[u8; 8] = b"AGANCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "agc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub schedule: TrainingSchedule,
    pub objective: ObjectiveConfig,
    pub cycle: u64,
    pub epoch: u64,
    pub seed: u64,
    /// Sampler stream position (a u128, kept as a decimal string).
    pub sampler_position: String,
    pub optimizer_steps: BTreeMap<String, u64>,
    pub data_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: the state plus the run settings it was saved with.
pub struct Checkpoint {
    pub state: TrainingState,
    pub schedule: TrainingSchedule,
    pub objective: ObjectiveConfig,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

const OPTIMIZERS: [&str; 3] = ["coarse", "fine", "discriminators"];

fn adams(state: &TrainingState) -> [&Adam; 3] {
    [&state.adam_coarse, &state.adam_fine, &state.adam_discriminators]
}

fn adams_mut(state: &mut TrainingState) -> [&mut Adam; 3] {
    [
        &mut state.adam_coarse,
        &mut state.adam_fine,
        &mut state.adam_discriminators,
    ]
}

/// Every tensor of the state under its archive name.
pub fn collect_tensors(state: &mut TrainingState) -> BTreeMap<String, ArrayD<f64>> {
    let mut all = state_dict(&mut state.coarse, "coarse");
    all.extend(state_dict(&mut state.fine, "fine"));
    all.extend(state_dict(&mut state.discriminators, "discriminators"));
    for (opt, adam) in OPTIMIZERS.iter().zip(adams(state)) {
        for (name, m) in adam.moments() {
            all.insert(format!("adam.{opt}.first.{name}"), m.first.clone());
            all.insert(format!("adam.{opt}.second.{name}"), m.second.clone());
        }
    }
    all
}

/// Serializes the state to bytes.
pub fn to_bytes(state: &mut TrainingState, schedule: &TrainingSchedule, objective: &ObjectiveConfig) -> Result<Vec<u8>> {
    let tensors = collect_tensors(state);
    let mut data = Vec::new();
    let mut index = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        index.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        for v in t.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len() as u64;
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: state.model.clone(),
        schedule: schedule.clone(),
        objective: *objective,
        cycle: state.cycle,
        epoch: state.epoch,
        seed: state.seed,
        sampler_position: state.sampler_position().to_string(),
        optimizer_steps: OPTIMIZERS
            .iter()
            .zip(adams(state))
            .map(|(n, a)| (n.to_string(), a.steps()))
            .collect(),
        data_sha256: hex(&Sha256::digest(&data)),
        tensors: index,
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 12 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save(path: &Path, state: &mut TrainingState, schedule: &TrainingSchedule, objective: &ObjectiveConfig) -> Result<()> {
    let bytes = to_bytes(state, schedule, objective)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses and verifies the header, returning it with the data section.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint archive (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20usize.saturating_add(len))
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let data = &bytes[20 + len..];
    if hex(&Sha256::digest(data)) != header.data_sha256 {
        return Err(corrupt("data section does not match its checksum"));
    }
    Ok((header, data))
}

fn decode_tensors(header: &CheckpointHeader, data: &[u8]) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let mut out = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = (e.offset as usize).checked_mul(8).ok_or_else(|| corrupt("bad offset"))?;
        let bytes = data
            .get(start..start + n * 8)
            .ok_or_else(|| corrupt(format!("tensor {} runs past the data section", e.name)))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = ArrayD::from_shape_vec(IxDyn(&e.shape), values).map_err(|err| corrupt(err.to_string()))?;
        out.insert(e.name.clone(), t);
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, data) = read_header(bytes)?;
    let tensors = decode_tensors(&header, data)?;
    let as_checkpoint_err = |e: Error| corrupt(e.to_string());
    let mut state = TrainingState::new(header.model.clone(), header.schedule.adam(), header.seed)
        .map_err(as_checkpoint_err)?;
    load_state_dict(&mut state.coarse, "coarse", &tensors).map_err(as_checkpoint_err)?;
    load_state_dict(&mut state.fine, "fine", &tensors).map_err(as_checkpoint_err)?;
    load_state_dict(&mut state.discriminators, "discriminators", &tensors).map_err(as_checkpoint_err)?;
    for (opt, adam) in OPTIMIZERS.iter().zip(adams_mut(&mut state)) {
        let steps = *header
            .optimizer_steps
            .get(*opt)
            .ok_or_else(|| corrupt(format!("no step count for optimizer {opt}")))?;
        adam.set_steps(steps);
        for (name, m) in adam.moments_mut() {
            for (kind, target) in [("first", &mut m.first), ("second", &mut m.second)] {
                let key = format!("adam.{opt}.{kind}.{name}");
                let v = tensors
                    .get(&key)
                    .ok_or_else(|| corrupt(format!("missing {key}")))?;
                if v.shape() != target.shape() {
                    return Err(corrupt(format!("{key} has shape {:?}", v.shape())));
                }
                target.assign(v);
            }
        }
    }
    state.cycle = header.cycle;
    state.epoch = header.epoch;
    let pos: u128 = header
        .sampler_position
        .parse()
        .map_err(|_| corrupt("bad sampler position"))?;
    state.set_sampler_position(pos);
    Ok(Checkpoint {
        state,
        schedule: header.schedule,
        objective: header.objective,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
