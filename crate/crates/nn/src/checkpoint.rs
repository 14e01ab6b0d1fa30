//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `HCNN`, format version `u16`, descriptor length
//! `u32` followed by a JSON descriptor (model spec, learning settings, seed,
//! history, early-stopping and optimizer counters), then four `f32` blobs each
//! prefixed by a `u64` element count: weights, first moments, second moments,
//! best-validation weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::network::Network;
use crate::optim::{OptimizerKind, OptimizerState};
use crate::spec::ModelSpec;
use crate::train::{BestSnapshot, EpochStats, LearnConfig, TrainedModel};

pub const MAGIC: &[u8; 4] = b"HCNN";
pub const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    spec: ModelSpec,
    learn: LearnConfig,
    seed: u64,
    history: Vec<EpochStats>,
    early_stopped: bool,
    wait: usize,
    best_epoch: Option<usize>,
    best_loss: Option<f64>,
    optimizer: OptimizerKind,
    learning_rate: f64,
    step: u64,
}

fn write_blob<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_blob<R: Read>(r: &mut R) -> Result<Vec<f32>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; len * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_checkpoint<W: Write>(model: &TrainedModel<f32>, mut w: W) -> Result<()> {
    let desc = Descriptor {
        spec: model.spec().clone(),
        learn: model.learn.clone(),
        seed: model.seed,
        history: model.history.clone(),
        early_stopped: model.early_stopped,
        wait: model.wait,
        best_epoch: model.best.as_ref().map(|b| b.epoch),
        best_loss: model.best.as_ref().map(|b| b.loss),
        optimizer: model.optimizer.kind,
        learning_rate: model.optimizer.learning_rate,
        step: model.optimizer.step,
    };
    let json = serde_json::to_vec(&desc).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    write_blob(&mut w, model.network.params())?;
    write_blob(&mut w, &model.optimizer.first)?;
    write_blob(&mut w, &model.optimizer.second)?;
    write_blob(&mut w, model.best.as_ref().map_or(&[][..], |b| &b.params))?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<TrainedModel<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let mut version = [0u8; 2];
    r.read_exact(&mut version)?;
    let version = u16::from_le_bytes(version);
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let desc: Descriptor =
        serde_json::from_slice(&json).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let params = read_blob(&mut r)?;
    let first = read_blob(&mut r)?;
    let second = read_blob(&mut r)?;
    let best_params = read_blob(&mut r)?;

    let network = Network::from_params(&desc.spec, params)?;
    let optimizer = OptimizerState {
        kind: desc.optimizer,
        learning_rate: desc.learning_rate,
        step: desc.step,
        first,
        second,
    };
    let best = match (desc.best_epoch, desc.best_loss) {
        (Some(epoch), Some(loss)) => Some(BestSnapshot {
            epoch,
            loss,
            params: best_params,
        }),
        _ => None,
    };
    Ok(TrainedModel {
        network,
        optimizer,
        learn: desc.learn,
        seed: desc.seed,
        history: desc.history,
        early_stopped: desc.early_stopped,
        best,
        wait: desc.wait,
    })
}

pub fn save_checkpoint(model: &TrainedModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel<f32>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
