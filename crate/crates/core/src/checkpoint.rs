//! On-disk checkpoints.
//!
//! A training checkpoint is a directory holding `checkpoint.json` (config,
//! backbone description, head, optimizer step, RNG and data-stream state,
//! mining selections, queue and log) and `tensors.bin` (encoder parameters,
//! optimizer moments and momentum-encoder parameters as little-endian `f64`).
//! Floats round-trip exactly, so a resumed run continues bit-identically.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scorer::{backbone_from_json, Backbone, CoherenceScorer, LinearHead};
use crate::trainer::{Trainer, TrainerConfig, TrainerState};

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const TENSORS_BIN: &str = "tensors.bin";
/// Marker file of a standalone encoder directory.
pub const ENCODER_CONFIG: &str = "encoder.json";
const ENCODER_BIN: &str = "encoder.bin";
const MAGIC: &[u8; 4] = b"COHT";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BackboneRecord {
    id: String,
    config: serde_json::Value,
    dim: usize,
}

impl BackboneRecord {
    fn of(b: &Arc<dyn Backbone>) -> Self {
        BackboneRecord {
            id: b.id().to_string(),
            config: b.config_json(),
            dim: b.dim(),
        }
    }

    fn build(&self) -> Result<Arc<dyn Backbone>> {
        let b = backbone_from_json(&self.id, &self.config)?;
        if b.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: b.dim(),
            });
        }
        Ok(b)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: TrainerConfig,
    backbone: BackboneRecord,
    head: LinearHead,
    /// Trainer state with the large tensors moved to `tensors.bin`.
    state: TrainerState,
}

fn write_groups(path: &Path, groups: &[&[f64]]) -> Result<()> {
    let total: usize = groups.iter().map(|g| g.len()).sum();
    let mut buf = Vec::with_capacity(12 + 8 * (total + groups.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for g in groups {
        buf.extend_from_slice(&(g.len() as u64).to_le_bytes());
        for x in *g {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_groups(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = || Error::Checkpoint(format!("{} is truncated or corrupt", path.display()));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "tensor format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut groups = Vec::with_capacity(count);
    for _ in 0..count {
        let len_bytes = bytes.get(pos..pos + 8).ok_or_else(corrupt)?;
        let len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 8;
        let body = bytes.get(pos..pos + 8 * len).ok_or_else(corrupt)?;
        groups.push(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
        pos += 8 * len;
    }
    if pos != bytes.len() {
        return Err(corrupt());
    }
    Ok(groups)
}

/// Writes the full training state of `trainer` into `dir`.
pub fn save(dir: &Path, trainer: &Trainer<'_>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut state = trainer.state.clone();
    let m = std::mem::take(&mut state.optimizer.m);
    let v = std::mem::take(&mut state.optimizer.v);
    let momentum_flat = state.momentum.as_mut().map(|me| {
        let flat = me.params.flat();
        me.params = ParamSet::default();
        flat
    });
    let encoder = trainer.scorer.encoder.flat();
    let mut groups: Vec<&[f64]> = vec![&encoder, &m, &v];
    if let Some(f) = &momentum_flat {
        groups.push(f);
    }
    write_groups(&dir.join(TENSORS_BIN), &groups)?;
    let file = CheckpointFile {
        version: FORMAT_VERSION,
        config: trainer.config.clone(),
        backbone: BackboneRecord::of(trainer.scorer.backbone()),
        head: trainer.scorer.head.clone(),
        state,
    };
    let path = dir.join(CHECKPOINT_JSON);
    fs::write(&path, serde_json::to_vec(&file)?).map_err(|e| Error::io(&path, e))
}

/// A training checkpoint read back from disk.
pub struct Loaded {
    pub config: TrainerConfig,
    pub scorer: CoherenceScorer,
    pub state: TrainerState,
}

impl Loaded {
    /// Resumes training on `dataset` with dev pairs `dev`.
    pub fn into_trainer<'a>(
        self,
        dataset: &'a [crate::taskgen::TrainingInstance],
        dev: &'a [crate::taskgen::EvalPair],
    ) -> Result<Trainer<'a>> {
        Trainer::from_parts(self.config, self.scorer, self.state, dataset, dev)
    }
}

pub fn load(dir: &Path) -> Result<Loaded> {
    let path = dir.join(CHECKPOINT_JSON);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let head: serde_json::Value = serde_json::from_slice(&text)?;
    let version = head.get("version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "{}: version {version:?}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    let mut file: CheckpointFile = serde_json::from_value(head)?;
    let backbone = file.backbone.build()?;
    let mut groups = read_groups(&dir.join(TENSORS_BIN))?.into_iter();
    let mut next = || {
        groups
            .next()
            .ok_or_else(|| Error::Checkpoint("missing tensor group".into()))
    };
    let mut encoder = backbone.init_params(0);
    encoder.set_flat(&next()?)?;
    let scorer = CoherenceScorer::from_parts(backbone, encoder.clone(), file.head)?;
    file.state.optimizer.m = next()?;
    file.state.optimizer.v = next()?;
    if let Some(me) = &mut file.state.momentum {
        let mut params = encoder;
        params.set_flat(&next()?)?;
        me.params = params;
    }
    Ok(Loaded {
        config: file.config,
        scorer,
        state: file.state,
    })
}

/// Reads only the scorer from a training checkpoint or a scorer directory.
pub fn load_scorer(dir: &Path) -> Result<CoherenceScorer> {
    if dir.join(CHECKPOINT_JSON).exists() {
        return Ok(load(dir)?.scorer);
    }
    let (backbone, encoder) = load_encoder(dir)?;
    let path = dir.join("head.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    CoherenceScorer::from_parts(backbone, encoder, serde_json::from_slice(&text)?)
}

/// Writes a standalone scorer (encoder plus head) to `dir`.
pub fn save_scorer(dir: &Path, scorer: &CoherenceScorer) -> Result<()> {
    save_encoder(dir, scorer.backbone(), &scorer.encoder)?;
    let path = dir.join("head.json");
    fs::write(&path, serde_json::to_vec(&scorer.head)?).map_err(|e| Error::io(&path, e))
}

/// Writes encoder weights in the layout read by pretrained backbones.
pub fn save_encoder(dir: &Path, backbone: &Arc<dyn Backbone>, params: &ParamSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(ENCODER_CONFIG);
    fs::write(&path, serde_json::to_vec_pretty(&BackboneRecord::of(backbone))?)
        .map_err(|e| Error::io(&path, e))?;
    write_groups(&dir.join(ENCODER_BIN), &[&params.flat()])
}

pub fn load_encoder(dir: &Path) -> Result<(Arc<dyn Backbone>, ParamSet)> {
    let path = dir.join(ENCODER_CONFIG);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let record: BackboneRecord = serde_json::from_slice(&text)?;
    let backbone = record.build()?;
    let groups = read_groups(&dir.join(ENCODER_BIN))?;
    let [flat] = <[Vec<f64>; 1]>::try_from(groups)
        .map_err(|_| Error::Checkpoint("encoder file must hold one tensor group".into()))?;
    let mut params = backbone.init_params(0);
    params.set_flat(&flat)?;
    Ok((backbone, params))
}
