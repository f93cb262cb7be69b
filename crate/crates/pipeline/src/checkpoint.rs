//! Stage checkpoints.
//!
//! Layout: `AVSC`, a little-endian `u32` header length, the JSON header, then
//! every tensor's raw little-endian values in header order (parameters, then
//! Adam moments). Values round-trip bit-exactly at the stored precision.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use avsep_core::model::{Model, ModelConfig, Stage};
use avsep_core::tensor::ParamStore;
use avsep_core::{DType, Scalar};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{PipelineError, Result};
use crate::optim::{Adam, PlateauScheduler};

const MAGIC: &[u8; 4] = b"AVSC";
const FORMAT_VERSION: u32 = 1;

/// SHA-256 of the model configuration's canonical JSON.
pub fn fingerprint(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("model config serialises");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub stage: Stage,
    /// Content hash; filled in on save.
    pub id: String,
    /// Id of the coarse checkpoint a fine model was initialised from.
    pub parent: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fingerprint: String,
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub dtype: DType,
    pub adam_step: u64,
    pub scheduler: PlateauScheduler,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub struct StageCheckpoint<T: Scalar> {
    pub meta: CheckpointMeta,
    pub model: Model<T>,
    pub adam: Adam<T>,
}

impl<T: Scalar> StageCheckpoint<T> {
    pub fn new(model: Model<T>, train: TrainConfig, parent: Option<String>) -> Self {
        let adam = Adam::new(model.store.len());
        let scheduler = PlateauScheduler::new(train.lr, train.lr_factor, train.patience);
        Self {
            meta: CheckpointMeta {
                format: FORMAT_VERSION,
                stage: model.stage,
                id: String::new(),
                parent,
                fingerprint: fingerprint(&model.cfg),
                model: model.cfg.clone(),
                train,
                epoch: 0,
                best_val: None,
                dtype: T::DTYPE,
                adam_step: 0,
                scheduler,
            },
            model,
            adam,
        }
    }
}

fn tensors<T: Scalar>(store: &ParamStore<T>, adam: &Adam<T>) -> Vec<(TensorEntry, ArrayD<T>)> {
    let mut out = Vec::new();
    for (_, p) in store.iter() {
        out.push((
            TensorEntry {
                name: p.name.clone(),
                kind: TensorKind::Param,
                shape: p.value.shape().to_vec(),
            },
            p.value.clone(),
        ));
    }
    for (kind, moments) in [(TensorKind::AdamM, &adam.m), (TensorKind::AdamV, &adam.v)] {
        for (id, m) in store.ids().zip(moments) {
            if let Some(m) = m {
                out.push((
                    TensorEntry {
                        name: store.param(id).name.clone(),
                        kind,
                        shape: m.shape().to_vec(),
                    },
                    m.clone(),
                ));
            }
        }
    }
    out
}

/// Writes `ckpt` to `path`, setting `ckpt.meta.id` to the content hash.
pub fn save<T: Scalar>(ckpt: &mut StageCheckpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let entries = tensors(&ckpt.model.store, &ckpt.adam);
    let mut data = Vec::new();
    for (_, a) in &entries {
        let a = a.as_standard_layout();
        data.extend(T::to_le_bytes_vec(a.as_slice().unwrap()));
    }
    ckpt.meta.adam_step = ckpt.adam.step;
    ckpt.meta.dtype = T::DTYPE;
    let mut header = Header {
        meta: CheckpointMeta {
            id: String::new(),
            ..ckpt.meta.clone()
        },
        tensors: entries.into_iter().map(|(e, _)| e).collect(),
    };
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&header)?);
    h.update(&data);
    header.meta.id = hex::encode(&h.finalize()[..8]);
    ckpt.meta.id = header.meta.id.clone();
    let json = serde_json::to_vec(&header)?;
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u32).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&data)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint(msg.into())
}

/// Reads only the header.
pub fn read_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    Ok(read_header(&mut fs::File::open(path)?)?.meta)
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.meta.format != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.meta.format)));
    }
    Ok(header)
}

fn decode(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_chunk(c) as f64).collect(),
        DType::F64 => bytes.chunks_exact(8).map(f64::from_le_chunk).collect(),
    }
}

/// Loads a checkpoint at precision `T` (converting if it was stored at the other one).
pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<StageCheckpoint<T>> {
    let mut f = fs::File::open(path)?;
    let header = read_header(&mut f)?;
    let mut data = Vec::new();
    f.read_to_end(&mut data)?;
    let meta = header.meta;
    let mut model = Model::<T>::build(&meta.model, meta.stage, 0)?;
    let mut adam = Adam::new(model.store.len());
    adam.step = meta.adam_step;
    let width = match meta.dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut offset = 0;
    let mut seen = vec![false; model.store.len()];
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = offset + n * width;
        if end > data.len() {
            return Err(bad(format!("truncated data for {}", e.name)));
        }
        let values: Vec<T> = decode(&data[offset..end], meta.dtype).into_iter().map(T::lit).collect();
        offset = end;
        let id = model.store.id(&e.name).ok_or_else(|| bad(format!("unknown tensor {}", e.name)))?;
        if model.store.value(id).shape() != e.shape.as_slice() {
            return Err(bad(format!("shape mismatch for {}", e.name)));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values).map_err(|err| bad(err.to_string()))?;
        match e.kind {
            TensorKind::Param => {
                model.store.value_mut(id).assign(&arr);
                seen[id.index()] = true;
            }
            TensorKind::AdamM => adam.m[id.index()] = Some(arr),
            TensorKind::AdamV => adam.v[id.index()] = Some(arr),
        }
    }
    if offset != data.len() {
        return Err(bad("trailing data"));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = model.store.iter().nth(i).map(|(_, p)| p.name.clone()).unwrap_or_default();
        return Err(bad(format!("missing tensor {name}")));
    }
    Ok(StageCheckpoint { meta, model, adam })
}
