//! Binary checkpoints.
//!
//! Layout: 8-byte magic `SLMODEL\0`, u32 LE version, u64 LE header length,
//! a JSON [`CheckpointHeader`], then every parameter as f64 LE in canonical
//! layer order (weights before bias). Round trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerId, ModelSpec, SplitHeadModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SLMODEL\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub id: LayerId,
    pub weight_shape: Vec<usize>,
    pub bias_shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch_tag: String,
    pub spec: ModelSpec,
    pub config_hash: String,
    pub layers: Vec<LayerRecord>,
}

pub fn save_checkpoint(path: &Path, model: &SplitHeadModel, config_hash: &str) -> Result<()> {
    let layers = model
        .layer_ids()
        .into_iter()
        .map(|id| {
            let (w, b) = model.params(id).expect("listed layer exists");
            LayerRecord {
                id,
                weight_shape: w.shape().to_vec(),
                bias_shape: b.shape().to_vec(),
                trainable: model.is_trainable(id),
            }
        })
        .collect();
    let header = CheckpointHeader {
        arch_tag: model.arch_tag().to_string(),
        spec: model.spec().clone(),
        config_hash: config_hash.to_string(),
        layers,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + model.num_params() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for id in model.layer_ids() {
        let (w, b) = model.params(id).expect("listed layer exists");
        for v in w.data().iter().chain(b.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(SplitHeadModel, CheckpointHeader)> {
    let bytes = fs::read(path)?;
    let err = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    let take = |offset: usize, n: usize| {
        bytes
            .get(offset..offset + n)
            .ok_or_else(|| err(offset, format!("truncated: need {n} bytes")))
    };
    if take(0, 8)? != MAGIC {
        return Err(err(0, "not a model checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(8, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(err(8, format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(take(12, 8)?.try_into().unwrap()) as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(take(20, header_len)?).map_err(|e| err(20, format!("bad header: {e}")))?;

    let mut model = SplitHeadModel::zeros(&header.spec)?;
    if header.layers.len() != model.layer_ids().len() {
        return Err(err(20, "layer list does not match the architecture".into()));
    }
    let mut offset = 20 + header_len;
    let read_tensor = |shape: &[usize], offset: &mut usize| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = take(*offset, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *offset += n * 8;
        Tensor::new(shape.to_vec(), data).map_err(|e| err(*offset, e.to_string()))
    };
    for rec in &header.layers {
        let w = read_tensor(&rec.weight_shape, &mut offset)?;
        let b = read_tensor(&rec.bias_shape, &mut offset)?;
        model.set_params(rec.id, w, b).map_err(|e| err(offset, e.to_string()))?;
        model.set_trainable(rec.id, rec.trainable);
    }
    if offset != bytes.len() {
        return Err(err(offset, format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((model, header))
}
