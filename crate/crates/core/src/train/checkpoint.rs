//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DITF" | version u32 | meta_len u32 | meta json (model + train config)
//! | n_tensors u32 | tensors… | step u64 | adam_step u64
//! | rng seed [u8;32] | rng stream u64 | rng word_pos u128 | crc32 u32
//! ```
//!
//! Each tensor record is `name_len u32 | name | dtype u8 | rank u8
//! | dims u64×rank | payload`. Optimizer moments ride along under
//! `adam.m.<name>` / `adam.v.<name>`. The trailing CRC32 covers every
//! preceding byte, so save → load → save is byte-identical and any
//! single-byte corruption is detected.

use std::collections::BTreeMap;
use std::path::Path;

use super::{AdamW, Result, TrainConfig, TrainError, TrainerState};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::{Rng, RngState};
use crate::tensor::Scalar;

const MAGIC: &[u8; 4] = b"DITF";
const VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
}

fn push_tensor<T: Scalar>(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(T::DTYPE as u8);
    buf.push(shape.len() as u8);
    for d in shape {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes_vec());
    }
}

/// Serializes the full trainer state.
pub fn save_checkpoint<T: Scalar>(state: &TrainerState<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&Meta {
        model: state.params.config.clone(),
        train: state.train_config.clone(),
    })
    .map_err(|e| TrainError::Corrupt(e.to_string()))?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);

    let (adam_step, moments) = state.optimizer.state();
    let n_params = state.params.named_tensors().len();
    let n_tensors = n_params + 2 * moments.len();
    buf.extend_from_slice(&(n_tensors as u32).to_le_bytes());
    state.params.for_each_tensor(|name, t| {
        push_tensor(&mut buf, name, t.shape(), t.data());
    });
    for (name, (m, v)) in moments {
        push_tensor(&mut buf, &format!("adam.m.{name}"), &[m.len()], m);
        push_tensor(&mut buf, &format!("adam.v.{name}"), &[v.len()], v);
    }

    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&adam_step.to_le_bytes());
    let rng = state.rng.state();
    buf.extend_from_slice(&rng.seed);
    buf.extend_from_slice(&rng.stream.to_le_bytes());
    buf.extend_from_slice(&rng.word_pos.to_le_bytes());

    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, &buf).map_err(|e| TrainError::Io(format!("{path:?}: {e}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TrainError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint saved with [`save_checkpoint`]. The scalar type must
/// match the stored dtype.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainerState<T>> {
    let bytes = std::fs::read(path).map_err(|e| TrainError::Io(format!("{path:?}: {e}")))?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(TrainError::Corrupt("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(TrainError::CrcMismatch);
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(TrainError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TrainError::VersionMismatch { found: version });
    }
    let meta_len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| TrainError::Corrupt(format!("meta: {e}")))?;

    let n_tensors = r.u32()? as usize;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<T>)> = BTreeMap::new();
    let elem = std::mem::size_of::<T>();
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| TrainError::Corrupt(e.to_string()))?;
        let dtype = r.take(1)?[0];
        if dtype != T::DTYPE as u8 {
            return Err(TrainError::DtypeMismatch);
        }
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * elem)?;
        let data: Vec<T> = payload.chunks_exact(elem).map(T::from_le_slice).collect();
        tensors.insert(name, (shape, data));
    }

    let step = r.u64()?;
    let adam_step = r.u64()?;
    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32)?);
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    if r.pos != body.len() {
        return Err(TrainError::Corrupt("trailing bytes".into()));
    }

    // rebuild the parameter container, then overwrite every tensor
    let mut params: ModelParams<T> = ModelParams::init(&meta.model, 0)?;
    let mut missing: Option<String> = None;
    let mut bad: Option<String> = None;
    params.for_each_tensor_mut(|name, t| {
        if missing.is_some() || bad.is_some() {
            return;
        }
        match tensors.get(name) {
            None => missing = Some(name.to_string()),
            Some((shape, data)) => {
                if shape != t.shape() {
                    bad = Some(format!(
                        "{name}: stored {shape:?} vs expected {:?}",
                        t.shape()
                    ));
                } else if t.assign(data.clone()).is_err() {
                    bad = Some(name.to_string());
                }
            }
        }
    });
    if let Some(name) = missing {
        return Err(TrainError::MissingTensor(name));
    }
    if let Some(msg) = bad {
        return Err(TrainError::Corrupt(msg));
    }

    let mut moments = BTreeMap::new();
    for (name, (_, data)) in &tensors {
        if let Some(base) = name.strip_prefix("adam.m.") {
            let v_name = format!("adam.v.{base}");
            let v = tensors
                .get(&v_name)
                .ok_or_else(|| TrainError::MissingTensor(v_name))?;
            moments.insert(base.to_string(), (data.clone(), v.1.clone()));
        }
    }

    let mut optimizer = AdamW::new(meta.train.lr);
    optimizer.restore(adam_step, moments);
    Ok(TrainerState {
        params,
        optimizer,
        train_config: meta.train,
        step,
        rng: Rng::restore(&RngState {
            seed,
            stream,
            word_pos,
        }),
    })
}
