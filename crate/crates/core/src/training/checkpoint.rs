//! `MFCK1` checkpoint files: model spec and training metadata as JSON, then
//! every parameter tensor with its trainable flag.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::autograd::{ParamStore, Tensor};
use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MFCK1";
pub const CHECKPOINT_VERSION: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub train: Option<TrainConfig>,
    pub registry_hash: String,
    pub best_val_auroc: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &Model, meta: CheckpointMeta) -> Self {
        Checkpoint { meta, store: model.store.clone() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let meta = serde_json::to_vec(&self.meta)?;
        w.u32(meta.len());
        w.bytes(&meta);
        w.u32(self.store.len());
        for (_, name, t) in self.store.iter() {
            w.str(name);
            w.u8(t.shape().len() as u8);
            t.shape().iter().for_each(|&d| w.u32(d));
            w.u8(u8::from(t.requires_grad()));
            w.f64s(t.data());
        }
        Ok(w.buf)
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(data, path);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(n)?).map_err(|e| r.fail(format!("metadata: {e}")))?;
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let trainable = r.u8()? != 0;
            let len = shape.iter().product();
            let id = store.add(name, Tensor::new(shape, r.f64s(len)?)?);
            store.get_mut(id).set_requires_grad(trainable);
        }
        if !r.is_done() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(Checkpoint { meta, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuilds the model and checks the stored parameters match its layout.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.meta.spec)?;
        if model.store.len() != self.store.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {} parameters, model has {}",
                self.store.len(),
                model.store.len()
            )));
        }
        for ((id, want, _), (_, got, t)) in model.store.clone().iter().zip(self.store.iter()) {
            if want != got {
                return Err(Error::invalid(format!("checkpoint parameter `{got}` where `{want}` was expected")));
            }
            let dst = model.store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::dim(format!("parameter {got}: {:?} vs {:?}", dst.shape(), t.shape())));
            }
            dst.data_mut().copy_from_slice(t.data());
            dst.set_requires_grad(t.requires_grad());
        }
        Ok(model)
    }
}
