use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::archive::{Archive, DType};
use crate::error::{GmsError, Result};
use crate::lmm::LmmModel;
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::TokenizerKind;

const KIND: &str = "gms-checkpoint";

/// LMM weights, optimizer moments and the provenance needed to resume or
/// evaluate.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: LmmModel<T>,
    pub optimizer: AdamW<T>,
    pub tokenizer_kind: TokenizerKind,
    /// Parameter hash of the tokenizer the model was trained against.
    pub tokenizer_hash: String,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_dsc: Option<f64>,
}

fn stored<T: Scalar>(a: &Archive, name: &str) -> Result<Tensor<T>> {
    let t = a
        .get(name)
        .ok_or_else(|| GmsError::Format(format!("checkpoint has no tensor {name:?}")))?;
    Ok(match t.dtype {
        DType::F32 => t.to_tensor::<f32>()?.cast(),
        DType::F64 => t.to_tensor::<f64>()?.cast(),
    })
}

fn parse<V: serde::de::DeserializeOwned>(a: &Archive, key: &str) -> Result<V> {
    serde_json::from_str(a.meta(key)?)
        .map_err(|e| GmsError::Format(format!("checkpoint field {key}: {e}")))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        self.model.save_into(&mut a, "lmm.")?;
        let store = self.model.params();
        let (first, second, step) = self.optimizer.state();
        for (id, (m, v)) in store.ids().zip(first.iter().zip(second)) {
            a.insert_tensor(format!("adamw.m.{}", store.name(id)), m)?;
            a.insert_tensor(format!("adamw.v.{}", store.name(id)), v)?;
        }
        let meta = [
            ("kind", KIND.to_string()),
            ("dtype", T::DTYPE.to_string()),
            ("epoch", self.epoch.to_string()),
            ("best_val_dsc", serde_json::to_string(&self.best_val_dsc)?),
            ("tokenizer_kind", self.tokenizer_kind.to_string()),
            ("tokenizer_hash", self.tokenizer_hash.clone()),
            ("train_config", serde_json::to_string(&self.config)?),
            (
                "adamw_config",
                serde_json::to_string(&self.optimizer.config)?,
            ),
            ("adamw_step", step.to_string()),
        ];
        a.metadata.extend(meta.map(|(k, v)| (k.to_string(), v)));
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta("kind")? != KIND {
            return Err(GmsError::Format(format!(
                "archive kind {:?} is not a checkpoint",
                a.meta("kind")?
            )));
        }
        let model = LmmModel::<T>::load_from(a, "lmm.")?;
        let store = model.params();
        let mut first = Vec::with_capacity(store.len());
        let mut second = Vec::with_capacity(store.len());
        for id in store.ids() {
            first.push(stored(a, &format!("adamw.m.{}", store.name(id)))?);
            second.push(stored(a, &format!("adamw.v.{}", store.name(id)))?);
        }
        let adamw_config: AdamWConfig = parse(a, "adamw_config")?;
        let step: u64 = parse(a, "adamw_step")?;
        let optimizer = AdamW::restore(store, adamw_config, first, second, step)?;
        Ok(Checkpoint {
            optimizer,
            tokenizer_kind: a
                .meta("tokenizer_kind")?
                .parse()
                .map_err(|_| GmsError::Format("unknown tokenizer kind".into()))?,
            tokenizer_hash: a.meta("tokenizer_hash")?.to_string(),
            config: parse(a, "train_config")?,
            epoch: parse(a, "epoch")?,
            best_val_dsc: parse(a, "best_val_dsc")?,
            model,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_archive()?.to_bytes()
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}
