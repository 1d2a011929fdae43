//! Checkpoint directories: `manifest.json` describing every tensor plus
//! `weights.bin`, one flat little-endian blob.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::{AdamW, RngState, Trainer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CHECKPOINT_FORMAT: u32 = 1;

const MOMENT1: &str = "optim.m.";
const MOMENT2: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weights blob.
    pub offset: usize,
    pub dtype: DType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub step: usize,
    pub optimizer_steps: u64,
    pub rng: RngState,
    pub blob_len: usize,
    pub sha256: String,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Everything a checkpoint holds, with tensors converted to `T`.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub config: RunConfig,
    pub step: usize,
    pub optimizer_steps: u64,
    pub rng: RngState,
    pub params: Vec<(String, Tensor<T>)>,
    /// First and second Adam moments by parameter name.
    pub moments: Vec<(String, Tensor<T>, Tensor<T>)>,
}

fn push_tensor<T: Scalar>(blob: &mut Vec<u8>, entries: &mut Vec<TensorEntry>, name: String, t: &Tensor<T>) {
    entries.push(TensorEntry {
        name,
        shape: t.shape().to_vec(),
        offset: blob.len(),
        dtype: T::DTYPE,
    });
    for &x in t.data() {
        x.write_le(blob);
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes parameters and, when given, optimizer state to `dir`.
pub fn save<T: Scalar>(
    dir: &Path,
    config: &RunConfig,
    store: &ParamStore<T>,
    opt: Option<&AdamW<T>>,
    step: usize,
    rng: RngState,
) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for id in store.ids() {
        push_tensor(&mut blob, &mut tensors, store.name(id).to_owned(), store.get(id));
    }
    if let Some(opt) = opt {
        for id in store.ids() {
            let i = id.index();
            if let (Some(m), Some(v)) = (&opt.m[i], &opt.v[i]) {
                push_tensor(&mut blob, &mut tensors, format!("{MOMENT1}{}", store.name(id)), m);
                push_tensor(&mut blob, &mut tensors, format!("{MOMENT2}{}", store.name(id)), v);
            }
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT,
        step,
        optimizer_steps: opt.map_or(0, |o| o.t),
        rng,
        blob_len: blob.len(),
        sha256: sha256_hex(&blob),
        config: config.clone(),
        tensors,
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(WEIGHTS_FILE), &blob)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Saves a trainer's full state.
pub fn save_trainer<T: Scalar>(dir: &Path, tr: &Trainer<T>) -> Result<()> {
    save(dir, &tr.config, &tr.store, Some(&tr.opt), tr.step, RngState::capture(&tr.rng))
}

fn read_tensor<T: Scalar>(blob: &[u8], e: &TensorEntry) -> Result<Tensor<T>> {
    let n: usize = e.shape.iter().product();
    let size = e.dtype.size_of();
    let end = e.offset.checked_add(n * size).filter(|&end| end <= blob.len());
    let Some(end) = end else {
        return Err(Error::Checkpoint(format!("tensor `{}` runs past the end of the blob", e.name)));
    };
    let bytes = &blob[e.offset..end];
    let data: Vec<T> = match e.dtype {
        DType::F32 => bytes.chunks_exact(4).map(|b| T::of(f64::from(f32::read_le(b)))).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
    };
    Tensor::new(&e.shape, data)
}

/// Reads and verifies a checkpoint directory.
pub fn load<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {}", manifest.format)));
    }
    let blob = std::fs::read(dir.join(WEIGHTS_FILE))?;
    let digest = sha256_hex(&blob);
    if blob.len() != manifest.blob_len || digest != manifest.sha256 {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: weights blob has {} bytes with sha256 {digest}, manifest records {} bytes with {}",
            blob.len(),
            manifest.blob_len,
            manifest.sha256
        )));
    }
    manifest.config.validate()?;
    let mut params = Vec::new();
    let mut first = std::collections::BTreeMap::new();
    let mut second = std::collections::BTreeMap::new();
    for e in &manifest.tensors {
        let t = read_tensor::<T>(&blob, e)?;
        if let Some(name) = e.name.strip_prefix(MOMENT1) {
            first.insert(name.to_owned(), t);
        } else if let Some(name) = e.name.strip_prefix(MOMENT2) {
            second.insert(name.to_owned(), t);
        } else {
            params.push((e.name.clone(), t));
        }
    }
    let mut moments = Vec::new();
    for (name, m) in first {
        let v = second
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("second moment of `{name}` missing")))?;
        moments.push((name, m, v));
    }
    if let Some(name) = second.keys().next() {
        return Err(Error::Checkpoint(format!("first moment of `{name}` missing")));
    }
    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        optimizer_steps: manifest.optimizer_steps,
        rng: manifest.rng,
        params,
        moments,
    })
}

impl<T: Scalar> Checkpoint<T> {
    /// Copies the saved parameters into `store` after checking that names
    /// and shapes agree one-to-one.
    pub fn apply_params(&self, store: &mut ParamStore<T>) -> Result<()> {
        let saved: std::collections::HashMap<&str, &Tensor<T>> =
            self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let name = store.name(id);
            let expect = store.get(id).shape();
            match saved.get(name) {
                None => {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch: tensor `{name}` {expect:?} is absent from the checkpoint"
                    )))
                }
                Some(t) if t.shape() != expect => {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch: tensor `{name}` is {:?} in the checkpoint but {expect:?} in the model",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some((name, t)) = self.params.iter().find(|(n, _)| store.find(n).is_none()) {
            return Err(Error::Checkpoint(format!(
                "shape mismatch: checkpoint tensor `{name}` {:?} has no counterpart in the model",
                t.shape()
            )));
        }
        for id in ids {
            let t = saved[store.name(id)].clone();
            store.set(id, t)?;
        }
        Ok(())
    }

    /// Optimizer state aligned with `store`.
    pub fn optimizer(&self, store: &ParamStore<T>) -> Result<AdamW<T>> {
        let mut opt = AdamW::new(store.len());
        opt.t = self.optimizer_steps;
        for (name, m, v) in &self.moments {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown tensor `{name}`")))?;
            if m.shape() != store.get(id).shape() || v.shape() != m.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch: optimizer state of tensor `{name}`")));
            }
            opt.m[id.index()] = Some(m.clone());
            opt.v[id.index()] = Some(v.clone());
        }
        Ok(opt)
    }

    /// Restores parameters, optimizer, step and RNG into `tr`.
    pub fn resume(&self, tr: &mut Trainer<T>) -> Result<()> {
        self.apply_params(&mut tr.store)?;
        tr.opt = self.optimizer(&tr.store)?;
        tr.step = self.step;
        tr.rng = self.rng.restore()?;
        Ok(())
    }
}
