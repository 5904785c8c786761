//! Checkpoint container: a magic line, one line of JSON manifest, then raw
//! little-endian `f64` data in manifest order.

use crate::config::RunConfig;
use crate::error::{io_err, ModelError, Result};
use crate::net::Model;
use lflex_autodiff::{AdamW, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const MAGIC: &str = "LFLEX-CHECKPOINT v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

/// Training randomness is counter-based, so its full state is the seed and
/// the next step to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub vocab_size: u32,
    pub mask: u32,
    pub max_len: usize,
    pub rng: RngState,
    /// Present when optimizer moments follow the parameters.
    pub adam: Option<AdamState>,
    pub tensors: Vec<TensorEntry>,
    pub data_bytes: usize,
}

/// Everything needed to resume or to sample.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub opt: Option<AdamW>,
    pub rng: RngState,
}

pub fn save(path: &Path, config: &RunConfig, model: &Model, opt: Option<&AdamW>, rng: RngState) -> Result<()> {
    let s = &model.store;
    let mut tensors = vec![];
    let mut body: Vec<u8> = Vec::new();
    let mut push = |name: String, t: (usize, usize), d: &[f64]| {
        tensors.push(TensorEntry {
            name,
            shape: [t.0, t.1],
            offset: body.len(),
        });
        for x in d {
            body.extend_from_slice(&x.to_le_bytes());
        }
    };
    let ids: Vec<_> = s.ids().collect();
    for &id in &ids {
        let t = s.get(id);
        push(s.name(id).to_string(), t.shape(), &t.data);
    }
    if let Some(o) = opt {
        for &id in &ids {
            push(format!("adam.m.{}", s.name(id)), s.get(id).shape(), &o.m[id.0]);
        }
        for &id in &ids {
            push(format!("adam.v.{}", s.name(id)), s.get(id).shape(), &o.v[id.0]);
        }
    }
    let offset = body.len();
    let manifest = Manifest {
        config: config.clone(),
        vocab_size: model.vocab.size,
        mask: model.vocab.mask,
        max_len: model.max_len,
        rng,
        adam: opt.map(|o| AdamState {
            step: o.step,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        }),
        tensors,
        data_bytes: offset,
    };
    let json = serde_json::to_string(&manifest).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(offset + json.len() + 64);
    buf.extend_from_slice(MAGIC.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(json.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(&body);
    // Write then rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&buf).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bad = |m: String| ModelError::Checkpoint(format!("{}: {m}", path.display()));
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io_err(path))?;
    if line.trim_end() != MAGIC {
        return Err(bad("not a checkpoint (bad magic line)".into()));
    }
    line.clear();
    r.read_line(&mut line).map_err(io_err(path))?;
    let man: Manifest = serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("manifest: {e}")))?;
    let mut raw = vec![];
    r.read_to_end(&mut raw).map_err(io_err(path))?;
    if raw.len() != man.data_bytes {
        return Err(bad(format!(
            "expected {} data bytes, found {}",
            man.data_bytes,
            raw.len()
        )));
    }
    man.config.validate()?;
    let vocab = lflex_core::Vocab::new(man.vocab_size, man.mask)?;
    // Initialization is overwritten below; the seed only fixes the layout.
    let mut rng = lflex_core::rng::stream(0, 0);
    let mut model = Model::new(&man.config.model, vocab, man.max_len, &mut rng)?;
    let read = |e: &TensorEntry| -> Result<Tensor> {
        let n = e.shape[0] * e.shape[1];
        let end = e.offset + n * 8;
        if end > raw.len() {
            return Err(bad(format!("tensor {} runs past the data section", e.name)));
        }
        let data = raw[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(e.shape[0], e.shape[1], data))
    };
    let by_name: std::collections::HashMap<&str, &TensorEntry> =
        man.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let ids: Vec<_> = model.store.ids().collect();
    let fetch = |name: &str, shape: (usize, usize)| -> Result<Tensor> {
        let e = by_name.get(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if (e.shape[0], e.shape[1]) != shape {
            return Err(bad(format!(
                "tensor {name} has shape {:?}, model expects {shape:?}",
                e.shape
            )));
        }
        read(e)
    };
    for &id in &ids {
        let name = model.store.name(id).to_string();
        let shape = model.store.get(id).shape();
        *model.store.get_mut(id) = fetch(&name, shape)?;
    }
    let expected = ids.len() * if man.adam.is_some() { 3 } else { 1 };
    if man.tensors.len() != expected {
        return Err(bad(format!(
            "{} tensors, model layout needs {expected}",
            man.tensors.len()
        )));
    }
    let opt = match &man.adam {
        None => None,
        Some(a) => {
            let mut o = AdamW::new(&model.store, man.config.train.lr, a.weight_decay);
            o.step = a.step;
            o.beta1 = a.beta1;
            o.beta2 = a.beta2;
            o.eps = a.eps;
            for &id in &ids {
                let name = model.store.name(id).to_string();
                let shape = model.store.get(id).shape();
                o.m[id.0] = fetch(&format!("adam.m.{name}"), shape)?.data;
                o.v[id.0] = fetch(&format!("adam.v.{name}"), shape)?.data;
            }
            Some(o)
        }
    };
    Ok(Checkpoint {
        config: man.config,
        model,
        opt,
        rng: man.rng,
    })
}
