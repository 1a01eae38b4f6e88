//! Binary container: magic, little-endian header length, JSON header, then every tensor
//! as raw little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use weedsense_tensor::ops::BatchNormState;
use weedsense_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Model, Network};
use crate::params::ParamStore;
use crate::train::optim::{AdamW, AdamWConfig};
use crate::train::trainer::TrainConfig;

const MAGIC: &[u8; 8] = b"WSCKPT\0\x01";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub seed: u64,
    /// Completed training iterations.
    pub iter: usize,
    pub params: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: Group,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    BnMean,
    BnVar,
    AdamFirst,
    AdamSecond,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    seed: u64,
    iter: usize,
    optimizer: AdamWConfig,
    optimizer_step: u64,
    tensors: Vec<Entry>,
}

fn entry<'t>(group: Group, name: &str, t: &'t Tensor<f32>) -> (Entry, &'t Tensor<f32>) {
    let e = Entry {
        group,
        name: name.to_string(),
        shape: t.shape().to_vec(),
    };
    (e, t)
}

impl Checkpoint {
    pub fn into_model(self) -> Result<Model<f32>> {
        let net = Network::new(&self.model)?;
        let expected = ParamStore::<f32>::from_specs(&net.specs(), 0)?;
        for (name, t) in &expected.values {
            match self.params.values.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                Some(v) => {
                    return Err(Error::Format(format!("parameter {name} has shape {:?}, model expects {:?}", v.shape(), t.shape())))
                }
                None => return Err(Error::Format(format!("checkpoint lacks parameter {name}"))),
            }
        }
        Ok(Model { net, params: self.params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut list: Vec<(Entry, &Tensor<f32>)> = Vec::new();
        for (n, t) in &self.params.values {
            list.push(entry(Group::Param, n, t));
        }
        for (n, s) in &self.params.batch_norms {
            list.push(entry(Group::BnMean, n, &s.running_mean));
            list.push(entry(Group::BnVar, n, &s.running_var));
        }
        for (n, t) in &self.optimizer.first {
            list.push(entry(Group::AdamFirst, n, t));
        }
        for (n, t) in &self.optimizer.second {
            list.push(entry(Group::AdamSecond, n, t));
        }
        let (entries, values): (Vec<Entry>, Vec<&Tensor<f32>>) = list.into_iter().unzip();
        let header = Header {
            version: VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            seed: self.seed,
            iter: self.iter,
            optimizer: self.optimizer.config,
            optimizer_step: self.optimizer.step,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + json.len() + values.iter().map(|t| 4 * t.numel()).sum::<usize>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in values {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |d: &str| Error::Format(format!("{}: {d}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.version != VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let mut pos = 16 + len;
        let mut params = ParamStore {
            values: Default::default(),
            batch_norms: Default::default(),
        };
        let mut optimizer = AdamW::new(header.optimizer);
        optimizer.step = header.optimizer_step;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
            pos += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.shape, data)?;
            match e.group {
                Group::Param => {
                    params.values.insert(e.name, t);
                }
                Group::BnMean | Group::BnVar => {
                    let s = params
                        .batch_norms
                        .entry(e.name)
                        .or_insert_with(|| BatchNormState::new(t.numel()));
                    if e.group == Group::BnMean {
                        s.running_mean = t;
                    } else {
                        s.running_var = t;
                    }
                }
                Group::AdamFirst => {
                    optimizer.first.insert(e.name, t);
                }
                Group::AdamSecond => {
                    optimizer.second.insert(e.name, t);
                }
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            seed: header.seed,
            iter: header.iter,
            params,
            optimizer,
        })
    }
}
