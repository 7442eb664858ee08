//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u64` header length, a JSON header (config, dimensions, rng states,
//! optimizer counters, density counts and the array manifest), then the
//! raw little-endian `f64` payloads the manifest points into.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::TrainRngs;
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims, STORE_TAGS};
use crate::numkit::{AdamW, DenseMatrix, Rng};
use crate::uvos::ClassDensity;

pub const MAGIC: &[u8; 8] = b"OSREBMCK";
pub const FORMAT_VERSION: u32 = 1;

/// Optimizer state, one per parameter store, keyed by store tag.
pub type Optimizers = BTreeMap<String, AdamW>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub model: Model,
    pub optimizers: Optimizers,
    pub densities: Vec<ClassDensity>,
    pub rngs: TrainRngs,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DensityMeta {
    class: usize,
    n_seen: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    dims: ModelDims,
    use_rafa: bool,
    epoch: usize,
    rngs: TrainRngs,
    adam: BTreeMap<String, AdamMeta>,
    densities: Vec<DensityMeta>,
    arrays: Vec<ArrayEntry>,
}

struct Payload {
    entries: Vec<ArrayEntry>,
    bytes: Vec<u8>,
}

impl Payload {
    fn push(&mut self, name: String, m: &DenseMatrix) {
        self.entries.push(ArrayEntry {
            name,
            rows: m.rows(),
            cols: m.cols(),
            offset: self.bytes.len() as u64,
        });
        for v in m.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn load_err(msg: impl Into<String>) -> Error {
    Error::Load(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut p = Payload {
            entries: Vec::new(),
            bytes: Vec::new(),
        };
        p.push("adjacency".into(), &self.model.adjacency);
        for store in self.model.stores.all() {
            for (name, param) in store.iter() {
                p.push(format!("param/{}/{name}", store.tag()), &param.value);
            }
        }
        let mut adam = BTreeMap::new();
        for (tag, opt) in &self.optimizers {
            for (name, m) in &opt.first {
                p.push(format!("adam/{tag}/m/{name}"), m);
            }
            for (name, v) in &opt.second {
                p.push(format!("adam/{tag}/v/{name}"), v);
            }
            adam.insert(
                tag.clone(),
                AdamMeta {
                    beta1: opt.beta1,
                    beta2: opt.beta2,
                    eps: opt.eps,
                    weight_decay: opt.weight_decay,
                    steps: opt.steps,
                },
            );
        }
        for (i, d) in self.densities.iter().enumerate() {
            p.push(
                format!("density/{i}/pmu"),
                &DenseMatrix::row_vector(&d.accum_pmu),
            );
            p.push(
                format!("density/{i}/p"),
                &DenseMatrix::row_vector(&d.accum_p),
            );
        }
        let header = Header {
            config: self.config.clone(),
            dims: self.model.dims,
            use_rafa: self.model.use_rafa(),
            epoch: self.epoch,
            rngs: self.rngs.clone(),
            adam,
            densities: self
                .densities
                .iter()
                .map(|d| DensityMeta {
                    class: d.class,
                    n_seen: d.n_seen,
                })
                .collect(),
            arrays: p.entries,
        };
        let header = serde_json::to_vec(&header)
            .map_err(|e| Error::state(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(20 + header.len() + p.bytes.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&p.bytes);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(load_err("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(load_err(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(load_err("truncated checkpoint header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| load_err(format!("corrupt header: {e}")))?;
        let payload = &body[hlen..];

        let mut arrays: BTreeMap<String, DenseMatrix> = BTreeMap::new();
        let mut expected_len = 0u64;
        for a in &header.arrays {
            let n = (a.rows as u64) * (a.cols as u64);
            let end = a.offset + 8 * n;
            if a.offset != expected_len || end > payload.len() as u64 {
                return Err(load_err(format!(
                    "array `{}` lies outside the payload",
                    a.name
                )));
            }
            expected_len = end;
            let data = payload[a.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.insert(
                a.name.clone(),
                DenseMatrix::from_vec(a.rows, a.cols, data).map_err(|e| load_err(e.to_string()))?,
            );
        }
        if expected_len != payload.len() as u64 {
            return Err(load_err("trailing bytes after payload"));
        }
        let mut take = |name: &str| {
            arrays
                .remove(name)
                .ok_or_else(|| load_err(format!("missing array `{name}`")))
        };

        let adjacency = take("adjacency")?;
        let mut model = Model::skeleton(header.dims, header.use_rafa, adjacency)
            .map_err(|e| load_err(e.to_string()))?;
        // the parameter layout must be exactly what the architecture defines
        let reference = Model::new(
            header.dims,
            header.use_rafa,
            model.adjacency.clone(),
            &mut Rng::new(0),
        )?;
        for tag in STORE_TAGS {
            let want = reference.stores.by_tag(tag).unwrap();
            let store = model.stores.by_tag_mut(tag).unwrap();
            for (name, p) in want.iter() {
                let m = take(&format!("param/{tag}/{name}"))?;
                if m.shape() != p.value.shape() {
                    return Err(load_err(format!(
                        "parameter `{tag}/{name}` has shape {:?}",
                        m.shape()
                    )));
                }
                store.insert(name.clone(), m);
            }
        }
        let mut optimizers = Optimizers::new();
        for (tag, meta) in header.adam {
            let store = model
                .stores
                .by_tag(&tag)
                .ok_or_else(|| load_err(format!("optimizer for unknown store `{tag}`")))?;
            let mut opt = AdamW::new(store, meta.weight_decay);
            opt.beta1 = meta.beta1;
            opt.beta2 = meta.beta2;
            opt.eps = meta.eps;
            opt.steps = meta.steps;
            for name in store.names() {
                opt.first
                    .insert(name.clone(), take(&format!("adam/{tag}/m/{name}"))?);
                opt.second
                    .insert(name.clone(), take(&format!("adam/{tag}/v/{name}"))?);
            }
            optimizers.insert(tag, opt);
        }
        let mut densities = Vec::new();
        for (i, meta) in header.densities.iter().enumerate() {
            let pmu = take(&format!("density/{i}/pmu"))?.into_vec();
            let p = take(&format!("density/{i}/p"))?.into_vec();
            densities.push(ClassDensity {
                class: meta.class,
                accum_pmu: pmu,
                accum_p: p,
                n_seen: meta.n_seen,
            });
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(load_err(format!("unexpected array `{extra}`")));
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            model,
            optimizers,
            densities,
            rngs: header.rngs,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}
